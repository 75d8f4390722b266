"""SSTable construction, fragment/parity math, and the availability model.

An SSTable is built from compacted, latest-version-only entries: fixed
target-size data blocks, an index block mapping key ranges to block
extents, and a bloom filter over all keys. For placement the data stream
is cut into contiguous fragments at block boundaries, optionally protected
by a bytewise-XOR parity block (single-erasure), while the metadata block
(index + bloom + placement) is small and replicated instead.

Entry encoding (little-endian):

    u32 klen | key (8 bytes) | u8 op | u64 seq | u32 vlen | value

The metadata block layout is: magic, version, key interval, fragment
table, parity entry, bloom extent, index entries, CRC32 over everything
before it.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .common import OP_DELETE, OP_PUT, encode_key

META_MAGIC = b"NVKV"
META_VERSION = 1

DATA_BLOCK_TARGET = 4096
BLOOM_BITS_PER_KEY = 10
MIN_FRAGMENT_SIZE = 4 * 1024 * 1024
MAX_SSTABLE_SIZE = 16 * 1024 * 1024

HOURS_PER_MONTH = 30 * 24  # 30-day month convention
HOURS_PER_YEAR = 365 * 24


class SSTableError(Exception):
    pass


# ----------------------------------------------------------------------
# Bloom filter


class BloomFilter:
    def __init__(self, bits: bytearray | bytes, n_hashes: int):
        self.bits = bytes(bits)
        self.n_hashes = n_hashes

    @classmethod
    def build(cls, keys, bits_per_key: int = BLOOM_BITS_PER_KEY) -> "BloomFilter":
        keys = list(keys)
        n_bits = max(64, len(keys) * bits_per_key)
        n_bits = (n_bits + 7) // 8 * 8
        n_hashes = max(1, round(math.log(2) * bits_per_key))
        bits = bytearray(n_bits // 8)
        for key in keys:
            for idx in cls._positions(key, n_hashes, n_bits):
                bits[idx >> 3] |= 1 << (idx & 7)
        return cls(bits, n_hashes)

    @staticmethod
    def _positions(key: int, n_hashes: int, n_bits: int):
        digest = hashlib.blake2b(encode_key(key), digest_size=16).digest()
        h1, h2 = struct.unpack("<QQ", digest)
        for i in range(n_hashes):
            yield (h1 + i * h2) % n_bits

    def may_contain(self, key: int) -> bool:
        n_bits = len(self.bits) * 8
        return all(
            self.bits[idx >> 3] & (1 << (idx & 7))
            for idx in self._positions(key, self.n_hashes, n_bits)
        )

    def encode(self) -> bytes:
        return struct.pack("<BI", self.n_hashes, len(self.bits)) + self.bits

    @classmethod
    def decode(cls, data: bytes) -> "BloomFilter":
        n_hashes, blen = struct.unpack_from("<BI", data, 0)
        return cls(data[5 : 5 + blen], n_hashes)


# ----------------------------------------------------------------------
# Entry / block codec


def encode_entry(key: int, op: int, seq: int, value: bytes | None) -> bytes:
    kbytes = encode_key(key)
    vbytes = b"" if value is None else value
    return (
        struct.pack("<I", len(kbytes))
        + kbytes
        + struct.pack("<BQI", op, seq, len(vbytes))
        + vbytes
    )


def iter_entries(stream: bytes, base_offset: int = 0):
    """Yield (key, op, seq, value) from a data stream slice."""
    off = base_offset
    n = len(stream)
    while off + 4 <= n:
        (klen,) = struct.unpack_from("<I", stream, off)
        if klen == 0:
            return
        key = struct.unpack_from("<Q", stream, off + 4)[0]
        op, seq, vlen = struct.unpack_from("<BQI", stream, off + 4 + klen)
        body_start = off + 4 + klen + 13
        value = bytes(stream[body_start : body_start + vlen]) if op == OP_PUT else None
        yield key, op, seq, value
        off = body_start + vlen


@dataclass(frozen=True)
class BlockIndexEntry:
    first_key: int
    last_key: int
    offset: int  # into the logical data stream
    length: int


@dataclass
class SSTableData:
    """Built but not yet placed: deterministic bytes for identical input."""

    data: bytes
    index: list[BlockIndexEntry]
    bloom: BloomFilter
    min_key: int
    max_key: int
    entry_count: int

    @property
    def size_bytes(self) -> int:
        return len(self.data)


def build_sstable(entries, block_target: int = DATA_BLOCK_TARGET) -> SSTableData:
    """Entries must be (key, op, seq, value), sorted, one version per key."""
    entries = list(entries)
    if not entries:
        raise SSTableError("refusing to build an empty SSTable; merge instead")
    keys = [e[0] for e in entries]
    if any(b <= a for a, b in zip(keys, keys[1:])):
        raise SSTableError("entries must be strictly sorted by key")
    blocks: list[bytes] = []
    index: list[BlockIndexEntry] = []
    current: list[bytes] = []
    cur_len = 0
    first_key = None
    last_key = None
    offset = 0

    def close_block():
        nonlocal current, cur_len, first_key, last_key, offset
        block = b"".join(current)
        index.append(BlockIndexEntry(first_key, last_key, offset, len(block)))
        blocks.append(block)
        offset += len(block)
        current = []
        cur_len = 0
        first_key = None

    for key, op, seq, value in entries:
        blob = encode_entry(key, op, seq, value)
        if first_key is None:
            first_key = key
        current.append(blob)
        cur_len += len(blob)
        last_key = key
        if cur_len >= block_target:
            close_block()
    if current:
        close_block()
    return SSTableData(
        data=b"".join(blocks),
        index=index,
        bloom=BloomFilter.build(keys),
        min_key=keys[0],
        max_key=keys[-1],
        entry_count=len(entries),
    )


# ----------------------------------------------------------------------
# Fragmentation and parity


def split_fragments(data: bytes, index: list[BlockIndexEntry], rho_eff: int) -> list[tuple[int, int]]:
    """Cut the data stream into rho_eff contiguous (offset, length) pieces.

    Cuts land on block boundaries, balanced by bytes. rho_eff is clamped
    to the block count so no fragment is empty.
    """
    rho_eff = max(1, min(rho_eff, len(index)))
    total = len(data)
    cuts = [0]
    block_iter = iter(index)
    acc = 0
    for i in range(1, rho_eff):
        target = total * i / rho_eff
        for block in block_iter:
            acc = block.offset + block.length
            if acc >= target:
                break
        if acc <= cuts[-1]:
            acc = cuts[-1]
        cuts.append(acc)
    cuts.append(total)
    out = []
    for lo, hi in zip(cuts, cuts[1:]):
        out.append((lo, hi - lo))
    return [frag for frag in out if frag[1] > 0] or [(0, total)]


def compute_parity(fragments: list[bytes]) -> bytes:
    """Bytewise XOR over fragments padded to the longest one."""
    if not fragments:
        raise SSTableError("no fragments")
    width = max(len(f) for f in fragments)
    acc = np.zeros(width, dtype=np.uint8)
    for frag in fragments:
        arr = np.frombuffer(frag, dtype=np.uint8)
        if len(arr) < width:
            arr = np.concatenate([arr, np.zeros(width - len(arr), dtype=np.uint8)])
        acc ^= arr
    return acc.tobytes()


def reconstruct_fragment(
    missing_index: int,
    survivors: dict[int, bytes],
    parity: bytes,
    fragment_lengths: list[int],
) -> bytes:
    """Recover one lost fragment from the other rho-1 plus the parity block."""
    expected = set(range(len(fragment_lengths)))
    present = set(survivors)
    lost = expected - present
    if lost != {missing_index}:
        raise SSTableError(
            f"unrecoverable: fragments {sorted(lost)} missing, parity covers one erasure"
        )
    acc = np.frombuffer(parity, dtype=np.uint8).copy()
    for idx, frag in survivors.items():
        arr = np.frombuffer(frag, dtype=np.uint8)
        if len(arr) < len(acc):
            arr = np.concatenate([arr, np.zeros(len(acc) - len(arr), dtype=np.uint8)])
        acc ^= arr
    return acc.tobytes()[: fragment_lengths[missing_index]]


# ----------------------------------------------------------------------
# Descriptor + metadata block codec


@dataclass
class Placement:
    stoc_id: str
    name: str
    length: int
    extra_replicas: list[str] = field(default_factory=list)

    def holders(self) -> list[str]:
        return [self.stoc_id, *self.extra_replicas]


@dataclass
class SSTableDescriptor:
    file_number: int
    range_id: int
    level: int
    min_key: int
    max_key: int
    entry_count: int
    size_bytes: int
    fragments: list[Placement]
    parity: Placement | None
    meta_replicas: list[Placement]
    fragment_offsets: list[int]
    index: list[BlockIndexEntry] | None = None  # cached, not serialized
    bloom: BloomFilter | None = None

    def all_stocs(self) -> set[str]:
        out = set()
        for frag in self.fragments:
            out.update(frag.holders())
        if self.parity is not None:
            out.update(self.parity.holders())
        for meta in self.meta_replicas:
            out.update(meta.holders())
        return out

    def overlaps(self, lo: int, hi: int) -> bool:
        return self.min_key <= hi and lo <= self.max_key

    def covers_key(self, key: int) -> bool:
        return self.min_key <= key <= self.max_key


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    return buf[off + 2 : off + 2 + n].decode(), off + 2 + n


def _pack_placement(p: Placement) -> bytes:
    out = _pack_str(p.stoc_id) + _pack_str(p.name) + struct.pack("<QH", p.length, len(p.extra_replicas))
    for extra in p.extra_replicas:
        out += _pack_str(extra)
    return out


def _unpack_placement(buf: bytes, off: int) -> tuple[Placement, int]:
    stoc_id, off = _unpack_str(buf, off)
    name, off = _unpack_str(buf, off)
    length, n_extra = struct.unpack_from("<QH", buf, off)
    off += 10
    extras = []
    for _ in range(n_extra):
        extra, off = _unpack_str(buf, off)
        extras.append(extra)
    return Placement(stoc_id, name, length, extras), off


def encode_meta_block(desc: SSTableDescriptor) -> bytes:
    """Metadata block: placement table + index entries + bloom bits."""
    parts = [
        META_MAGIC,
        struct.pack(
            "<HQIQQQI",
            META_VERSION,
            desc.file_number,
            desc.range_id,
            desc.min_key,
            desc.max_key,
            desc.size_bytes,
            desc.entry_count,
        ),
        struct.pack("<B", desc.level),
        struct.pack("<H", len(desc.fragments)),
    ]
    for frag, base in zip(desc.fragments, desc.fragment_offsets):
        parts.append(struct.pack("<Q", base) + _pack_placement(frag))
    if desc.parity is not None:
        parts.append(b"\x01" + _pack_placement(desc.parity))
    else:
        parts.append(b"\x00")
    index = desc.index or []
    parts.append(struct.pack("<I", len(index)))
    for entry in index:
        parts.append(struct.pack("<QQQQ", entry.first_key, entry.last_key, entry.offset, entry.length))
    bloom = desc.bloom.encode() if desc.bloom is not None else b""
    parts.append(struct.pack("<I", len(bloom)))
    parts.append(bloom)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_meta_block(buf: bytes) -> SSTableDescriptor:
    if len(buf) < 8 or buf[:4] != META_MAGIC:
        raise SSTableError("bad metadata block magic")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) != crc:
        raise SSTableError("metadata block CRC mismatch")
    off = 4
    version, file_number, range_id, min_key, max_key, size_bytes, entry_count = struct.unpack_from("<HQIQQQI", buf, off)
    if version != META_VERSION:
        raise SSTableError(f"unsupported metadata version {version}")
    off += struct.calcsize("<HQIQQQI")
    (level,) = struct.unpack_from("<B", buf, off)
    off += 1
    (n_frags,) = struct.unpack_from("<H", buf, off)
    off += 2
    fragments = []
    offsets = []
    for _ in range(n_frags):
        (base,) = struct.unpack_from("<Q", buf, off)
        off += 8
        placement, off = _unpack_placement(buf, off)
        fragments.append(placement)
        offsets.append(base)
    parity = None
    has_parity = buf[off]
    off += 1
    if has_parity:
        parity, off = _unpack_placement(buf, off)
    (n_index,) = struct.unpack_from("<I", buf, off)
    off += 4
    index = []
    for _ in range(n_index):
        fk, lk, boff, blen = struct.unpack_from("<QQQQ", buf, off)
        index.append(BlockIndexEntry(fk, lk, boff, blen))
        off += 32
    (bloom_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    bloom = BloomFilter.decode(buf[off : off + bloom_len]) if bloom_len else None
    return SSTableDescriptor(
        file_number=file_number,
        range_id=range_id,
        level=level,
        min_key=min_key,
        max_key=max_key,
        entry_count=entry_count,
        size_bytes=size_bytes,
        fragments=fragments,
        parity=parity,
        meta_replicas=[],
        fragment_offsets=offsets,
        index=index,
        bloom=bloom,
    )


# ----------------------------------------------------------------------
# Availability model


def mttf(scheme: str, rho: int, mttf_disk_hours: float, mttr_hours: float) -> tuple[float, float]:
    """(SSTable MTTF in hours, space overhead fraction).

    With no redundancy the first of the rho disks to fail loses data. With
    a parity block the group of rho+1 disks survives any single loss, so a
    data loss needs a second failure within the repair window.
    """
    if mttf_disk_hours <= 0 or mttr_hours <= 0:
        raise SSTableError("MTTF/MTTR must be positive")
    if rho < 1:
        raise SSTableError("rho must be >= 1")
    if scheme in ("none", "r1"):
        return mttf_disk_hours / rho, 0.0
    if scheme in ("parity", "hybrid"):
        hours = mttf_disk_hours**2 / ((rho + 1) * rho * mttr_hours)
        return hours, 1.0 / rho
    if scheme == "replication":
        # One full replica of every fragment: a pair must fail together.
        hours = mttf_disk_hours**2 / (2 * rho * mttr_hours)
        return hours, 1.0
    raise SSTableError(f"unknown availability scheme {scheme!r}")


def mttf_storage_montecarlo(
    scheme: str,
    rho: int,
    beta: int,
    mttf_disk_hours: float,
    mttr_hours: float,
    trials: int = 200,
    seed: int = 0,
) -> float:
    """Estimated MTTF in hours of a beta-StoC layer via failure simulation.

    SSTables are assumed scattered across all beta StoCs, so with no
    redundancy the layer dies at the first disk failure; with parity it
    dies when a second StoC fails while another is still under repair.
    """
    rng = np.random.default_rng(seed)
    times = []
    for _ in range(trials):
        clock = 0.0
        down_until = []
        while True:
            gaps = rng.exponential(mttf_disk_hours / beta)
            clock += gaps
            down_until = [t for t in down_until if t > clock]
            if scheme in ("none", "r1"):
                times.append(clock)
                break
            if down_until:
                times.append(clock)
                break
            down_until.append(clock + mttr_hours)
    return float(np.mean(times))
