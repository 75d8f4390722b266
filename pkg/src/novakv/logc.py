"""Logging component: replicated append-only log files for memtables.

Each memtable owns one log file. In availability mode the file is an
in-memory StoC file replicated across distinct StoCs, so an append is one
one-sided write per replica and never touches a StoC's request logic.
Durability mode uses a persistent StoC file instead; "both" appends to the
in-memory replicas first and trickles the persistent copy out
asynchronously, acknowledging after the in-memory replicas alone.

Record wire format (little-endian):

    u32 body_len | u64 seq | u8 op | u32 klen | key | u32 vlen | value | u32 crc32(body)

A region tail of zeros (body_len == 0) terminates the parse, which is how
replay finds the end of a partially filled region.
"""

from __future__ import annotations

import multiprocessing
import os
import random
import struct
import zlib
from dataclasses import dataclass, field

from .common import OP_DELETE, OP_PUT, decode_key, encode_key
from .stoc import MemFileWriter, StoCClient, StoCError, format_file_name, parse_file_name

MODE_OFF = "off"
MODE_AVAIL = "avail"
MODE_DURABLE = "durable"
MODE_BOTH = "both"

DEFAULT_REPLICATION = 3
ENV_LOG_MODE = "NOVAKV_LOG_MODE"


class LogError(Exception):
    pass


class UnrecoverableMemtables(LogError):
    def __init__(self, memtable_ids):
        self.memtable_ids = sorted(memtable_ids)
        super().__init__(f"no surviving log replica for memtables {self.memtable_ids}")


def mode_from_env(default: str = MODE_OFF) -> str:
    mode = os.environ.get(ENV_LOG_MODE, default)
    if mode not in (MODE_OFF, MODE_AVAIL, MODE_DURABLE, MODE_BOTH):
        raise LogError(f"bad {ENV_LOG_MODE}={mode!r}")
    return mode


def encode_record(seq: int, op: int, key: int, value: bytes | None) -> bytes:
    kbytes = encode_key(key)
    vbytes = b"" if value is None else value
    if op == OP_DELETE and value is not None:
        raise LogError("a delete record carries a tombstone, not a value")
    body = struct.pack("<QBI", seq, op, len(kbytes)) + kbytes + struct.pack("<I", len(vbytes)) + vbytes
    return struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))


def decode_records(buf: bytes):
    """Yield (seq, op, key, value) until the buffer's valid prefix ends."""
    off = 0
    n = len(buf)
    while off + 4 <= n:
        (blen,) = struct.unpack_from("<I", buf, off)
        if blen == 0 or off + 8 + blen > n:
            return
        body = buf[off + 4 : off + 4 + blen]
        (crc,) = struct.unpack_from("<I", buf, off + 4 + blen)
        if zlib.crc32(body) != crc:
            return
        seq, op, klen = struct.unpack_from("<QBI", body, 0)
        key = decode_key(body[13 : 13 + klen])
        (vlen,) = struct.unpack_from("<I", body, 13 + klen)
        value = bytes(body[17 + klen : 17 + klen + vlen]) if op == OP_PUT else None
        yield seq, op, key, value
        off += 8 + blen


def iter_raw_records(buf: bytes):
    """Yield framed record slices without decoding their bodies."""
    off = 0
    n = len(buf)
    while off + 4 <= n:
        (blen,) = struct.unpack_from("<I", buf, off)
        if blen == 0 or off + 8 + blen > n:
            return
        yield buf[off : off + 8 + blen]
        off += 8 + blen


def log_file_name(range_id: int, memtable_id: int) -> str:
    return format_file_name(range_id, memtable_id, "log")


@dataclass
class LogFile:
    range_id: int
    memtable_id: int
    mode: str
    writers: list[MemFileWriter] = field(default_factory=list)  # availability replicas
    persistent_stoc: str | None = None
    degraded: bool = False
    pending_persistent: list[bytes] = field(default_factory=list)
    closed: bool = False
    # Replica locations learned at recovery time (no live writers).
    recovered_replicas: list[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        return log_file_name(self.range_id, self.memtable_id)

    @property
    def replica_stocs(self) -> list[str]:
        return [w.stoc_id for w in self.writers] or list(self.recovered_replicas)


class LogContext:
    """Per-LTC logging state: opens, appends, deletes, and replays logs."""

    def __init__(
        self,
        client: StoCClient,
        stoc_roster,
        mode: str = MODE_AVAIL,
        replication: int = DEFAULT_REPLICATION,
        seed: int = 0,
        max_rehome_attempts: int = 3,
    ):
        self.client = client
        self.stoc_roster = stoc_roster  # callable () -> list of live stoc ids
        self.mode = mode
        self.replication = replication
        self.rng = random.Random(seed)
        self.max_rehome_attempts = max_rehome_attempts
        self.bytes_appended = 0

    # -- placement -------------------------------------------------------

    def _pick_stocs(self, count: int, excluded=()) -> list[str]:
        live = [s for s in self.stoc_roster() if s not in excluded]
        self.rng.shuffle(live)
        return live[:count]

    # -- open/append/delete ------------------------------------------------

    def open_log(self, range_id: int, memtable_id: int) -> LogFile:
        log = LogFile(range_id, memtable_id, self.mode)
        if self.mode == MODE_OFF:
            return log
        name = log.name
        if self.mode in (MODE_AVAIL, MODE_BOTH):
            stocs = self._pick_stocs(self.replication)
            if not stocs:
                raise LogError("no live StoC to open a log on")
            log.degraded = len(stocs) < self.replication
            for stoc_id in stocs:
                log.writers.append(self.client.open_mem_file(stoc_id, name))
        if self.mode in (MODE_DURABLE, MODE_BOTH):
            choice = self._pick_stocs(1)
            if not choice:
                raise LogError("no live StoC to open a log on")
            log.persistent_stoc = choice[0]
        return log

    def append(self, log: LogFile, seq: int, op: int, key: int, value: bytes | None) -> None:
        if log.mode == MODE_OFF:
            return
        record = encode_record(seq, op, key, value)
        self.bytes_appended += len(record) * max(len(log.writers), 1)
        if log.mode in (MODE_AVAIL, MODE_BOTH):
            self._append_replicated(log, record)
        if log.mode == MODE_DURABLE:
            self.client.append_persistent_block(log.persistent_stoc, log.name, record)
        elif log.mode == MODE_BOTH:
            log.pending_persistent.append(record)

    def _append_replicated(self, log: LogFile, record: bytes) -> None:
        alive: list[MemFileWriter] = []
        lost = 0
        for writer in log.writers:
            try:
                writer.append(record)
                alive.append(writer)
            except Exception:
                lost += 1
        if not alive:
            raise LogError("all log replicas unreachable; append not acknowledged")
        # Re-home lost replicas onto fresh StoCs when any exist; the seed
        # copy from a survivor already contains the current record.
        for _ in range(min(lost, self.max_rehome_attempts)):
            replacement = self._rehome_replica(log, alive)
            if replacement is None:
                break
            alive.append(replacement)
        log.degraded = len(alive) < self.replication
        log.writers = alive

    def _rehome_replica(self, log: LogFile, alive: list[MemFileWriter]) -> MemFileWriter | None:
        candidates = self._pick_stocs(1, excluded={w.stoc_id for w in alive})
        if not candidates:
            return None
        existing = b""
        for writer in alive:
            try:
                existing = writer.read_all()
                break
            except Exception:
                continue
        replacement = self.client.open_mem_file(candidates[0], log.name)
        # Re-append record-wise so frames never straddle a region boundary.
        for raw in iter_raw_records(existing):
            replacement.append(raw)
        return replacement

    def flush_pending(self, log: LogFile) -> None:
        """Write-behind of the persistent copy in `both` mode."""
        if log.mode == MODE_BOTH and log.pending_persistent:
            blob = b"".join(log.pending_persistent)
            self.client.append_persistent_block(log.persistent_stoc, log.name, blob)
            log.pending_persistent.clear()

    def close_and_delete(self, log: LogFile) -> None:
        if log.closed:
            return
        log.closed = True
        targets = {w.stoc_id for w in log.writers} | set(log.recovered_replicas)
        for stoc_id in targets:
            try:
                self.client.delete_mem_file(stoc_id, log.name)
            except Exception:
                pass
        if log.persistent_stoc is not None:
            try:
                self.client.delete_file(log.persistent_stoc, log.name)
            except Exception:
                pass
        log.pending_persistent.clear()
        log.writers.clear()


# ----------------------------------------------------------------------
# Recovery-side fetch + replay


def _replay_buffers(buffers: list[bytes]) -> dict:
    table: dict[int, tuple] = {}
    for buf in buffers:
        for seq, op, key, value in decode_records(buf):
            cur = table.get(key)
            if cur is None or cur[1] < seq:
                table[key] = (value if op == OP_PUT else None, seq, op)
    return table


def _replay_worker(item):
    mid, buffers = item
    return mid, _replay_buffers(buffers)


def discover_logs(client: StoCClient, stoc_ids, range_id: int) -> dict[int, list[str]]:
    """Map memtable id -> list of StoCs holding a replica of its log."""
    found: dict[int, list[str]] = {}
    prefix = f"{range_id}-"
    for stoc_id in stoc_ids:
        try:
            names = client.list_mem_files(stoc_id, prefix=prefix)
        except StoCError:
            continue
        for name in names:
            rid, mid, kind = parse_file_name(name)
            if rid == range_id and kind == "log":
                found.setdefault(mid, []).append(stoc_id)
    return found


def fetch_logs(client: StoCClient, located: dict[int, list[str]], range_id: int) -> dict[int, list[bytes]]:
    """One replica per log, each region fetched with one one-sided read."""
    fetched: dict[int, list[bytes]] = {}
    for mid, stocs in located.items():
        for stoc_id in stocs:
            try:
                fetched[mid] = client.mem_file_regions(stoc_id, log_file_name(range_id, mid))
                break
            except StoCError:
                continue
    return fetched


def fetch_and_replay(
    client: StoCClient,
    stoc_ids,
    range_id: int,
    memtable_ids=None,
    n_workers: int = 1,
) -> dict[int, dict]:
    """Rebuild key -> (value, seq, op) maps for each memtable's log.

    The result is independent of `n_workers`; workers partition whole
    memtables, so no shared state exists between them.
    """
    located = discover_logs(client, stoc_ids, range_id)
    expected = set(memtable_ids) if memtable_ids is not None else set(located)
    missing = expected - set(located)
    fetched = fetch_logs(client, located, range_id)
    missing |= {mid for mid in expected if mid in located and mid not in fetched}
    if missing:
        raise UnrecoverableMemtables(missing)
    work = sorted((mid, fetched[mid]) for mid in expected)
    if n_workers <= 1 or len(work) <= 1:
        return {mid: _replay_buffers(bufs) for mid, bufs in work}
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(n_workers, len(work))) as pool:
        return dict(pool.map(_replay_worker, work))
