"""Storage component: append-only block files served over the fabric.

A StoC offers two file flavors. In-memory files are chains of registered
regions that clients append to and read from with pure one-sided ops; only
open, extend, and delete involve the StoC's request logic. Persistent files
go through a staged append protocol: the client opens a staging buffer,
one-sided-writes the block with the buffer's unique id as immediate data,
and the StoC flushes to its disk backend before acknowledging. An
acknowledgment therefore implies durability.

Persistent file names encode `<range_id>-<file_number>-<kind>.nvs` so that
a restarted or rejoining StoC can be reconciled against live SSTable
metadata by enumeration alone.
"""

from __future__ import annotations

import itertools
import os
import re
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

from . import protocol
from .fabric import Fabric, RegionHandle

FILE_SUFFIX = ".nvs"
KIND_PARITY = "parity"
KIND_META = "meta"
KIND_MANIFEST = "manifest"
KIND_LOG = "log"

DEFAULT_STAGING_CAPACITY = 64 * 1024 * 1024

_NAME_RE = re.compile(r"^(\d+)-(\d+)-(frag\d+|parity|meta|manifest|log)\.nvs$")

# Staging-buffer ids ride in the 4-byte immediate data of a write, so they
# must stay unique across component restarts within a process.
_STAGING_UIDS = itertools.count(1)


class StoCError(Exception):
    pass


class StoCCrash(Exception):
    """Raised by injected crash points; the component is dead afterwards."""


def frag_kind(index: int) -> str:
    return f"frag{index}"


def format_file_name(range_id: int, file_number: int, kind: str) -> str:
    name = f"{range_id}-{file_number}-{kind}{FILE_SUFFIX}"
    if _NAME_RE.match(name) is None:
        raise StoCError(f"invalid file-name fields ({range_id}, {file_number}, {kind})")
    return name


def parse_file_name(name: str) -> tuple[int, int, str]:
    m = _NAME_RE.match(name)
    if m is None:
        raise StoCError(f"unparsable StoC file name {name!r}")
    return int(m.group(1)), int(m.group(2)), m.group(3)


@dataclass(frozen=True)
class BlockHandle:
    """Addresses a block inside a persistent StoC file."""

    file_id: str  # durable identity: the file name
    offset: int
    length: int


# ----------------------------------------------------------------------
# Disk backends


class RamDisk:
    """Byte-store standing in for a disk; survives component restarts.

    The harness keeps the RamDisk object across simulated crashes, so any
    bytes appended here are "durable" while staging buffers and region
    memory are lost with the component.
    """

    def __init__(self):
        self.files: dict[str, bytearray] = {}
        self.sidecars: dict[str, bytes] = {}

    def append(self, name: str, data: bytes) -> int:
        buf = self.files.setdefault(name, bytearray())
        offset = len(buf)
        buf.extend(data)
        return offset

    def read(self, name: str, offset: int, length: int) -> bytes:
        try:
            buf = self.files[name]
        except KeyError:
            raise StoCError(f"no such file {name!r}") from None
        if offset < 0 or offset + length > len(buf):
            raise StoCError(f"read beyond extent of {name!r}")
        return bytes(buf[offset : offset + length])

    def length(self, name: str) -> int:
        try:
            return len(self.files[name])
        except KeyError:
            raise StoCError(f"no such file {name!r}") from None

    def exists(self, name: str) -> bool:
        return name in self.files

    def delete(self, name: str) -> None:
        self.files.pop(name, None)
        self.sidecars.pop(name, None)

    def list(self) -> list[str]:
        return sorted(self.files)

    def write_sidecar(self, name: str, data: bytes) -> None:
        self.sidecars[name] = bytes(data)

    def read_sidecar(self, name: str) -> bytes | None:
        return self.sidecars.get(name)


class DirDisk:
    """Real-directory backend; appends are flushed and fsynced before ack."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def _path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def append(self, name: str, data: bytes) -> int:
        path = self._path(name)
        with open(path, "ab") as f:
            offset = f.tell()
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        return offset

    def read(self, name: str, offset: int, length: int) -> bytes:
        path = self._path(name)
        if not os.path.exists(path):
            raise StoCError(f"no such file {name!r}")
        with open(path, "rb") as f:
            f.seek(0, os.SEEK_END)
            if offset < 0 or offset + length > f.tell():
                raise StoCError(f"read beyond extent of {name!r}")
            f.seek(offset)
            return f.read(length)

    def length(self, name: str) -> int:
        path = self._path(name)
        if not os.path.exists(path):
            raise StoCError(f"no such file {name!r}")
        return os.path.getsize(path)

    def exists(self, name: str) -> bool:
        return os.path.exists(self._path(name))

    def delete(self, name: str) -> None:
        for path in (self._path(name), self._path(name) + ".extents"):
            if os.path.exists(path):
                os.remove(path)

    def list(self) -> list[str]:
        return sorted(
            n for n in os.listdir(self.root)
            if n.endswith(FILE_SUFFIX) and not n.endswith(".extents")
        )

    def write_sidecar(self, name: str, data: bytes) -> None:
        with open(self._path(name) + ".extents", "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())

    def read_sidecar(self, name: str) -> bytes | None:
        path = self._path(name) + ".extents"
        if not os.path.exists(path):
            return None
        with open(path, "rb") as f:
            return f.read()


class SimulatedDisk:
    """Deterministic disk timing model driven by a virtual microsecond clock.

    Flush jobs queue behind each other; service time is a seek constant
    plus a per-KiB transfer cost. Queue depth is the number of submitted
    jobs not yet completed at the current virtual time, which is exactly
    the statistic placement policies peek at.
    """

    def __init__(self, us_per_kib: float = 10.0, seek_us: float = 5000.0):
        self.us_per_kib = us_per_kib
        self.seek_us = seek_us
        self.now_us = 0.0
        self._jobs: list[tuple[float, int]] = []  # (completion time, nbytes)
        self._busy_until = 0.0
        self.bytes_written = 0
        self.peak_queued_bytes = 0

    def submit(self, nbytes: int) -> float:
        start = max(self.now_us, self._busy_until)
        end = start + self.seek_us + (nbytes / 1024.0) * self.us_per_kib
        self._busy_until = end
        self._jobs.append((end, nbytes))
        self.bytes_written += nbytes
        self.peak_queued_bytes = max(self.peak_queued_bytes, self.queued_bytes())
        return end

    def advance(self, delta_us: float) -> None:
        self.now_us += delta_us
        while self._jobs and self._jobs[0][0] <= self.now_us:
            self._jobs.pop(0)

    def queue_depth(self) -> int:
        return len(self._jobs)

    def queued_bytes(self) -> int:
        return sum(n for _, n in self._jobs)


# ----------------------------------------------------------------------
# Server side


@dataclass
class MemStoCFile:
    file_id: str
    name: str
    regions: list[RegionHandle] = field(default_factory=list)
    # Filled-in length of every region except the last; the last region's
    # fill is only known client-side until it extends or deletes.
    sealed_lengths: list[int] = field(default_factory=list)
    append_offset: int = 0


@dataclass
class _Staging:
    uid: int
    name: str
    region: RegionHandle
    block_len: int
    client: str
    flushed: bool = False


@dataclass
class PersistentStoCFile:
    file_id: str
    name: str
    extents: list[tuple[int, int]] = field(default_factory=list)


class StorageComponent:
    """One StoC node: serves file requests and executes offloaded jobs."""

    def __init__(
        self,
        node_id: str,
        fabric: Fabric,
        backend,
        region_size: int,
        staging_capacity: int = DEFAULT_STAGING_CAPACITY,
        simulated_disk: SimulatedDisk | None = None,
    ):
        self.node_id = node_id
        self.fabric = fabric
        self.backend = backend
        self.region_size = region_size
        self.staging_capacity = staging_capacity
        self.simulated_disk = simulated_disk
        self.lock = threading.RLock()
        self.mem_files: dict[str, MemStoCFile] = {}
        self.mem_files_by_name: dict[str, str] = {}
        self.persistent: dict[str, PersistentStoCFile] = {}
        self._staging: OrderedDict[int, _Staging] = OrderedDict()
        self._staging_bytes = 0
        self._mem_counter = 1
        self.requests_handled = 0
        self.bytes_written = 0
        self.flush_jobs_inflight = 0
        self.alive = True
        self.crash_points: set[str] = set()
        # Injected by the cluster wiring; runs offloaded compaction jobs.
        self.compaction_runner = None
        self._copy_client = None
        if node_id not in fabric.nodes():
            fabric.register_node(node_id)
        self._recover_extents()

    # -- lifecycle -----------------------------------------------------

    def _recover_extents(self) -> None:
        for name in self.backend.list():
            rec = PersistentStoCFile(file_id=name, name=name)
            sidecar = self.backend.read_sidecar(name)
            if sidecar:
                rec.extents = _decode_extents(sidecar)
            self.persistent[name] = rec

    def crash(self) -> None:
        """Drop all volatile state; the disk backend survives."""
        with self.lock:
            self.alive = False
            for mem in self.mem_files.values():
                for region in mem.regions:
                    self.fabric.deregister_region(region)
            for staged in self._staging.values():
                self.fabric.deregister_region(staged.region)
            self.mem_files.clear()
            self.mem_files_by_name.clear()
            self._staging.clear()
        self.fabric.remove_node(self.node_id)

    def _maybe_crash(self, point: str) -> None:
        if point in self.crash_points:
            self.crash()
            raise StoCCrash(point)

    # -- pump ----------------------------------------------------------

    def pump(self) -> int:
        """Process pending notifications and requests; returns work count."""
        if not self.alive:
            return 0
        done = 0
        for immediate, length in self.fabric.poll_notifications(self.node_id):
            self._on_write_notification(immediate, length)
            done += 1
        for msg in self.fabric.poll_requests(self.node_id):
            header, payload = protocol.unpack(msg.payload)
            self._handle(msg.src, header, payload)
            done += 1
        return done

    def _reply(self, dst: str, header: dict, meta: dict | None = None, payload: bytes = b"") -> None:
        self.fabric.send_request(self.node_id, dst, protocol.reply_to(header, meta, payload))

    # -- staged append protocol ------------------------------------------

    def _on_write_notification(self, uid: int, length: int) -> None:
        with self.lock:
            staged = self._staging.get(uid)
            if staged is None or staged.flushed:
                return
            self._maybe_crash("before_flush")
            data = self.fabric.one_sided_read(staged.region, 0, min(length, staged.block_len))
            self.flush_jobs_inflight += 1
            try:
                file_rec = self.persistent.get(staged.name)
                if file_rec is None:
                    file_rec = PersistentStoCFile(file_id=staged.name, name=staged.name)
                    self.persistent[staged.name] = file_rec
                offset = self.backend.append(staged.name, data)
                file_rec.extents.append((offset, len(data)))
                self.bytes_written += len(data)
                if self.simulated_disk is not None:
                    self.simulated_disk.submit(len(data))
            finally:
                self.flush_jobs_inflight -= 1
            staged.flushed = True
            self._maybe_crash("after_flush")
        self.fabric.send_request(
            self.node_id,
            staged.client,
            protocol.pack(
                "stoc.append.ack",
                {"uid": uid, "name": staged.name, "offset": offset, "length": len(data)},
            ),
        )
        self._maybe_crash("after_ack")
        with self.lock:
            self._release_staging(uid)

    def _release_staging(self, uid: int) -> None:
        staged = self._staging.pop(uid, None)
        if staged is not None:
            self._staging_bytes -= staged.block_len
            self.fabric.deregister_region(staged.region)

    def _evict_staging(self, need: int) -> None:
        # Prefer flushed buffers; fall back to the oldest pending one.
        while self._staging_bytes + need > self.staging_capacity and self._staging:
            victim = next(
                (uid for uid, s in self._staging.items() if s.flushed),
                next(iter(self._staging)),
            )
            self._release_staging(victim)

    # -- request dispatch -------------------------------------------------

    def _handle(self, src: str, header: dict, payload: bytes) -> None:
        self.requests_handled += 1
        op = header["op"]
        try:
            if op == "stoc.open_mem":
                self._op_open_mem(src, header)
            elif op == "stoc.extend_mem":
                self._op_extend_mem(src, header)
            elif op == "stoc.mem_info":
                self._op_mem_info(src, header)
            elif op == "stoc.list_mem":
                self._op_list_mem(src, header)
            elif op == "stoc.delete_mem":
                self._op_delete_mem(src, header)
            elif op == "stoc.open_persistent":
                self._op_open_persistent(src, header)
            elif op == "stoc.read_block":
                self._op_read_block(src, header)
            elif op == "stoc.delete_file":
                self._op_delete_file(src, header)
            elif op == "stoc.enumerate":
                self._op_enumerate(src, header)
            elif op == "stoc.stat":
                self._op_stat(src, header)
            elif op == "stoc.seal_file":
                self._op_seal_file(src, header)
            elif op == "stoc.copy_file":
                self._op_copy_file(src, header)
            elif op == "stoc.run_compaction":
                self._op_run_compaction(src, header, payload)
            else:
                self._reply(src, header, {"error": f"unknown op {op}"})
        except StoCCrash:
            raise
        except Exception as exc:  # surfaced to the caller, not fatal here
            self._reply(src, header, {"error": str(exc)})

    def _op_open_mem(self, src: str, header: dict) -> None:
        with self.lock:
            name = header["name"]
            if name in self.mem_files_by_name:
                file_id = self.mem_files_by_name[name]
                mem = self.mem_files[file_id]
            else:
                file_id = f"mem:{self.node_id}:{self._mem_counter}"
                self._mem_counter += 1
                mem = MemStoCFile(file_id=file_id, name=name)
                region = self.fabric.register_region(self.node_id, self.region_size)
                mem.regions.append(region)
                self.mem_files[file_id] = mem
                self.mem_files_by_name[name] = file_id
        self._reply(
            src,
            header,
            {
                "file_id": file_id,
                "regions": [_region_meta(r) for r in mem.regions],
                "region_size": self.region_size,
            },
        )

    def _op_extend_mem(self, src: str, header: dict) -> None:
        with self.lock:
            mem = self.mem_files.get(header["file_id"])
            if mem is None:
                self._reply(src, header, {"error": "unknown mem file"})
                return
            mem.sealed_lengths.append(int(header.get("prev_used", self.region_size)))
            region = self.fabric.register_region(self.node_id, self.region_size)
            mem.regions.append(region)
            mem.append_offset = 0
        self._reply(src, header, {"region": _region_meta(region)})

    def _op_mem_info(self, src: str, header: dict) -> None:
        with self.lock:
            file_id = header.get("file_id") or self.mem_files_by_name.get(header.get("name", ""))
            mem = self.mem_files.get(file_id) if file_id else None
            if mem is None:
                self._reply(src, header, {"error": "unknown mem file"})
                return
            self._reply(
                src,
                header,
                {
                    "file_id": mem.file_id,
                    "name": mem.name,
                    "regions": [_region_meta(r) for r in mem.regions],
                    "sealed_lengths": list(mem.sealed_lengths),
                },
            )

    def _op_list_mem(self, src: str, header: dict) -> None:
        prefix = header.get("prefix", "")
        with self.lock:
            names = sorted(n for n in self.mem_files_by_name if n.startswith(prefix))
        self._reply(src, header, {"names": names})

    def _op_delete_mem(self, src: str, header: dict) -> None:
        with self.lock:
            file_id = header.get("file_id") or self.mem_files_by_name.get(header.get("name", ""))
            mem = self.mem_files.pop(file_id, None) if file_id else None
            if mem is not None:
                self.mem_files_by_name.pop(mem.name, None)
                for region in mem.regions:
                    self.fabric.deregister_region(region)
        self._reply(src, header, {"deleted": mem is not None})

    def _op_open_persistent(self, src: str, header: dict) -> None:
        self._maybe_crash("before_open")
        name = header["name"]
        block_len = int(header["block_len"])
        parse_file_name(name)  # reject malformed names up front
        with self.lock:
            self._evict_staging(block_len)
            region = self.fabric.register_region(self.node_id, max(block_len, 1))
            uid = next(_STAGING_UIDS)
            self._staging[uid] = _Staging(uid, name, region, block_len, src)
            self._staging_bytes += block_len
        self._reply(src, header, {"uid": uid, "region": _region_meta(region)})
        self._maybe_crash("after_open")

    def _op_read_block(self, src: str, header: dict) -> None:
        name = header["name"]
        offset = int(header["offset"])
        length = int(header["length"])
        data = self.backend.read(name, offset, length)
        dst = RegionHandle(header["dst_node"], header["dst_region"], header["dst_region_len"])
        comp = self.fabric.one_sided_write(dst, int(header["dst_offset"]), data)
        if not comp.ok:
            self._reply(src, header, {"error": comp.error})
            return
        self._reply(src, header, {"length": len(data)})

    def _op_delete_file(self, src: str, header: dict) -> None:
        name = header["name"]
        with self.lock:
            self.persistent.pop(name, None)
            self.backend.delete(name)
        self._reply(src, header, {"deleted": True})

    def _op_enumerate(self, src: str, header: dict) -> None:
        entries = []
        corrupt = []
        with self.lock:
            for name in self.backend.list():
                try:
                    range_id, file_number, kind = parse_file_name(name)
                except StoCError:
                    corrupt.append(name)
                    continue
                entries.append(
                    {
                        "name": name,
                        "range_id": range_id,
                        "file_number": file_number,
                        "kind": kind,
                        "length": self.backend.length(name),
                    }
                )
        self._reply(src, header, {"files": entries, "corrupt": corrupt})

    def _op_stat(self, src: str, header: dict) -> None:
        with self.lock:
            depth = self.flush_jobs_inflight
            queued = 0
            if self.simulated_disk is not None:
                depth += self.simulated_disk.queue_depth()
                queued = self.simulated_disk.queued_bytes()
            self._reply(
                src,
                header,
                {
                    "queue_depth": depth,
                    "queued_bytes": queued,
                    "bytes_written": self.bytes_written,
                    "requests_handled": self.requests_handled,
                },
            )

    def _op_seal_file(self, src: str, header: dict) -> None:
        name = header["name"]
        with self.lock:
            rec = self.persistent.get(name)
            if rec is not None:
                self.backend.write_sidecar(name, _encode_extents(rec.extents))
        self._reply(src, header, {"sealed": rec is not None})

    def _op_copy_file(self, src: str, header: dict) -> None:
        """Copy one of our persistent files to another StoC (drain path)."""
        name = header["name"]
        dst_stoc = header["dst"]
        length = self.backend.length(name)
        data = self.backend.read(name, 0, length)
        if self._copy_client is None:
            self._copy_client = StoCClient(
                self.fabric, f"{self.node_id}:copy", router=self._router
            )
        self._copy_client.append_persistent_block(dst_stoc, name, data)
        rec = self.persistent.get(name)
        if rec is not None and rec.extents:
            self._copy_client.seal_file(dst_stoc, name, rec.extents)
        self._reply(src, header, {"copied": True, "bytes": length})

    def _op_run_compaction(self, src: str, header: dict, payload: bytes) -> None:
        if self.compaction_runner is None:
            self._reply(src, header, {"error": "no compaction workers"})
            return
        result = self.compaction_runner(self, header, payload)
        meta, body = result if isinstance(result, tuple) else (result, b"")
        self._reply(src, header, meta, body)

    # Router back-reference, set by cluster wiring; used for stoc-to-stoc
    # copies which act as a fabric client themselves.
    _router = None


def _region_meta(handle: RegionHandle) -> dict:
    return {"node": handle.node, "region_id": handle.region_id, "length": handle.length}


def _region_from_meta(meta: dict) -> RegionHandle:
    return RegionHandle(meta["node"], meta["region_id"], meta["length"])


def _encode_extents(extents: list[tuple[int, int]]) -> bytes:
    import struct

    out = [struct.pack("<I", len(extents))]
    for offset, length in extents:
        out.append(struct.pack("<QQ", offset, length))
    return b"".join(out)


def _decode_extents(data: bytes) -> list[tuple[int, int]]:
    import struct

    (n,) = struct.unpack_from("<I", data, 0)
    out = []
    for i in range(n):
        offset, length = struct.unpack_from("<QQ", data, 4 + 16 * i)
        out.append((offset, length))
    return out


# ----------------------------------------------------------------------
# Client side


class MemFileWriter:
    """Client-side handle for an in-memory StoC file.

    The writer caches the region chain and current offset, so appends are
    single one-sided writes; a full region triggers one extend request.
    """

    def __init__(self, client: "StoCClient", stoc_id: str, file_id: str, regions: list[RegionHandle], region_size: int):
        self.client = client
        self.stoc_id = stoc_id
        self.file_id = file_id
        self.regions = regions
        self.region_size = region_size
        self.used: list[int] = [0 for _ in regions]

    @property
    def append_offset(self) -> int:
        return self.used[-1] if self.used else 0

    def append(self, data: bytes) -> None:
        if len(data) > self.region_size:
            raise StoCError("record larger than a region")
        if self.used[-1] + len(data) > self.region_size:
            meta = self.client.call(
                self.stoc_id,
                "stoc.extend_mem",
                {"file_id": self.file_id, "prev_used": self.used[-1]},
            )
            self.regions.append(_region_from_meta(meta["region"]))
            self.used.append(0)
        region = self.regions[-1]
        comp = self.client.fabric.one_sided_write(region, self.used[-1], data)
        if not comp.ok:
            raise StoCError(comp.error or "append failed")
        self.used[-1] += len(data)

    def read_all(self) -> bytes:
        parts = []
        for region, used in zip(self.regions, self.used):
            if used:
                parts.append(self.client.fabric.one_sided_read(region, 0, used))
        return b"".join(parts)

    def total_bytes(self) -> int:
        return sum(self.used)


class StoCClient:
    """Fabric client for talking to StoCs (used by LTC, LogC, recovery)."""

    def __init__(self, fabric: Fabric, node_id: str, router=None, timeout_s: float = 5.0):
        self.fabric = fabric
        self.node_id = node_id
        self.router = router
        self.timeout_s = timeout_s
        self._lock = threading.RLock()
        self._pending: dict[int, tuple[dict, bytes]] = {}
        self._acks: dict[tuple[str, int], dict] = {}
        if node_id not in fabric.nodes():
            fabric.register_node(node_id)
        self._scratch: RegionHandle | None = None

    def close(self) -> None:
        if self._scratch is not None:
            self.fabric.deregister_region(self._scratch)
            self._scratch = None

    # -- plumbing ----------------------------------------------------------

    def _drain(self) -> None:
        for msg in self.fabric.poll_requests(self.node_id):
            header, payload = protocol.unpack(msg.payload)
            if header["op"] == "stoc.append.ack":
                self._acks[(msg.src, header["uid"])] = header
            else:
                self._pending[header["req_id"]] = (header, payload)

    def _await(self, dst: str, ready, what: str):
        """Pump/poll until `ready()` yields a value or the deadline passes.

        With a router (in-process mode) the destination is pumped inline,
        which normally resolves on the first pass; the retry loop covers
        concurrent threads pumping the same node. Without a router (TCP
        mode) a daemon thread is doing the pumping remotely.
        """
        import time as _time

        deadline = _time.monotonic() + self.timeout_s
        while True:
            with self._lock:
                self._drain()
                value = ready()
                if value is not None:
                    return value
            if self.router is not None:
                alive = self.router.pump(dst)
                with self._lock:
                    self._drain()
                    value = ready()
                    if value is not None:
                        return value
                if not alive:
                    raise StoCError(f"{dst} unavailable")
                if self.router.idle(dst):
                    raise StoCError(f"no {what} from {dst}")
            if _time.monotonic() > deadline:
                raise StoCError(f"timeout waiting for {what} from {dst}")
            _time.sleep(1e-4)

    def _await_reply(self, dst: str, req_id: int) -> tuple[dict, bytes]:
        return self._await(dst, lambda: self._pending.pop(req_id, None), "reply")

    def call(self, dst: str, op: str, meta: dict | None = None, payload: bytes = b"") -> dict:
        req_id = protocol.next_req_id()
        data = protocol.pack(op, meta, payload, req_id=req_id)
        comp = self.fabric.send_request(self.node_id, dst, data)
        if not comp.ok:
            raise StoCError(comp.error or f"send to {dst} failed")
        header, _ = self._await_reply(dst, req_id)
        if "error" in header:
            raise StoCError(header["error"])
        return header

    def call_with_payload(self, dst: str, op: str, meta: dict | None = None, payload: bytes = b"") -> tuple[dict, bytes]:
        req_id = protocol.next_req_id()
        data = protocol.pack(op, meta, payload, req_id=req_id)
        comp = self.fabric.send_request(self.node_id, dst, data)
        if not comp.ok:
            raise StoCError(comp.error or f"send to {dst} failed")
        header, body = self._await_reply(dst, req_id)
        if "error" in header:
            raise StoCError(header["error"])
        return header, body

    # -- in-memory files ---------------------------------------------------

    def open_mem_file(self, stoc_id: str, name: str, size_hint: int = 0) -> MemFileWriter:
        meta = self.call(stoc_id, "stoc.open_mem", {"name": name, "size_hint": size_hint})
        regions = [_region_from_meta(m) for m in meta["regions"]]
        return MemFileWriter(self, stoc_id, meta["file_id"], regions, meta["region_size"])

    def mem_file_regions(self, stoc_id: str, name: str) -> list[bytes]:
        """Fetch every region of a mem file raw (recovery-side read path)."""
        meta = self.call(stoc_id, "stoc.mem_info", {"name": name})
        out = []
        for m in meta["regions"]:
            handle = _region_from_meta(m)
            out.append(self.fabric.one_sided_read(handle, 0, handle.length))
        return out

    def list_mem_files(self, stoc_id: str, prefix: str = "") -> list[str]:
        return self.call(stoc_id, "stoc.list_mem", {"prefix": prefix})["names"]

    def delete_mem_file(self, stoc_id: str, name: str) -> None:
        self.call(stoc_id, "stoc.delete_mem", {"name": name})

    # -- persistent files ----------------------------------------------------

    def append_persistent_block(self, stoc_id: str, name: str, block: bytes) -> BlockHandle:
        """Run the staged append protocol; returns only after the ack."""
        meta = self.call(stoc_id, "stoc.open_persistent", {"name": name, "block_len": len(block)})
        uid = meta["uid"]
        region = _region_from_meta(meta["region"])
        comp = self.fabric.one_sided_write(region, 0, block, immediate=uid)
        if not comp.ok:
            raise StoCError(comp.error or "staging write failed")
        ack = self._await_ack(stoc_id, uid)
        return BlockHandle(file_id=name, offset=ack["offset"], length=ack["length"])

    def _await_ack(self, dst: str, uid: int) -> dict:
        key = (dst, uid)
        return self._await(dst, lambda: self._acks.pop(key, None), "append ack")

    def read_block(self, stoc_id: str, handle: BlockHandle, offset: int = 0, length: int | None = None) -> bytes:
        """Fetch block bytes; they land in our registered region one-sidedly."""
        if length is None:
            length = handle.length - offset
        with self._lock:
            if self._scratch is None or self._scratch.length < length:
                if self._scratch is not None:
                    self.fabric.deregister_region(self._scratch)
                self._scratch = self.fabric.register_region(self.node_id, max(length, 64 * 1024))
            scratch = self._scratch
            self.call(
                stoc_id,
                "stoc.read_block",
                {
                    "name": handle.file_id,
                    "offset": handle.offset + offset,
                    "length": length,
                    "dst_node": scratch.node,
                    "dst_region": scratch.region_id,
                    "dst_region_len": scratch.length,
                    "dst_offset": 0,
                },
            )
            return self.fabric.one_sided_read(scratch, 0, length)

    def delete_file(self, stoc_id: str, name: str) -> None:
        self.call(stoc_id, "stoc.delete_file", {"name": name})

    def enumerate_files(self, stoc_id: str) -> tuple[list[dict], list[str]]:
        meta = self.call(stoc_id, "stoc.enumerate")
        return meta["files"], meta["corrupt"]

    def stat(self, stoc_id: str) -> dict:
        return self.call(stoc_id, "stoc.stat")

    def seal_file(self, stoc_id: str, name: str, extents: list[tuple[int, int]]) -> None:
        self.call(stoc_id, "stoc.seal_file", {"name": name})

    def copy_file(self, src_stoc: str, name: str, dst_stoc: str) -> int:
        return self.call(src_stoc, "stoc.copy_file", {"name": name, "dst": dst_stoc})["bytes"]
