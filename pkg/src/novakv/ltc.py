"""LTC node: hosts range engines and serves the request protocols.

Clients reach an LTC over the fabric's SEND channel with length-prefixed
keys and values; a request for a range that is migrating away is answered
with a redirect, and the destination holds such requests on a gate until
the range's state is rebuilt there. The node also answers reconciliation
queries (is this StoC file still referenced?) used when StoCs join or
drain.
"""

from __future__ import annotations

import struct
import threading
from collections import defaultdict

from . import protocol
from .engine import RangeEngine, RoutingError


class Redirected(Exception):
    def __init__(self, target: str):
        self.target = target
        super().__init__(f"range migrating; retry at {target}")


class MigrationGate:
    """Blocks requests for a rebuilding range; tracks per-key interest so
    replay can prioritize the memtables clients are actually waiting on."""

    def __init__(self):
        self.event = threading.Event()
        self.interest: dict[int, int] = defaultdict(int)
        self._lock = threading.Lock()

    def wait(self, key: int | None = None, timeout: float = 30.0) -> None:
        if self.event.is_set():
            return
        if key is not None:
            with self._lock:
                self.interest[key] += 1
        if not self.event.wait(timeout):
            raise TimeoutError("migration gate never opened")

    def interest_snapshot(self) -> dict[int, int]:
        with self._lock:
            return dict(self.interest)

    def open(self) -> None:
        self.event.set()


class LTCNode:
    def __init__(self, node_id: str, fabric, router):
        self.node_id = node_id
        self.fabric = fabric
        self.router = router
        self.engines: dict[int, RangeEngine] = {}
        self.redirects: dict[int, str] = {}
        self.gates: dict[int, MigrationGate] = {}
        self.pending_migrations: dict[int, dict] = {}
        self.range_locks: dict[int, threading.RLock] = {}
        self.alive = True
        if node_id not in fabric.nodes():
            fabric.register_node(node_id)
        router.register(node_id, self)

    # -- range management ------------------------------------------------------

    def add_range(self, range_id: int, engine: RangeEngine) -> None:
        self.engines[range_id] = engine
        self.range_locks.setdefault(range_id, threading.RLock())
        self.redirects.pop(range_id, None)

    def drop_range(self, range_id: int) -> None:
        self.engines.pop(range_id, None)

    def crash(self) -> None:
        self.alive = False
        self.engines.clear()
        self.fabric.remove_node(self.node_id)
        self.router.unregister(self.node_id)

    # -- direct (in-process) op entry ---------------------------------------------

    def execute(self, op: str, range_id: int, key: int, value: bytes | None = None, count: int = 0):
        if not self.alive:
            raise RoutingError(f"{self.node_id} is down")
        target = self.redirects.get(range_id)
        if target is not None:
            raise Redirected(target)
        engine = self.engines.get(range_id)
        if engine is None:
            gate = self.gates.get(range_id)
            if gate is not None:
                gate.wait(key)
                engine = self.engines.get(range_id)
            if engine is None:
                raise RoutingError(f"range {range_id} not hosted on {self.node_id}")
        lock = self.range_locks.setdefault(range_id, threading.RLock())
        with lock:
            if range_id in self.redirects:
                raise Redirected(self.redirects[range_id])
            if op == "put":
                return engine.put(key, value)
            if op == "delete":
                return engine.delete(key)
            if op == "get":
                return engine.get(key)
            if op == "scan":
                return engine.scan(key, count)
            raise RoutingError(f"unknown op {op}")

    # -- fabric message loop ---------------------------------------------------

    def pump(self) -> int:
        if not self.alive:
            return 0
        done = 0
        for immediate, length in self.fabric.poll_notifications(self.node_id):
            pending = self.pending_migrations.get(immediate)
            if pending is not None and pending.get("apply") is not None:
                pending["apply"]()
            done += 1
        for msg in self.fabric.poll_requests(self.node_id):
            header, payload = protocol.unpack(msg.payload)
            self._handle(msg.src, header, payload)
            done += 1
        return done

    def _reply(self, dst: str, header: dict, meta: dict | None = None, payload: bytes = b"") -> None:
        self.fabric.send_request(self.node_id, dst, protocol.reply_to(header, meta, payload))

    def _handle(self, src: str, header: dict, payload: bytes) -> None:
        op = header["op"]
        try:
            if op in ("kv.put", "kv.get", "kv.delete", "kv.scan"):
                self._op_kv(src, header, payload)
            elif op == "ltc.check_files":
                self._op_check_files(src, header)
            elif op == "ltc.stats":
                rid = header["range_id"]
                engine = self.engines.get(rid)
                self._reply(src, header, {"stats": engine.stats() if engine else None})
            else:
                self._reply(src, header, {"error": f"unknown op {op}"})
        except Redirected as redirect:
            self._reply(src, header, {"redirect": redirect.target})
        except Exception as exc:
            self._reply(src, header, {"error": str(exc)})

    def _op_kv(self, src: str, header: dict, payload: bytes) -> None:
        op = header["op"].split(".", 1)[1]
        key, value = decode_kv_payload(payload)
        range_id = header["range_id"]
        if op == "put":
            seq = self.execute("put", range_id, key, value)
            self._reply(src, header, {"seq": seq})
        elif op == "delete":
            seq = self.execute("delete", range_id, key)
            self._reply(src, header, {"seq": seq})
        elif op == "get":
            found = self.execute("get", range_id, key)
            if found is None:
                self._reply(src, header, {"found": False})
            else:
                self._reply(src, header, {"found": True}, encode_value(found))
        elif op == "scan":
            rows = self.execute("scan", range_id, key, count=header.get("count", 10))
            self._reply(src, header, {"n": len(rows)}, encode_rows(rows))

    def _op_check_files(self, src: str, header: dict) -> None:
        """Reconciliation: which of these file names are still referenced?"""
        range_id = header["range_id"]
        engine = self.engines.get(range_id)
        names = header["names"]
        if engine is None:
            self._reply(src, header, {"referenced": [False] * len(names)})
            return
        live_names = set()
        for desc in engine.live_descriptors():
            for placement in [*desc.fragments, desc.parity, *desc.meta_replicas]:
                if placement is not None:
                    live_names.add(placement.name)
        log_names = set()
        for table in engine.live_memtables():
            if table.log is not None:
                log_names.add(table.log.name)
        self._reply(
            src,
            header,
            {"referenced": [n in live_names or n in log_names for n in names]},
        )


# -- kv wire helpers (length-prefixed keys and values) -------------------------


def encode_kv_payload(key: int, value: bytes | None = None) -> bytes:
    kbytes = struct.pack("<Q", key)
    out = struct.pack("<I", len(kbytes)) + kbytes
    if value is not None:
        out += struct.pack("<I", len(value)) + value
    return out


def decode_kv_payload(payload: bytes) -> tuple[int, bytes | None]:
    (klen,) = struct.unpack_from("<I", payload, 0)
    key = struct.unpack_from("<Q", payload, 4)[0]
    rest = payload[4 + klen :]
    if not rest:
        return key, None
    (vlen,) = struct.unpack_from("<I", rest, 0)
    return key, rest[4 : 4 + vlen]


def encode_value(value: bytes) -> bytes:
    return struct.pack("<I", len(value)) + value


def encode_rows(rows: list[tuple[int, bytes]]) -> bytes:
    out = [struct.pack("<I", len(rows))]
    for key, value in rows:
        out.append(struct.pack("<QI", key, len(value)) + value)
    return b"".join(out)


def decode_rows(payload: bytes) -> list[tuple[int, bytes]]:
    (n,) = struct.unpack_from("<I", payload, 0)
    out = []
    off = 4
    for _ in range(n):
        key, vlen = struct.unpack_from("<QI", payload, off)
        off += 12
        out.append((key, payload[off : off + vlen]))
        off += vlen
    return out


class KVClient:
    """Fabric client speaking the LTC request protocol (TCP/in-process)."""

    def __init__(self, fabric, node_id: str, router=None, timeout_s: float = 30.0):
        from .stoc import StoCClient

        self._rpc = StoCClient(fabric, node_id, router=router, timeout_s=timeout_s)

    def put(self, ltc: str, range_id: int, key: int, value: bytes) -> int:
        header = self._call(ltc, "kv.put", range_id, encode_kv_payload(key, value))
        return header["seq"]

    def delete(self, ltc: str, range_id: int, key: int) -> int:
        header = self._call(ltc, "kv.delete", range_id, encode_kv_payload(key))
        return header["seq"]

    def get(self, ltc: str, range_id: int, key: int) -> bytes | None:
        header, payload = self._rpc.call_with_payload(
            ltc, "kv.get", {"range_id": range_id}, encode_kv_payload(key)
        )
        self._raise_redirect(header)
        if not header.get("found"):
            return None
        (vlen,) = struct.unpack_from("<I", payload, 0)
        return payload[4 : 4 + vlen]

    def scan(self, ltc: str, range_id: int, start_key: int, count: int) -> list[tuple[int, bytes]]:
        header, payload = self._rpc.call_with_payload(
            ltc, "kv.scan", {"range_id": range_id, "count": count}, encode_kv_payload(start_key)
        )
        self._raise_redirect(header)
        return decode_rows(payload)

    def _call(self, ltc: str, op: str, range_id: int, payload: bytes) -> dict:
        header, _ = self._rpc.call_with_payload(ltc, op, {"range_id": range_id}, payload)
        self._raise_redirect(header)
        return header

    @staticmethod
    def _raise_redirect(header: dict) -> None:
        if "redirect" in header:
            raise Redirected(header["redirect"])

    def close(self) -> None:
        self._rpc.close()
