"""Control-message framing shared by all components.

A message is a JSON header plus an optional raw binary payload:

    u32 header_len | header json (utf-8) | payload bytes

The header always carries "op" and "req_id"; replies echo the request's
req_id with op "<request-op>.reply". Bulk data (blocks, log batches)
travels in the payload section, never inside the JSON.
"""

from __future__ import annotations

import itertools
import json
import struct

_REQ_IDS = itertools.count(1)


def next_req_id() -> int:
    return next(_REQ_IDS)


def pack(op: str, meta: dict | None = None, payload: bytes = b"", req_id: int | None = None) -> bytes:
    header = dict(meta or {})
    header["op"] = op
    header["req_id"] = next_req_id() if req_id is None else req_id
    raw = json.dumps(header, separators=(",", ":")).encode()
    return struct.pack("<I", len(raw)) + raw + payload


def unpack(data: bytes) -> tuple[dict, bytes]:
    (hlen,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4 : 4 + hlen].decode())
    return header, data[4 + hlen :]


def reply_to(header: dict, meta: dict | None = None, payload: bytes = b"") -> bytes:
    return pack(header["op"] + ".reply", meta, payload, req_id=header["req_id"])
