"""Shared value/key conventions.

Keys are unsigned 64-bit integers; values are bytes. A delete writes a
tombstone marker instead of a value, and versions are ordered by a
per-range monotonically increasing sequence number.
"""

from __future__ import annotations

import struct

OP_PUT = 0
OP_DELETE = 1


class _Tombstone:
    __slots__ = ()

    def __repr__(self):
        return "TOMBSTONE"


TOMBSTONE = _Tombstone()


def encode_key(key: int) -> bytes:
    return struct.pack("<Q", key)


def decode_key(data: bytes) -> int:
    return struct.unpack("<Q", data)[0]
