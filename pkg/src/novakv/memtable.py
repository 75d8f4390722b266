"""In-memory write buffer: one active memtable per Drange.

Appends keep only the latest version of a key (lookups never need older
ones) but every append still consumes byte budget, mirroring an append-only
buffer filling up with versions. The generation id tracks reorganization
epochs: flushing is ordered so no memtable reaches storage before a live
sealed memtable of an older generation.
"""

from __future__ import annotations

import threading
from bisect import bisect_left, insort

from .common import TOMBSTONE

STATE_ACTIVE = "active"
STATE_IMMUTABLE = "immutable"

# Per-entry envelope cost alongside key and value bytes (framing, seq, op).
ENTRY_OVERHEAD = 25
KEY_BYTES = 8


class Memtable:
    def __init__(self, mid: int, generation: int, byte_budget: int, origin_drange: int = -1):
        self.mid = mid
        self.generation = generation
        self.byte_budget = byte_budget
        self.origin_drange = origin_drange
        self.state = STATE_ACTIVE
        self.entries: dict[int, tuple] = {}
        self._sorted_keys: list[int] = []
        self.bytes_used = 0
        self.min_key: int | None = None
        self.max_key: int | None = None
        # Lookup-index mids that resolve to this table (grows when small
        # memtables are merged into this one).
        self.absorbed_mids: set[int] = {mid}
        self.lock = threading.Lock()
        self.seal_order = -1
        self.log = None  # LogFile, when logging is enabled

    def __repr__(self):
        return f"<Memtable mid={self.mid} gen={self.generation} {self.state} n={len(self.entries)}>"

    # -- writes ----------------------------------------------------------

    def put(self, key: int, value, seq: int) -> None:
        size = ENTRY_OVERHEAD + KEY_BYTES + (0 if value is TOMBSTONE else len(value))
        with self.lock:
            if self.state != STATE_ACTIVE:
                raise RuntimeError("append to sealed memtable")
            cur = self.entries.get(key)
            if cur is None:
                insort(self._sorted_keys, key)
                self.entries[key] = (value, seq)
            elif cur[1] < seq:
                self.entries[key] = (value, seq)
            self.bytes_used += size
            if self.min_key is None or key < self.min_key:
                self.min_key = key
            if self.max_key is None or key > self.max_key:
                self.max_key = key

    def is_full(self) -> bool:
        return self.bytes_used >= self.byte_budget

    def seal(self, order: int) -> None:
        with self.lock:
            self.state = STATE_IMMUTABLE
            self.seal_order = order

    # -- reads -----------------------------------------------------------

    def get(self, key: int):
        return self.entries.get(key)

    def unique_keys(self) -> int:
        return len(self.entries)

    def span(self) -> tuple[int, int] | None:
        if self.min_key is None:
            return None
        return self.min_key, self.max_key

    def items_from(self, start_key: int) -> list[tuple[int, tuple]]:
        """Snapshot of (key, (value, seq)) pairs with key >= start_key."""
        with self.lock:
            idx = bisect_left(self._sorted_keys, start_key)
            keys = self._sorted_keys[idx:]
            return [(k, self.entries[k]) for k in keys]

    def sorted_items(self) -> list[tuple[int, tuple]]:
        with self.lock:
            return [(k, self.entries[k]) for k in self._sorted_keys]
