"""Lookup index and range index for one range.

The lookup index maps a key to the memtable id that last wrote it; an
indirection table resolves a memtable id to either a live memtable, the
Level0 SSTable it was flushed into, or nothing. A hit therefore sends a
get to exactly one table. The range index partitions the keyspace and
lists, per partition, the memtables and Level0 SSTables overlapping it,
which is what scans consult.
"""

from __future__ import annotations

import threading
from bisect import bisect_right
from dataclasses import dataclass, field

from .memtable import Memtable

KIND_MEM = "mem"
KIND_L0 = "l0"
KIND_INVALID = "invalid"


class LookupIndex:
    def __init__(self):
        self._entries: dict[int, tuple[int, int]] = {}  # key -> (mid, seq)
        self._mid_to_table: dict[int, tuple] = {}
        self._lock = threading.Lock()

    # -- writes -----------------------------------------------------------

    def register_memtable(self, table: Memtable) -> None:
        with self._lock:
            self._mid_to_table[table.mid] = (KIND_MEM, table)

    def record_write(self, key: int, mid: int, seq: int) -> None:
        with self._lock:
            cur = self._entries.get(key)
            if cur is None or cur[1] < seq:
                self._entries[key] = (mid, seq)

    def swing_to_l0(self, mids, file_number: int) -> None:
        """A flush atomically redirects every absorbed mid to the SSTable."""
        with self._lock:
            for mid in mids:
                self._mid_to_table[mid] = (KIND_L0, file_number)

    def alias_to_memtable(self, mids, table: Memtable) -> None:
        with self._lock:
            for mid in mids:
                self._mid_to_table[mid] = (KIND_MEM, table)

    def invalidate(self, mids) -> None:
        with self._lock:
            for mid in mids:
                self._mid_to_table[mid] = (KIND_INVALID, None)

    def register_l0_alias(self, mid: int, file_number: int) -> None:
        with self._lock:
            self._mid_to_table[mid] = (KIND_L0, file_number)

    def import_snapshot(self, entries, mid_bindings) -> None:
        """Install shipped index state (migration): entries + mid bindings."""
        with self._lock:
            for key, mid, seq in entries:
                cur = self._entries.get(key)
                if cur is None or cur[1] < seq:
                    self._entries[key] = (mid, seq)
            for mid, kind, ref in mid_bindings:
                if kind == KIND_L0:
                    self._mid_to_table[mid] = (KIND_L0, ref)

    def export_snapshot(self):
        """(entries, mid bindings) for shipping to a migration target."""
        with self._lock:
            entries = [[k, m, s] for k, (m, s) in self._entries.items()]
            bindings = []
            for mid, (kind, ref) in self._mid_to_table.items():
                if kind == KIND_L0:
                    bindings.append([mid, KIND_L0, ref])
            return entries, bindings

    # -- reads -----------------------------------------------------------

    def lookup(self, key: int):
        """Resolve to ("mem", memtable) or ("l0", file_number) or None."""
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                return None
            resolved = self._mid_to_table.get(entry[0])
            if resolved is None or resolved[0] == KIND_INVALID:
                return None
            return resolved

    def l0_cleanup(self, file_number: int, keys) -> int:
        """Forget keys whose current holder is the compacted L0 SSTable."""
        removed = 0
        with self._lock:
            for key in keys:
                entry = self._entries.get(key)
                if entry is None:
                    continue
                resolved = self._mid_to_table.get(entry[0])
                if resolved is not None and resolved == (KIND_L0, file_number):
                    del self._entries[key]
                    removed += 1
            stale = [m for m, v in self._mid_to_table.items() if v == (KIND_L0, file_number)]
            for mid in stale:
                self._mid_to_table[mid] = (KIND_INVALID, None)
        return removed

    def drop_memtable_keys(self, table: Memtable) -> None:
        """Remove index entries still naming this discarded memtable."""
        with self._lock:
            for key in list(table.entries):
                entry = self._entries.get(key)
                if entry is not None and entry[0] in table.absorbed_mids:
                    del self._entries[key]

    # -- metrics -----------------------------------------------------------

    def l0_unique_keys(self) -> int:
        return len(self._entries)

    def index_bytes(self, avg_key_size: int = 8) -> int:
        # avg key + 4-byte memtable pointer + 8-byte file number per entry
        return len(self._entries) * (avg_key_size + 4 + 8)

    def snapshot_entries(self) -> dict[int, tuple[int, int]]:
        with self._lock:
            return dict(self._entries)


@dataclass
class Partition:
    lower: int
    upper: int
    memtables: dict[int, Memtable] = field(default_factory=dict)
    l0_tables: dict[int, object] = field(default_factory=dict)  # fno -> descriptor

    def overlaps(self, lo: int, hi: int) -> bool:
        return self.lower < hi and lo < self.upper


class RangeIndex:
    """Interval-partitioned listing of memtables and Level0 SSTables."""

    def __init__(self, range_lo: int, range_hi: int):
        self.range_lo = range_lo
        self.range_hi = range_hi
        self._lock = threading.RLock()
        self.partitions: list[Partition] = [Partition(range_lo, range_hi)]
        # Registered half-open intervals per table; membership ground truth.
        self._mem_intervals: dict[int, tuple[int, int, Memtable]] = {}
        self._l0_intervals: dict[int, tuple[int, int, object]] = {}

    # -- partition structure ------------------------------------------------

    def split_at(self, boundaries) -> None:
        """Refine partitions at the given keys; children inherit lists."""
        with self._lock:
            cuts = sorted(
                b for b in set(boundaries) if self.range_lo < b < self.range_hi
            )
            for cut in cuts:
                idx = self._partition_idx(cut)
                part = self.partitions[idx]
                if part.lower == cut:
                    continue
                left = Partition(part.lower, cut, dict(part.memtables), dict(part.l0_tables))
                right = Partition(cut, part.upper, dict(part.memtables), dict(part.l0_tables))
                self.partitions[idx : idx + 1] = [left, right]
            self._prune()

    def _prune(self) -> None:
        """Drop inherited tables that no longer overlap their partition."""
        for part in self.partitions:
            for mid in list(part.memtables):
                lo, hi, _ = self._mem_intervals.get(mid, (0, 0, None))
                if not part.overlaps(lo, hi):
                    del part.memtables[mid]
            for fno in list(part.l0_tables):
                lo, hi, _ = self._l0_intervals.get(fno, (0, 0, None))
                if not part.overlaps(lo, hi):
                    del part.l0_tables[fno]

    def _partition_idx(self, key: int) -> int:
        lowers = [p.lower for p in self.partitions]
        return max(bisect_right(lowers, key) - 1, 0)

    def partition_for(self, key: int) -> Partition:
        with self._lock:
            return self.partitions[self._partition_idx(key)]

    def partition_sources(self, key: int):
        """Consistent snapshot of one partition's tables for a scan step."""
        with self._lock:
            part = self.partitions[self._partition_idx(key)]
            return list(part.memtables.values()), list(part.l0_tables.values()), part.upper

    # -- membership maintenance ----------------------------------------------

    def add_memtable(self, table: Memtable, lo: int, hi: int) -> None:
        with self._lock:
            self._mem_intervals[table.mid] = (lo, hi, table)
            for part in self.partitions:
                if part.overlaps(lo, hi):
                    part.memtables[table.mid] = table

    def extend_memtable(self, mid: int, lo: int, hi: int) -> None:
        """Grow a memtable's registered interval (reorg boundary moves)."""
        with self._lock:
            if mid not in self._mem_intervals:
                return
            cur_lo, cur_hi, table = self._mem_intervals[mid]
            new_lo, new_hi = min(cur_lo, lo), max(cur_hi, hi)
            self._mem_intervals[mid] = (new_lo, new_hi, table)
            for part in self.partitions:
                if part.overlaps(new_lo, new_hi):
                    part.memtables[mid] = table

    def shrink_memtable_to_span(self, table: Memtable) -> None:
        """At seal time, tighten registration to the true written span."""
        with self._lock:
            if table.mid not in self._mem_intervals:
                return
            span = table.span()
            if span is None:
                self.remove_memtable(table.mid)
                return
            lo, hi = span[0], span[1] + 1
            self._mem_intervals[table.mid] = (lo, hi, table)
            for part in self.partitions:
                if part.overlaps(lo, hi):
                    part.memtables[table.mid] = table
                else:
                    part.memtables.pop(table.mid, None)

    def remove_memtable(self, mid: int) -> None:
        with self._lock:
            self._mem_intervals.pop(mid, None)
            for part in self.partitions:
                part.memtables.pop(mid, None)

    def add_l0(self, desc) -> None:
        with self._lock:
            lo, hi = desc.min_key, desc.max_key + 1
            self._l0_intervals[desc.file_number] = (lo, hi, desc)
            for part in self.partitions:
                if part.overlaps(lo, hi):
                    part.l0_tables[desc.file_number] = desc

    def remove_l0(self, file_number: int) -> None:
        with self._lock:
            self._l0_intervals.pop(file_number, None)
            for part in self.partitions:
                part.l0_tables.pop(file_number, None)

    # -- views ---------------------------------------------------------------

    def snapshot(self) -> list[tuple[int, int, list[int], list[int]]]:
        with self._lock:
            return [
                (p.lower, p.upper, sorted(p.memtables), sorted(p.l0_tables))
                for p in self.partitions
            ]

    def rebuild_reference(self) -> list[tuple[int, int, list[int], list[int]]]:
        """Recompute membership from the registered intervals (oracle)."""
        with self._lock:
            out = []
            for p in self.partitions:
                mems = sorted(
                    mid for mid, (lo, hi, _) in self._mem_intervals.items() if p.overlaps(lo, hi)
                )
                l0s = sorted(
                    fno for fno, (lo, hi, _) in self._l0_intervals.items() if p.overlaps(lo, hi)
                )
                out.append((p.lower, p.upper, mems, l0s))
            return out
