"""Leveled compaction with Drange-parallel Level0 jobs and StoC offload.

The coordinator picks the level with the highest actual/expected size
ratio, then partitions the eligible tables into jobs whose key ranges are
pairwise disjoint (including each job's overlapping tables one level
down), so jobs can run concurrently or on different StoCs. Outputs respect
Drange boundaries and the maximum SSTable size. Tombstones are dropped
only when nothing deeper can still hold an older version of their key.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .common import OP_DELETE
from .engine import RangeEngine
from .placement import ScatterContext
from .sstable import SSTableDescriptor, build_sstable, decode_meta_block, encode_meta_block

JOB_IDS = iter(range(1, 1 << 62))


@dataclass
class CompactionJob:
    job_id: int
    level: int
    inputs: list[SSTableDescriptor]
    overlaps: list[SSTableDescriptor]
    drange_boundaries: list[int]
    max_output: int
    bottom: bool
    reserved_file_numbers: list[int] = field(default_factory=list)

    @property
    def key_lo(self) -> int:
        return min(t.min_key for t in [*self.inputs, *self.overlaps])

    @property
    def key_hi(self) -> int:
        return max(t.max_key for t in [*self.inputs, *self.overlaps])

    def all_tables(self) -> list[SSTableDescriptor]:
        return [*self.inputs, *self.overlaps]


def pick_level(engine: RangeEngine) -> int | None:
    """Level with the highest actual/expected ratio above 1; ties go lower."""
    best = None
    best_ratio = 1.0
    for level in engine.levels:
        if not level.tables:
            continue
        ratio = level.actual_size / engine.expected_level_size(level.level)
        if ratio > best_ratio:
            best = level.level
            best_ratio = ratio
    return best


def _merge_intervals(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [(lo, hi) for lo, hi in merged]


def compute_jobs(engine: RangeEngine, level: int) -> list[CompactionJob]:
    """Pairwise key-disjoint jobs for one level (up to theta at Level0)."""
    with engine.lock:
        source = engine.level(level)
        if not source.tables:
            return []
        if level == 0:
            inputs = list(source.tables.values())
        else:
            ordered = sorted(source.tables.values(), key=lambda t: t.min_key)
            expected = engine.expected_level_size(level)
            excess = source.actual_size - expected
            inputs = []
            for table in ordered:
                if excess <= 0:
                    break
                inputs.append(table)
                excess -= table.size_bytes
            if not inputs:
                inputs = [ordered[0]]
        next_level = engine.level(level + 1)
        # Interval closure: a next-level table touching two groups fuses them.
        intervals = [(t.min_key, t.max_key) for t in inputs]
        while True:
            merged = _merge_intervals(intervals)
            grown = list(merged)
            changed = False
            for i, (lo, hi) in enumerate(merged):
                for table in next_level.overlapping(lo, hi):
                    if table.min_key < lo or table.max_key > hi:
                        grown[i] = (min(lo, table.min_key), max(hi, table.max_key))
                        changed = True
            intervals = grown
            if not changed and grown == merged:
                break
        intervals = _merge_intervals(intervals)

        boundaries = set()
        for drange in engine.dmap.dranges:
            lo, hi = drange.interval()
            if hi > lo:
                boundaries.update((lo, hi))
        jobs = []
        for lo, hi in intervals:
            job_inputs = [t for t in inputs if t.overlaps(lo, hi)]
            job_overlaps = next_level.overlapping(lo, hi)
            if not job_inputs:
                continue
            deeper = any(
                engine.level(j).overlapping(lo, hi)
                for j in range(level + 2, len(engine.levels))
            )
            job = CompactionJob(
                job_id=next(JOB_IDS),
                level=level,
                inputs=job_inputs,
                overlaps=job_overlaps,
                drange_boundaries=sorted(b for b in boundaries if lo < b <= hi),
                max_output=engine.config.max_sstable_bytes,
                bottom=not deeper,
            )
            total = sum(t.size_bytes for t in job.all_tables())
            n_outputs = total // max(job.max_output, 1) + len(job.drange_boundaries) + 2
            job.reserved_file_numbers = [engine.next_file_number() for _ in range(n_outputs)]
            jobs.append(job)
        return jobs


def run_job(
    job: CompactionJob,
    scatter: ScatterContext,
    range_id: int,
    block_target: int = 4096,
) -> tuple[list[SSTableDescriptor], dict[int, list[int]]]:
    """Merge the job's tables into new SSTables one level down.

    Returns (output descriptors, key lists of the level-i input tables) so
    the installer can run the lookup-index cleanup without re-reading them.
    """
    from heapq import merge as heap_merge

    streams = []
    input_keys: dict[int, list[int]] = {}
    for table in job.inputs:
        entries = scatter.read_all_entries(table)
        input_keys[table.file_number] = [e[0] for e in entries]
        streams.append(entries)
    for table in job.overlaps:
        streams.append(scatter.read_all_entries(table))

    merged = heap_merge(*streams, key=lambda e: (e[0], -e[2]))
    outputs: list[SSTableDescriptor] = []
    current: list[tuple] = []
    current_bytes = 0
    reserved = iter(job.reserved_file_numbers)
    boundaries = job.drange_boundaries

    def close_output():
        nonlocal current, current_bytes
        if not current:
            return
        built = build_sstable(current, block_target)
        fno = next(reserved)
        outputs.append(scatter.scatter(built, range_id, fno, level=job.level + 1))
        current = []
        current_bytes = 0

    import bisect

    last_key = None
    boundary_idx = 0
    for key, op, seq, value in merged:
        if key == last_key:
            continue  # an older version of an already-emitted key
        last_key = key
        if op == OP_DELETE and job.bottom:
            continue  # tombstones die at the bottom of the tree
        while boundary_idx < len(boundaries) and key >= boundaries[boundary_idx]:
            close_output()
            boundary_idx += 1
        size = 25 + 8 + (len(value) if value else 0)
        if current_bytes + size > job.max_output and current:
            close_output()
        current.append((key, op, seq, value))
        current_bytes += size
    close_output()
    return outputs, input_keys


def install_results(
    engine: RangeEngine,
    job: CompactionJob,
    outputs: list[SSTableDescriptor],
    input_keys: dict[int, list[int]],
    delete_inputs: bool = True,
) -> None:
    """Make the job's outputs visible and retire its inputs.

    The manifest edit lands before any input file is deleted, so a crash
    in between leaves only orphaned (GC-able) files, never missing data.
    """
    with engine.lock:
        if engine.manifest is not None:
            engine.manifest.append_compaction(job, outputs)
        target = engine.level(job.level + 1)
        for desc in outputs:
            target.tables[desc.file_number] = desc
        for table in job.inputs:
            engine.level(job.level).tables.pop(table.file_number, None)
            if job.level == 0:
                engine.l0_key_cleanup(table, input_keys.get(table.file_number, []))
                engine.range_index.remove_l0(table.file_number)
        for table in job.overlaps:
            engine.level(job.level + 1).tables.pop(table.file_number, None)
    if delete_inputs:
        for table in job.all_tables():
            engine.scatter.delete_sstable(table)


def compact_once(engine: RangeEngine, offloader=None) -> bool:
    """One compaction round: pick a level, run its jobs, install results."""
    level = pick_level(engine)
    if level is None:
        return False
    jobs = compute_jobs(engine, level)
    progressed = False
    for job in jobs:
        if offloader is not None:
            outputs, input_keys = offloader(engine, job)
        else:
            outputs, input_keys = run_job(
                job, engine.scatter, engine.range_id, engine.config.block_target
            )
        install_results(engine, job, outputs, input_keys)
        progressed = True
    return progressed


def make_inline_compactor(engine: RangeEngine, offloader=None):
    def compactor() -> bool:
        return compact_once(engine, offloader)

    return compactor


# ----------------------------------------------------------------------
# Offloading to StoCs


def encode_job(job: CompactionJob, range_id: int, block_target: int) -> tuple[dict, bytes]:
    meta = {
        "job_id": job.job_id,
        "level": job.level,
        "range_id": range_id,
        "boundaries": job.drange_boundaries,
        "max_output": job.max_output,
        "bottom": job.bottom,
        "reserved": job.reserved_file_numbers,
        "block_target": block_target,
        "n_inputs": len(job.inputs),
        "n_overlaps": len(job.overlaps),
    }
    blobs = []
    for table in job.all_tables():
        blob = encode_meta_block(table)
        blobs.append(struct.pack("<I", len(blob)) + blob)
    return meta, b"".join(blobs)


def decode_job(meta: dict, payload: bytes) -> CompactionJob:
    tables = []
    off = 0
    while off + 4 <= len(payload):
        (n,) = struct.unpack_from("<I", payload, off)
        tables.append(decode_meta_block(payload[off + 4 : off + 4 + n]))
        off += 4 + n
    n_inputs = meta["n_inputs"]
    return CompactionJob(
        job_id=meta["job_id"],
        level=meta["level"],
        inputs=tables[:n_inputs],
        overlaps=tables[n_inputs:],
        drange_boundaries=list(meta["boundaries"]),
        max_output=meta["max_output"],
        bottom=meta["bottom"],
        reserved_file_numbers=list(meta["reserved"]),
    )


def encode_outputs(outputs: list[SSTableDescriptor], input_keys: dict[int, list[int]]) -> tuple[dict, bytes]:
    meta = {
        "meta_replicas": [
            [[p.stoc_id, p.name, p.length] for p in desc.meta_replicas] for desc in outputs
        ],
        "key_files": sorted(input_keys),
    }
    blobs = []
    for desc in outputs:
        blob = encode_meta_block(desc)
        blobs.append(struct.pack("<I", len(blob)) + blob)
    for fno in meta["key_files"]:
        keys = input_keys[fno]
        blobs.append(struct.pack("<I", len(keys) * 8) + struct.pack(f"<{len(keys)}Q", *keys))
    return meta, b"".join(blobs)


def decode_outputs(meta: dict, payload: bytes) -> tuple[list[SSTableDescriptor], dict[int, list[int]]]:
    from .sstable import Placement

    n_outputs = len(meta["meta_replicas"])
    outputs = []
    off = 0
    for i in range(n_outputs):
        (n,) = struct.unpack_from("<I", payload, off)
        desc = decode_meta_block(payload[off + 4 : off + 4 + n])
        desc.meta_replicas = [Placement(s, nm, ln) for s, nm, ln in meta["meta_replicas"][i]]
        outputs.append(desc)
        off += 4 + n
    input_keys = {}
    for fno in meta["key_files"]:
        (n,) = struct.unpack_from("<I", payload, off)
        raw = payload[off + 4 : off + 4 + n]
        input_keys[fno] = list(struct.unpack(f"<{n // 8}Q", raw))
        off += 4 + n
    return outputs, input_keys


class RoundRobinOffloader:
    """Ships compaction jobs to StoCs in roster order."""

    def __init__(self, client, stoc_roster, fallback_local: bool = True):
        self.client = client
        self.stoc_roster = stoc_roster
        self.cursor = 0
        self.fallback_local = fallback_local
        self.dispatched: list[tuple[int, str]] = []

    def __call__(self, engine: RangeEngine, job: CompactionJob):
        from .stoc import StoCError

        roster = list(self.stoc_roster())
        attempts = max(len(roster), 1)
        meta, payload = encode_job(job, engine.range_id, engine.config.block_target)
        for _ in range(attempts):
            if not roster:
                break
            target = roster[self.cursor % len(roster)]
            self.cursor += 1
            try:
                header, body = self.client.call_with_payload(
                    target, "stoc.run_compaction", meta, payload
                )
                self.dispatched.append((job.job_id, target))
                return decode_outputs(header["result"], body)
            except StoCError:
                roster = list(self.stoc_roster())
        if not self.fallback_local:
            raise RuntimeError(f"no StoC accepted compaction job {job.job_id}")
        outputs, input_keys = run_job(job, engine.scatter, engine.range_id, engine.config.block_target)
        self.dispatched.append((job.job_id, "local"))
        return outputs, input_keys


def make_stoc_compaction_runner(roster_fn, policy, scheme, rho, seed: int = 0):
    """Builds the handler a StorageComponent runs for offloaded jobs.

    The StoC pre-fetches the job's tables into memory, merges them, and
    writes the outputs with its own scatter context (locally or to other
    StoCs), returning the new descriptors.
    """

    def runner(stoc, header: dict, payload: bytes) -> dict:
        from .stoc import StoCClient

        job = decode_job(header, payload)
        if getattr(stoc, "_offload_client", None) is None:
            stoc._offload_client = StoCClient(
                stoc.fabric, f"{stoc.node_id}:compact", router=stoc._router
            )
        ctx = ScatterContext(
            stoc._offload_client,
            roster_fn,
            policy,
            scheme=scheme,
            rho=rho,
            seed=seed,
        )
        outputs, input_keys = run_job(job, ctx, header["range_id"], header["block_target"])
        meta, body = encode_outputs(outputs, input_keys)
        return {"result": meta}, body

    return runner
