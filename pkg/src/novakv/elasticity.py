"""Elastic reconfiguration: range migration, StoC addition and removal.

Migrating a range ships only metadata (levels, Dranges/Tranges, the
lookup-index snapshot, and the locations of log replicas) over one
one-sided write; the destination replays the log records itself, with the
memtables clients are waiting on rebuilt first. A StoC joining with old
files is reconciled against live SSTable metadata: useful files become
extra replicas, obsolete ones are deleted. Graceful removal copies or
promotes every referenced piece off the leaving StoC before it drops out
of the placement roster.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from . import logc
from .coordinator import Coordinator, range_subject
from .dranges import ReorgPolicy
from .engine import EngineConfig, RangeEngine
from .indexes import KIND_L0
from .ltc import LTCNode, MigrationGate
from .manifest import (
    ManifestLog,
    descriptor_from_json,
    descriptor_to_json,
    dranges_to_json,
    manifest_name,
)
from .recovery import rebuild_memtable, replay_fetched
from .stoc import StoCError, parse_file_name

RECONCILE_BATCH = 1024


class ElasticityError(Exception):
    pass


# ----------------------------------------------------------------------
# Range migration


@dataclass
class MigrationReport:
    range_id: int
    src: str
    dst: str
    metadata_bytes: int = 0
    log_bytes: int = 0
    replayed_memtables: int = 0
    replay_order: list[int] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return self.metadata_bytes + self.log_bytes

    @property
    def metadata_fraction(self) -> float:
        total = self.total_bytes
        return self.metadata_bytes / total if total else 0.0


def build_migration_packet(engine: RangeEngine, manifest: ManifestLog | None) -> bytes:
    """Metadata only: no memtable payloads ever ride in the packet."""
    descs = [descriptor_to_json(d) for d in engine.live_descriptors()]
    log_locations = {}
    for table in engine.live_memtables():
        if table.unique_keys() == 0:
            # Nothing to replay; abandon the empty memtable's log file.
            if table.log is not None and engine.log_ctx is not None:
                engine.log_ctx.close_and_delete(table.log)
            continue
        if table.log is not None and table.log.replica_stocs:
            log_locations[table.mid] = list(table.log.replica_stocs)
    meta = {
        "range_id": engine.range_id,
        "range_lo": engine.range_lo,
        "range_hi": engine.range_hi,
        "dranges": dranges_to_json(engine.dmap),
        "levels": descs,
        "log_locations": {str(k): v for k, v in log_locations.items()},
        "mid_floor": engine._mid_counter,
        "file_floor": engine._file_counter,
        "seq_floor": engine.last_seq,
        "manifest_replicas": list(manifest.replica_stocs) if manifest else [],
        "manifest_versions": dict(manifest.versions) if manifest else {},
        "manifest_seq": manifest.edit_seq if manifest else 0,
    }
    entries, bindings = engine.lookup.export_snapshot()
    header = json.dumps(meta, separators=(",", ":")).encode()
    blob = [struct.pack("<I", len(header)), header]
    blob.append(struct.pack("<I", len(entries)))
    for key, mid, seq in entries:
        blob.append(struct.pack("<QIQ", key, mid, seq))
    blob.append(struct.pack("<I", len(bindings)))
    for mid, _, fno in bindings:
        blob.append(struct.pack("<IQ", mid, fno))
    return b"".join(blob)


def parse_migration_packet(packet: bytes):
    (hlen,) = struct.unpack_from("<I", packet, 0)
    meta = json.loads(packet[4 : 4 + hlen].decode())
    off = 4 + hlen
    (n_entries,) = struct.unpack_from("<I", packet, off)
    off += 4
    entries = []
    for _ in range(n_entries):
        key, mid, seq = struct.unpack_from("<QIQ", packet, off)
        entries.append((key, mid, seq))
        off += 20
    (n_bind,) = struct.unpack_from("<I", packet, off)
    off += 4
    bindings = []
    for _ in range(n_bind):
        mid, fno = struct.unpack_from("<IQ", packet, off)
        bindings.append((mid, KIND_L0, fno))
        off += 12
    return meta, entries, bindings


def migrate_range(
    coordinator: Coordinator,
    ltcs: dict[str, LTCNode],
    fabric,
    range_id: int,
    dst_id: str,
    engine_parts_factory,
    n_replay_workers: int = 4,
) -> MigrationReport:
    """Move one range from its current LTC to dst_id.

    `engine_parts_factory(ltc_node, range_id)` must return a dict with
    scatter/log_ctx/config/reorg_policy wired to the destination node's
    clients. Ownership (the lease) only moves once the destination has
    rebuilt the range and opened its gate.
    """
    src_id = coordinator.config.assignment_map()[range_id]
    if src_id == dst_id:
        raise ElasticityError("source and destination are the same LTC")
    src = ltcs[src_id]
    dst = ltcs[dst_id]
    engine = src.engines[range_id]
    manifest = engine.manifest
    report = MigrationReport(range_id, src_id, dst_id)

    if engine.log_ctx is None:
        # Without log replicas memtable contents cannot be replayed at the
        # destination, so they are flushed and the move is metadata-only.
        engine.flush_all()

    # Redirect new requests, then drain in-flight ones via the range lock.
    gate = MigrationGate()
    dst.gates[range_id] = gate
    src.redirects[range_id] = dst_id
    lock = src.range_locks.setdefault(range_id, __import__("threading").RLock())
    with lock:
        packet = build_migration_packet(engine, manifest)
    report.metadata_bytes = len(packet)

    region = fabric.register_region(dst.node_id, max(len(packet), 1))

    def apply() -> None:
        raw = fabric.one_sided_read(region, 0, len(packet))
        _apply_migration(dst, raw, gate, engine_parts_factory, report, n_replay_workers)
        fabric.deregister_region(region)
        dst.pending_migrations.pop(range_id, None)

    dst.pending_migrations[range_id] = {"apply": apply, "region": region}
    completion = fabric.one_sided_write(region, 0, packet, immediate=range_id)
    if not completion.ok:
        dst.pending_migrations.pop(range_id, None)
        src.redirects.pop(range_id, None)
        dst.gates.pop(range_id, None)
        raise ElasticityError(f"packet transfer failed: {completion.error}")
    dst.pump()  # processes the notification and rebuilds
    if not gate.event.is_set():
        raise ElasticityError("destination did not open the migration gate")

    # Hand over ownership: src releases, dst is granted, config advances.
    src.drop_range(range_id)
    coordinator.leases.pop(range_subject(range_id), None)
    coordinator.grant_or_renew(range_subject(range_id), dst_id)
    assignment = coordinator.config.assignment_map()
    assignment[range_id] = dst_id
    coordinator.config = coordinator.config.with_assignment(assignment)
    src.redirects[range_id] = dst_id  # keep pointing latecomers at dst
    return report


def _apply_migration(
    dst: LTCNode,
    packet: bytes,
    gate: MigrationGate,
    engine_parts_factory,
    report: MigrationReport,
    n_replay_workers: int,
) -> None:
    meta, entries, bindings = parse_migration_packet(packet)
    range_id = meta["range_id"]
    parts = engine_parts_factory(dst, range_id)
    engine = RangeEngine(
        range_id,
        meta["range_lo"],
        meta["range_hi"],
        parts["scatter"],
        config=parts["config"],
        reorg_policy=parts.get("reorg_policy"),
        log_ctx=parts.get("log_ctx"),
        manifest=parts.get("manifest"),
        bootstrap=False,
    )
    if meta["manifest_replicas"] and engine.manifest is not None:
        engine.manifest.replica_stocs = list(meta["manifest_replicas"])
        engine.manifest.versions = {k: int(v) for k, v in meta["manifest_versions"].items()}
        engine.manifest.edit_seq = meta["manifest_seq"]
    if meta["dranges"]["layout"]:
        engine.restore_dranges(meta["dranges"])
    levels: dict[int, dict] = {}
    for obj in meta["levels"]:
        desc = descriptor_from_json(obj)
        levels.setdefault(desc.level, {})[desc.file_number] = desc
    engine.adopt_level_tables(levels)

    # Fetch and replay log records, most-wanted memtables first.
    client = parts["client"]
    stoc_ids = list(parts["stoc_roster"]())
    located = {int(k): v for k, v in meta["log_locations"].items()}
    fetched = logc.fetch_logs(client, located, range_id)
    report.log_bytes = sum(len(b) for bufs in fetched.values() for b in bufs)

    interest = gate.interest_snapshot()
    mid_interest: dict[int, int] = {}
    key_to_mid = {key: mid for key, mid, _ in entries}
    for key, hits in interest.items():
        mid = key_to_mid.get(key)
        if mid is not None:
            mid_interest[mid] = mid_interest.get(mid, 0) + hits
    ordered = sorted(fetched, key=lambda mid: (-mid_interest.get(mid, 0), mid))
    report.replay_order = list(ordered)

    tables = replay_fetched(fetched, n_replay_workers)
    max_mid = meta["mid_floor"]
    max_seq = meta["seq_floor"]
    for mid in ordered:
        table_map = tables.get(mid)
        if not table_map:
            continue
        memtable = rebuild_memtable(mid, table_map, engine.dmap.generation, parts["config"].tau_bytes)
        if engine.log_ctx is not None:
            skeleton = logc.LogFile(range_id, mid, engine.log_ctx.mode)
            skeleton.recovered_replicas = list(located.get(mid, []))
            memtable.log = skeleton
        engine.adopt_immutable(memtable)
        report.replayed_memtables += 1
        max_mid = max(max_mid, mid)
        if table_map:
            max_seq = max(max_seq, max(seq for _, seq, _ in table_map.values()))
    engine.lookup.import_snapshot(entries, bindings)
    engine.bump_mid_floor(max_mid)
    engine.bump_file_floor(meta["file_floor"])
    engine.bump_seq_floor(max_seq)
    engine.attach_all_actives()
    if parts.get("compactor_factory") is not None:
        engine.compactor = parts["compactor_factory"](engine)
    dst.add_range(range_id, engine)
    dst.gates.pop(range_id, None)
    gate.open()


# ----------------------------------------------------------------------
# StoC addition (reconciliation) and graceful removal


@dataclass
class ReconciliationReport:
    stoc_id: str
    deleted: list[str] = field(default_factory=list)
    registered: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def _engine_for(coordinator: Coordinator, ltcs: dict[str, LTCNode], range_id: int) -> RangeEngine | None:
    owner = coordinator.config.assignment_map().get(range_id)
    if owner is None or owner not in ltcs:
        return None
    return ltcs[owner].engines.get(range_id)


def _find_descriptor(engine: RangeEngine, file_number: int):
    for level in engine.levels:
        desc = level.tables.get(file_number)
        if desc is not None:
            return desc
    return None


def add_stoc(
    coordinator: Coordinator,
    client,
    ltcs: dict[str, LTCNode],
    new_stoc: str,
    batch: int = RECONCILE_BATCH,
) -> ReconciliationReport:
    """Join a StoC: new placements flow to it immediately; files it carried
    from a previous life are reconciled against live SSTable metadata."""
    coordinator.add_stoc_member(new_stoc)
    report = ReconciliationReport(new_stoc)
    try:
        files, corrupt = client.enumerate_files(new_stoc)
    except StoCError as exc:
        raise ElasticityError(f"cannot enumerate {new_stoc}: {exc}")
    report.skipped.extend(corrupt)

    for start in range(0, len(files), batch):
        for entry in files[start : start + batch]:
            name = entry["name"]
            range_id, file_number, kind = entry["range_id"], entry["file_number"], entry["kind"]
            if kind == "manifest":
                _reconcile_manifest_replica(coordinator, ltcs, client, new_stoc, name, range_id, report)
                continue
            engine = _engine_for(coordinator, ltcs, range_id)
            desc = _find_descriptor(engine, file_number) if engine is not None else None
            placement = None
            if desc is not None:
                for p in [*desc.fragments, desc.parity, *desc.meta_replicas]:
                    if p is not None and p.name == name:
                        placement = p
                        break
            if placement is None:
                client.delete_file(new_stoc, name)
                report.deleted.append(name)
                continue
            if new_stoc not in placement.holders():
                placement.extra_replicas.append(new_stoc)
                if engine.manifest is not None:
                    engine.manifest.append_placement_update(desc)
            report.registered.append(name)
    return report


def _reconcile_manifest_replica(coordinator, ltcs, client, stoc, name, range_id, report) -> None:
    from .manifest import replay_manifest

    engine = _engine_for(coordinator, ltcs, range_id)
    if engine is None or engine.manifest is None:
        report.skipped.append(name)
        return
    state = replay_manifest(client, stoc, range_id)
    if state.edits < engine.manifest.latest_version() or stoc not in engine.manifest.replica_stocs:
        client.delete_file(stoc, name)
        report.deleted.append(name)
    else:
        report.registered.append(name)


@dataclass
class RemovalReport:
    stoc_id: str
    copied: list[tuple[str, str]] = field(default_factory=list)  # (name, dst)
    promoted: list[str] = field(default_factory=list)
    dropped_extras: list[str] = field(default_factory=list)


def remove_stoc_graceful(
    coordinator: Coordinator,
    client,
    ltcs: dict[str, LTCNode],
    leaving: str,
    seed: int = 0,
) -> RemovalReport:
    """Drain a StoC: every referenced piece moves or is re-covered first."""
    import random

    rng = random.Random(seed)
    survivors = [s for s in coordinator.config.stoc_members if s != leaving]
    report = RemovalReport(leaving)
    for ltc in ltcs.values():
        for engine in ltc.engines.values():
            for desc in engine.live_descriptors():
                changed = False
                for placement in [*desc.fragments, desc.parity, *desc.meta_replicas]:
                    if placement is None:
                        continue
                    if placement.stoc_id == leaving:
                        alive_extras = [s for s in placement.extra_replicas if s in survivors]
                        if alive_extras:
                            placement.stoc_id = alive_extras[0]
                            placement.extra_replicas.remove(alive_extras[0])
                            report.promoted.append(placement.name)
                        else:
                            taken = desc.all_stocs() | {leaving}
                            candidates = [s for s in survivors if s not in taken]
                            if not candidates:
                                raise ElasticityError(
                                    f"cannot drain {leaving}: placement constraints unsatisfiable"
                                )
                            target = rng.choice(candidates)
                            client.copy_file(leaving, placement.name, target)
                            placement.stoc_id = target
                            report.copied.append((placement.name, target))
                        changed = True
                    if leaving in placement.extra_replicas:
                        placement.extra_replicas.remove(leaving)
                        report.dropped_extras.append(placement.name)
                        changed = True
                if changed and engine.manifest is not None:
                    engine.manifest.append_placement_update(desc)
            _rehome_manifest(engine, client, leaving, survivors, rng, report)
            _rehome_logs(engine, leaving, survivors, report)
    coordinator.remove_stoc_member(leaving)
    return report


def _rehome_manifest(engine, client, leaving, survivors, rng, report) -> None:
    manifest = engine.manifest
    if manifest is None or leaving not in manifest.replica_stocs:
        return
    candidates = [s for s in survivors if s not in manifest.replica_stocs]
    name = manifest_name(engine.range_id)
    if candidates:
        target = rng.choice(candidates)
        client.copy_file(leaving, name, target)
        manifest.replica_stocs[manifest.replica_stocs.index(leaving)] = target
        manifest.versions[target] = manifest.versions.pop(leaving, 0)
        report.copied.append((name, target))
    else:
        manifest.replica_stocs.remove(leaving)
        manifest.versions.pop(leaving, None)
    try:
        client.delete_file(leaving, name)
    except StoCError:
        pass


def _rehome_logs(engine, leaving, survivors, report) -> None:
    if engine.log_ctx is None:
        return
    for table in engine.live_memtables():
        log = table.log
        if log is None or leaving not in [w.stoc_id for w in log.writers]:
            continue
        keep = [w for w in log.writers if w.stoc_id != leaving]
        log.writers = keep
        replacement = engine.log_ctx._rehome_replica(log, keep)
        if replacement is not None:
            log.writers.append(replacement)
            report.copied.append((log.name, replacement.stoc_id))


def gc_obsolete_files(coordinator: Coordinator, client, ltcs: dict[str, LTCNode]) -> list[tuple[str, str]]:
    """Periodic sweep: delete StoC files no live descriptor references."""
    deleted = []
    for stoc in coordinator.config.stoc_members:
        try:
            files, _ = client.enumerate_files(stoc)
        except StoCError:
            continue
        for entry in files:
            name, kind = entry["name"], entry["kind"]
            if kind in ("manifest", "log"):
                continue
            engine = _engine_for(coordinator, ltcs, entry["range_id"])
            desc = _find_descriptor(engine, entry["file_number"]) if engine else None
            referenced = False
            if desc is not None:
                for p in [*desc.fragments, desc.parity, *desc.meta_replicas]:
                    if p is not None and p.name == name and stoc in p.holders():
                        referenced = True
                        break
            if not referenced:
                client.delete_file(stoc, name)
                deleted.append((stoc, name))
    return deleted
