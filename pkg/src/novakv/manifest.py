"""Per-range MANIFEST: a replicated, version-stamped log of metadata edits.

Every LSM metadata mutation (SSTable adds/removes with their StoC
placements, Drange/Trange layout changes) appends one framed edit to the
range's manifest file on each replica StoC. The staged-append protocol
acks only after the bytes are on disk, so an acknowledged edit is durable.
A replica's version is its count of valid edits; replicas that missed
edits while down report lower versions and are deleted as stale.

Edit frame: u32 len | json payload | u32 crc32.
"""

from __future__ import annotations

import json
import struct
import zlib

from .sstable import Placement, SSTableDescriptor
from .stoc import BlockHandle, StoCClient, StoCError, format_file_name

DEFAULT_MANIFEST_REPLICAS = 3


class ManifestError(Exception):
    pass


def manifest_name(range_id: int) -> str:
    return format_file_name(range_id, 0, "manifest")


def _frame(payload: dict) -> bytes:
    raw = json.dumps(payload, separators=(",", ":")).encode()
    return struct.pack("<I", len(raw)) + raw + struct.pack("<I", zlib.crc32(raw))


def iter_edits(buf: bytes):
    off = 0
    n = len(buf)
    while off + 4 <= n:
        (ln,) = struct.unpack_from("<I", buf, off)
        if ln == 0 or off + 8 + ln > n:
            return
        raw = buf[off + 4 : off + 4 + ln]
        (crc,) = struct.unpack_from("<I", buf, off + 4 + ln)
        if zlib.crc32(raw) != crc:
            return
        yield json.loads(raw.decode())
        off += 8 + ln


def placement_to_json(p: Placement | None):
    if p is None:
        return None
    return {"stoc": p.stoc_id, "name": p.name, "len": p.length, "extra": list(p.extra_replicas)}


def placement_from_json(obj) -> Placement | None:
    if obj is None:
        return None
    return Placement(obj["stoc"], obj["name"], obj["len"], list(obj.get("extra", [])))


def descriptor_to_json(desc: SSTableDescriptor) -> dict:
    return {
        "fno": desc.file_number,
        "range": desc.range_id,
        "level": desc.level,
        "min": desc.min_key,
        "max": desc.max_key,
        "n": desc.entry_count,
        "size": desc.size_bytes,
        "frags": [placement_to_json(f) for f in desc.fragments],
        "frag_offs": list(desc.fragment_offsets),
        "parity": placement_to_json(desc.parity),
        "meta": [placement_to_json(m) for m in desc.meta_replicas],
    }


def descriptor_from_json(obj: dict) -> SSTableDescriptor:
    return SSTableDescriptor(
        file_number=obj["fno"],
        range_id=obj["range"],
        level=obj["level"],
        min_key=obj["min"],
        max_key=obj["max"],
        entry_count=obj["n"],
        size_bytes=obj["size"],
        fragments=[placement_from_json(f) for f in obj["frags"]],
        parity=placement_from_json(obj["parity"]),
        meta_replicas=[placement_from_json(m) for m in obj["meta"]],
        fragment_offsets=list(obj["frag_offs"]),
        index=None,
        bloom=None,
    )


def dranges_to_json(dmap) -> dict:
    layout = []
    for d in dmap.dranges:
        layout.append(
            {
                "id": d.drange_id,
                "dup": d.duplicate_group,
                "tranges": [[t.lower, t.upper] for t in d.tranges],
            }
        )
    return {"generation": dmap.generation, "layout": layout}


class ManifestLog:
    """Client-side appender for one range's replicated manifest."""

    def __init__(
        self,
        client: StoCClient,
        stoc_roster,
        range_id: int,
        replicas: int = DEFAULT_MANIFEST_REPLICAS,
        seed: int = 0,
    ):
        import random

        self.client = client
        self.range_id = range_id
        self.name = manifest_name(range_id)
        rng = random.Random(seed)
        live = list(stoc_roster())
        rng.shuffle(live)
        self.replica_stocs: list[str] = live[: max(1, min(replicas, len(live)))]
        self.versions: dict[str, int] = {s: 0 for s in self.replica_stocs}
        self.edit_seq = 0
        self.version_gaps: list[tuple[str, int]] = []  # (stoc, missed edit)

    def append(self, payload: dict) -> None:
        self.edit_seq += 1
        payload = dict(payload)
        payload["edit"] = self.edit_seq
        blob = _frame(payload)
        acked = 0
        for stoc in self.replica_stocs:
            try:
                self.client.append_persistent_block(stoc, self.name, blob)
                self.versions[stoc] += 1
                acked += 1
            except StoCError:
                self.version_gaps.append((stoc, self.edit_seq))
        if acked == 0:
            raise ManifestError(f"manifest edit {self.edit_seq} reached no replica")

    # Convenience wrappers used by the engine/compaction/elasticity.

    def append_add(self, desc: SSTableDescriptor) -> None:
        self.append({"kind": "add", "desc": descriptor_to_json(desc)})

    def append_remove(self, level: int, file_number: int) -> None:
        self.append({"kind": "remove", "level": level, "fno": file_number})

    def append_compaction(self, job, outputs) -> None:
        self.append(
            {
                "kind": "compaction",
                "removes": [[t.level, t.file_number] for t in job.all_tables()],
                "adds": [descriptor_to_json(d) for d in outputs],
            }
        )

    def append_dranges(self, dmap) -> None:
        self.append({"kind": "dranges", "state": dranges_to_json(dmap)})

    def append_placement_update(self, desc: SSTableDescriptor) -> None:
        self.append({"kind": "placement", "desc": descriptor_to_json(desc)})

    def latest_version(self) -> int:
        return max(self.versions.values(), default=0)


class ManifestState:
    """Folded view of a manifest replica after replay."""

    def __init__(self):
        self.tables: dict[int, SSTableDescriptor] = {}
        self.dranges: dict | None = None
        self.edits = 0
        self.max_file_number = 0

    def apply(self, edit: dict) -> None:
        self.edits += 1
        kind = edit["kind"]
        if kind == "add" or kind == "placement":
            desc = descriptor_from_json(edit["desc"])
            self.tables[desc.file_number] = desc
            self.max_file_number = max(self.max_file_number, desc.file_number)
        elif kind == "remove":
            self.tables.pop(edit["fno"], None)
        elif kind == "compaction":
            for _, fno in edit["removes"]:
                self.tables.pop(fno, None)
            for obj in edit["adds"]:
                desc = descriptor_from_json(obj)
                self.tables[desc.file_number] = desc
                self.max_file_number = max(self.max_file_number, desc.file_number)
        elif kind == "dranges":
            self.dranges = edit["state"]

    def levels(self) -> dict[int, dict[int, SSTableDescriptor]]:
        out: dict[int, dict[int, SSTableDescriptor]] = {}
        for desc in self.tables.values():
            out.setdefault(desc.level, {})[desc.file_number] = desc
        return out


def replay_manifest(client: StoCClient, stoc_id: str, range_id: int) -> ManifestState:
    name = manifest_name(range_id)
    files, _ = client.enumerate_files(stoc_id)
    entry = next((f for f in files if f["name"] == name), None)
    state = ManifestState()
    if entry is None:
        return state
    raw = client.read_block(stoc_id, BlockHandle(name, 0, entry["length"]))
    for edit in iter_edits(raw):
        state.apply(edit)
    return state


def manifest_versions_on(client: StoCClient, stoc_id: str) -> dict[int, int]:
    """range_id -> edit count for every manifest replica on one StoC."""
    out: dict[int, int] = {}
    try:
        files, _ = client.enumerate_files(stoc_id)
    except StoCError:
        return out
    for entry in files:
        if entry["kind"] != "manifest":
            continue
        state = replay_manifest(client, stoc_id, entry["range_id"])
        out[entry["range_id"]] = state.edits
    return out


def best_manifest_replica(client: StoCClient, stoc_ids, range_id: int) -> tuple[str | None, ManifestState]:
    best: tuple[str | None, ManifestState] = (None, ManifestState())
    for stoc_id in stoc_ids:
        try:
            state = replay_manifest(client, stoc_id, range_id)
        except StoCError:
            continue
        if state.edits > best[1].edits:
            best = (stoc_id, state)
    return best
