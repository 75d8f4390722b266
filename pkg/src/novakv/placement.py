"""SSTable placement across StoCs and the layered read paths.

Placement samples d = 2*rho random StoCs and keeps the rho with the
shortest disk queues (power-of-d), falling back to plain random when
configured. Scattering writes the data fragments in parallel, then the
parity block, and the metadata block strictly last, so a descriptor never
exists without its metadata being durable.
"""

from __future__ import annotations

import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .sstable import (
    MIN_FRAGMENT_SIZE,
    Placement,
    SSTableData,
    SSTableDescriptor,
    SSTableError,
    compute_parity,
    decode_meta_block,
    encode_meta_block,
    reconstruct_fragment,
    split_fragments,
)
from .stoc import BlockHandle, StoCClient, StoCError, format_file_name, frag_kind

POLICY_RANDOM = "random"
POLICY_POWER_OF_D = "power_of_d"

SCHEME_NONE = "none"
SCHEME_PARITY = "parity"
SCHEME_HYBRID = "hybrid"

HYBRID_META_REPLICAS = 3


class PlacementError(Exception):
    pass


@dataclass
class PlacementPolicy:
    kind: str = POLICY_POWER_OF_D
    min_fragment_size: int = MIN_FRAGMENT_SIZE

    def d_for(self, rho_eff: int) -> int:
        return 2 * rho_eff


def choose_rho(sstable_size: int, rho: int, min_fragment_size: int = MIN_FRAGMENT_SIZE) -> int:
    """Smaller SSTables are partitioned across fewer StoCs."""
    if rho < 1:
        raise PlacementError("rho must be >= 1")
    needed = max(1, -(-sstable_size // min_fragment_size))  # ceil
    return min(rho, needed)


def select_stocs(
    policy: PlacementPolicy,
    rho_eff: int,
    queue_stats,
    rng: random.Random,
    excluded=(),
) -> list[str]:
    """Pick rho_eff distinct StoCs. queue_stats: stoc id -> disk queue depth."""
    candidates = [s for s in queue_stats if s not in set(excluded)]
    if len(candidates) < rho_eff:
        raise PlacementError(
            f"need {rho_eff} StoCs, only {len(candidates)} eligible"
        )
    if policy.kind == POLICY_RANDOM:
        return rng.sample(candidates, rho_eff)
    if policy.kind != POLICY_POWER_OF_D:
        raise PlacementError(f"unknown placement policy {policy.kind!r}")
    d = min(policy.d_for(rho_eff), len(candidates))
    sampled = rng.sample(candidates, d)
    sampled.sort(key=lambda s: queue_stats[s])
    return sampled[:rho_eff]


class ScatterContext:
    """Everything scatter/read paths need to talk to the StoC fleet."""

    def __init__(
        self,
        client: StoCClient,
        stoc_roster,
        policy: PlacementPolicy | None = None,
        scheme: str = SCHEME_NONE,
        rho: int = 1,
        seed: int = 0,
        max_write_attempts: int = 3,
    ):
        self.client = client
        self.stoc_roster = stoc_roster  # callable () -> list of live stoc ids
        self.policy = policy or PlacementPolicy()
        self.scheme = scheme
        self.rho = rho
        self.rng = random.Random(seed)
        self.max_write_attempts = max_write_attempts

    def queue_stats(self, stoc_ids) -> dict[str, int]:
        stats = {}
        for stoc_id in stoc_ids:
            try:
                stats[stoc_id] = self.client.stat(stoc_id)["queue_depth"]
            except StoCError:
                continue
        return stats

    # -- write side ------------------------------------------------------

    def scatter(self, table: SSTableData, range_id: int, file_number: int, level: int) -> SSTableDescriptor:
        """Write fragments in parallel, then parity, then metadata last."""
        rho_eff = choose_rho(table.size_bytes, self.rho, self.policy.min_fragment_size)
        pieces = split_fragments(table.data, table.index, rho_eff)
        rho_eff = len(pieces)
        stats = self.queue_stats(self.stoc_roster())
        targets = select_stocs(self.policy, rho_eff, stats, self.rng)
        frag_bytes = [table.data[off : off + length] for off, length in pieces]

        fragments: list[Placement | None] = [None] * rho_eff
        used: set[str] = set()

        def write_fragment(i: int, stoc_id: str) -> Placement:
            name = format_file_name(range_id, file_number, frag_kind(i))
            self._append_with_retry(stoc_id, name, frag_bytes[i], stats, used)
            return Placement(stoc_id, name, len(frag_bytes[i]))

        with ThreadPoolExecutor(max_workers=min(4, rho_eff)) as pool:
            futures = [pool.submit(write_fragment, i, targets[i]) for i in range(rho_eff)]
            for i, fut in enumerate(futures):
                fragments[i] = fut.result()
        used.update(p.stoc_id for p in fragments)

        parity = None
        if self.scheme in (SCHEME_PARITY, SCHEME_HYBRID) and rho_eff >= 1:
            parity_bytes = compute_parity(frag_bytes)
            name = format_file_name(range_id, file_number, "parity")
            stoc_id = self._pick_distinct(stats, used)
            stoc_id = self._append_with_retry(stoc_id, name, parity_bytes, stats, used)
            parity = Placement(stoc_id, name, len(parity_bytes))
            used.add(stoc_id)

        desc = SSTableDescriptor(
            file_number=file_number,
            range_id=range_id,
            level=level,
            min_key=table.min_key,
            max_key=table.max_key,
            entry_count=table.entry_count,
            size_bytes=table.size_bytes,
            fragments=[f for f in fragments],
            parity=parity,
            meta_replicas=[],
            fragment_offsets=[off for off, _ in pieces],
            index=table.index,
            bloom=table.bloom,
        )

        # Metadata last: index converted to StoC block handles via the
        # fragment table, replicated when running hybrid.
        meta_bytes = encode_meta_block(desc)
        n_meta = HYBRID_META_REPLICAS if self.scheme == SCHEME_HYBRID else 1
        meta_name = format_file_name(range_id, file_number, "meta")
        meta_replicas = []
        for _ in range(n_meta):
            stoc_id = self._pick_distinct(stats, used)
            stoc_id = self._append_with_retry(stoc_id, meta_name, meta_bytes, stats, used)
            meta_replicas.append(Placement(stoc_id, meta_name, len(meta_bytes)))
            used.add(stoc_id)
        desc.meta_replicas = meta_replicas
        return desc

    def _pick_distinct(self, stats: dict[str, int], used: set[str]) -> str:
        """Prefer a StoC not already holding a piece of this SSTable."""
        fresh = {s: q for s, q in stats.items() if s not in used}
        pool = fresh or stats
        if not pool:
            raise PlacementError("no live StoC available")
        chosen = select_stocs(self.policy, 1, pool, self.rng)
        return chosen[0]

    def _append_with_retry(self, stoc_id: str, name: str, data: bytes, stats, used) -> str:
        tried = set()
        for _ in range(self.max_write_attempts):
            try:
                self.client.append_persistent_block(stoc_id, name, data)
                return stoc_id
            except StoCError:
                tried.add(stoc_id)
                remaining = {
                    s: q for s, q in self.queue_stats(self.stoc_roster()).items()
                    if s not in tried and s not in used
                }
                if not remaining:
                    break
                stoc_id = select_stocs(self.policy, 1, remaining, self.rng)[0]
        raise PlacementError(f"could not write {name} after retries")

    # -- read side -------------------------------------------------------

    def _live(self) -> set[str]:
        return set(self.stoc_roster())

    def read_meta_block(self, desc: SSTableDescriptor) -> SSTableDescriptor:
        """Fetch and decode the metadata block from any replica."""
        live = self._live()
        replicas = sorted(desc.meta_replicas, key=lambda p: p.stoc_id not in live)
        stats = {p.stoc_id: 0 for p in replicas if p.stoc_id in live}
        order = list(replicas)
        if len(stats) > 1 and self.policy.kind == POLICY_POWER_OF_D:
            queue = self.queue_stats(stats)
            order.sort(key=lambda p: queue.get(p.stoc_id, 1 << 30))
        last_error = None
        for placement in order:
            for holder in placement.holders():
                if holder not in live:
                    continue
                try:
                    raw = self.client.read_block(
                        holder, BlockHandle(placement.name, 0, placement.length)
                    )
                    return decode_meta_block(raw)
                except (StoCError, SSTableError) as exc:
                    last_error = exc
        raise PlacementError(f"no readable metadata replica: {last_error}")

    def read_fragment(self, desc: SSTableDescriptor, index: int) -> bytes:
        placement = desc.fragments[index]
        live = self._live()
        last_error = None
        for holder in placement.holders():
            if holder not in live:
                continue
            try:
                return self.client.read_block(holder, BlockHandle(placement.name, 0, placement.length))
            except StoCError as exc:
                last_error = exc
        return self._reconstruct(desc, index, last_error)

    def _reconstruct(self, desc: SSTableDescriptor, missing: int, cause) -> bytes:
        """Failed-mode read: parity + the other rho-1 fragments."""
        if desc.parity is None:
            raise PlacementError(f"fragment {missing} lost and no parity: {cause}")
        live = self._live()
        survivors = {}
        lengths = [f.length for f in desc.fragments]
        for i, frag in enumerate(desc.fragments):
            if i == missing:
                continue
            holder = next((h for h in frag.holders() if h in live), None)
            if holder is None:
                raise PlacementError("two fragments unavailable; parity covers one erasure")
            survivors[i] = self.client.read_block(holder, BlockHandle(frag.name, 0, frag.length))
        parity_holder = next((h for h in desc.parity.holders() if h in live), None)
        if parity_holder is None:
            raise PlacementError("parity block unavailable")
        parity = self.client.read_block(parity_holder, BlockHandle(desc.parity.name, 0, desc.parity.length))
        return reconstruct_fragment(missing, survivors, parity, lengths)

    def rematerialize_fragment(self, desc: SSTableDescriptor, index: int) -> str | None:
        """Write a reconstructed fragment to a fresh StoC for future reads."""
        data = self.read_fragment(desc, index)
        placement = desc.fragments[index]
        stats = self.queue_stats(self._live() - set(placement.holders()) - desc.all_stocs())
        if not stats:
            return None
        target = select_stocs(self.policy, 1, stats, self.rng)[0]
        self.client.append_persistent_block(target, placement.name, data)
        placement.stoc_id = target
        placement.extra_replicas = []
        return target

    def _fragment_for_offset(self, desc: SSTableDescriptor, offset: int) -> tuple[int, int]:
        bases = desc.fragment_offsets
        for i in range(len(bases) - 1, -1, -1):
            if offset >= bases[i]:
                return i, offset - bases[i]
        raise PlacementError("offset before first fragment")

    def read_extent(self, desc: SSTableDescriptor, offset: int, length: int) -> bytes:
        """Read a logical data-stream extent, spanning fragments if needed."""
        out = []
        remaining = length
        cursor = offset
        frag_cache: dict[int, bytes] = {}
        while remaining > 0:
            idx, local = self._fragment_for_offset(desc, cursor)
            frag_len = desc.fragments[idx].length
            take = min(remaining, frag_len - local)
            if take <= 0:
                raise PlacementError("extent beyond fragment bounds")
            live = self._live()
            placement = desc.fragments[idx]
            holder = next((h for h in placement.holders() if h in live), None)
            if holder is not None:
                out.append(
                    self.client.read_block(
                        holder, BlockHandle(placement.name, 0, placement.length), local, take
                    )
                )
            else:
                if idx not in frag_cache:
                    frag_cache[idx] = self._reconstruct(desc, idx, None)
                out.append(frag_cache[idx][local : local + take])
            cursor += take
            remaining -= take
        return b"".join(out)

    def read_all_entries(self, desc: SSTableDescriptor):
        """Full iteration over an SSTable's entries (compaction/offload)."""
        from .sstable import iter_entries

        data = b"".join(self.read_fragment(desc, i) for i in range(len(desc.fragments)))
        return list(iter_entries(data))

    def delete_sstable(self, desc: SSTableDescriptor) -> None:
        live = self._live()
        for placement in [*desc.fragments, desc.parity, *desc.meta_replicas]:
            if placement is None:
                continue
            for holder in placement.holders():
                if holder in live:
                    try:
                        self.client.delete_file(holder, placement.name)
                    except StoCError:
                        pass
