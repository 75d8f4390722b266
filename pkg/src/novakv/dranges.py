"""Dynamic sub-ranges of one application range.

A range is tiled by theta Dranges, each tiled by up to gamma Tranges that
count the writes landing in them. A Drange whose write share exceeds
1/theta + epsilon sheds Tranges to its neighbors (minor reorganization);
when shuffling whole Tranges cannot help, the layout is rebuilt from a
reservoir sample of recent writes (major reorganization). A very hot
single key becomes a duplicated point Drange: several Dranges carrying the
same one-key interval, with writes spread round-robin across them.

Keys are integers, so a point interval is [k, k+1).
"""

from __future__ import annotations

import random
from bisect import bisect_right, insort
from dataclasses import dataclass, field


@dataclass
class Trange:
    lower: int
    upper: int  # half-open; a point Trange has upper == lower + 1
    writes: int = 0

    def contains(self, key: int) -> bool:
        return self.lower <= key < self.upper

    def is_point(self) -> bool:
        return self.upper == self.lower + 1


@dataclass
class Drange:
    drange_id: int
    tranges: list[Trange]
    duplicate_group: int | None = None
    epoch_writes: int = 0
    # Managed by the engine: one active memtable plus pending immutables.
    active = None
    immutables: list = field(default_factory=list)

    @property
    def lower(self) -> int:
        return self.tranges[0].lower

    @property
    def upper(self) -> int:
        return self.tranges[-1].upper

    def is_empty_placeholder(self) -> bool:
        return self.lower == self.upper

    def is_point(self) -> bool:
        return self.upper == self.lower + 1

    def contains(self, key: int) -> bool:
        return self.lower <= key < self.upper

    def trange_for(self, key: int) -> Trange:
        lowers = [t.lower for t in self.tranges]
        idx = bisect_right(lowers, key) - 1
        return self.tranges[max(idx, 0)]

    def interval(self) -> tuple[int, int]:
        return self.lower, self.upper


@dataclass
class ReorgPolicy:
    theta: int
    gamma: int
    epsilon: float = 0.0  # filled in __post_init__ when left at 0
    check_interval: int = 16384
    sample_capacity: int = 1 << 18
    min_major_samples: int = 0  # 0 -> sample_capacity
    duplication_threshold: float = 2.0  # multiples of the average share
    minor_failures_before_major: int = 2
    min_epoch_writes: int = 2048  # don't judge shares on thin evidence

    def __post_init__(self):
        if self.epsilon == 0.0:
            self.epsilon = 0.2 / self.theta
        if self.min_major_samples == 0:
            self.min_major_samples = self.sample_capacity

    @property
    def minor_trigger(self) -> float:
        return 1.0 / self.theta + self.epsilon


class ReservoirSampler:
    """Uniform reservoir over the recent write stream (algorithm R)."""

    def __init__(self, capacity: int, seed: int = 0):
        self.capacity = capacity
        self.rng = random.Random(seed)
        self.samples: list[int] = []
        self.seen = 0

    def add(self, key: int) -> None:
        self.seen += 1
        if len(self.samples) < self.capacity:
            self.samples.append(key)
        else:
            j = self.rng.randrange(self.seen)
            if j < self.capacity:
                self.samples[j] = key

    def snapshot(self) -> list[int]:
        return list(self.samples)


@dataclass
class LayoutGroup:
    """One planned Drange: its interval, duplication, and sample mass."""

    lower: int
    upper: int
    duplicates: int
    mass: float


class DrangeMap:
    """The live Drange layout of one range plus its write statistics."""

    def __init__(self, range_lo: int, range_hi: int, policy: ReorgPolicy, seed: int = 0):
        self.range_lo = range_lo
        self.range_hi = range_hi
        self.policy = policy
        self.sampler = ReservoirSampler(policy.sample_capacity, seed=seed)
        self.generation = 0
        self.epoch_total = 0
        self.major_reorgs = 0
        self.minor_reorgs = 0
        self._consecutive_minor_failures = 0
        self._rr = 0
        self._next_drange_id = 0
        self.dranges: list[Drange] = []
        self._rebuild_locator()
        self._install_initial_layout()

    # -- construction -----------------------------------------------------

    def _new_drange(self, tranges: list[Trange], duplicate_group=None) -> Drange:
        d = Drange(self._next_drange_id, tranges, duplicate_group)
        self._next_drange_id += 1
        return d

    def _install_initial_layout(self) -> None:
        """Cold start: one Drange spans the range, the rest are placeholders.

        The layout only becomes real once observed load shapes it, which is
        why the first imbalance check performs a major reorganization.
        """
        width = self.range_hi - self.range_lo
        n_tranges = min(self.policy.gamma, max(1, width))
        step = width / n_tranges
        cuts = [self.range_lo + round(i * step) for i in range(n_tranges)] + [self.range_hi]
        tranges = [Trange(lo, hi) for lo, hi in zip(cuts, cuts[1:]) if hi > lo]
        dranges = [self._new_drange(tranges)]
        for _ in range(self.policy.theta - 1):
            dranges.append(self._new_drange([Trange(self.range_hi, self.range_hi)]))
        self.dranges = dranges
        self._rebuild_locator()

    def _rebuild_locator(self) -> None:
        self._lowers = [d.lower for d in self.dranges]

    # -- routing ----------------------------------------------------------

    def locate(self, key: int) -> Drange:
        """The Drange containing key; duplicates are taken round-robin."""
        if not (self.range_lo <= key < self.range_hi):
            raise KeyError(f"key {key} outside range [{self.range_lo},{self.range_hi})")
        idx = bisect_right(self._lowers, key) - 1
        idx = max(idx, 0)
        # Skip over empty placeholders and near-duplicates that share a
        # lower bound: pick the first drange actually containing the key.
        while idx > 0 and not self.dranges[idx].contains(key):
            idx -= 1
        drange = self.dranges[idx]
        if drange.duplicate_group is None:
            return drange
        group = [d for d in self.dranges if d.duplicate_group == drange.duplicate_group]
        self._rr += 1
        return group[self._rr % len(group)]

    def record_write(self, key: int, drange: Drange) -> None:
        drange.epoch_writes += 1
        drange.trange_for(key).writes += 1
        self.epoch_total += 1
        self.sampler.add(key)

    # -- statistics ---------------------------------------------------------

    def shares(self) -> list[float]:
        if self.epoch_total == 0:
            return [0.0] * len(self.dranges)
        return [d.epoch_writes / self.epoch_total for d in self.dranges]

    def reset_epoch(self) -> None:
        self.epoch_total = 0
        for d in self.dranges:
            d.epoch_writes = 0
            for t in d.tranges:
                t.writes = 0

    # -- reorganization decisions ---------------------------------------------

    def needs_reorg(self) -> str | None:
        """Returns 'major', 'minor', or None."""
        if self.epoch_total < self.policy.min_epoch_writes:
            return None
        if max(self.shares(), default=0.0) <= self.policy.minor_trigger:
            self._consecutive_minor_failures = 0
            return None
        if self.major_reorgs == 0:
            if self.sampler.seen >= self.policy.min_major_samples:
                return "major"
            return None
        if self._consecutive_minor_failures >= self.policy.minor_failures_before_major:
            if self._rebuild_would_improve():
                return "major"
            self._consecutive_minor_failures = 0
            return None
        return "minor"

    def _rebuild_would_improve(self) -> bool:
        """Skip a major reorg whose layout would be as imbalanced as now."""
        groups = plan_layout(
            self.sampler.snapshot(), self.policy, self.range_lo, self.range_hi
        )
        if groups is None:
            return False
        expected_max = max(g.mass / max(g.duplicates, 1) for g in groups)
        observed_max = max(self.shares())
        return expected_max < observed_max - self.policy.epsilon / 2

    # -- minor reorganization ---------------------------------------------

    def minor_reorg(self) -> dict:
        """Shed Tranges from the hottest Drange to its neighbors."""
        shares = self.shares()
        if not shares:
            return {"moved": 0, "balanced": True}
        hot_idx = max(range(len(shares)), key=lambda i: shares[i])
        hot = self.dranges[hot_idx]
        threshold = self.policy.minor_trigger
        moved = 0
        hot_writes = hot.epoch_writes
        total = self.epoch_total

        def share_of(writes):
            return writes / total if total else 0.0

        while share_of(hot_writes) > threshold and len(hot.tranges) > 1:
            left = self._movable_neighbor(hot_idx - 1)
            right = self._movable_neighbor(hot_idx + 1)
            if left is None and right is None:
                break
            # Send the edge Trange toward the lighter neighbor.
            if right is None or (left is not None and left.epoch_writes <= right.epoch_writes):
                trange = hot.tranges.pop(0)
                self._receive_trange(left, trange, at_end=True)
            else:
                trange = hot.tranges.pop(-1)
                self._receive_trange(right, trange, at_end=False)
            hot_writes -= trange.writes
            hot.epoch_writes = max(hot.epoch_writes - trange.writes, 0)
            moved += 1

        balanced = share_of(hot_writes) <= threshold
        if balanced:
            self._consecutive_minor_failures = 0
        else:
            self._consecutive_minor_failures += 1
        self.minor_reorgs += 1
        self.generation += 1
        self._rebuild_locator()
        return {"moved": moved, "balanced": balanced}

    def _movable_neighbor(self, idx: int) -> Drange | None:
        if idx < 0 or idx >= len(self.dranges):
            return None
        cand = self.dranges[idx]
        if cand.duplicate_group is not None:
            return None  # duplicated point intervals are pinned
        return cand

    def _receive_trange(self, drange: Drange, trange: Trange, at_end: bool) -> None:
        if drange.is_empty_placeholder():
            drange.tranges = [trange]
        elif at_end:
            if len(drange.tranges) >= self.policy.gamma:
                merged = drange.tranges.pop(-1)
                drange.tranges[-1].upper = merged.upper
                drange.tranges[-1].writes += merged.writes
            drange.tranges.append(trange)
        else:
            if len(drange.tranges) >= self.policy.gamma:
                merged = drange.tranges.pop(0)
                drange.tranges[0].lower = merged.lower
                drange.tranges[0].writes += merged.writes
            drange.tranges.insert(0, trange)
        drange.epoch_writes += trange.writes

    # -- major reorganization -----------------------------------------------

    def major_reorg(self) -> list[Drange] | None:
        """Rebuild Dranges/Tranges from sampled write frequencies.

        Returns the list of replaced (old) Dranges, or None when there are
        no samples to work from.
        """
        groups = plan_layout(self.sampler.snapshot(), self.policy, self.range_lo, self.range_hi)
        if groups is None:
            return None
        old = self.dranges
        sample_sorted = sorted(self.sampler.snapshot())
        new_dranges: list[Drange] = []
        group_id = 0
        for group in groups:
            for _ in range(group.duplicates):
                tranges = build_tranges(
                    group.lower, group.upper, sample_sorted, self.policy.gamma
                )
                new_dranges.append(
                    self._new_drange(
                        tranges,
                        duplicate_group=group_id if group.duplicates > 1 else None,
                    )
                )
            group_id += 1
        self.dranges = new_dranges
        self._rebuild_locator()
        self.generation += 1
        self.major_reorgs += 1
        self._consecutive_minor_failures = 0
        self.reset_epoch()
        return old


def plan_layout(samples: list[int], policy: ReorgPolicy, range_lo: int, range_hi: int) -> list[LayoutGroup] | None:
    """Plan Drange intervals so each expects roughly 1/theta of the writes.

    Point keys carrying at least `duplication_threshold` times the average
    share become duplicated point Dranges sized round(share/average), with
    a minimum of two duplicates.
    """
    if not samples:
        return None
    counts: dict[int, int] = {}
    for key in samples:
        counts[key] = counts.get(key, 0) + 1
    ordered = sorted(counts.items())
    total = len(samples)
    theta = policy.theta
    base = total / theta

    hot: dict[int, int] = {}
    for key, cnt in ordered:
        if cnt >= policy.duplication_threshold * base:
            hot[key] = max(2, round(cnt / base))
    # Cap duplicate slots so normal mass keeps at least one slot.
    while hot and sum(hot.values()) > theta - 1:
        worst = min(hot, key=lambda k: counts[k])
        if hot[worst] > 2:
            hot[worst] -= 1
        else:
            del hot[worst]

    groups: list[LayoutGroup] = []
    slots_left = theta - sum(hot.values())
    acc_mass = 0
    acc_lo = range_lo
    open_group = False
    consumed = 0.0
    remaining_normal = total - sum(counts[k] for k in hot)

    def close(upper: int):
        nonlocal acc_mass, acc_lo, open_group, slots_left, consumed
        if not open_group:
            return
        groups.append(LayoutGroup(acc_lo, upper, 1, acc_mass / total))
        consumed += acc_mass
        slots_left -= 1
        acc_mass = 0
        acc_lo = upper
        open_group = False

    for key, cnt in ordered:
        if key in hot:
            close(key)
            groups.append(LayoutGroup(key, key + 1, hot[key], cnt / total))
            acc_lo = key + 1
            continue
        target = (remaining_normal - consumed) / max(slots_left, 1) if slots_left > 0 else float("inf")
        open_group = True
        if slots_left > 1 and acc_mass + cnt >= target:
            # Nearest-boundary rule: include the straddling key only when
            # that lands closer to the target mass.
            if abs(acc_mass + cnt - target) <= abs(acc_mass - target) or acc_mass == 0:
                acc_mass += cnt
                close(key + 1)
            else:
                close(key)
                open_group = True
                acc_mass = cnt
        else:
            acc_mass += cnt
    close(range_hi)
    if groups and groups[-1].upper < range_hi:
        groups[-1] = LayoutGroup(groups[-1].lower, range_hi, groups[-1].duplicates, groups[-1].mass)
    # Pad with empty placeholders so the layout always has theta slots.
    used = sum(g.duplicates for g in groups)
    for _ in range(theta - used):
        groups.append(LayoutGroup(range_hi, range_hi, 1, 0.0))
    if groups[0].lower > range_lo:
        groups[0] = LayoutGroup(range_lo, groups[0].upper, groups[0].duplicates, groups[0].mass)
    return groups


def build_tranges(lower: int, upper: int, sample_sorted: list[int], gamma: int) -> list[Trange]:
    """Tile [lower, upper) with up to gamma Tranges of similar sample mass."""
    if upper <= lower:
        return [Trange(lower, lower)]
    if upper - lower == 1:
        return [Trange(lower, upper)]
    from bisect import bisect_left

    lo_i = bisect_left(sample_sorted, lower)
    hi_i = bisect_left(sample_sorted, upper)
    in_range = sample_sorted[lo_i:hi_i]
    if not in_range:
        return [Trange(lower, upper)]
    cuts = [lower]
    n = len(in_range)
    per = n / gamma
    for i in range(1, gamma):
        candidate = in_range[min(int(i * per), n - 1)]
        if candidate > cuts[-1] and candidate < upper:
            cuts.append(candidate)
    cuts.append(upper)
    return [Trange(lo, hi) for lo, hi in zip(cuts, cuts[1:]) if hi > lo]
