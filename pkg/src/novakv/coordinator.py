"""Coordinator: leases, membership, failure handling, stale replicas.

A single logical event loop owns all coordinator state. Time is a logical
clock advanced by heartbeats, which keeps lease expiry deterministic in
simulation; lease extensions piggyback on those heartbeats. Clients read
immutable ClusterConfig snapshots tagged with a version.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ClusterConfig, ConfigError

DEFAULT_LEASE_TIMEOUT_TICKS = 10


class LeaseError(Exception):
    pass


@dataclass
class Lease:
    holder: str
    subject: str  # "range:<id>" or "stoc:<id>"
    expiry: int
    timeout: int

    def unexpired(self, now: int) -> bool:
        return self.expiry > now


def range_subject(range_id: int) -> str:
    return f"range:{range_id}"


def stoc_subject(stoc_id: str) -> str:
    return f"stoc:{stoc_id}"


class Coordinator:
    def __init__(self, config: ClusterConfig, lease_timeout: int = DEFAULT_LEASE_TIMEOUT_TICKS):
        self.config = config
        self.clock = 0
        self.lease_timeout = lease_timeout
        self.leases: dict[str, Lease] = {}
        self.dead_nodes: set[str] = set()
        self.events: list[tuple] = []  # (tick, kind, subject, holder)
        for rid, ltc in config.assignment:
            self.grant_or_renew(range_subject(rid), ltc)
        for stoc in config.stoc_members:
            self.grant_or_renew(stoc_subject(stoc), stoc)

    # -- clock + leases ------------------------------------------------------

    def tick(self, n: int = 1) -> int:
        self.clock += n
        return self.clock

    def heartbeat(self, node: str) -> list[Lease]:
        """One heartbeat: advances the clock, renews the node's leases."""
        self.tick()
        if node in self.dead_nodes:
            return []
        renewed = []
        for lease in self.leases.values():
            if lease.holder == node and lease.unexpired(self.clock):
                lease.expiry = self.clock + lease.timeout
                renewed.append(lease)
                self.events.append((self.clock, "renew", lease.subject, node))
        return renewed

    def grant_or_renew(self, subject: str, holder: str) -> Lease:
        current = self.leases.get(subject)
        if current is not None and current.unexpired(self.clock) and current.holder != holder:
            raise LeaseError(
                f"{subject} held by {current.holder} until tick {current.expiry}"
            )
        lease = Lease(holder, subject, self.clock + self.lease_timeout, self.lease_timeout)
        self.leases[subject] = lease
        self.events.append((self.clock, "grant", subject, holder))
        return lease

    def holder_of(self, subject: str) -> str | None:
        lease = self.leases.get(subject)
        if lease is not None and lease.unexpired(self.clock):
            return lease.holder
        return None

    def audit_single_holder(self) -> bool:
        """Replay the event log: at most one unexpired lease per subject."""
        active: dict[str, tuple[str, int]] = {}
        for tick, kind, subject, holder in self.events:
            if kind not in ("grant", "renew"):
                continue
            prev = active.get(subject)
            if prev is not None and prev[0] != holder and prev[1] > tick:
                return False
            active[subject] = (holder, tick + self.lease_timeout)
        return True

    # -- membership + failures ----------------------------------------------

    def kill_node(self, node: str) -> None:
        """Stop renewing a node's leases; they lapse as the clock advances."""
        self.dead_nodes.add(node)
        self.events.append((self.clock, "kill", node, node))

    def wait_for_lease_expiry(self, node: str) -> None:
        horizon = max(
            (l.expiry for l in self.leases.values() if l.holder == node),
            default=self.clock,
        )
        while self.clock <= horizon:
            self.tick()

    def handle_ltc_failure(self, failed_ltc: str) -> dict[int, str]:
        """Scatter the failed LTC's ranges across the survivors round-robin."""
        for lease in self.leases.values():
            if lease.holder == failed_ltc and lease.unexpired(self.clock):
                raise LeaseError(f"{failed_ltc} still holds unexpired leases")
        survivors = [l for l in self.config.live_ltcs() if l != failed_ltc and l not in self.dead_nodes]
        if not survivors:
            raise LeaseError("no surviving LTC; system unavailable until restart")
        assignment = self.config.assignment_map()
        plan: dict[int, str] = {}
        cursor = 0
        for rid in sorted(self.config.ranges_of(failed_ltc)):
            target = survivors[cursor % len(survivors)]
            plan[rid] = target
            assignment[rid] = target
            cursor += 1
        self.config = self.config.with_assignment(assignment)
        for rid, target in plan.items():
            self.grant_or_renew(range_subject(rid), target)
        self.events.append((self.clock, "reassign", failed_ltc, tuple(sorted(plan.items()))))
        return plan

    def add_stoc_member(self, stoc_id: str) -> None:
        members = set(self.config.stoc_members) | {stoc_id}
        self.config = self.config.with_stocs(members)
        self.dead_nodes.discard(stoc_id)
        self.grant_or_renew(stoc_subject(stoc_id), stoc_id)

    def remove_stoc_member(self, stoc_id: str) -> None:
        members = set(self.config.stoc_members) - {stoc_id}
        if not members:
            raise ConfigError("cannot remove the last StoC")
        self.config = self.config.with_stocs(members)
        self.leases.pop(stoc_subject(stoc_id), None)

    # -- stale manifest replicas ----------------------------------------------

    @staticmethod
    def detect_stale_replicas(reports: dict[str, dict[int, int]]) -> list[tuple[str, int]]:
        """reports: stoc -> {range_id: manifest version}; returns stale list."""
        latest: dict[int, int] = {}
        for versions in reports.values():
            for rid, version in versions.items():
                latest[rid] = max(latest.get(rid, -1), version)
        stale = []
        for stoc, versions in sorted(reports.items()):
            for rid, version in sorted(versions.items()):
                if version < latest[rid]:
                    stale.append((stoc, rid))
        return stale
