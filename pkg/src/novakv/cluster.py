"""In-process cluster assembly and the pump router.

The router lets a synchronous caller drive a destination component's
message loop inline, which keeps single-threaded runs deterministic while
remaining safe when several threads pump the same node. InProcessCluster
wires the full system (coordinator, LTC nodes with range engines, StoC
fleet, logging, manifests, compaction offload) over one shared fabric.
"""

from __future__ import annotations

import threading
from collections import defaultdict

from .fabric import Fabric
from .stoc import StoCCrash


class Router:
    def __init__(self, fabric: Fabric):
        self.fabric = fabric
        self.components: dict[str, object] = {}
        self._active: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def register(self, node_id: str, component) -> None:
        with self._lock:
            self.components[node_id] = component

    def unregister(self, node_id: str) -> None:
        with self._lock:
            self.components.pop(node_id, None)

    def pump(self, node_id: str) -> bool:
        """Run the node's message loop once; False if the node is gone."""
        with self._lock:
            component = self.components.get(node_id)
        if component is None or not getattr(component, "alive", True):
            return False
        with self._lock:
            self._active[node_id] += 1
        try:
            component.pump()
        except StoCCrash:
            return False
        finally:
            with self._lock:
                self._active[node_id] -= 1
        return True

    def idle(self, node_id: str) -> bool:
        """True when nothing is being or waiting to be processed there."""
        with self._lock:
            if self._active[node_id] > 0:
                return False
        try:
            return self.fabric.pending_messages(node_id) == 0
        except Exception:
            return True


class ClusterError(Exception):
    pass


class InProcessCluster:
    """Everything in one process: deterministic, fabric-connected."""

    def __init__(
        self,
        params,
        key_space,
        seed: int = 0,
        log_mode: str = "off",
        scheme: str = "parity",
        placement_kind: str = "power_of_d",
        engine_overrides: dict | None = None,
        reorg_overrides: dict | None = None,
        offload_compactions: bool = False,
        manifest_replicas: int = 3,
        stoc_backend_factory=None,
        simulated_disk_factory=None,
    ):
        from .compaction import (
            RoundRobinOffloader,
            make_inline_compactor,
            make_stoc_compaction_runner,
        )
        from .config import build_config
        from .coordinator import Coordinator
        from .dranges import ReorgPolicy
        from .engine import EngineConfig, RangeEngine
        from .logc import LogContext
        from .ltc import LTCNode
        from .manifest import ManifestLog
        from .placement import PlacementPolicy, ScatterContext
        from .stoc import RamDisk, StoCClient, StorageComponent

        params.validate()
        self.params = params
        self.seed = seed
        self.log_mode = log_mode
        self.fabric = Fabric()
        self.router = Router(self.fabric)
        self.coordinator = Coordinator(build_config(params, key_space, seed))

        self.stocs = {}
        for i, sid in enumerate(params.stoc_ids()):
            backend = stoc_backend_factory(sid) if stoc_backend_factory else RamDisk()
            disk = simulated_disk_factory(sid) if simulated_disk_factory else None
            stoc = StorageComponent(
                sid, self.fabric, backend, region_size=params.tau_bytes, simulated_disk=disk
            )
            stoc._router = self.router
            self.router.register(sid, stoc)
            self.stocs[sid] = stoc

        self.placement_policy = PlacementPolicy(
            kind=placement_kind,
            min_fragment_size=min(2048, params.tau_bytes),
        )
        self.scheme = scheme
        self.engine_overrides = dict(engine_overrides or {})
        self.reorg_overrides = dict(reorg_overrides or {})
        self.manifest_replicas = manifest_replicas
        self.offload = offload_compactions

        if offload_compactions:
            runner = make_stoc_compaction_runner(
                self.stoc_roster, self.placement_policy, scheme, params.rho, seed=seed
            )
            for stoc in self.stocs.values():
                stoc.compaction_runner = runner

        self.ltcs = {}
        self.clients = {}
        for lid in params.ltc_ids():
            node = LTCNode(lid, self.fabric, self.router)
            self.ltcs[lid] = node
            self.clients[lid] = StoCClient(self.fabric, f"{lid}-sc", router=self.router)
        self.manifests = {}
        for rid, lid in self.coordinator.config.assignment:
            lo, hi = self.coordinator.config.ranges[rid]
            engine = self._build_engine(lid, rid, lo, hi)
            self.ltcs[lid].add_range(rid, engine)
        self._compaction_factories()

    # -- wiring helpers -----------------------------------------------------

    def stoc_roster(self):
        members = set(self.coordinator.config.stoc_members)
        return [sid for sid, stoc in self.stocs.items() if stoc.alive and sid in members]

    def engine_config(self):
        from .engine import EngineConfig

        config = EngineConfig(
            theta=self.params.theta,
            gamma=self.params.gamma,
            delta=self.params.delta,
            tau_bytes=self.params.tau_bytes,
        )
        for key, value in self.engine_overrides.items():
            setattr(config, key, value)
        return config

    def reorg_policy(self):
        from .dranges import ReorgPolicy

        kwargs = dict(theta=self.params.theta, gamma=self.params.gamma)
        kwargs.update(self.reorg_overrides)
        return ReorgPolicy(**kwargs)

    def _engine_parts(self, node, range_id: int) -> dict:
        from .logc import LogContext
        from .manifest import ManifestLog
        from .placement import ScatterContext

        client = self.clients[node.node_id]
        scatter = ScatterContext(
            client,
            self.stoc_roster,
            self.placement_policy,
            scheme=self.scheme,
            rho=self.params.rho,
            seed=self.seed + range_id,
        )
        log_ctx = None
        if self.log_mode != "off":
            log_ctx = LogContext(
                client, self.stoc_roster, mode=self.log_mode, seed=self.seed + range_id
            )
        manifest = self.manifests.get(range_id)
        if manifest is None:
            manifest = ManifestLog(
                client, self.stoc_roster, range_id,
                replicas=self.manifest_replicas, seed=self.seed + range_id,
            )
            self.manifests[range_id] = manifest
        else:
            manifest.client = client
        return {
            "client": client,
            "stoc_roster": self.stoc_roster,
            "scatter": scatter,
            "log_ctx": log_ctx,
            "manifest": manifest,
            "config": self.engine_config(),
            "reorg_policy": self.reorg_policy(),
            "compactor_factory": self._compactor_factory,
        }

    def _build_engine(self, lid: str, rid: int, lo: int, hi: int):
        from .engine import RangeEngine

        parts = self._engine_parts(self.ltcs[lid], rid)
        engine = RangeEngine(
            rid, lo, hi, parts["scatter"],
            config=parts["config"],
            reorg_policy=parts["reorg_policy"],
            log_ctx=parts["log_ctx"],
            manifest=parts["manifest"],
            seed=self.seed + rid,
        )
        engine.compactor = self._compactor_factory(engine)
        return engine

    def _compaction_factories(self):
        pass

    def _compactor_factory(self, engine):
        from .compaction import RoundRobinOffloader, make_inline_compactor

        if self.offload:
            owner = None
            for lid, node in self.ltcs.items():
                if engine in node.engines.values():
                    owner = lid
            client = self.clients.get(owner or next(iter(self.clients)))
            offloader = RoundRobinOffloader(client, self.stoc_roster)
            return make_inline_compactor(engine, offloader)
        return make_inline_compactor(engine)

    # -- operations driver -----------------------------------------------------

    def execute(self, op: str, key: int, value: bytes | None = None, count: int = 0):
        """Route one operation by the current configuration, following
        redirects while a range migrates (requests block, never error)."""
        from .config import route_key
        from .ltc import Redirected

        for _ in range(16):
            ltc_id, rid = route_key(self.coordinator.config, key)
            node = self.ltcs.get(ltc_id)
            if node is None or not node.alive:
                raise ClusterError(f"{ltc_id} is down")
            try:
                return node.execute(op, rid, key, value=value, count=count)
            except Redirected as redirect:
                node = self.ltcs.get(redirect.target)
                if node is None:
                    raise
                try:
                    return node.execute(op, rid, key, value=value, count=count)
                except Redirected:
                    continue
        raise ClusterError("redirect loop")

    def put(self, key: int, value: bytes) -> int:
        return self.execute("put", key, value=value)

    def delete(self, key: int) -> int:
        return self.execute("delete", key)

    def get(self, key: int):
        return self.execute("get", key)

    def scan(self, start_key: int, count: int):
        """Cross-range scan, stitched range by range (read committed)."""
        from .config import route_key

        out = []
        key = start_key
        lo, hi = self.coordinator.config.key_space
        while len(out) < count and key < hi:
            ltc_id, rid = route_key(self.coordinator.config, key)
            rows = self.execute("scan", key, count=count - len(out))
            out.extend(rows)
            key = self.coordinator.config.ranges[rid][1]
        return out[:count]

    # -- elasticity entry points --------------------------------------------------

    def migrate_range(self, range_id: int, dst_ltc: str, n_replay_workers: int = 4):
        from .elasticity import migrate_range

        return migrate_range(
            self.coordinator,
            self.ltcs,
            self.fabric,
            range_id,
            dst_ltc,
            lambda node, rid: self._engine_parts(node, rid),
            n_replay_workers=n_replay_workers,
        )

    def add_ltc(self, lid: str):
        from .ltc import LTCNode
        from .stoc import StoCClient

        node = LTCNode(lid, self.fabric, self.router)
        self.ltcs[lid] = node
        self.clients[lid] = StoCClient(self.fabric, f"{lid}-sc", router=self.router)
        return node

    def add_stoc(self, sid: str, backend=None, simulated_disk=None):
        from .elasticity import add_stoc
        from .stoc import RamDisk, StorageComponent

        if sid not in self.stocs or not self.stocs[sid].alive:
            stoc = StorageComponent(
                sid, self.fabric, backend or RamDisk(),
                region_size=self.params.tau_bytes, simulated_disk=simulated_disk,
            )
            stoc._router = self.router
            self.router.register(sid, stoc)
            self.stocs[sid] = stoc
            if self.offload:
                from .compaction import make_stoc_compaction_runner

                stoc.compaction_runner = make_stoc_compaction_runner(
                    self.stoc_roster, self.placement_policy, self.scheme,
                    self.params.rho, seed=self.seed,
                )
        any_client = next(iter(self.clients.values()))
        return add_stoc(self.coordinator, any_client, self.ltcs, sid)

    def drain_stoc(self, sid: str):
        from .elasticity import remove_stoc_graceful

        any_client = next(iter(self.clients.values()))
        report = remove_stoc_graceful(self.coordinator, any_client, self.ltcs, sid, seed=self.seed)
        return report

    def kill_ltc(self, lid: str):
        self.ltcs[lid].crash()
        self.coordinator.kill_node(lid)
        self.coordinator.wait_for_lease_expiry(lid)

    def recover_failed_ltc(self, lid: str, n_workers: int = 1):
        """Reassign the dead LTC's ranges and rebuild them on the survivors."""
        from .recovery import recover_range

        plan = self.coordinator.handle_ltc_failure(lid)
        reports = {}
        for rid, target in sorted(plan.items()):
            node = self.ltcs[target]
            parts = self._engine_parts(node, rid)
            lo, hi = self.coordinator.config.ranges[rid]
            engine, report = recover_range(
                rid, lo, hi,
                parts["client"], parts["stoc_roster"], parts["scatter"],
                parts["config"], reorg_policy=parts["reorg_policy"],
                log_ctx=parts["log_ctx"], manifest=parts["manifest"],
                n_workers=n_workers, seed=self.seed + rid,
            )
            engine.compactor = self._compactor_factory(engine)
            node.add_range(rid, engine)
            reports[rid] = report
        return plan, reports

    def gc_obsolete(self):
        from .elasticity import gc_obsolete_files

        any_client = next(iter(self.clients.values()))
        return gc_obsolete_files(self.coordinator, any_client, self.ltcs)

    def total_stoc_bytes_written(self) -> int:
        return sum(s.bytes_written for s in self.stocs.values())
