"""Shared builders: an in-process StoC fleet plus a range engine, and the
sorted-map oracle every randomized trace is checked against."""

from bisect import bisect_left, insort

import pytest

from novakv.cluster import Router
from novakv.compaction import make_inline_compactor
from novakv.dranges import ReorgPolicy
from novakv.engine import EngineConfig, RangeEngine
from novakv.fabric import Fabric
from novakv.logc import LogContext
from novakv.placement import PlacementPolicy, ScatterContext
from novakv.stoc import RamDisk, StoCClient, StorageComponent


class Fleet:
    def __init__(self, n_stocs=4, region_size=64 * 1024):
        self.fabric = Fabric()
        self.router = Router(self.fabric)
        self.stocs = {}
        for i in range(n_stocs):
            self.add_stoc(f"stoc{i}", region_size)
        self.client = StoCClient(self.fabric, "ltc0", router=self.router)

    def add_stoc(self, sid, region_size=64 * 1024, backend=None):
        stoc = StorageComponent(sid, self.fabric, backend or RamDisk(), region_size=region_size)
        stoc._router = self.router
        self.router.register(sid, stoc)
        self.stocs[sid] = stoc
        return stoc

    def live(self):
        return [sid for sid, s in self.stocs.items() if s.alive]


def build_engine(
    n_stocs=4,
    range_lo=0,
    range_hi=100_000,
    theta=4,
    gamma=8,
    delta=8,
    tau=8 * 1024,
    rho=2,
    scheme="parity",
    logging=False,
    replication=2,
    seed=0,
    policy_overrides=None,
    config_overrides=None,
    with_compactor=True,
):
    fleet = Fleet(n_stocs)
    scatter = ScatterContext(
        fleet.client,
        fleet.live,
        PlacementPolicy(min_fragment_size=2048),
        scheme=scheme,
        rho=rho,
        seed=seed,
    )
    log_ctx = None
    if logging:
        log_ctx = LogContext(fleet.client, fleet.live, replication=replication, seed=seed)
    config = EngineConfig(
        theta=theta,
        gamma=gamma,
        delta=delta,
        tau_bytes=tau,
        block_target=512,
        l1_base_bytes=64 * 1024,
        max_sstable_bytes=32 * 1024,
    )
    for key, value in (config_overrides or {}).items():
        setattr(config, key, value)
    policy_kwargs = dict(
        theta=theta,
        gamma=gamma,
        check_interval=512,
        sample_capacity=4096,
        min_epoch_writes=256,
    )
    policy_kwargs.update(policy_overrides or {})
    policy = ReorgPolicy(**policy_kwargs)
    engine = RangeEngine(
        range_id=1,
        range_lo=range_lo,
        range_hi=range_hi,
        scatter=scatter,
        config=config,
        reorg_policy=policy,
        log_ctx=log_ctx,
        seed=seed,
    )
    if with_compactor:
        engine.compactor = make_inline_compactor(engine)
    engine.fleet = fleet
    return engine


class Oracle:
    """Reference store: sorted map with sequence numbers."""

    def __init__(self):
        self.data = {}
        self.keys = []

    def put(self, key, value):
        if key not in self.data:
            insort(self.keys, key)
        self.data[key] = value

    def delete(self, key):
        if key not in self.data:
            insort(self.keys, key)
        self.data[key] = None

    def get(self, key):
        return self.data.get(key)

    def scan(self, start, count):
        out = []
        idx = bisect_left(self.keys, start)
        while idx < len(self.keys) and len(out) < count:
            key = self.keys[idx]
            value = self.data[key]
            if value is not None:
                out.append((key, value))
            idx += 1
        return out


@pytest.fixture
def small_engine():
    return build_engine()
