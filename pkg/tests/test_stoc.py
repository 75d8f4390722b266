import hashlib
import random

import pytest

from novakv.cluster import Router
from novakv.fabric import Fabric
from novakv.stoc import (
    DirDisk,
    RamDisk,
    SimulatedDisk,
    StoCClient,
    StoCError,
    StorageComponent,
    format_file_name,
    parse_file_name,
)

REGION = 64 * 1024


def make_stoc(tmp_path=None, backend=None, region_size=REGION):
    fabric = Fabric()
    router = Router(fabric)
    if backend is None:
        backend = DirDisk(str(tmp_path)) if tmp_path is not None else RamDisk()
    stoc = StorageComponent("stoc0", fabric, backend, region_size=region_size)
    stoc._router = router
    router.register("stoc0", stoc)
    client = StoCClient(fabric, "client0", router=router)
    return fabric, router, stoc, client


# -- file name codec ----------------------------------------------------


def test_file_name_round_trip():
    for tup in [(7, 42, "frag0"), (0, 1, "parity"), (3, 9, "meta"), (1, 0, "manifest"), (2, 15, "log")]:
        assert parse_file_name(format_file_name(*tup)) == tup


def test_file_name_rejects_garbage():
    with pytest.raises(StoCError):
        parse_file_name("lost+found")
    with pytest.raises(StoCError):
        parse_file_name("1-2-frag.nvs")


# -- in-memory files ----------------------------------------------------


def test_mem_append_advances_offset():
    _, _, stoc, client = make_stoc()
    writer = client.open_mem_file("stoc0", "5-1-log.nvs")
    writer.append(b"x" * 100)
    assert writer.append_offset == 100


def test_mem_append_overflow_requests_new_region():
    _, _, stoc, client = make_stoc(region_size=128)
    writer = client.open_mem_file("stoc0", "5-1-log.nvs")
    writer.append(b"a" * 100)
    handled = stoc.requests_handled
    writer.append(b"b" * 100)  # does not fit: one extend request
    assert stoc.requests_handled == handled + 1
    assert len(writer.regions) == 2
    assert writer.read_all() == b"a" * 100 + b"b" * 100


def test_mem_read_all_is_concatenation():
    _, _, stoc, client = make_stoc(region_size=256)
    writer = client.open_mem_file("stoc0", "5-2-log.nvs")
    rng = random.Random(1)
    parts = [rng.randbytes(rng.randrange(1, 90)) for _ in range(64)]
    for part in parts:
        writer.append(part)
    assert writer.read_all() == b"".join(parts)


def test_mem_empty_file_reads_empty():
    _, _, _, client = make_stoc()
    writer = client.open_mem_file("stoc0", "5-3-log.nvs")
    assert writer.read_all() == b""


def test_mem_appends_and_reads_bypass_stoc_requests():
    _, _, stoc, client = make_stoc()
    writer = client.open_mem_file("stoc0", "6-1-log.nvs")
    handled = stoc.requests_handled
    for i in range(100):
        writer.append(bytes([i]))
    writer.read_all()
    assert stoc.requests_handled == handled  # only open/delete touch the CPU
    client.delete_mem_file("stoc0", "6-1-log.nvs")
    assert stoc.requests_handled == handled + 1


def test_mem_large_file_checksum_oracle():
    # Many-region file: chunked fetch must equal what went in.
    _, _, _, client = make_stoc(region_size=4096)
    writer = client.open_mem_file("stoc0", "7-1-log.nvs")
    rng = random.Random(9)
    digest = hashlib.sha256()
    for _ in range(200):
        chunk = rng.randbytes(rng.randrange(1, 4000))
        digest.update(chunk)
        writer.append(chunk)
    assert len(writer.regions) >= 2
    assert hashlib.sha256(writer.read_all()).digest() == digest.digest()


# -- persistent files ----------------------------------------------------


def test_persistent_append_read_round_trip(tmp_path):
    _, _, _, client = make_stoc(tmp_path)
    block = random.Random(2).randbytes(1024)
    handle = client.append_persistent_block("stoc0", "7-42-frag0.nvs", block)
    assert handle.offset == 0 and handle.length == 1024
    assert client.read_block("stoc0", handle) == block


def test_persistent_partial_read(tmp_path):
    _, _, _, client = make_stoc(tmp_path)
    block = bytes(range(256))
    handle = client.append_persistent_block("stoc0", "7-43-frag0.nvs", block)
    assert client.read_block("stoc0", handle, offset=16, length=8) == bytes(range(16, 24))


def test_paper_scale_block_sizes(tmp_path):
    # Data fragments around 5.3 MiB and metadata blocks around 200 KiB.
    _, _, _, client = make_stoc(tmp_path)
    frag = b"\x5a" * (5 * 1024 * 1024 + 300 * 1024)
    meta = b"\xa5" * (200 * 1024)
    h1 = client.append_persistent_block("stoc0", "1-1-frag0.nvs", frag)
    h2 = client.append_persistent_block("stoc0", "1-1-meta.nvs", meta)
    assert client.read_block("stoc0", h1) == frag
    assert client.read_block("stoc0", h2) == meta


def test_many_reads_of_distinct_blocks(tmp_path):
    _, _, _, client = make_stoc(tmp_path)
    rng = random.Random(5)
    handles = {}
    for i in range(100):
        block = rng.randbytes(rng.randrange(64, 2048))
        handles[i] = (client.append_persistent_block("stoc0", f"9-{i}-frag0.nvs", block), hashlib.sha256(block).digest())
    for handle, want in handles.values():
        assert hashlib.sha256(client.read_block("stoc0", handle)).digest() == want


def test_enumerate_round_trip(tmp_path):
    _, _, _, client = make_stoc(tmp_path)
    files, corrupt = client.enumerate_files("stoc0")
    assert files == [] and corrupt == []
    written = set()
    for i in range(3):
        client.append_persistent_block("stoc0", format_file_name(7, 42, f"frag{i}"), b"x" * 10)
        written.add((7, 42, f"frag{i}"))
    files, corrupt = client.enumerate_files("stoc0")
    assert {(f["range_id"], f["file_number"], f["kind"]) for f in files} == written
    assert corrupt == []


def test_enumerate_reports_corrupt_names(tmp_path):
    fabric, router, stoc, client = make_stoc(tmp_path)
    stoc.backend.append("junk-file.nvs", b"zz")
    client.append_persistent_block("stoc0", "1-2-meta.nvs", b"ok")
    files, corrupt = client.enumerate_files("stoc0")
    assert corrupt == ["junk-file.nvs"]
    assert [(f["range_id"], f["file_number"], f["kind"]) for f in files] == [(1, 2, "meta")]


def test_delete_file_semantics(tmp_path):
    _, _, _, client = make_stoc(tmp_path)
    names = [format_file_name(1, i, "frag0") for i in range(3)]
    handles = {n: client.append_persistent_block("stoc0", n, b"d" * 32) for n in names}
    client.delete_file("stoc0", names[0])
    client.delete_file("stoc0", names[0])  # double delete is fine
    files, _ = client.enumerate_files("stoc0")
    assert len(files) == 2
    with pytest.raises(StoCError):
        client.read_block("stoc0", handles[names[0]])


# -- durability under injected crashes -----------------------------------


@pytest.mark.parametrize("backend_kind", ["ram", "dir"])
@pytest.mark.parametrize("crash_point", ["before_open", "after_open", "before_flush", "after_flush", "after_ack"])
def test_crash_schedule_acked_implies_durable(tmp_path, backend_kind, crash_point):
    fabric = Fabric()
    router = Router(fabric)
    backend = RamDisk() if backend_kind == "ram" else DirDisk(str(tmp_path))
    stoc = StorageComponent("stoc0", fabric, backend, region_size=REGION)
    stoc._router = router
    router.register("stoc0", stoc)
    client = StoCClient(fabric, "client0", router=router)

    acked = {}
    name = format_file_name(3, 1, "frag0")
    for i in range(30):
        if i == 10:
            stoc.crash_points.add(crash_point)
        block = bytes([i]) * 100
        try:
            handle = client.append_persistent_block("stoc0", name, block)
            acked[handle] = block
        except StoCError:
            # Crashed mid-protocol: restart the component on the same disk.
            stoc.crash_points.clear()
            stoc = StorageComponent("stoc0", fabric, backend, region_size=REGION)
            stoc._router = router
            router.register("stoc0", stoc)
    # Every acknowledged block must be readable after all restarts.
    for handle, want in acked.items():
        assert client.read_block("stoc0", handle) == want


def test_crash_before_flush_loses_unacked_block(tmp_path):
    fabric, router, stoc, client = make_stoc(tmp_path)
    name = format_file_name(4, 1, "frag0")
    client.append_persistent_block("stoc0", name, b"first")
    stoc.crash_points.add("before_flush")
    with pytest.raises(StoCError):
        client.append_persistent_block("stoc0", name, b"second")
    backend = stoc.backend
    stoc2 = StorageComponent("stoc0", fabric, backend, region_size=REGION)
    stoc2._router = router
    router.register("stoc0", stoc2)
    assert backend.length(name) == len(b"first")  # unacked block absent


# -- simulated disk -------------------------------------------------------


def test_simulated_disk_queue_depth():
    disk = SimulatedDisk(us_per_kib=10.0, seek_us=100.0)
    disk.submit(1024)
    disk.submit(1024)
    assert disk.queue_depth() == 2
    disk.advance(110.0)  # first job: 100 seek + 10 transfer
    assert disk.queue_depth() == 1
    disk.advance(1000.0)
    assert disk.queue_depth() == 0
    assert disk.bytes_written == 2048


def test_stat_reports_queue_depth():
    fabric = Fabric()
    router = Router(fabric)
    disk = SimulatedDisk(us_per_kib=1000.0, seek_us=0.0)
    stoc = StorageComponent("stoc0", fabric, RamDisk(), region_size=REGION, simulated_disk=disk)
    stoc._router = router
    router.register("stoc0", stoc)
    client = StoCClient(fabric, "client0", router=router)
    client.append_persistent_block("stoc0", "1-1-frag0.nvs", b"x" * 4096)
    stat = client.stat("stoc0")
    assert stat["queue_depth"] == 1  # still in the simulated queue
    assert stat["bytes_written"] == 4096
