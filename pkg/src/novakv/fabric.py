"""Emulated one-sided memory fabric.

Reproduces the semantics of one-sided READ/WRITE plus SEND over
reliable-connected channel pairs: a remote peer can read or write a
registered memory region directly, without any code running on the owning
node. A WRITE may carry a 4-byte immediate value, which surfaces as a
notification at the region owner. SEND delivers an opaque message into the
receiver's inbox in per-channel FIFO order.

Two backends share this surface: the in-process one below (shared address
space, deterministic, thread-safe) and the TCP one in fabric_tcp.py. Higher
layers must not depend on ordering between a WRITE and a SEND issued on
different channels; only per-channel FIFO is guaranteed.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass, field

DEFAULT_XCHG_CHANNELS = 4

# Exponential back-off for idle pollers: 10us doubling up to 5ms.
BACKOFF_INITIAL_S = 10e-6
BACKOFF_CAP_S = 5e-3

OP_READ = "READ"
OP_WRITE = "WRITE"
OP_SEND = "SEND"


class FabricError(Exception):
    pass


@dataclass(frozen=True)
class RegionHandle:
    """What a peer needs to address a registered region one-sidedly."""

    node: str
    region_id: int
    length: int


@dataclass(frozen=True)
class Completion:
    op: str
    peer: str
    status: str = "ok"
    immediate: int | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class Message:
    src: str
    channel: int
    seq: int
    payload: bytes


@dataclass
class _Region:
    handle: RegionHandle
    contents: bytearray


@dataclass
class _NodeState:
    node_id: str
    channels: int
    inbox: deque = field(default_factory=deque)
    notifications: deque = field(default_factory=deque)
    # Messages delivered + notifications enqueued. One-sided READ/WRITE
    # without immediate data must never move this counter.
    cpu_events: int = 0


class Fabric:
    """In-process fabric backend.

    All state lives in one address space; a single lock makes each
    operation atomic, which also gives per-write atomicity at byte
    granularity. Region contents may be written concurrently by multiple
    peers; callers must partition offsets themselves.
    """

    def __init__(self, channels_per_node: int = DEFAULT_XCHG_CHANNELS):
        self._lock = threading.RLock()
        self._nodes: dict[str, _NodeState] = {}
        self._regions: dict[tuple[str, int], _Region] = {}
        self._region_ids = itertools.count(1)
        self._channel_seq: dict[tuple[str, str, int], int] = {}
        self._channels_per_node = channels_per_node

    # -- membership ----------------------------------------------------

    def register_node(self, node_id: str, channels: int | None = None) -> None:
        with self._lock:
            if node_id in self._nodes:
                raise FabricError(f"node {node_id!r} already registered")
            self._nodes[node_id] = _NodeState(
                node_id, channels or self._channels_per_node
            )

    def remove_node(self, node_id: str) -> None:
        """Drop a node and all its regions (models a machine loss)."""
        with self._lock:
            self._nodes.pop(node_id, None)
            for key in [k for k in self._regions if k[0] == node_id]:
                del self._regions[key]

    def nodes(self) -> list[str]:
        with self._lock:
            return list(self._nodes)

    def _node(self, node_id: str) -> _NodeState:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise FabricError(f"unknown node {node_id!r}") from None

    def cpu_events(self, node_id: str) -> int:
        with self._lock:
            return self._node(node_id).cpu_events

    # -- regions -------------------------------------------------------

    def register_region(self, node_id: str, length: int) -> RegionHandle:
        if length <= 0:
            raise FabricError("region length must be positive")
        with self._lock:
            self._node(node_id)
            handle = RegionHandle(node_id, next(self._region_ids), length)
            self._regions[(node_id, handle.region_id)] = _Region(
                handle, bytearray(length)
            )
            return handle

    def deregister_region(self, handle: RegionHandle) -> None:
        with self._lock:
            self._regions.pop((handle.node, handle.region_id), None)

    def _region(self, node: str, region_id: int) -> _Region:
        try:
            return self._regions[(node, region_id)]
        except KeyError:
            raise FabricError(f"unknown region {region_id} on {node!r}") from None

    # -- one-sided verbs -----------------------------------------------

    def one_sided_write(
        self,
        handle: RegionHandle,
        offset: int,
        data: bytes,
        immediate: int | None = None,
    ) -> Completion:
        """Write bytes into a remote region, bypassing the owner node.

        A completion at the sender implies remote visibility
        (reliable-connected semantics). With `immediate` set, the owner's
        notification queue gains (immediate, len(data)).
        """
        with self._lock:
            try:
                region = self._region(handle.node, handle.region_id)
            except FabricError as exc:
                return Completion(OP_WRITE, handle.node, "error", error=str(exc))
            if offset < 0 or offset + len(data) > len(region.contents):
                return Completion(
                    OP_WRITE,
                    handle.node,
                    "error",
                    error=f"write [{offset},{offset + len(data)}) out of bounds "
                    f"for region of {len(region.contents)} bytes",
                )
            region.contents[offset : offset + len(data)] = data
            if immediate is not None:
                owner = self._node(handle.node)
                owner.notifications.append((immediate & 0xFFFFFFFF, len(data)))
                owner.cpu_events += 1
            return Completion(OP_WRITE, handle.node, immediate=immediate)

    def one_sided_read(self, handle: RegionHandle, offset: int, length: int) -> bytes:
        """Snapshot remote bytes without involving the owner node."""
        with self._lock:
            region = self._region(handle.node, handle.region_id)
            if length < 0 or offset < 0 or offset + length > len(region.contents):
                raise FabricError(
                    f"read [{offset},{offset + length}) out of bounds "
                    f"for region of {len(region.contents)} bytes"
                )
            return bytes(region.contents[offset : offset + length])

    # -- two-sided messaging --------------------------------------------

    def send_request(
        self, src: str, dst: str, payload: bytes, channel: int = 0
    ) -> Completion:
        """Deliver a message to dst's inbox; FIFO within (src, dst, channel).

        Exchange channel k on the sender pairs only with channel k on the
        receiver, so the channel index must be valid on both sides.
        """
        with self._lock:
            self._node(src)
            try:
                receiver = self._node(dst)
            except FabricError as exc:
                return Completion(OP_SEND, dst, "error", error=str(exc))
            if channel >= min(self._node(src).channels, receiver.channels):
                return Completion(
                    OP_SEND, dst, "error", error=f"no paired channel {channel}"
                )
            key = (src, dst, channel)
            seq = self._channel_seq.get(key, 0)
            self._channel_seq[key] = seq + 1
            receiver.inbox.append(Message(src, channel, seq, bytes(payload)))
            receiver.cpu_events += 1
            return Completion(OP_SEND, dst)

    def poll_requests(self, node_id: str, max_messages: int | None = None) -> list[Message]:
        with self._lock:
            inbox = self._node(node_id).inbox
            n = len(inbox) if max_messages is None else min(max_messages, len(inbox))
            return [inbox.popleft() for _ in range(n)]

    def poll_notifications(self, node_id: str) -> list[tuple[int, int]]:
        with self._lock:
            queue = self._node(node_id).notifications
            out = list(queue)
            queue.clear()
            return out

    def pending_messages(self, node_id: str) -> int:
        with self._lock:
            return len(self._node(node_id).inbox)


class BackoffPoller:
    """Polls a node's inbox, backing off exponentially while idle.

    The idle interval starts at 10us, doubles per empty poll up to a 5ms
    cap, and resets as soon as a message arrives. `sleep_fn` is injectable
    so tests can observe the schedule without real sleeping.
    """

    def __init__(
        self,
        fabric,
        node_id: str,
        initial_s: float = BACKOFF_INITIAL_S,
        cap_s: float = BACKOFF_CAP_S,
        sleep_fn=time.sleep,
    ):
        self.fabric = fabric
        self.node_id = node_id
        self.initial_s = initial_s
        self.cap_s = cap_s
        self.sleep_fn = sleep_fn
        self.current_interval_s = initial_s
        self.interval_log: list[float] = []

    def poll_once(self) -> list[Message]:
        messages = self.fabric.poll_requests(self.node_id)
        if messages:
            self.current_interval_s = self.initial_s
        else:
            self.interval_log.append(self.current_interval_s)
            self.sleep_fn(self.current_interval_s)
            self.current_interval_s = min(self.current_interval_s * 2, self.cap_s)
        return messages

    def poll_until(self, deadline_s: float) -> list[Message]:
        end = time.monotonic() + deadline_s
        while time.monotonic() < end:
            messages = self.poll_once()
            if messages:
                return messages
        return []
