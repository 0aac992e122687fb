"""Asynchronous asymmetric M-to-N reshard message queue (in-process realization).

Tensors crossing a section boundary generally change (TP, CP) sharding.  The
queue decouples the M-to-N pattern into point-to-point channels, each with a
control subchannel (metadata: shape, section name, sender position, sequence)
and a data subchannel (payload bytes).  `push` reserves a destination slot
and returns without awaiting the receiver; `pull` blocks until every fragment
of the earliest logical tensor has arrived, gathers them per the reshard
plan, and releases the slots.

Transports are pluggable: the default moves bytes in process; an optional
loopback-socket transport speaks the documented fixed-width wire format.
Real one-sided RDMA is out of scope; what is realized here is the protocol
semantics (control/data split, slot reservation, sender-driven completion).
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import (
    ChannelClosed,
    FragmentTimeout,
    IncompatibleShapes,
    InvalidDims,
    SlotExhausted,
)

Rank = tuple[int, int]  # (tp_rank, cp_rank)
Box = tuple[tuple[int, int], ...]  # half-open (start, stop) per axis


@dataclass(frozen=True)
class ShardLayout:
    """How a logical tensor is split over a (TP, CP) grid."""

    tensor_shape: tuple[int, ...]
    tp: int = 1
    cp: int = 1
    tp_axis: int = 0
    cp_axis: int = 1

    def __post_init__(self) -> None:
        if not self.tensor_shape or any(d <= 0 for d in self.tensor_shape):
            raise InvalidDims(f"tensor_shape must be positive, got {self.tensor_shape}")
        if self.tp < 1 or self.cp < 1:
            raise InvalidDims("tp and cp degrees must be >= 1")
        ndim = len(self.tensor_shape)
        for name, axis, degree in (("tp_axis", self.tp_axis, self.tp), ("cp_axis", self.cp_axis, self.cp)):
            if degree > 1 and not 0 <= axis < ndim:
                raise InvalidDims(f"{name} {axis} out of range for {ndim}-d tensor")
        if self.tp > 1 and self.cp > 1 and self.tp_axis == self.cp_axis:
            raise InvalidDims("tp_axis and cp_axis must differ when both degrees exceed 1")
        if self.tp > 1 and self.tensor_shape[self.tp_axis] % self.tp != 0:
            raise InvalidDims(
                f"axis {self.tp_axis} ({self.tensor_shape[self.tp_axis]}) not divisible by tp={self.tp}"
            )
        if self.cp > 1 and self.tensor_shape[self.cp_axis] % self.cp != 0:
            raise InvalidDims(
                f"axis {self.cp_axis} ({self.tensor_shape[self.cp_axis]}) not divisible by cp={self.cp}"
            )

    def ranks(self) -> Iterator[Rank]:
        for t in range(self.tp):
            for c in range(self.cp):
                yield (t, c)

    def global_box(self, rank: Rank) -> Box:
        """The region of the logical tensor held by `rank`, in global coordinates."""
        t, c = rank
        if not (0 <= t < self.tp and 0 <= c < self.cp):
            raise InvalidDims(f"rank {rank} outside {self.tp}x{self.cp} grid")
        box = [(0, d) for d in self.tensor_shape]
        if self.tp > 1:
            step = self.tensor_shape[self.tp_axis] // self.tp
            box[self.tp_axis] = (t * step, (t + 1) * step)
        if self.cp > 1:
            step = self.tensor_shape[self.cp_axis] // self.cp
            box[self.cp_axis] = (c * step, (c + 1) * step)
        return tuple(box)

    def shard_shape(self, rank: Rank) -> tuple[int, ...]:
        return tuple(stop - start for start, stop in self.global_box(rank))

    def shard(self, tensor: np.ndarray, rank: Rank) -> np.ndarray:
        if tuple(tensor.shape) != self.tensor_shape:
            raise IncompatibleShapes(
                f"tensor shape {tensor.shape} != layout shape {self.tensor_shape}"
            )
        return tensor[tuple(slice(a, b) for a, b in self.global_box(rank))]


@dataclass(frozen=True)
class Transfer:
    sender: Rank
    receiver: Rank
    sender_slice: Box  # local to the sender's shard
    receiver_slice: Box  # local to the receiver's shard


@dataclass(frozen=True)
class ReshardPlan:
    src: ShardLayout
    dst: ShardLayout
    transfers: tuple[Transfer, ...]

    def for_receiver(self, rank: Rank) -> tuple[Transfer, ...]:
        return tuple(t for t in self.transfers if t.receiver == rank)

    def for_sender(self, rank: Rank) -> tuple[Transfer, ...]:
        return tuple(t for t in self.transfers if t.sender == rank)

    def senders_of(self, receiver: Rank) -> tuple[Rank, ...]:
        return tuple(sorted({t.sender for t in self.transfers if t.receiver == receiver}))


def plan_reshard(src: ShardLayout, dst: ShardLayout) -> ReshardPlan:
    """Minimal point-to-point transfer set taking `src` sharding to `dst`.

    One transfer per (sender, receiver) pair with overlapping regions; the
    receiver slices tile each destination shard exactly once.
    """
    if src.tensor_shape != dst.tensor_shape:
        raise IncompatibleShapes(
            f"layouts disagree on tensor shape: {src.tensor_shape} vs {dst.tensor_shape}"
        )
    if (src.tp_axis, src.cp_axis) != (dst.tp_axis, dst.cp_axis):
        raise IncompatibleShapes(
            "layouts must agree on tp_axis/cp_axis "
            f"({src.tp_axis},{src.cp_axis}) vs ({dst.tp_axis},{dst.cp_axis})"
        )
    transfers: list[Transfer] = []
    for receiver in dst.ranks():
        r_box = dst.global_box(receiver)
        for sender in src.ranks():
            s_box = src.global_box(sender)
            overlap = tuple(
                (max(a0, b0), min(a1, b1)) for (a0, a1), (b0, b1) in zip(s_box, r_box)
            )
            if any(start >= stop for start, stop in overlap):
                continue
            transfers.append(
                Transfer(
                    sender=sender,
                    receiver=receiver,
                    sender_slice=tuple(
                        (start - s0, stop - s0) for (start, stop), (s0, _) in zip(overlap, s_box)
                    ),
                    receiver_slice=tuple(
                        (start - r0, stop - r0) for (start, stop), (r0, _) in zip(overlap, r_box)
                    ),
                )
            )
    return ReshardPlan(src=src, dst=dst, transfers=tuple(transfers))


def apply_plan(plan: ReshardPlan, shards_by_sender: dict[Rank, np.ndarray]) -> dict[Rank, np.ndarray]:
    """Reference scatter/gather of a full reshard, used by tests and pull()."""
    out: dict[Rank, np.ndarray] = {}
    for receiver in plan.dst.ranks():
        shape = plan.dst.shard_shape(receiver)
        sample = next(iter(shards_by_sender.values()))
        buf = np.empty(shape, dtype=sample.dtype)
        for t in plan.for_receiver(receiver):
            src_view = shards_by_sender[t.sender][tuple(slice(a, b) for a, b in t.sender_slice)]
            buf[tuple(slice(a, b) for a, b in t.receiver_slice)] = src_view
        out[receiver] = buf
    return out


# --- metadata and transports -------------------------------------------------


@dataclass(frozen=True)
class MessageMeta:
    """Control-subchannel record identifying one fragment of one tensor."""

    tensor_shape: tuple[int, ...]
    element_size_bytes: int
    section_name: str
    sender_position: Rank
    sample_id: int
    sequence_number: int = -1  # assigned by the channel on push

    @property
    def nbytes(self) -> int:
        n = self.element_size_bytes
        for d in self.tensor_shape:
            n *= d
        return n


class Transport:
    """Moves framed (meta, payload) pairs from one sender to one receiver."""

    def send(self, meta: MessageMeta, payload: bytes) -> None:
        raise NotImplementedError

    def recv(self) -> tuple[MessageMeta, bytes]:
        raise NotImplementedError

    def close(self) -> None:  # pragma: no cover - trivial default
        pass


class InProcessTransport(Transport):
    def __init__(self) -> None:
        self._items: list[tuple[MessageMeta, bytes]] = []
        self._cond = threading.Condition()

    def send(self, meta: MessageMeta, payload: bytes) -> None:
        with self._cond:
            self._items.append((meta, payload))
            self._cond.notify_all()

    def recv_nowait(self) -> Optional[tuple[MessageMeta, bytes]]:
        with self._cond:
            if self._items:
                return self._items.pop(0)
            return None

    def recv(self) -> tuple[MessageMeta, bytes]:
        with self._cond:
            while not self._items:
                self._cond.wait()
            return self._items.pop(0)


# Control wire format (little endian), one frame per message:
#   magic   u32 = 0x4D535251 ("QRSM")
#   seq     u64
#   sample  u64
#   tp_rank u16
#   cp_rank u16
#   esize   u16   element size in bytes
#   ndim    u16
#   dims    u64 * ndim
#   slen    u16   section-name byte length
#   section utf-8 bytes
# Data frames on the data socket:
#   seq     u64
#   nbytes  u64
#   payload raw bytes
_MAGIC = 0x4D535251
_CTRL_HEAD = struct.Struct("<IQQHHHH")
_DATA_HEAD = struct.Struct("<QQ")


class SocketTransport(Transport):
    """Loopback TCP realization of the control/data subchannel pair."""

    def __init__(self, ctrl: socket.socket, data: socket.socket) -> None:
        self._ctrl = ctrl
        self._data = data
        self._lock = threading.Lock()

    @classmethod
    def pair(cls) -> tuple["SocketTransport", "SocketTransport"]:
        ctrl_a, ctrl_b = socket.socketpair()
        data_a, data_b = socket.socketpair()
        return cls(ctrl_a, data_a), cls(ctrl_b, data_b)

    def send(self, meta: MessageMeta, payload: bytes) -> None:
        head = _CTRL_HEAD.pack(
            _MAGIC,
            meta.sequence_number,
            meta.sample_id,
            meta.sender_position[0],
            meta.sender_position[1],
            meta.element_size_bytes,
            len(meta.tensor_shape),
        )
        dims = struct.pack(f"<{len(meta.tensor_shape)}Q", *meta.tensor_shape)
        section = meta.section_name.encode("utf-8")
        frame = head + dims + struct.pack("<H", len(section)) + section
        with self._lock:
            self._ctrl.sendall(frame)
            self._data.sendall(_DATA_HEAD.pack(meta.sequence_number, len(payload)) + payload)

    def _read_exact(self, sock: socket.socket, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise ChannelClosed("socket closed mid-frame")
            buf += chunk
        return buf

    def recv(self) -> tuple[MessageMeta, bytes]:
        magic, seq, sample, tp_rank, cp_rank, esize, ndim = _CTRL_HEAD.unpack(
            self._read_exact(self._ctrl, _CTRL_HEAD.size)
        )
        if magic != _MAGIC:
            raise ChannelClosed(f"bad control magic 0x{magic:08x}")
        dims = struct.unpack(f"<{ndim}Q", self._read_exact(self._ctrl, 8 * ndim))
        (slen,) = struct.unpack("<H", self._read_exact(self._ctrl, 2))
        section = self._read_exact(self._ctrl, slen).decode("utf-8")
        dseq, nbytes = _DATA_HEAD.unpack(self._read_exact(self._data, _DATA_HEAD.size))
        if dseq != seq:
            raise ChannelClosed(f"data/control sequence mismatch: {dseq} != {seq}")
        payload = self._read_exact(self._data, nbytes)
        meta = MessageMeta(
            tensor_shape=tuple(dims),
            element_size_bytes=esize,
            section_name=section,
            sender_position=(tp_rank, cp_rank),
            sample_id=sample,
            sequence_number=seq,
        )
        return meta, payload

    def close(self) -> None:
        self._ctrl.close()
        self._data.close()


# --- slot accounting ----------------------------------------------------------


@dataclass
class SlotBudget:
    """Destination-memory quota with explicit backpressure.

    Exhaustion raises SlotExhausted at push time; nothing is ever dropped.
    """

    capacity_bytes: Optional[int] = None
    reserved_bytes: int = 0
    peak_bytes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def reserve(self, nbytes: int) -> None:
        with self._lock:
            if self.capacity_bytes is not None and self.reserved_bytes + nbytes > self.capacity_bytes:
                raise SlotExhausted(
                    f"slot budget exhausted: {self.reserved_bytes} + {nbytes} > "
                    f"{self.capacity_bytes} bytes",
                    reserved=self.reserved_bytes,
                    request=nbytes,
                )
            self.reserved_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.reserved_bytes)

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.reserved_bytes -= nbytes


class Channel:
    """One sender -> one receiver path; FIFO by per-channel sequence number."""

    def __init__(
        self,
        sender: Rank,
        receiver: Rank,
        transport: Optional[Transport] = None,
        budget: Optional[SlotBudget] = None,
    ) -> None:
        self.sender = sender
        self.receiver = receiver
        self.transport = transport or InProcessTransport()
        self.budget = budget or SlotBudget()
        self._next_seq = 0
        self._closed = False
        self._lock = threading.Lock()

    def push(self, fragment: np.ndarray, meta: MessageMeta) -> int:
        """Reserve a destination slot, ship metadata then payload; non-blocking.

        Returns the assigned sequence number as the acknowledgment token.
        """
        if self._closed:
            raise ChannelClosed(f"channel {self.sender}->{self.receiver} is closed")
        if tuple(fragment.shape) != meta.tensor_shape:
            raise IncompatibleShapes(
                f"fragment shape {tuple(fragment.shape)} != declared {meta.tensor_shape}"
            )
        if fragment.dtype.itemsize != meta.element_size_bytes:
            raise IncompatibleShapes(
                f"fragment element size {fragment.dtype.itemsize} != declared "
                f"{meta.element_size_bytes}"
            )
        payload = np.ascontiguousarray(fragment).tobytes()
        self.budget.reserve(len(payload))
        with self._lock:
            seq = self._next_seq
            self._next_seq += 1
        stamped = MessageMeta(
            tensor_shape=meta.tensor_shape,
            element_size_bytes=meta.element_size_bytes,
            section_name=meta.section_name,
            sender_position=meta.sender_position,
            sample_id=meta.sample_id,
            sequence_number=seq,
        )
        self.transport.send(stamped, payload)
        return seq

    def close(self) -> None:
        self._closed = True
        self.transport.close()


class Endpoint:
    """Receiver side: gathers the earliest logical tensor from M channels."""

    def __init__(
        self,
        receiver: Rank,
        plan: ReshardPlan,
        channels: dict[Rank, Channel],
        dtype: np.dtype,
        timeout: Optional[float] = None,
    ) -> None:
        self.receiver = receiver
        self.plan = plan
        self.channels = channels
        self.dtype = np.dtype(dtype)
        self.timeout = timeout
        self.pulled_tensors = 0
        expected = plan.senders_of(receiver)
        missing = [r for r in expected if r not in channels]
        if missing:
            raise IncompatibleShapes(
                f"receiver {receiver} lacks channels from senders {missing}"
            )
        self._expected = expected

    def pull(self, timeout: Optional[float] = None) -> tuple[np.ndarray, MessageMeta]:
        """Assemble this receiver's shard of the earliest logical tensor.

        Blocks until every contributing sender's next fragment arrives;
        raises FragmentTimeout naming the missing senders otherwise.
        """
        timeout = self.timeout if timeout is None else timeout
        fragments: dict[Rank, tuple[MessageMeta, bytes]] = {}
        for sender in self._expected:
            transport = self.channels[sender].transport
            if isinstance(transport, InProcessTransport):
                item = self._recv_inprocess(transport, timeout, sender)
            else:
                item = transport.recv()
            fragments[sender] = item

        metas = [m for m, _ in fragments.values()]
        sections = {m.section_name for m in metas}
        sample_ids = {m.sample_id for m in metas}
        if len(sections) > 1 or len(sample_ids) > 1:
            raise IncompatibleShapes(
                f"fragment streams disagree: sections={sorted(sections)}, "
                f"samples={sorted(sample_ids)}"
            )

        shape = self.plan.dst.shard_shape(self.receiver)
        buf = np.empty(shape, dtype=self.dtype)
        released = 0
        for transfer in self.plan.for_receiver(self.receiver):
            meta, payload = fragments[transfer.sender]
            frag = np.frombuffer(payload, dtype=self.dtype).reshape(meta.tensor_shape)
            # Senders ship exactly the per-receiver slice, so the local copy
            # lands as one contiguous block.
            buf[tuple(slice(a, b) for a, b in transfer.receiver_slice)] = frag
            released += len(payload)
        for sender in self._expected:
            self.channels[sender].budget.release(len(fragments[sender][1]))
        self.pulled_tensors += 1
        ref = metas[0]
        summary = MessageMeta(
            tensor_shape=shape,
            element_size_bytes=self.dtype.itemsize,
            section_name=ref.section_name,
            sender_position=self.receiver,
            sample_id=ref.sample_id,
            sequence_number=ref.sequence_number,
        )
        return buf, summary

    def _recv_inprocess(
        self, transport: InProcessTransport, timeout: Optional[float], sender: Rank
    ) -> tuple[MessageMeta, bytes]:
        deadline = None if timeout is None else timeout
        with transport._cond:
            if not transport._items:
                transport._cond.wait(deadline)
            if not transport._items:
                raise FragmentTimeout(
                    f"receiver {self.receiver} timed out waiting for sender {sender}",
                    receiver=str(self.receiver),
                    sender=str(sender),
                )
            return transport._items.pop(0)


def connect(
    plan: ReshardPlan,
    dtype: np.dtype = np.dtype("float32"),
    slot_budget_bytes: Optional[int] = None,
    timeout: Optional[float] = None,
    transport_factory=None,
) -> tuple[dict[tuple[Rank, Rank], Channel], dict[Rank, Endpoint]]:
    """Wire up every point-to-point channel the plan needs.

    Returns ({(sender, receiver): Channel}, {receiver: Endpoint}); each
    endpoint enforces one shared slot budget across its incoming channels.
    """
    channels: dict[tuple[Rank, Rank], Channel] = {}
    endpoints: dict[Rank, Endpoint] = {}
    for receiver in plan.dst.ranks():
        budget = SlotBudget(capacity_bytes=slot_budget_bytes)
        incoming: dict[Rank, Channel] = {}
        for sender in plan.senders_of(receiver):
            transport = transport_factory() if transport_factory else InProcessTransport()
            ch = Channel(sender, receiver, transport, budget)
            channels[(sender, receiver)] = ch
            incoming[sender] = ch
        endpoints[receiver] = Endpoint(receiver, plan, incoming, dtype, timeout)
    return channels, endpoints


def push_tensor(
    plan: ReshardPlan,
    channels: dict[tuple[Rank, Rank], Channel],
    sender: Rank,
    shard: np.ndarray,
    section_name: str,
    sample_id: int,
) -> list[int]:
    """Split a sender's shard per the plan and push each slice on its channel."""
    expected = plan.src.shard_shape(sender)
    if tuple(shard.shape) != expected:
        raise IncompatibleShapes(
            f"sender {sender} shard shape {tuple(shard.shape)} != layout shard {expected}"
        )
    tokens: list[int] = []
    for transfer in plan.for_sender(sender):
        view = shard[tuple(slice(a, b) for a, b in transfer.sender_slice)]
        meta = MessageMeta(
            tensor_shape=tuple(view.shape),
            element_size_bytes=shard.dtype.itemsize,
            section_name=section_name,
            sender_position=sender,
            sample_id=sample_id,
        )
        tokens.append(channels[(sender, transfer.receiver)].push(view, meta))
    return tokens
