"""Process groups: a rank, a world size, and channels to the ring neighbours."""
from __future__ import annotations

import os

from ..errors import ProtocolError, RendezvousError, TransportError
from .coordinator import DEFAULT_TIMEOUT
from .frame import Frame, Op, json_frame
from .transport import Channel, TcpTransport, expect


class ProcessGroup:
    """Membership plus transport for one rank.

    ``to_next`` carries ring traffic to rank ``(rank + 1) % world_size`` and
    ``from_prev`` receives from ``(rank - 1) % world_size``; both are ``None``
    in a world of one. ``control`` talks to the coordinator (barriers).
    """

    def __init__(self, rank: int, world_size: int, control: Channel | None,
                 to_next: Channel | None, from_prev: Channel | None,
                 timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.world_size = world_size
        self.control = control
        self.to_next = to_next
        self.from_prev = from_prev
        self.timeout = timeout
        self._tag = 0
        self._barrier_seq = 0
        self.closed = False

    def next_tag(self) -> int:
        self._tag += 1
        return self._tag

    def next_barrier(self) -> int:
        self._barrier_seq += 1
        return self._barrier_seq

    def ring_counters(self) -> dict:
        if self.to_next is None:
            return {"bytes_sent": 0, "payload_bytes_sent": 0, "frames_sent": 0, "bytes_received": 0}
        return self.to_next.counters()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.control is not None:
            try:
                self.control.send(Frame(Op.SHUTDOWN, self.rank))
            except TransportError:
                pass
        for ch in (self.to_next, self.from_prev, self.control):
            if ch is not None:
                ch.close()

    def __enter__(self) -> ProcessGroup:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return f"ProcessGroup(rank={self.rank}, world_size={self.world_size})"


def rendezvous(coordinator: str, world_size: int | None = None, timeout: float = DEFAULT_TIMEOUT,
               transport=None, host: str = "127.0.0.1") -> ProcessGroup:
    """Join the world served at ``coordinator`` and wire up the ring.

    ``host`` is the interface this worker listens on for its ring
    predecessor; use a routable address when workers span machines.
    """
    transport = transport or TcpTransport()
    listener = transport.listen(f"{host}:0")
    try:
        control = transport.connect(coordinator, timeout)
        control.send(json_frame(Op.HELLO, {"addr": listener.address, "pid": os.getpid(), "world_size": world_size}))
        try:
            reply = control.recv(timeout)
        except (TimeoutError, TransportError) as e:
            control.close()
            raise RendezvousError(f"no rank assignment from {coordinator}: {e}") from e
        if reply.opcode == Op.SHUTDOWN:
            control.close()
            raise RendezvousError(reply.json().get("reason", "rejected by coordinator"))
        info = expect(reply, Op.RANK_ASSIGN).json()
        rank, world, peers = info["rank"], info["world_size"], info["peers"]
        if world_size is not None and world != world_size:
            control.close()
            raise RendezvousError(f"coordinator runs a world of {world}, expected {world_size}")
        to_next = from_prev = None
        if world > 1:
            to_next = transport.connect(peers[(rank + 1) % world], timeout)
            to_next.send(Frame(Op.HELLO, rank))
            from_prev = listener.accept(timeout)
            if from_prev is None:
                raise RendezvousError(f"rank {rank}: predecessor never connected")
            hello = expect(from_prev.recv(timeout), Op.HELLO)
            if hello.tag != (rank - 1) % world:
                raise ProtocolError(f"rank {rank}: ring predecessor announced rank {hello.tag}")
        return ProcessGroup(rank, world, control, to_next, from_prev, timeout)
    finally:
        listener.close()
