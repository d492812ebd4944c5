"""Rendezvous and barrier service.

Workers connect and send HELLO with the address of their ring listener.
Ranks follow connection order. Once ``world_size`` workers have joined, each
gets RANK_ASSIGN with the full peer list. After that the coordinator serves
barriers: it releases barrier ``seq`` only after every rank has sent
BARRIER_ARRIVE for it.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass

from ..errors import ProtocolError, RendezvousError, TransportError
from .frame import Frame, Op, json_frame
from .transport import Channel, TcpTransport, expect

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


@dataclass
class Member:
    rank: int
    channel: Channel
    address: str
    pid: int | None


class Coordinator:
    def __init__(
        self,
        world_size: int,
        transport=None,
        address: str = "127.0.0.1:0",
        timeout: float = DEFAULT_TIMEOUT,
        barrier_timeout: float | None = None,
    ):
        if world_size < 1:
            raise ValueError(f"world_size must be >= 1, got {world_size}")
        self.world_size = world_size
        self.transport = transport or TcpTransport()
        self.listener = self.transport.listen(address)
        self.timeout = timeout
        self.barrier_timeout = timeout if barrier_timeout is None else barrier_timeout
        self.members: list[Member] = []
        self.events: list[tuple[float, str, int, int]] = []  # (time, event, rank, seq)
        self.error: BaseException | None = None
        self.ready = threading.Event()
        self._inbox: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._rejecter: threading.Thread | None = None
        self._lock = threading.Lock()

    @property
    def address(self) -> str:
        return self.listener.address

    @property
    def pids(self) -> dict[int, int | None]:
        return {m.rank: m.pid for m in self.members}

    def _log(self, event: str, rank: int = -1, seq: int = -1) -> None:
        with self._lock:
            self.events.append((time.monotonic(), event, rank, seq))

    def start(self) -> Coordinator:
        self._thread = threading.Thread(target=self.serve, name="coordinator", daemon=True)
        self._thread.start()
        return self

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def stop(self) -> None:
        self._stop.set()
        self._inbox.put(None)

    def serve(self) -> None:
        try:
            self._rendezvous()
            self._service()
        except BaseException as e:  # surfaced through .error
            self.error = e
            log.debug("coordinator stopped: %s", e)
        finally:
            self._stop.set()
            self.ready.set()
            if self._rejecter is not None:
                self._rejecter.join()
            for m in self.members:
                m.channel.close()
            self.listener.close()

    # -- rendezvous -------------------------------------------------------

    def _rendezvous(self) -> None:
        deadline = time.monotonic() + self.timeout
        while len(self.members) < self.world_size:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or self._stop.is_set():
                reason = f"rendezvous timeout: {len(self.members)} of {self.world_size} workers joined"
                for m in self.members:
                    self._send(m, json_frame(Op.SHUTDOWN, {"reason": reason}))
                self._log("rendezvous_timeout")
                raise RendezvousError(reason)
            ch = self.listener.accept(timeout=min(remaining, 0.5))
            if ch is None:
                continue
            try:
                hello = expect(ch.recv(timeout=max(remaining, 1.0)), Op.HELLO).json()
            except (TimeoutError, ProtocolError, TransportError, ValueError):
                ch.close()
                continue
            rank = len(self.members)
            self.members.append(Member(rank, ch, hello["addr"], hello.get("pid")))
            self._log("hello", rank)
        peers = [m.address for m in self.members]
        for m in self.members:
            self._send(m, json_frame(Op.RANK_ASSIGN, {"rank": m.rank, "world_size": self.world_size, "peers": peers}, tag=m.rank))
        self._log("assigned")
        self.ready.set()

    # -- barrier service --------------------------------------------------

    def _reader(self, m: Member) -> None:
        while True:
            try:
                frame = m.channel.recv(None)
            except (TransportError, ProtocolError, OSError):
                self._inbox.put((m.rank, None))
                return
            self._inbox.put((m.rank, frame))
            if frame.opcode == Op.SHUTDOWN:
                return

    def _reject_late(self) -> None:
        while not self._stop.is_set():
            try:
                ch = self.listener.accept(timeout=0.05)
            except OSError:
                return
            if ch is None:
                continue
            self._log("rejected")
            try:
                ch.send(json_frame(Op.SHUTDOWN, {"reason": "world is full"}))
            except TransportError:
                pass
            ch.close()

    def _send(self, m: Member, frame: Frame) -> None:
        try:
            m.channel.send(frame)
        except TransportError:
            pass

    def _service(self) -> None:
        for m in self.members:
            threading.Thread(target=self._reader, args=(m,), daemon=True).start()
        self._rejecter = threading.Thread(target=self._reject_late, daemon=True)
        self._rejecter.start()

        live = set(range(self.world_size))
        dead: set[int] = set()
        arrived: dict[int, set[int]] = {}
        deadlines: dict[int, float] = {}

        def fail(seq: int) -> None:
            missing = sorted(set(range(self.world_size)) - arrived[seq])
            self._log("barrier_timeout", -1, seq)
            note = json_frame(Op.SHUTDOWN, {"reason": "barrier timeout", "seq": seq, "missing": missing})
            for r in sorted(arrived[seq]):
                self._send(self.members[r], note)
            del arrived[seq], deadlines[seq]

        while live and not self._stop.is_set():
            wait = min(deadlines.values(), default=time.monotonic() + 0.5) - time.monotonic()
            try:
                item = self._inbox.get(timeout=max(wait, 0.0))
            except queue.Empty:
                item = None
            if item is not None:
                rank, frame = item
                if frame is None or frame.opcode == Op.SHUTDOWN:
                    live.discard(rank)
                    if frame is None:
                        dead.add(rank)
                    self._log("leave" if frame is not None else "lost", rank)
                elif frame.opcode == Op.BARRIER_ARRIVE:
                    seq = frame.tag
                    self._log("arrive", rank, seq)
                    if seq not in arrived:
                        arrived[seq] = set()
                        deadlines[seq] = time.monotonic() + self.barrier_timeout
                    arrived[seq].add(rank)
                    if len(arrived[seq]) == self.world_size:
                        self._log("release", -1, seq)
                        for m in self.members:
                            if m.rank in live:
                                self._send(m, Frame(Op.BARRIER_RELEASE, seq))
                        del arrived[seq], deadlines[seq]
                else:
                    self._log(f"unexpected_{frame.opcode.name}", rank)
            now = time.monotonic()
            for seq in [s for s, d in deadlines.items() if d <= now or (dead - arrived[s])]:
                fail(seq)
