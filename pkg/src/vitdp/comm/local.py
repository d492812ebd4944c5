"""In-process worlds: every rank is a thread, channels are in-memory queues.

Same rendezvous, frames and collectives as the TCP path; only the byte
transport differs. Used by fast tests.
"""
from __future__ import annotations

import threading
from typing import Callable, TypeVar

from .coordinator import Coordinator
from .group import ProcessGroup, rendezvous
from .transport import MemoryTransport, TcpTransport

R = TypeVar("R")


class RankFailed(RuntimeError):
    def __init__(self, errors: dict[int, BaseException]):
        first = min(errors)
        super().__init__(f"rank(s) {sorted(errors)} failed; rank {first}: {errors[first]!r}")
        self.errors = errors


def run_world(
    world_size: int,
    fn: Callable[[ProcessGroup], R],
    timeout: float = 30.0,
    barrier_timeout: float | None = None,
    transport: str = "memory",
    coordinator: Coordinator | None = None,
) -> list[R]:
    """Run ``fn(pg)`` on ``world_size`` threads; results come back indexed by rank.

    ``transport`` is ``"memory"`` or ``"tcp"`` (loopback sockets); a given
    ``coordinator`` brings its own transport. Any
    exception is re-raised as :class:`RankFailed` carrying every rank's
    error.
    """
    if coordinator is not None:
        coord, net = coordinator, coordinator.transport
    else:
        net = MemoryTransport() if transport == "memory" else TcpTransport()
        addr = "mem:coordinator" if transport == "memory" else "127.0.0.1:0"
        coord = Coordinator(world_size, net, addr, timeout=timeout, barrier_timeout=barrier_timeout)
    coord.start()
    results: dict[int, R] = {}
    errors: dict[int, BaseException] = {}
    lock = threading.Lock()

    def worker(slot: int) -> None:
        rank = -1 - slot
        try:
            pg = rendezvous(coord.address, world_size, timeout=timeout, transport=net)
            rank = pg.rank
            try:
                out = fn(pg)
            finally:
                pg.close()
            with lock:
                results[rank] = out
        except BaseException as e:
            with lock:
                errors[rank] = e

    threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    coord.stop()
    coord.join(5.0)
    if errors:
        raise RankFailed(errors)
    return [results[r] for r in range(world_size)]
