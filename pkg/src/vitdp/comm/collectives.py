"""Blocking collectives over a :class:`ProcessGroup`.

Every rank must call the same collectives in the same order with buffers of
the same length. Tensor data travels as little-endian float32.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import BarrierTimeoutError, ProtocolError
from .frame import Frame, Op
from .group import ProcessGroup
from .transport import expect

WIRE_DTYPE = np.dtype("<f4")
BARRIER_GRACE = 5.0


def chunk_bounds(n: int, world_size: int) -> list[tuple[int, int]]:
    """Ceil-sized chunks; trailing chunks may be short or empty."""
    c = math.ceil(n / world_size) if n else 0
    return [(min(i * c, n), min((i + 1) * c, n)) for i in range(world_size)]


def _recv_chunk(pg: ProcessGroup, opcode: Op, tag: int, index: int, nbytes: int) -> np.ndarray:
    frame = expect(pg.from_prev.recv(pg.timeout), opcode, tag)
    if frame.chunk_index != index:
        raise ProtocolError(f"rank {pg.rank}: expected chunk {index}, got {frame.chunk_index}")
    if len(frame.payload) != nbytes:
        raise ProtocolError(
            f"rank {pg.rank}: chunk {index} carries {len(frame.payload)} bytes, expected {nbytes}; "
            "buffer lengths differ between ranks"
        )
    return np.frombuffer(frame.payload, dtype=WIRE_DTYPE)


def ring_allreduce_sum(pg: ProcessGroup, buf) -> np.ndarray:
    """Elementwise sum over all ranks via reduce-scatter then all-gather.

    The buffer is cut into ``world_size`` chunks. In reduce-scatter step
    ``s`` rank ``r`` forwards chunk ``(r - s) mod W`` and adds the incoming
    chunk ``(r - s - 1) mod W`` to its own copy; after ``W - 1`` steps rank
    ``r`` holds the full sum of chunk ``(r + 1) mod W``. All-gather then
    circulates the finished chunks for another ``W - 1`` steps.
    """
    data = np.array(buf, dtype=WIRE_DTYPE).reshape(-1)
    w, r = pg.world_size, pg.rank
    if w == 1:
        return data
    tag = pg.next_tag()
    bounds = chunk_bounds(data.size, w)

    for s in range(w - 1):
        si, ri = (r - s) % w, (r - s - 1) % w
        lo, hi = bounds[si]
        pg.to_next.send(Frame(Op.REDUCE_CHUNK, tag, si, data[lo:hi].tobytes()))
        lo, hi = bounds[ri]
        incoming = _recv_chunk(pg, Op.REDUCE_CHUNK, tag, ri, (hi - lo) * 4)
        data[lo:hi] = incoming + data[lo:hi]

    for s in range(w - 1):
        si, ri = (r + 1 - s) % w, (r - s) % w
        lo, hi = bounds[si]
        pg.to_next.send(Frame(Op.GATHER_CHUNK, tag, si, data[lo:hi].tobytes()))
        lo, hi = bounds[ri]
        data[lo:hi] = _recv_chunk(pg, Op.GATHER_CHUNK, tag, ri, (hi - lo) * 4)
    return data


def allreduce_average(pg: ProcessGroup, buf) -> np.ndarray:
    total = ring_allreduce_sum(pg, buf)
    if pg.world_size == 1:
        return total
    return total / np.float32(pg.world_size)


def broadcast(pg: ProcessGroup, buf, root: int = 0) -> np.ndarray:
    """Copy ``root``'s buffer to every rank, relayed around the ring.

    The raw bytes are forwarded unchanged, so every rank ends up with a
    byte-identical copy of the root's buffer (in the local buffer's dtype and
    shape).
    """
    local = np.ascontiguousarray(buf)
    w = pg.world_size
    if not 0 <= root < w:
        raise ValueError(f"root {root} outside world of size {w}")
    if w == 1:
        return local.copy()
    tag = pg.next_tag()
    hop = (pg.rank - root) % w
    if hop == 0:
        pg.to_next.send(Frame(Op.BCAST, tag, root, local.tobytes()))
        return local.copy()
    frame = expect(pg.from_prev.recv(pg.timeout), Op.BCAST, tag)
    if len(frame.payload) != local.nbytes:
        raise ProtocolError(f"rank {pg.rank}: broadcast of {len(frame.payload)} bytes into a {local.nbytes}-byte buffer")
    if hop < w - 1:
        pg.to_next.send(frame)
    return np.frombuffer(frame.payload, dtype=local.dtype).reshape(local.shape).copy()


def barrier(pg: ProcessGroup) -> None:
    """Return only after every rank has entered the barrier."""
    if pg.world_size == 1:
        return
    seq = pg.next_barrier()
    pg.control.send(Frame(Op.BARRIER_ARRIVE, seq))
    try:
        reply = pg.control.recv(pg.timeout + BARRIER_GRACE)
    except TimeoutError:
        raise BarrierTimeoutError(f"rank {pg.rank}: barrier {seq} not released") from None
    if reply.opcode == Op.SHUTDOWN:
        info = reply.json()
        missing = info.get("missing", [])
        raise BarrierTimeoutError(
            f"rank {pg.rank}: barrier {seq} failed ({info.get('reason', 'shutdown')}); missing ranks {missing}",
            missing,
        )
    expect(reply, Op.BARRIER_RELEASE, seq)


def naive_allreduce_oracle(inputs: Sequence, dtype=np.float32) -> np.ndarray:
    """Left-to-right sum over ranks in one process; the reference for the ring."""
    if not inputs:
        raise ValueError("no inputs")
    arrays = [np.asarray(x, dtype=dtype).reshape(-1) for x in inputs]
    if len({a.size for a in arrays}) != 1:
        raise ValueError("inputs differ in length")
    acc = arrays[0].copy()
    for a in arrays[1:]:
        acc = acc + a
    return acc
