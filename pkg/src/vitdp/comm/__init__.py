from .collectives import (
    allreduce_average,
    barrier,
    broadcast,
    chunk_bounds,
    naive_allreduce_oracle,
    ring_allreduce_sum,
)
from .coordinator import Coordinator
from .frame import HEADER_SIZE, Frame, Op
from .group import ProcessGroup, rendezvous
from .local import RankFailed, run_world
from .transport import MemoryTransport, TcpTransport

__all__ = [
    "HEADER_SIZE", "Coordinator", "Frame", "MemoryTransport", "Op", "ProcessGroup", "RankFailed",
    "TcpTransport", "allreduce_average", "barrier", "broadcast", "chunk_bounds",
    "naive_allreduce_oracle", "rendezvous", "ring_allreduce_sum", "run_world",
]
