"""Central-difference gradient oracle, independent of the tape's backward rules."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def finite_diff_gradcheck(
    f: LossFn,
    params: Mapping[str, np.ndarray],
    samples: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` maps a dict of parameter tensors to a scalar loss tensor. Everything
    runs in float64. Each sample picks a parameter tensor uniformly, then a
    coordinate inside it uniformly, so small tensors (norm gains, biases) are
    covered as often as the large weight matrices.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    analytically-zero coordinates from turning rounding noise into a failure.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    with Tape() as tape:
        leaves = {k: tape.watch(Tensor(v)) for k, v in work.items()}
        loss = f(leaves)
        tape.backward(loss)
    analytic = {k: leaves[k].grad.reshape(-1) for k in work}

    def evaluate() -> float:
        return f({k: Tensor(v) for k, v in work.items()}).item()

    rng = np.random.default_rng(seed)
    names = list(work)
    worst = 0.0
    for _ in range(samples):
        name = names[int(rng.integers(len(names)))]
        flat = work[name].reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate()
        flat[i] = orig - h
        down = evaluate()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        exact = float(analytic[name][i])
        err = abs(numeric - exact) / max(abs(numeric), abs(exact), floor)
        worst = max(worst, err)
    return worst
