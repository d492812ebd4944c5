"""Synchronous data-parallel training.

Each optimizer step accumulates gradients over ``gradient_accumulation_steps``
micro-batches, averages the window across ranks with one ring AllReduce, and
applies the same deterministic update everywhere. Every epoch ends with a
barrier.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import vit
from .comm import ProcessGroup, allreduce_average, barrier, broadcast, ring_allreduce_sum
from .data import Dataset, ShardSpec, batches, global_order_batches, shard
from .errors import ConfigError, ProtocolError, UnsupportedFeatureError
from .metrics import EpochMetrics, write_metrics_csv
from .vit import ParamSet, ViTConfig

log = logging.getLogger(__name__)


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a CIFAR path
    variant: str = "cifar10"
    samples: int = 8000  # synthetic only
    limit: int | None = None
    noise: float = 0.25


@dataclass
class TrainConfig:
    train_batch_size: int = 32
    gradient_accumulation_steps: int = 1
    micro_batch_per_gpu: int = 16
    epochs: int = 5
    seed: int = 0
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    scaling_mode: str = "strong"
    weak_fraction: float = 0.1
    sample_order: str = "shard"  # "shard" or "global" (equivalence runs)
    check_consistency: bool = True
    wall_clock_breakdown: bool = False
    fp16_enabled: bool = False
    zero_stage: int = 0
    model: ViTConfig = field(default_factory=ViTConfig)
    data: DataConfig = field(default_factory=DataConfig)


# --------------------------------------------------------------------------
# Config file
# --------------------------------------------------------------------------

_TOP_LEVEL = {"train_batch_size", "gradient_accumulation_steps", "micro_batch_per_gpu", "fp16",
              "zero_optimization", "wall_clock_breakdown", "engine"}
_ACCEPTED_NOOP = {"prescale_gradients", "pipeline", "pin_memory"}
_ENGINE_KEYS = {f.name for f in fields(TrainConfig)} - {
    "train_batch_size", "gradient_accumulation_steps", "micro_batch_per_gpu",
    "wall_clock_breakdown", "fp16_enabled", "zero_stage"}


def _warn(msg: str) -> None:
    warnings.warn(msg, stacklevel=3)
    log.warning(msg)


def config_from_dict(raw: Mapping) -> TrainConfig:
    """Parse a batch-config dict; engine-only settings live under ``"engine"``."""
    for key in raw:
        if key not in _TOP_LEVEL | _ACCEPTED_NOOP:
            _warn(f"ignoring unknown config field {key!r}")
    if raw.get("prescale_gradients"):
        _warn("prescale_gradients has no effect: gradients are always averaged over the window before AllReduce")
    if (raw.get("pipeline") or {}).get("pipe_partitioned"):
        raise UnsupportedFeatureError("pipeline parallelism is not supported")

    cfg = TrainConfig()
    updates: dict = {}
    for key in ("train_batch_size", "gradient_accumulation_steps", "micro_batch_per_gpu"):
        if key in raw:
            updates[key] = int(raw[key])
    if "wall_clock_breakdown" in raw:
        updates["wall_clock_breakdown"] = bool(raw["wall_clock_breakdown"])
    updates["fp16_enabled"] = bool((raw.get("fp16") or {}).get("enabled", False))
    zero = raw.get("zero_optimization") or {}
    updates["zero_stage"] = int(zero.get("stage", 0))
    for key in ("offload_optimizer", "offload_param"):
        device = (zero.get(key) or {}).get("device", "none")
        if device != "none":
            raise UnsupportedFeatureError(f"zero_optimization.{key}.device={device!r} is not supported")

    engine = dict(raw.get("engine") or {})
    for key in list(engine):
        if key not in _ENGINE_KEYS:
            _warn(f"ignoring unknown engine field {key!r}")
            engine.pop(key)
    if "model" in engine:
        engine["model"] = ViTConfig(**engine["model"])
    if "data" in engine:
        engine["data"] = DataConfig(**engine["data"])
    if "betas" in engine:
        engine["betas"] = tuple(engine["betas"])
    updates.update(engine)
    return replace(cfg, **updates)


def load_config(path: str | Path) -> TrainConfig:
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def config_to_dict(cfg: TrainConfig) -> dict:
    engine = {k: v for k, v in asdict(cfg).items() if k in _ENGINE_KEYS}
    engine["betas"] = list(cfg.betas)
    return {
        "train_batch_size": cfg.train_batch_size,
        "gradient_accumulation_steps": cfg.gradient_accumulation_steps,
        "micro_batch_per_gpu": cfg.micro_batch_per_gpu,
        "fp16": {"enabled": cfg.fp16_enabled},
        "zero_optimization": {"stage": cfg.zero_stage},
        "wall_clock_breakdown": cfg.wall_clock_breakdown,
        "engine": engine,
    }


def validate_config(cfg: TrainConfig, world_size: int) -> TrainConfig:
    """Check the global batch identity and reject unsupported features."""
    if cfg.fp16_enabled:
        raise UnsupportedFeatureError("fp16 training is not supported; set fp16.enabled to false")
    if cfg.zero_stage != 0:
        raise UnsupportedFeatureError(f"zero_optimization.stage {cfg.zero_stage} is not supported; only stage 0")
    for name in ("train_batch_size", "gradient_accumulation_steps", "micro_batch_per_gpu", "epochs"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    if world_size < 1:
        raise ConfigError(f"world_size must be >= 1, got {world_size}")
    expected = cfg.micro_batch_per_gpu * cfg.gradient_accumulation_steps * world_size
    if cfg.train_batch_size != expected:
        raise ConfigError(
            f"train_batch_size ({cfg.train_batch_size}) != micro_batch_per_gpu ({cfg.micro_batch_per_gpu})"
            f" x gradient_accumulation_steps ({cfg.gradient_accumulation_steps}) x world_size ({world_size})"
            f" = {expected}"
        )
    if cfg.optimizer not in ("sgd", "adam"):
        raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {cfg.optimizer!r}")
    if cfg.scaling_mode not in ("strong", "weak"):
        raise ConfigError(f"scaling_mode must be 'strong' or 'weak', got {cfg.scaling_mode!r}")
    if cfg.sample_order not in ("shard", "global"):
        raise ConfigError(f"sample_order must be 'shard' or 'global', got {cfg.sample_order!r}")
    return cfg


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)  # momentum / Adam m
    second: dict[str, np.ndarray] = field(default_factory=dict)  # Adam v


def init_optimizer(kind: str, params: Mapping[str, np.ndarray]) -> OptimizerState:
    state = OptimizerState(kind)
    state.first = {k: np.zeros_like(v) for k, v in params.items()}
    if kind == "adam":
        state.second = {k: np.zeros_like(v) for k, v in params.items()}
    return state


def optimizer_step(kind: str, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                   state: OptimizerState, lr: float, momentum: float = 0.0,
                   betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8
                   ) -> tuple[ParamSet, OptimizerState]:
    """One update. SGD: ``v = momentum*v + g; p -= lr*v``. Adam: bias-corrected."""
    step = state.step + 1
    new_params: ParamSet = {}
    first: dict[str, np.ndarray] = {}
    second: dict[str, np.ndarray] = {}
    if kind == "sgd":
        for k, p in params.items():
            v = momentum * state.first[k] + grads[k] if momentum else grads[k]
            first[k] = v
            new_params[k] = (p - lr * v).astype(p.dtype, copy=False)
    elif kind == "adam":
        b1, b2 = betas
        c1 = 1.0 - b1**step
        c2 = 1.0 - b2**step
        for k, p in params.items():
            g = grads[k]
            m = b1 * state.first[k] + (1.0 - b1) * g
            v = b2 * state.second[k] + (1.0 - b2) * (g * g)
            first[k], second[k] = m, v
            new_params[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    else:
        raise ConfigError(f"unknown optimizer {kind!r}")
    return new_params, OptimizerState(kind, step, first, second)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    model: ViTConfig
    params: ParamSet
    opt: OptimizerState


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    params: ParamSet


def straggle(multiplier: float, compute_s: float) -> float:
    """Sleep ``(multiplier - 1) * compute_s``; emulates a slower device."""
    if multiplier <= 1.0:
        return 0.0
    delay = (multiplier - 1.0) * compute_s
    time.sleep(delay)
    return delay


def param_digest(params: Mapping[str, np.ndarray]) -> np.ndarray:
    """SHA-256 of the flat float32 parameters as 16 exactly-representable floats."""
    h = hashlib.sha256(vit.flatten(params).tobytes()).digest()
    return np.frombuffer(h, dtype="<u2").astype(np.float32)


def check_consistency(pg: ProcessGroup, params: Mapping[str, np.ndarray]) -> None:
    """Raise on every rank if any rank's parameters differ from rank 0's."""
    mine = param_digest(params)
    ref = broadcast(pg, mine, root=0)
    drift = ring_allreduce_sum(pg, np.array([float(np.any(ref != mine))], dtype=np.float32))
    if drift[0] > 0:
        raise ProtocolError(f"parameters diverged on {int(drift[0])} rank(s)")


def _sum_into(acc: ParamSet | None, grads: ParamSet) -> ParamSet:
    if acc is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        acc[k] += v
    return acc


def train_epoch(cfg: TrainConfig, pg: ProcessGroup, state: TrainState, data: Dataset, epoch: int,
                slowdown: float = 1.0, run_id: str = "") -> EpochMetrics:
    """One epoch over this rank's data; ``state`` is updated in place.

    ``data`` is the rank's shard, or the full dataset when
    ``cfg.sample_order == "global"``.
    """
    w, accum = pg.world_size, cfg.gradient_accumulation_steps
    t_start = time.monotonic()
    compute = comm = 0.0
    if cfg.sample_order == "global":
        stream = global_order_batches(data, cfg.train_batch_size, cfg.micro_batch_per_gpu,
                                      pg.rank, w, cfg.seed, epoch)
    else:
        stream = batches(data, cfg.micro_batch_per_gpu, cfg.seed, epoch)

    step_losses: list[float] = []
    step_accs: list[float] = []
    window: ParamSet | None = None
    loss_sum = acc_sum = 0.0
    filled = 0
    calls = 0
    for images, labels in stream:
        t0 = time.monotonic()
        loss, acc, grads = vit.loss_and_grads(state.model, state.params, images, labels)
        window = _sum_into(window, grads)
        loss_sum += loss
        acc_sum += acc
        filled += 1
        straggle(slowdown, time.monotonic() - t0)
        if filled < accum:
            compute += time.monotonic() - t0
            continue
        # micro-batches in a window are equal-sized, so the window mean is sum / accum
        flat = np.concatenate([vit.flatten(window), np.array([loss_sum, acc_sum], dtype=np.float32)])
        if accum > 1:
            flat = flat / np.float32(accum)
        compute += time.monotonic() - t0

        t1 = time.monotonic()
        reduced = allreduce_average(pg, flat)
        comm += time.monotonic() - t1
        calls += 1

        t2 = time.monotonic()
        mean_grads = vit.unflatten(reduced[:-2], window)
        state.params, state.opt = optimizer_step(
            cfg.optimizer, state.params, mean_grads, state.opt, cfg.learning_rate,
            cfg.momentum, cfg.betas, cfg.eps)
        step_losses.append(float(reduced[-2]))
        step_accs.append(float(reduced[-1]))
        window, loss_sum, acc_sum, filled = None, 0.0, 0.0, 0
        compute += time.monotonic() - t2

    t3 = time.monotonic()
    if cfg.check_consistency and w > 1:
        check_consistency(pg, state.params)
    barrier(pg)
    comm += time.monotonic() - t3
    total = time.monotonic() - t_start

    metrics = EpochMetrics(
        run_id=run_id, world_size=w, rank=pg.rank, epoch=epoch,
        compute_s=compute, comm_s=comm, total_s=total,
        loss=float(np.mean(step_losses)) if step_losses else float("nan"),
        accuracy=float(np.mean(step_accs)) if step_accs else float("nan"),
        allreduce_calls=calls, step_losses=step_losses,
    )
    if cfg.wall_clock_breakdown:
        log.info("rank %d epoch %d: compute %.3fs comm %.3fs total %.3fs loss %.4f acc %.3f",
                 pg.rank, epoch, compute, comm, total, metrics.loss, metrics.accuracy)
    return metrics


def init_state(cfg: TrainConfig, pg: ProcessGroup) -> TrainState:
    """Seeded init on every rank, then rank 0's parameters are broadcast."""
    params = vit.init_params(cfg.model, cfg.seed)
    flat = broadcast(pg, vit.flatten(params), root=0)
    params = vit.unflatten(flat, params)
    return TrainState(cfg.model, params, init_optimizer(cfg.optimizer, params))


def local_data(cfg: TrainConfig, pg: ProcessGroup, dataset: Dataset) -> Dataset:
    if cfg.sample_order == "global":
        return dataset
    spec = ShardSpec(cfg.scaling_mode, pg.rank, pg.world_size, cfg.weak_fraction, cfg.seed)
    return shard(dataset, spec)


def run_training(cfg: TrainConfig, pg: ProcessGroup, dataset: Dataset, out_dir: str | Path | None = None,
                 slowdown: float = 1.0, run_id: str = "run") -> TrainResult:
    """Validate, broadcast initial weights, train ``cfg.epochs`` epochs.

    With ``out_dir`` every rank writes ``metrics_rank{r}.csv`` and
    ``steps_rank{r}.json``; rank 0 also writes ``checkpoint.bin``.
    """
    validate_config(cfg, pg.world_size)
    state = init_state(cfg, pg)
    data = local_data(cfg, pg, dataset)
    history = [train_epoch(cfg, pg, state, data, e, slowdown, run_id) for e in range(cfg.epochs)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(history, out / f"metrics_rank{pg.rank}.csv")
        side = {
            "rank": pg.rank, "world_size": pg.world_size, "run_id": run_id,
            "shard_size": len(data), "slowdown": slowdown,
            "allreduce_calls": [m.allreduce_calls for m in history],
            "step_losses": [m.step_losses for m in history],
        }
        (out / f"steps_rank{pg.rank}.json").write_text(json.dumps(side), encoding="utf-8")
        if pg.rank == 0:
            vit.save_params(state.params, out / "checkpoint.bin")
    return TrainResult(history, state.params)
