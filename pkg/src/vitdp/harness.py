"""Local multi-process launcher, scaling sweeps and speedup reports."""
from __future__ import annotations

import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .comm import Coordinator, TcpTransport, rendezvous
from .data import Dataset, dataset_from_spec
from .engine import TrainConfig, config_to_dict, load_config, run_training, validate_config
from .errors import UsageError, WorkerFailure
from .metrics import CSV_FIELDS, EpochMetrics, read_metrics_csv, write_metrics_csv
from .tensor import matmul_arrays

log = logging.getLogger(__name__)

SINGLE_THREAD_ENV = {
    "OMP_NUM_THREADS": "1",
    "OPENBLAS_NUM_THREADS": "1",
    "MKL_NUM_THREADS": "1",
    "NUMBA_NUM_THREADS": "1",
}


def parse_slowdown(items: Sequence[str]) -> dict[int, float]:
    """``["1:2", "3:1.5"]`` -> ``{1: 2.0, 3: 1.5}``."""
    out: dict[int, float] = {}
    for item in items:
        rank, _, mult = item.partition(":")
        try:
            out[int(rank)] = float(mult)
        except ValueError:
            raise UsageError(f"slowdown must look like RANK:MULT, got {item!r}") from None
        if out[int(rank)] < 1.0:
            raise UsageError(f"slowdown multiplier must be >= 1, got {item!r}")
    return out


def inject_slowdown(slowdowns: Mapping[int, float], rank: int, multiplier: float) -> dict[int, float]:
    """Return a copy of ``slowdowns`` with ``rank`` slowed by ``multiplier``.

    The worker holding that rank sleeps ``(multiplier - 1)`` times its
    measured compute after every micro-batch.
    """
    if multiplier < 1.0:
        raise UsageError(f"slowdown multiplier must be >= 1, got {multiplier}")
    out = dict(slowdowns)
    if multiplier == 1.0:
        out.pop(rank, None)
    else:
        out[rank] = float(multiplier)
    return out


def load_dataset(cfg: TrainConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        from .data import make_synthetic

        ds = make_synthetic(d.samples, cfg.model.num_classes, cfg.model.image_size, seed=cfg.seed,
                            channels=cfg.model.channels, noise=d.noise)
        if d.limit is not None and d.limit < len(ds):
            ds = ds.subset(np.arange(d.limit))
        return ds
    return dataset_from_spec(d.source, variant=d.variant, limit=d.limit)


# --------------------------------------------------------------------------
# Worker process
# --------------------------------------------------------------------------


def worker_main(coordinator: str, cfg: TrainConfig, out_dir: str | Path | None, run_id: str = "run",
                world_size: int | None = None, slowdowns: Mapping[int, float] | None = None,
                crash_rank: int | None = None, host: str = "127.0.0.1", timeout: float = 30.0) -> int:
    dataset = load_dataset(cfg)
    warm_kernels()
    pg = rendezvous(coordinator, world_size, timeout=timeout, host=host)
    try:
        if crash_rank is not None and pg.rank == crash_rank:
            log.error("rank %d: crashing on request", pg.rank)
            os._exit(3)
        mult = (slowdowns or {}).get(pg.rank, 1.0)
        run_training(cfg, pg, dataset, out_dir, slowdown=mult, run_id=run_id)
    finally:
        pg.close()
    return 0


# --------------------------------------------------------------------------
# Launcher
# --------------------------------------------------------------------------


@dataclass
class LaunchResult:
    run_id: str
    world_size: int
    statuses: list[int]
    metrics: list[EpochMetrics]
    out_dir: Path
    pids: dict[int, int | None]
    elapsed_s: float

    def steps(self) -> list[dict]:
        return [json.loads((self.out_dir / f"steps_rank{r}.json").read_text()) for r in range(self.world_size)]


def start_coordinator(world_size: int, host: str = "127.0.0.1", port: int = 0, attempts: int = 20,
                      timeout: float = 30.0) -> Coordinator:
    """Bind a coordinator, moving to the next port while the requested one is busy."""
    last: OSError | None = None
    for i in range(attempts):
        p = port + i if port else 0
        try:
            return Coordinator(world_size, TcpTransport(), f"{host}:{p}", timeout=timeout).start()
        except OSError as e:
            last = e
    raise UsageError(f"no free coordinator port from {port}: {last}")


def warm_kernels() -> None:
    """Compile (or load from cache) the matmul kernel before workers start."""
    for dt in (np.float32, np.float64):
        matmul_arrays(np.ones((1, 1), dt), np.ones((1, 1), dt))


def launch_local_world(world_size: int, cfg: TrainConfig, out_dir: str | Path, run_id: str = "run",
                       slowdowns: Mapping[int, float] | None = None, crash_rank: int | None = None,
                       timeout: float = 1800.0, port: int = 0) -> LaunchResult:
    """Spawn ``world_size`` worker processes on this machine and wait for them.

    If any worker exits non-zero the rest are killed and :class:`WorkerFailure`
    names the failing rank.
    """
    if world_size < 1:
        raise UsageError(f"world size must be >= 1, got {world_size}")
    validate_config(cfg, world_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(config_to_dict(cfg), indent=2), encoding="utf-8")
    warm_kernels()

    coord = start_coordinator(world_size, port=port)
    cmd = [sys.executable, "-m", "vitdp", "worker", "--coordinator", coord.address,
           "--config", str(cfg_path), "--out", str(out), "--run-id", run_id, "--world", str(world_size)]
    for r, m in (slowdowns or {}).items():
        cmd += ["--slowdown", f"{r}:{m}"]
    if crash_rank is not None:
        cmd += ["--crash-rank", str(crash_rank)]
    env = {**os.environ, **SINGLE_THREAD_ENV}

    start = time.monotonic()
    procs: list[subprocess.Popen] = []
    logs = []
    try:
        for i in range(world_size):
            fh = open(out / f"worker{i}.log", "w")
            logs.append(fh)
            procs.append(subprocess.Popen(cmd, env=env, stdout=fh, stderr=subprocess.STDOUT))
        deadline = start + timeout
        while True:
            codes = [p.poll() for p in procs]
            failed = [(i, c) for i, c in enumerate(codes) if c not in (None, 0)]
            if failed:
                i, code = failed[0]
                rank = {pid: r for r, pid in coord.pids.items()}.get(procs[i].pid)
                raise WorkerFailure(f"rank {rank} (pid {procs[i].pid}) exited with status {code}; "
                                    f"see {out / f'worker{i}.log'}", rank, code)
            if all(c == 0 for c in codes):
                break
            if time.monotonic() > deadline:
                raise WorkerFailure(f"world of {world_size} did not finish within {timeout}s", None, None)
            time.sleep(0.02)
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
                p.wait()
        for fh in logs:
            fh.close()
        coord.stop()
        coord.join(5.0)
    elapsed = time.monotonic() - start

    metrics: list[EpochMetrics] = []
    for r in range(world_size):
        metrics.extend(read_metrics_csv(out / f"metrics_rank{r}.csv"))
    return LaunchResult(run_id, world_size, [p.returncode for p in procs], metrics, out, coord.pids, elapsed)


# --------------------------------------------------------------------------
# Sweeps and reports
# --------------------------------------------------------------------------


@dataclass
class SweepSpec:
    world_sizes: list[int]
    mode: str = "strong"
    micro_batches: list[int] = field(default_factory=lambda: [64])
    accumulations: list[int] = field(default_factory=lambda: [1])
    epochs: int = 5
    repeats: int = 1
    slowdowns: dict[int, float] = field(default_factory=dict)
    weak_fraction: float = 0.1
    base: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "sweep_out"

    def validate(self) -> None:
        if not self.world_sizes:
            raise UsageError("sweep needs at least one world size")
        if any(w < 1 for w in self.world_sizes) or list(self.world_sizes) != sorted(set(self.world_sizes)):
            raise UsageError(f"world sizes must be >= 1 and strictly ascending, got {self.world_sizes}")
        if not self.micro_batches or not self.accumulations:
            raise UsageError("sweep needs at least one micro batch and one accumulation value")
        if self.mode not in ("strong", "weak"):
            raise UsageError(f"mode must be 'strong' or 'weak', got {self.mode!r}")
        if any(m < 1 for m in self.slowdowns.values()):
            raise UsageError("slowdown multipliers must be >= 1")
        if self.repeats < 1 or self.epochs < 1:
            raise UsageError("epochs and repeats must be >= 1")


@dataclass
class ScalingRow:
    world_size: int
    micro_batch: int
    accumulation: int
    mean_epoch_s: float
    mean_compute_s: float
    mean_comm_s: float
    comm_fraction: float
    speedup: float
    efficiency: float
    shard_size: int
    allreduce_calls: int
    status: str = "ok"


SUMMARY_FIELDS = [f.name for f in fields(ScalingRow)]


@dataclass
class ScalingReport:
    mode: str
    rows: list[ScalingRow] = field(default_factory=list)
    metrics: list[EpochMetrics] = field(default_factory=list)


@dataclass
class SpeedupRow:
    world_size: int
    epoch_s: float
    speedup: float
    efficiency: float


def compute_speedup(epoch_times: Mapping[int, float]) -> list[SpeedupRow]:
    """speedup(W) = T(1) / T(W); efficiency = speedup / W."""
    if 1 not in epoch_times:
        raise UsageError("speedup needs a world_size=1 baseline")
    base = epoch_times[1]
    return [SpeedupRow(w, t, base / t, base / t / w) for w, t in sorted(epoch_times.items())]


def summarize(metrics: Sequence[EpochMetrics], shard_sizes: Mapping[int, int] | None = None,
              calls: Mapping[int, int] | None = None, micro_batch: int = 0, accumulation: int = 0
              ) -> list[ScalingRow]:
    """One row per world size: epoch times averaged over ranks, epochs and repeats."""
    by_world: dict[int, list[EpochMetrics]] = {}
    for m in metrics:
        by_world.setdefault(m.world_size, []).append(m)
    times = {w: float(np.mean([m.total_s for m in ms])) for w, ms in by_world.items()}
    speed = {r.world_size: r for r in compute_speedup(times)} if 1 in times else {}
    rows = []
    for w in sorted(by_world):
        ms = by_world[w]
        total = times[w]
        comm = float(np.mean([m.comm_s for m in ms]))
        sp = speed.get(w)
        rows.append(ScalingRow(
            world_size=w, micro_batch=micro_batch, accumulation=accumulation,
            mean_epoch_s=total, mean_compute_s=float(np.mean([m.compute_s for m in ms])), mean_comm_s=comm,
            comm_fraction=comm / total if total > 0 else 0.0,
            speedup=sp.speedup if sp else float("nan"), efficiency=sp.efficiency if sp else float("nan"),
            shard_size=(shard_sizes or {}).get(w, 0), allreduce_calls=(calls or {}).get(w, 0),
        ))
    return rows


def run_sweep(spec: SweepSpec) -> ScalingReport:
    """Run every (micro batch, accumulation, world size, repeat) cell and summarize.

    A failing cell is logged and marked ``failed``; the sweep carries on.
    """
    spec.validate()
    report = ScalingReport(spec.mode)
    root = Path(spec.out_dir)
    for micro in spec.micro_batches:
        for accum in spec.accumulations:
            group: list[EpochMetrics] = []
            shards: dict[int, int] = {}
            calls: dict[int, int] = {}
            failed: list[int] = []
            for w in spec.world_sizes:
                cfg = replace(spec.base, micro_batch_per_gpu=micro, gradient_accumulation_steps=accum,
                              train_batch_size=micro * accum * w, epochs=spec.epochs,
                              scaling_mode=spec.mode, weak_fraction=spec.weak_fraction)
                for rep in range(spec.repeats):
                    run_id = f"{spec.mode}-w{w}-m{micro}-a{accum}-r{rep}"
                    try:
                        res = launch_local_world(w, cfg, root / run_id, run_id, slowdowns=spec.slowdowns)
                    except Exception as e:  # one bad cell must not sink the sweep
                        log.error("cell %s failed: %s", run_id, e)
                        failed.append(w)
                        break
                    group.extend(res.metrics)
                    side = res.steps()[0]
                    shards[w] = side["shard_size"]
                    calls[w] = side["allreduce_calls"][0]
            rows = summarize([m for m in group if m.world_size not in failed], shards, calls, micro, accum)
            for w in failed:
                rows.append(ScalingRow(w, micro, accum, *([float("nan")] * 6), 0, 0, status="failed"))
            report.rows.extend(sorted(rows, key=lambda r: r.world_size))
            report.metrics.extend(group)
    write_report(report, root)
    return report


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_report(report: ScalingReport, out_dir: str | Path) -> Path:
    """``metrics.csv`` (per-epoch rows), ``summary.csv``, ``summary.txt`` and ``report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report.metrics, out / "metrics.csv")
    with (out / "summary.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", *SUMMARY_FIELDS])
        for row in report.rows:
            w.writerow([report.mode, *(_fmt(v) for v in asdict(row).values())])
    (out / "summary.txt").write_text(format_summary(report), encoding="utf-8")
    (out / "report.json").write_text(json.dumps({"mode": report.mode}), encoding="utf-8")
    return out


def format_summary(report: ScalingReport) -> str:
    head = f"{'world':>5} {'micro':>5} {'accum':>5} {'epoch_s':>9} {'comm_s':>8} {'comm%':>6} " \
           f"{'speedup':>7} {'eff':>5} {'shard':>6} {'syncs':>5} status"
    lines = [f"{report.mode} scaling", head]
    for r in report.rows:
        lines.append(
            f"{r.world_size:>5} {r.micro_batch:>5} {r.accumulation:>5} {r.mean_epoch_s:>9.3f} "
            f"{r.mean_comm_s:>8.3f} {100 * r.comm_fraction:>5.1f}% {r.speedup:>7.3f} {r.efficiency:>5.2f} "
            f"{r.shard_size:>6} {r.allreduce_calls:>5} {r.status}"
        )
    return "\n".join(lines) + "\n"


def read_report(in_dir: str | Path) -> ScalingReport:
    """Load a report written by :func:`write_report`, or rebuild one from per-rank CSVs."""
    src = Path(in_dir)
    if (src / "summary.csv").exists():
        metrics = read_metrics_csv(src / "metrics.csv")
        rows = []
        mode = json.loads((src / "report.json").read_text(encoding="utf-8"))["mode"]
        with (src / "summary.csv").open(encoding="utf-8", newline="") as fh:
            for rec in csv.DictReader(fh):
                rec.pop("mode")
                kinds = {f.name: f.type for f in fields(ScalingRow)}
                rows.append(ScalingRow(**{
                    k: (rec[k] if kinds[k] == "str" else int(rec[k]) if kinds[k] == "int" else float(rec[k]))
                    for k in SUMMARY_FIELDS}))
        return ScalingReport(mode, rows, metrics)
    files = sorted(src.rglob("metrics_rank*.csv"))
    if not files:
        raise UsageError(f"no metrics found under {src}")
    metrics = [m for f in files for m in read_metrics_csv(f)]
    return ScalingReport("strong", summarize(metrics), metrics)


__all__ = [
    "CSV_FIELDS", "LaunchResult", "ScalingReport", "ScalingRow", "SpeedupRow", "SweepSpec",
    "compute_speedup", "format_summary", "inject_slowdown", "launch_local_world", "load_config",
    "parse_slowdown", "read_report", "run_sweep", "summarize", "worker_main", "write_report",
]
