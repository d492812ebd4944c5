"""Command line: launch, worker, coordinator, sweep, report."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from . import harness
from .engine import DataConfig, TrainConfig, load_config
from .errors import VitDPError, WorkerFailure


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    data = cfg.data
    if getattr(args, "dataset", None):
        data = dataclasses.replace(data, source=args.dataset)
    if getattr(args, "variant", None):
        data = dataclasses.replace(data, variant=args.variant)
    if getattr(args, "samples", None):
        data = dataclasses.replace(data, samples=args.samples)
    if getattr(args, "limit", None):
        data = dataclasses.replace(data, limit=args.limit)
    over = {"data": data}
    for name, key in (("epochs", "epochs"), ("seed", "seed"), ("mode", "scaling_mode"),
                      ("weak_fraction", "weak_fraction"), ("micro_batch", "micro_batch_per_gpu"),
                      ("accum", "gradient_accumulation_steps"), ("train_batch", "train_batch_size")):
        value = getattr(args, name, None)
        if value is not None:
            over[key] = value
    return dataclasses.replace(cfg, **over)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--dataset", help="'synthetic' or a CIFAR binary file or directory")
    p.add_argument("--variant", choices=["cifar10", "cifar100"])
    p.add_argument("--samples", type=int, help="synthetic dataset size")
    p.add_argument("--limit", type=int, help="keep only the first N samples")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["strong", "weak"])
    p.add_argument("--weak-fraction", type=float)
    p.add_argument("--slowdown", action="append", default=[], metavar="RANK:MULT",
                   help="slow a rank down by a compute multiplier (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vitdp", description="Data-parallel ViT training on CPU workers")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("launch", help="run one training job with N local worker processes")
    p.add_argument("--world", type=int, required=True)
    _add_data_args(p)
    p.add_argument("--micro-batch", type=int)
    p.add_argument("--accum", type=int)
    p.add_argument("--train-batch", type=int)
    p.add_argument("--out", default="run_out")
    p.add_argument("--run-id", default="run")
    p.add_argument("--port", type=int, default=0, help="coordinator port (0 picks a free one)")
    p.add_argument("--timeout", type=float, default=1800.0)

    p = sub.add_parser("worker", help="join a coordinator and train")
    p.add_argument("--coordinator", required=True, metavar="HOST:PORT")
    _add_data_args(p)
    p.add_argument("--world", type=int, help="expected world size (checked against the coordinator)")
    p.add_argument("--out")
    p.add_argument("--run-id", default="run")
    p.add_argument("--host", default="127.0.0.1", help="address peers use to reach this worker")
    p.add_argument("--crash-rank", type=int, help=argparse.SUPPRESS)

    p = sub.add_parser("coordinator", help="serve rendezvous and barriers for remote workers")
    p.add_argument("--world", type=int, required=True)
    p.add_argument("--bind", default="0.0.0.0:29500")
    p.add_argument("--timeout", type=float, default=300.0)

    p = sub.add_parser("sweep", help="run a scaling sweep over world sizes")
    p.add_argument("--worlds", type=_ints, required=True, help="e.g. 1,2,4,8")
    _add_data_args(p)
    p.add_argument("--micro-batches", type=_ints, default=[64])
    p.add_argument("--accums", type=_ints, default=[1])
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", default="sweep_out")

    p = sub.add_parser("report", help="print the speedup table for a run or sweep directory")
    p.add_argument("--in", dest="in_dir", required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except WorkerFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except VitDPError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "worker":
        cfg = _config(args)
        return harness.worker_main(args.coordinator, cfg, args.out, args.run_id, args.world,
                                   harness.parse_slowdown(args.slowdown), args.crash_rank, args.host)

    if args.command == "launch":
        cfg = _config(args)
        res = harness.launch_local_world(args.world, cfg, args.out, args.run_id,
                                         harness.parse_slowdown(args.slowdown), timeout=args.timeout,
                                         port=args.port)
        report = harness.ScalingReport(cfg.scaling_mode, harness.summarize(res.metrics), res.metrics)
        for m in res.metrics:
            if m.rank == 0:
                print(f"epoch {m.epoch}: loss {m.loss:.4f} acc {m.accuracy:.3f} "
                      f"compute {m.compute_s:.3f}s comm {m.comm_s:.3f}s total {m.total_s:.3f}s")
        print(f"world {res.world_size} finished in {res.elapsed_s:.2f}s; "
              f"mean epoch {report.rows[0].mean_epoch_s:.3f}s; output in {res.out_dir}")
        return 0

    if args.command == "coordinator":
        from .comm import Coordinator

        coord = Coordinator(args.world, address=args.bind, timeout=args.timeout).start()
        print(f"coordinator listening on {coord.address}", flush=True)
        try:
            while coord._thread.is_alive():
                time.sleep(0.5)
        except KeyboardInterrupt:
            coord.stop()
        coord.join()
        if coord.error is not None:
            print(f"error: {coord.error}", file=sys.stderr)
            return 1
        return 0

    if args.command == "sweep":
        base = _config(args)
        spec = harness.SweepSpec(
            world_sizes=args.worlds, mode=base.scaling_mode, micro_batches=args.micro_batches,
            accumulations=args.accums, epochs=base.epochs, repeats=args.repeats,
            slowdowns=harness.parse_slowdown(args.slowdown), weak_fraction=base.weak_fraction,
            base=base, out_dir=args.out,
        )
        report = harness.run_sweep(spec)
        print(harness.format_summary(report), end="")
        print(f"report written to {Path(args.out)}")
        return 0 if all(r.status == "ok" for r in report.rows) else 2

    if args.command == "report":
        print(harness.format_summary(harness.read_report(args.in_dir)), end="")
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
