"""Per-epoch metrics rows and their CSV form."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

CSV_FIELDS = ["run_id", "world_size", "rank", "epoch", "compute_s", "comm_s", "total_s", "loss", "accuracy"]


@dataclass
class EpochMetrics:
    run_id: str
    world_size: int
    rank: int
    epoch: int
    compute_s: float
    comm_s: float
    total_s: float
    loss: float
    accuracy: float
    # not part of the CSV row
    allreduce_calls: int = 0
    step_losses: list[float] = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_FIELDS}


def write_metrics_csv(rows: Iterable[EpochMetrics], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    return path


def read_metrics_csv(path: str | Path) -> list[EpochMetrics]:
    out = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            out.append(EpochMetrics(
                run_id=rec["run_id"],
                world_size=int(rec["world_size"]),
                rank=int(rec["rank"]),
                epoch=int(rec["epoch"]),
                compute_s=float(rec["compute_s"]),
                comm_s=float(rec["comm_s"]),
                total_s=float(rec["total_s"]),
                loss=float(rec["loss"]),
                accuracy=float(rec["accuracy"]),
            ))
    return out
