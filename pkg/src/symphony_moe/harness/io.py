"""CSV emission with a fixed column order, plus gnuplot-friendly .dat mirrors."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

SCHEMA_VERSION = 1

TRAINING_COLUMNS = ("run_hash", "epoch", "train_loss", "valid_loss", "aux_loss", "entropy_ratio", "rho",
                    "wall_time_per_batch")
METRICS_COLUMNS = ("run_hash", "mode", "split", "epsilon", "epsilon_frac", "seed", "loss", "entropy_ratio",
                   "cv", "frequency", "rho", "wall_time_per_batch")
THEOREM1_COLUMNS = ("pair", "N", "epsilon", "alpha", "a_jk", "mu", "gamma", "violated")
BENCH_COLUMNS = ("M", "K", "N", "D", "baseline_s", "symphony_s", "delta_pct", "pred_infer_flops",
                 "pred_infer_bytes", "pred_train_flops", "pred_train_bytes")
TIMING_COLUMNS = {"wall_time_per_batch", "baseline_s", "symphony_s", "delta_pct"}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict], dat_mirror: bool = True) -> Path:
    """Write rows under a ``# schema_version`` comment line; optionally mirror to ``.dat``."""
    path = Path(path)
    rows = list(rows)
    with path.open("w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    if dat_mirror:
        with path.with_suffix(".dat").open("w") as fh:
            fh.write("# " + " ".join(columns) + "\n")
            for r in rows:
                fh.write(" ".join(_fmt(r.get(c, "")).replace(" ", "_") or "-" for c in columns) + "\n")
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def strip_timing(rows: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]
