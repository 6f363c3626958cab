"""Metrics and diagnostics files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import NestFedError
from .federation import RoundReport, SubmodelResult, evaluate
from .models import ParameterStore, layout, uses
from .scaling import SubmodelSpec, extract_submodel

METRIC_COLUMNS = ("round", "k", "top1", "loss", "lr")
DIAG_COLUMNS = ("k", "block", "stage", "step", "mean_abs_weight")


class OutputError(NestFedError, OSError):
    category = "io"
    exit_code = 6


def evaluate_all(store: ParameterStore, specs, test, batch: int = 512) -> list[SubmodelResult]:
    from .models import count_params

    return [SubmodelResult(s.k, *evaluate(store, s, test, batch), count_params(store.config, s), s.achieved)
            for s in specs]


def _fmt(x: float) -> str:
    return repr(float(x))


def _ensure_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def summarize(reports: list[RoundReport]) -> dict:
    if not reports:
        return {"rounds": 0, "worst_top1": None, "mean_top1": None, "per_submodel": []}
    last = reports[-1]
    return {
        "rounds": len(reports),
        "worst_top1": last.worst,
        "mean_top1": last.mean,
        "per_submodel": [
            {"k": r.k, "top1": r.top1, "loss": r.loss, "params": r.params, "achieved_gamma": r.achieved}
            for r in last.results
        ],
        "final_steps": [s.tolist() for s in last.steps],
    }


def write_metrics(reports: list[RoundReport], out_dir) -> tuple[Path, Path]:
    """``metrics.csv`` (one row per round and submodel) and ``summary.json``."""
    out = _ensure_dir(out_dir)
    metrics, summary = out / "metrics.csv", out / "summary.json"
    try:
        with metrics.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for rep in reports:
                for r in rep.results:
                    w.writerow([rep.round, r.k, _fmt(r.top1), _fmt(r.loss), _fmt(rep.lr)])
        summary.write_text(json.dumps(summarize(reports), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write metrics in {out}: {exc.strerror}") from exc
    return metrics, summary


def block_mean_abs(store: ParameterStore, spec: SubmodelSpec) -> dict[int, float]:
    """Mean absolute value over the sliced weight tensors of every included block."""
    weights = extract_submodel(store, spec)
    out = {}
    for j in range(store.config.num_blocks):
        if not spec.mask[j]:
            continue
        arrs = [weights.consistent[t.name] for t in layout(store.config)
                if t.block == j and t.role == "weight" and uses(t, spec)]
        total = sum(float(np.abs(a).sum()) for a in arrs)
        count = sum(a.size for a in arrs)
        out[j] = total / count
    return out


def diagnostics_rows(store: ParameterStore, specs) -> list[tuple]:
    rows = []
    for spec in specs:
        steps = store.inconsistent[spec.k - 1]["steps"]
        l1 = block_mean_abs(store, spec)
        for j in range(store.config.num_blocks):
            if spec.mask[j]:
                rows.append((spec.k, j, store.config.block_stage(j), float(steps[j]), l1[j]))
    return rows


def diagnostics_report(store: ParameterStore, specs, out_dir) -> Path:
    """``diagnostics.csv``: trained step size and mean |weight| per submodel and block."""
    out = _ensure_dir(out_dir)
    path = out / "diagnostics.csv"
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DIAG_COLUMNS)
            for k, j, s, step, l1 in diagnostics_rows(store, specs):
                w.writerow([k, j, s, _fmt(step), _fmt(l1)])
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{"round": int(r["round"]), "k": int(r["k"]), "top1": float(r["top1"]),
                 "loss": float(r["loss"]), "lr": float(r["lr"])} for r in csv.DictReader(fh)]
