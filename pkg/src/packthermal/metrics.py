"""Temperature-field error indices and split-level evaluation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

INDICES = ("mae", "bmae", "max_ae", "mt_ae")


class EmptyMaskError(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    t = np.asarray(getattr(truth, "values", truth), dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    return p, t


def mae(pred, truth) -> float:
    """Mean absolute error over the whole domain."""
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def bmae(pred, truth, mask) -> float:
    """Mean absolute error restricted to battery pixels."""
    p, t = _pair(pred, truth)
    flags = np.asarray(mask if isinstance(mask, np.ndarray) else mask.flags, dtype=bool)
    if flags.shape != p.shape:
        raise ValueError(f"mask shape {flags.shape} != field shape {p.shape}")
    if not flags.any():
        raise EmptyMaskError("battery mask is empty; BMAE is undefined")
    return float(np.mean(np.abs(p - t)[flags]))


def max_ae(pred, truth) -> float:
    """Largest pointwise absolute error."""
    p, t = _pair(pred, truth)
    return float(np.max(np.abs(p - t)))


def mt_ae(pred, truth) -> float:
    """Absolute error of the peak temperature."""
    p, t = _pair(pred, truth)
    return float(abs(p.max() - t.max()))


def case_indices(pred, truth, mask) -> dict:
    return {"mae": mae(pred, truth), "bmae": bmae(pred, truth, mask),
            "max_ae": max_ae(pred, truth), "mt_ae": mt_ae(pred, truth)}


@dataclass
class EvalReport:
    """Per-case indices plus their arithmetic means over the split."""

    model_id: str
    split: str
    rows: list[dict] = field(default_factory=list)

    @property
    def aggregate(self) -> dict:
        if not self.rows:
            return {k: float("nan") for k in INDICES}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in INDICES}

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "split": self.split,
                "aggregate": self.aggregate, "cases": self.rows}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        doc = json.loads(Path(path).read_text())
        return cls(doc["model_id"], doc["split"], list(doc["cases"]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("case_id",) + INDICES)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in ("case_id",) + INDICES})


def evaluate(predict: Callable, cases, split: str, model_id: str) -> EvalReport:
    """Run ``predict(case)`` on every case and score it against the case's truth."""
    report = EvalReport(model_id, split)
    for case in cases:
        if case.truth is None:
            raise ValueError(f"case {case.case_id!r} has no ground-truth temperature")
        pred = predict(case)
        report.rows.append({"case_id": case.case_id,
                            **case_indices(pred, case.truth, case.mask)})
    return report


def comparison_table(reports: list[EvalReport]) -> str:
    """Plain-text table of aggregate indices, one row per model."""
    labels = [r.model_id for r in reports]
    if len(reports) == 2:
        labels.append("reduction vs " + reports[1].model_id)
    width = max(24, *(len(s) + 2 for s in labels))
    head = f"{'model':<{width}}" + "".join(f"{k.upper():>10}" for k in INDICES)
    lines = [head, "-" * len(head)]
    for r in reports:
        agg = r.aggregate
        lines.append(f"{r.model_id:<{width}}" + "".join(f"{agg[k]:>10.4f}" for k in INDICES))
    if len(reports) == 2:
        a, b = reports[0].aggregate, reports[1].aggregate
        rel = "".join(f"{(1 - a[k] / b[k]) * 100 if b[k] else 0.0:>9.1f}%" for k in INDICES)
        lines.append(f"{labels[-1]:<{width}}" + rel)
    return "\n".join(lines)
