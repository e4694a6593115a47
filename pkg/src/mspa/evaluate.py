"""Segmentation metrics, checkpoint evaluation, and the loss ablation harness.

Metrics follow the usual confusion-count definitions with foreground as the
positive class. Dataset numbers are unweighted means of per-image metrics.
The ablation harness trains the four loss configurations (supervised only,
+LPA, +LPA+UPA, full) across seeds and reports per-seed and mean +/- std
test metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import net
from . import train as _train
from .data import Sample
from .losses import LossToggles
from .tensor import Tensor, argmax_channels, no_grad

METRIC_NAMES = ("dsc", "iou", "sen", "spe", "acc")

ABLATION_ROWS: tuple[tuple[str, LossToggles], ...] = (
    ("sup", LossToggles(lpa=False, upa=False, spa=False)),
    ("sup+lpa", LossToggles(lpa=True, upa=False, spa=False)),
    ("sup+lpa+upa", LossToggles(lpa=True, upa=True, spa=False)),
    ("sup+lpa+upa+spa", LossToggles(lpa=True, upa=True, spa=True)),
)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Pixelwise confusion counts with foreground (1) as positive."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
        tn=int(np.sum(~p & ~t)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 1.0


def metrics_from_counts(c: ConfusionCounts) -> dict[str, float]:
    """Dice, IoU, sensitivity, specificity, accuracy from confusion counts.

    A zero denominator means the quantity is vacuous for this image (e.g.
    no foreground in either map for Dice) and scores 1.0.
    """
    return {
        "dsc": _ratio(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
        "sen": _ratio(c.tp, c.tp + c.fn),
        "spe": _ratio(c.tn, c.tn + c.fp),
        "acc": _ratio(c.tp + c.tn, c.total),
    }


@dataclass
class MetricsRecord:
    """Per-image metric dicts plus their unweighted means."""

    per_image: list[dict]
    dsc: float
    iou: float
    sen: float
    spe: float
    acc: float

    def summary(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _aggregate(per_image: list[dict]) -> MetricsRecord:
    means = {name: float(np.mean([m[name] for m in per_image])) for name in METRIC_NAMES}
    return MetricsRecord(per_image=per_image, **means)


def predict_mask(params: net.SegNetParams, image: np.ndarray) -> np.ndarray:
    """Hard binary prediction for one image, gradient-free."""
    with no_grad():
        out = net.forward(params, Tensor(image))
        return argmax_channels(out.probs)


def evaluate_params(params: net.SegNetParams, samples: list[Sample]) -> MetricsRecord:
    """Mean per-image metrics of a parameter set over labeled samples."""
    if not samples:
        raise ValueError("evaluation needs at least one sample")
    per_image = []
    for s in samples:
        if s.mask is None:
            raise ValueError(f"cannot evaluate unlabeled sample {s.id}")
        pred = predict_mask(params, s.image)
        entry = metrics_from_counts(confusion(pred, s.mask))
        entry["id"] = s.id
        per_image.append(entry)
    return _aggregate(per_image)


def evaluate_checkpoint(checkpoint_path, samples: list[Sample]) -> MetricsRecord:
    return evaluate_params(_train.load_checkpoint(checkpoint_path).params, samples)


# ---------------------------------------------------------------------------
# ablation harness


def _row_stats(runs: list[dict]) -> tuple[dict, dict]:
    mean = {}
    std = {}
    for name in METRIC_NAMES:
        values = np.array([r["metrics"][name] for r in runs], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std())
    return mean, std


def format_ablation_table(report: dict) -> str:
    """Aligned text table: one row per loss configuration, mean +/- std."""
    width = max(len(row["name"]) for row in report["rows"])
    header = "row".ljust(width) + "".join(f"  {name:>15}" for name in METRIC_NAMES)
    lines = [header]
    for row in report["rows"]:
        cells = "".join(
            f"  {row['mean'][name]:.4f}+-{row['std'][name]:.4f}" for name in METRIC_NAMES
        )
        lines.append(row["name"].ljust(width) + cells)
    return "\n".join(lines) + "\n"


def ablate(config, data_dir, seeds: list[int], out_dir, verbose: bool = False) -> dict:
    """Train every loss configuration for every seed; report test metrics.

    Writes ablation.json and ablation.txt under out_dir, with each
    constituent run in its own subdirectory. The row order fixes the
    progression: supervised baseline, +LPA, +LPA+UPA, full.
    """
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for row_name, toggles in ABLATION_ROWS:
        runs = []
        for seed in seeds:
            row_config = replace(config, toggles=toggles, seed=seed)
            run_dir = out_dir / f"{row_name.replace('+', '_')}_seed{seed}"
            result = _train.run(row_config, data_dir, run_dir)
            test = result.metrics.get("test")
            if test is None:
                raise ValueError(f"{data_dir}: ablation needs a labeled test split")
            runs.append({"seed": seed, "metrics": test, "run_dir": str(run_dir)})
            if verbose:
                print(f"{row_name} seed {seed}: dsc={test['dsc']:.4f}", flush=True)
        mean, std = _row_stats(runs)
        rows.append(
            {
                "name": row_name,
                "toggles": {"lpa": toggles.lpa, "upa": toggles.upa, "spa": toggles.spa},
                "runs": runs,
                "mean": mean,
                "std": std,
            }
        )
    report = {"seeds": list(seeds), "config": _train.config_to_dict(config), "rows": rows}
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2) + "\n")
    (out_dir / "ablation.txt").write_text(format_ablation_table(report))
    return report
