"""Pseudo-label noise analysis.

Quantifies the error carried by pseudo labels (signed foreground bias and
mismatch magnitude per sample), checks the triangle-inequality bound that
justifies fresh-start training, and runs a stylized Monte Carlo model of how
that bias propagates across generations under each training regime.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .data import DatasetBundle
from .metrics import confusion
from .util import rng_for


@dataclass(frozen=True)
class NoiseRecord:
    """Confusion-derived error summary of one sample's pseudo label:
    ``bias`` is the signed foreground-count error per pixel, ``magnitude``
    the fraction of mismatched pixels; magnitude >= |bias| always."""

    sample_id: str
    generation: int
    class_rates: tuple[float, ...]  # signed (predicted - true) count rate per class
    bias: float
    magnitude: float


def noise_record_from_confusion(sample_id: str, generation: int,
                                cm: np.ndarray) -> NoiseRecord:
    n = int(cm.sum())
    pred_counts = cm.sum(axis=0)
    true_counts = cm.sum(axis=1)
    rates = tuple(float(pred_counts[c] - true_counts[c]) / n for c in range(cm.shape[0]))
    fg_pred = int(pred_counts[1:].sum())
    fg_true = int(true_counts[1:].sum())
    bias = (fg_pred - fg_true) / n
    magnitude = 1.0 - int(np.trace(cm)) / n
    return NoiseRecord(sample_id, generation, rates, bias, magnitude)


def estimate_label_bias(store, bundle: DatasetBundle) -> list[NoiseRecord]:
    """Per-sample bias/magnitude of the store's current pseudo labels against
    the hidden reference truth. Samples absent from the store are skipped
    (with one warning naming the count)."""
    records = []
    skipped = 0
    for sid in bundle.reference_ids:
        if sid not in store.entries:
            skipped += 1
            continue
        entry = store.entries[sid]
        truth = bundle.reference_truth(sid)
        label = entry.label
        if label.num_classes != truth.num_classes:
            raise ValueError(f"sample {sid}: store label classes {label.num_classes} "
                             f"!= truth classes {truth.num_classes}")
        cm = confusion(label, truth)
        records.append(noise_record_from_confusion(sid, entry.generation, cm))
    if skipped:
        warnings.warn(f"{skipped} reference samples missing from the pseudo-label store",
                      stacklevel=2)
    return records


def aggregate_bias(records: list[NoiseRecord]) -> dict[int, dict[str, float]]:
    """Mean bias / magnitude per generation."""
    out: dict[int, dict[str, float]] = {}
    by_gen: dict[int, list[NoiseRecord]] = {}
    for r in records:
        by_gen.setdefault(r.generation, []).append(r)
    for g, rs in sorted(by_gen.items()):
        out[g] = {"bias": float(np.mean([r.bias for r in rs])),
                  "magnitude": float(np.mean([r.magnitude for r in rs])),
                  "count": len(rs)}
    return out


def check_estimation_bound(y, y_star, f_out) -> tuple[float, float, bool]:
    """| ||y-f|| - ||y*-f|| | <= ||y-y*|| under the L1 norm over the grid.

    Returns (lhs, rhs, holds). Holds for every input by the triangle
    inequality; the tolerance only absorbs float rounding.
    """
    y = np.asarray(y, dtype=np.float64)
    y_star = np.asarray(y_star, dtype=np.float64)
    f_out = np.asarray(f_out, dtype=np.float64)
    if not (y.shape == y_star.shape == f_out.shape):
        raise ValueError(f"shape mismatch: {y.shape}, {y_star.shape}, {f_out.shape}")
    lhs = abs(np.abs(y - f_out).sum() - np.abs(y_star - f_out).sum())
    rhs = float(np.abs(y - y_star).sum())
    return float(lhs), rhs, bool(lhs <= rhs + 1e-12)


REGIMES = ("continual", "scratch", "cross_subset")


@dataclass(frozen=True)
class PropagationSpec:
    """Stylized bias-propagation model (not fitted to real runs).

    Each generation the student inherits a fraction of the teacher's bias
    and picks up fresh noise. The inherited fraction models the share the
    inherited error occupies in the loss: |b| / (|b| + d), where d is the
    loss distance at initialization (small when continuing from the teacher,
    large from a fresh start). Setting ``attenuation`` switches to a constant
    inherited fraction for the fresh-start regimes instead (continual then
    retains everything).
    """

    regime: str = "continual"
    generations: int = 5
    trials: int = 500
    initial_bias: float = 0.05
    inject_mean: float = 0.03
    inject_std: float = 0.015
    loss_share_distance_continual: float = 0.05
    loss_share_distance_fresh: float = 0.8
    attenuation: float | None = None

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.inject_std < 0:
            raise ValueError("inject_std must be >= 0")
        if self.attenuation is not None and not (0.0 <= self.attenuation <= 1.0):
            raise ValueError("attenuation must lie in [0, 1]")
        for name in ("loss_share_distance_continual", "loss_share_distance_fresh"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class PropagationResult:
    regime: str
    bias: np.ndarray  # (trials, generations + 1)

    @property
    def final_bias(self) -> np.ndarray:
        return self.bias[:, -1]

    def summary(self) -> dict:
        mean = self.bias.mean(axis=0)
        sd = self.bias.std(axis=0, ddof=1) if self.bias.shape[0] > 1 else np.zeros_like(mean)
        half = 1.96 * sd / np.sqrt(self.bias.shape[0])
        return {
            "regime": self.regime,
            "generations": self.bias.shape[1] - 1,
            "trials": self.bias.shape[0],
            "mean": [float(v) for v in mean],
            "ci_low": [float(v) for v in mean - half],
            "ci_high": [float(v) for v in mean + half],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "generation", "regime", "bias"])
        for i in range(self.bias.shape[0]):
            for g in range(self.bias.shape[1]):
                w.writerow([i, g, self.regime, repr(float(self.bias[i, g]))])
        return buf.getvalue()


def _retention(spec: PropagationSpec, b: float, fresh: bool) -> float:
    if spec.attenuation is not None:
        return spec.attenuation if fresh else 1.0
    d = spec.loss_share_distance_fresh if fresh else spec.loss_share_distance_continual
    return abs(b) / (abs(b) + d)


def simulate_error_propagation(spec: PropagationSpec, seed: int) -> PropagationResult:
    """Per-trial expected-bias trajectories under the regime's update rule.

    Noise draws are indexed by (trial, generation, chain) independently of
    the regime, so trajectories of different regimes under the same seed are
    driven by common random numbers and comparable pathwise.
    """
    spec.validate()
    traj = np.empty((spec.trials, spec.generations + 1))
    for i in range(spec.trials):
        rng = rng_for(seed, "trial", i)
        eta = rng.normal(spec.inject_mean, spec.inject_std,
                         size=(spec.generations, 2))
        if spec.regime == "cross_subset":
            c1 = c2 = spec.initial_bias
            traj[i, 0] = 0.5 * (c1 + c2)
            for g in range(spec.generations):
                n1 = _retention(spec, c2, fresh=True) * c2 + eta[g, 0]
                n2 = _retention(spec, c1, fresh=True) * c1 + eta[g, 1]
                c1, c2 = n1, n2
                traj[i, g + 1] = 0.5 * (c1 + c2)
        else:
            fresh = spec.regime == "scratch"
            b = spec.initial_bias
            traj[i, 0] = b
            for g in range(spec.generations):
                b = _retention(spec, b, fresh) * b + eta[g, 0]
                traj[i, g + 1] = b
    return PropagationResult(spec.regime, traj)


def propagation_summary_json(results: list[PropagationResult]) -> str:
    return json.dumps({r.regime: r.summary() for r in results}, indent=1, sort_keys=True)
