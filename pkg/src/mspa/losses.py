"""Training objectives: supervised CE, the three alignment losses, and the ramp.

All losses return scalar Tensors wired into the autodiff tape. Alignment
losses can be absent for a given batch (e.g. a class missing everywhere);
absence is represented by None and contributes nothing to the total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .proto import RegionalPrototype
from .tensor import (
    Tensor,
    absolute,
    add,
    log,
    mul,
    reduce_mean,
    scale,
    square,
    sub,
    take_channel,
)


@dataclass(frozen=True)
class LossToggles:
    """Which alignment losses participate in the total."""

    lpa: bool = True
    upa: bool = True
    spa: bool = True


@dataclass(frozen=True)
class RampSchedule:
    """Gaussian ramp for the alignment-loss weight.

    lambda(t) = w_max * exp(-5 * (1 - t/t_max)^2) for t <= t_max, then
    held at w_max.
    """

    w_max: float = 0.1
    t_max: int = 2000

    def __post_init__(self):
        if not self.w_max > 0:
            raise ValueError(f"w_max must be positive, got {self.w_max}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be a positive integer, got {self.t_max}")


def ramp_weight(schedule: RampSchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"iteration must be nonnegative, got {t}")
    if t >= schedule.t_max:
        return float(schedule.w_max)
    frac = 1.0 - t / schedule.t_max
    return float(schedule.w_max * math.exp(-5.0 * frac * frac))


@dataclass
class LossBundle:
    """Scalar losses of one step; absent alignment terms are None."""

    l_s: Tensor
    l_lpa: Tensor | None
    l_upa: Tensor | None
    l_spa: Tensor | None
    lambda_t: float
    total: Tensor

    def log_fields(self) -> dict:
        def val(t):
            return None if t is None else float(t.data)

        return {
            "l_s": float(self.l_s.data),
            "l_lpa": val(self.l_lpa),
            "l_upa": val(self.l_upa),
            "l_spa": val(self.l_spa),
            "lambda": self.lambda_t,
            "total": float(self.total.data),
        }


def _true_class_prob(probs: Tensor, label: np.ndarray) -> Tensor:
    label = np.asarray(label).astype(np.float32)
    if label.shape != probs.data.shape[1:]:
        raise ValueError(
            f"label shape {label.shape} does not match probability spatial shape {probs.data.shape[1:]}"
        )
    p0 = take_channel(probs, 0)
    p1 = take_channel(probs, 1)
    return add(mul(p0, Tensor(1.0 - label)), mul(p1, Tensor(label)))


def supervised_ce(probs: Tensor, label: np.ndarray) -> Tensor:
    """Mean over pixels of -log p(true class), floored at 1e-12."""
    p_true = _true_class_prob(probs, label)
    return scale(reduce_mean(log(p_true)), -1.0)


def lpa_loss(probs: Tensor, proto_probs: Tensor) -> Tensor:
    """Mean squared difference between two 2xHxW probability maps.

    Symmetric; gradients flow into both maps.
    """
    if probs.data.shape != proto_probs.data.shape:
        raise ValueError(
            f"probability maps disagree in shape: {probs.shape} vs {proto_probs.shape}"
        )
    return reduce_mean(square(sub(probs, proto_probs)))


def upa_loss(proto_probs: Tensor, truth: np.ndarray) -> Tensor:
    """Cross-entropy of a prototype-based prediction against ground truth."""
    return supervised_ce(proto_probs, truth)


def spa_loss(regional: dict[int, RegionalPrototype | None]) -> Tensor | None:
    """L1 alignment of same-class regional prototypes within one image.

    Pulls the uncertain-foreground prototype (region 3) toward the reliable
    one (region 4) and the uncertain-background prototype (region 2) toward
    the reliable one (region 1). Each term is the mean absolute difference
    over the feature dimension; a term missing either endpoint is dropped,
    and with both terms dropped the loss is absent (None).
    """
    terms = []
    for a, b in ((3, 4), (2, 1)):
        pa, pb = regional.get(a), regional.get(b)
        if pa is not None and pb is not None:
            terms.append(reduce_mean(absolute(sub(pa.vector, pb.vector))))
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


def total_loss(
    l_s: Tensor,
    l_lpa: Tensor | None,
    l_upa: Tensor | None,
    l_spa: Tensor | None,
    toggles: LossToggles,
    lambda_t: float,
) -> LossBundle:
    """Combine supervised and alignment losses under the ramp weight.

    total = l_s + lambda_t * sum of the alignment losses that are both
    toggled on and present. A toggled-off loss is recorded as absent.
    """
    l_lpa = l_lpa if toggles.lpa else None
    l_upa = l_upa if toggles.upa else None
    l_spa = l_spa if toggles.spa else None
    alignment = None
    for term in (l_lpa, l_upa, l_spa):
        if term is not None:
            alignment = term if alignment is None else add(alignment, term)
    total = l_s if alignment is None else add(l_s, scale(alignment, lambda_t))
    return LossBundle(l_s=l_s, l_lpa=l_lpa, l_upa=l_upa, l_spa=l_spa, lambda_t=lambda_t, total=total)
