"""Prototype extraction and prototype-based classification.

A prototype is the (optionally soft-weighted) masked average of a DxHxW
feature map over the pixels of one class. A background/foreground prototype
pair acts as a nearest-prototype classifier through per-pixel cosine
similarity; summing similarity maps from several pairs and taking a channel
softmax yields an aggregated class-probability map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    broadcast_map,
    broadcast_vector,
    channel_softmax,
    clamp,
    concat_channels,
    div,
    mul,
    reduce_sum,
    scale,
    sqrt,
    square,
    take_channel,
)

COSINE_EPS = 1e-8  # added to each norm so zero features cannot divide by zero
MIN_REGION_WEIGHT = 1e-8


class NoPrototypesError(RuntimeError):
    """No valid prototype pair is available to classify with."""


@dataclass
class PrototypePair:
    """Background/foreground prototype vectors pooled from one image."""

    p0: Tensor
    p1: Tensor
    valid: tuple[bool, bool]
    source_id: str = ""

    def vec(self, c: int) -> Tensor:
        return self.p1 if c else self.p0

    @property
    def both_valid(self) -> bool:
        return self.valid[0] and self.valid[1]


@dataclass
class AveragedPrototype:
    p0: Tensor
    p1: Tensor
    contributing_count: tuple[int, int]

    def vec(self, c: int) -> Tensor:
        return self.p1 if c else self.p0

    @property
    def both_valid(self) -> bool:
        return self.contributing_count[0] > 0 and self.contributing_count[1] > 0


@dataclass
class RegionalPrototype:
    vector: Tensor
    region_index: int
    pixel_count: int


def _masked_mean(feature: Tensor, mask: np.ndarray) -> tuple[Tensor | None, int]:
    count = int(mask.sum())
    if count == 0:
        return None, 0
    weights = np.broadcast_to(mask.astype(np.float32), feature.data.shape).copy()
    pooled = reduce_sum(mul(feature, Tensor(weights)), axes=(1, 2))
    return scale(pooled, 1.0 / count), count


def extract_prototypes(feature: Tensor, mask: np.ndarray, source_id: str = "") -> PrototypePair:
    """Pool per-class prototypes from a feature map under a {0,1} mask.

    A class absent from the mask yields a zero placeholder vector with
    valid=False for that class. Differentiable with respect to the feature.
    """
    mask = np.asarray(mask)
    if mask.shape != feature.data.shape[1:]:
        raise ValueError(
            f"mask shape {mask.shape} does not match feature spatial shape {feature.data.shape[1:]}"
        )
    d = feature.data.shape[0]
    vectors = []
    valid = []
    for c in (0, 1):
        pooled, count = _masked_mean(feature, mask == c)
        if pooled is None:
            pooled = Tensor(np.zeros(d, dtype=np.float32))
        vectors.append(pooled)
        valid.append(count > 0)
    return PrototypePair(p0=vectors[0], p1=vectors[1], valid=(valid[0], valid[1]), source_id=source_id)


def labeled_prototypes(
    feature: Tensor, predicted_mask: np.ndarray, truth_mask: np.ndarray, source_id: str = ""
) -> PrototypePair:
    """Prototypes from the predicted mask, falling back per class to ground truth.

    Early in training a class can vanish from the prediction; pooling that
    class from the ground-truth mask instead keeps the pair usable. A class
    absent from both masks is marked invalid.
    """
    pred = extract_prototypes(feature, predicted_mask, source_id)
    if pred.both_valid:
        return pred
    truth = extract_prototypes(feature, truth_mask, source_id)
    vectors = [pred.p0, pred.p1]
    valid = list(pred.valid)
    for c in (0, 1):
        if not valid[c] and truth.valid[c]:
            vectors[c] = truth.vec(c)
            valid[c] = True
    return PrototypePair(p0=vectors[0], p1=vectors[1], valid=(valid[0], valid[1]), source_id=source_id)


def cosine_similarity_map(feature: Tensor, prototype: Tensor) -> Tensor:
    """Per-pixel cosine similarity between feature columns and a D-vector.

    Both norms get a 1e-8 epsilon and the result is clamped to [-1, 1].
    Differentiable with respect to both inputs.
    """
    d, h, w = feature.data.shape
    if prototype.data.shape != (d,):
        raise ValueError(f"prototype shape {prototype.data.shape} does not match feature depth {d}")
    tiled = broadcast_vector(prototype, (h, w))
    dots = reduce_sum(mul(feature, tiled), axes=(0,))
    feat_norm = sqrt(reduce_sum(square(feature), axes=(0,)))
    proto_norm = sqrt(reduce_sum(square(prototype)))
    denom = mul(add(feat_norm, COSINE_EPS), add(proto_norm, COSINE_EPS))
    return clamp(div(dots, denom), -1.0, 1.0)


def pair_similarity(feature: Tensor, pair: PrototypePair | AveragedPrototype) -> tuple[Tensor, Tensor]:
    """Background and foreground cosine maps for one prototype pair."""
    return (
        cosine_similarity_map(feature, pair.vec(0)),
        cosine_similarity_map(feature, pair.vec(1)),
    )


def aggregate_probability(sim_stack: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Class probabilities from summed per-pair similarity maps.

    Each entry holds the (background, foreground) cosine maps of one valid
    prototype pair; the per-class sums are turned into a 2xHxW probability
    map by a per-pixel channel softmax.
    """
    if not sim_stack:
        raise NoPrototypesError("no valid prototype pairs to aggregate")
    total0, total1 = sim_stack[0]
    for g0, g1 in sim_stack[1:]:
        total0 = add(total0, g0)
        total1 = add(total1, g1)
    return channel_softmax(concat_channels([total0, total1]))


def average_prototypes(pairs: list[PrototypePair]) -> AveragedPrototype:
    """Arithmetic per-class mean over the pairs where that class is valid."""
    if not pairs:
        raise ValueError("average_prototypes needs at least one pair")
    d = pairs[0].p0.data.shape[0]
    vectors = []
    counts = []
    for c in (0, 1):
        contributing = [p.vec(c) for p in pairs if p.valid[c]]
        if contributing:
            total = contributing[0]
            for vec in contributing[1:]:
                total = add(total, vec)
            vectors.append(scale(total, 1.0 / len(contributing)))
        else:
            vectors.append(Tensor(np.zeros(d, dtype=np.float32)))
        counts.append(len(contributing))
    return AveragedPrototype(p0=vectors[0], p1=vectors[1], contributing_count=(counts[0], counts[1]))


def regional_prototype(
    feature: Tensor, probs: Tensor, vote_sum: np.ndarray, k: int, c: int
) -> RegionalPrototype | None:
    """Soft-weighted mean of feature columns over the vote-sum-k region.

    The class-c probability map weights each pixel. Returns None when the
    region is empty or its total weight is below 1e-8. Differentiable with
    respect to both the feature map and the probability map.
    """
    if k not in (1, 2, 3, 4):
        raise ValueError(f"region index must be in 1..4, got {k}")
    if c not in (0, 1):
        raise ValueError(f"weighting class must be 0 or 1, got {c}")
    region = (np.asarray(vote_sum) == k).astype(np.float32)
    pixel_count = int(region.sum())
    if pixel_count == 0:
        return None
    weights = mul(take_channel(probs, c), Tensor(region))
    total = reduce_sum(weights)
    if float(total.data) < MIN_REGION_WEIGHT:
        return None
    d = feature.data.shape[0]
    weighted = reduce_sum(mul(feature, broadcast_map(weights, d)), axes=(1, 2))
    return RegionalPrototype(vector=div(weighted, total), region_index=k, pixel_count=pixel_count)
