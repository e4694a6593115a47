"""Vote-based pseudo-label fusion for unlabeled predictions.

Each valid prototype pair casts one binary prediction per pixel, the plain
network prediction casts another, and the per-pixel vote sum is thresholded
by a majority rule into a pseudo-label. The vote sum also stratifies pixels
into certainty regions used by the self-alignment loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

REGION_INDICES = (1, 2, 3, 4)


@dataclass
class VoteState:
    """Vote maps, their per-pixel sum, and the fused pseudo-label."""

    votes: list[np.ndarray]
    vote_sum: np.ndarray
    pseudo_label: np.ndarray
    n_valid: int


def majority_threshold(n_valid: int) -> int:
    """Minimum vote sum that flips a pixel to foreground.

    With n_valid prototype votes plus the plain prediction there are
    n_valid+1 ballots; the threshold is the strict majority of them,
    ceil((n_valid+2)/2), which sends {0,1,2} to 0 and {3,4,5} to 1 when
    n_valid is 4.
    """
    return math.ceil((n_valid + 2) / 2)


def _as_map(m) -> np.ndarray:
    return m.data if isinstance(m, Tensor) else np.asarray(m)


def prototype_vote(g0, g1) -> np.ndarray:
    """Binary per-pixel prediction from a pair of class-similarity maps.

    Foreground wins strictly; a tie resolves to background.
    """
    g0, g1 = _as_map(g0), _as_map(g1)
    if g0.shape != g1.shape:
        raise ValueError(f"similarity maps disagree in shape: {g0.shape} vs {g1.shape}")
    return (g1 > g0).astype(np.uint8)


def fuse_votes(votes: list[np.ndarray]) -> VoteState:
    """Sum binary vote maps and apply the majority threshold.

    The last entry is conventionally the plain network prediction, so
    n_valid (the prototype-pair count) is len(votes) - 1. The resulting
    pseudo-label is a constant: no gradient flows through it.
    """
    if not votes:
        raise ValueError("fuse_votes needs at least one vote map")
    votes = [_as_map(v) for v in votes]
    shape = votes[0].shape
    for i, v in enumerate(votes[1:], start=1):
        if v.shape != shape:
            raise ValueError(f"vote map {i} has shape {v.shape}, expected {shape}")
    vote_sum = np.zeros(shape, dtype=np.int64)
    for v in votes:
        vote_sum += v.astype(np.int64)
    n_valid = len(votes) - 1
    pseudo = (vote_sum >= majority_threshold(n_valid)).astype(np.uint8)
    return VoteState(votes=votes, vote_sum=vote_sum, pseudo_label=pseudo, n_valid=n_valid)


def region_masks(state: VoteState) -> dict[int, np.ndarray]:
    """Certainty-region masks: region k holds the pixels with vote sum k.

    Defined for the standard five-ballot vote (n_valid = 4); the unanimous
    sums 0 and 5 belong to no region.
    """
    if state.n_valid != 4:
        raise ValueError(f"certainty regions need 4 prototype votes, got {state.n_valid}")
    return {k: (state.vote_sum == k).astype(np.uint8) for k in REGION_INDICES}
