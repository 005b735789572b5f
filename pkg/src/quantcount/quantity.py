"""Counterfactual count hypotheses and the learned quantity embedding."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


def make_delta(n_gt: int, k: int) -> int:
    """Spacing between neighbouring count hypotheses.

    Scales with the ground-truth count (20 percent, rounded) but is capped so
    a symmetric set of k counts stays nonnegative; always at least 1.
    """
    _check_args(n_gt, k)
    half = (k - 1) // 2
    if half == 0 or n_gt < half:
        return 1
    scaled = (2 * n_gt + 5) // 10          # round(0.2 * n_gt), half away from zero
    cap = (2 * n_gt) // (k - 1)
    return max(1, min(scaled, cap))


@dataclass(frozen=True)
class HypothesisSet:
    """Ordered counts [factual, below near-to-far, above near-to-far]."""
    values: tuple
    delta: int
    one_sided: bool

    @property
    def k(self) -> int:
        return len(self.values)

    @property
    def factual(self) -> int:
        return self.values[0]

    def chains(self):
        """Index chains ordered near-to-far from the factual count."""
        k = self.k
        if k == 1:
            return []
        if self.one_sided:
            return [list(range(1, k))]
        half = (k - 1) // 2
        below = list(range(1, 1 + half))
        above = list(range(1 + half, k))
        return [below, above]

    def consecutive_pairs(self):
        """(near, far) index pairs within each chain."""
        pairs = []
        for chain in self.chains():
            pairs.extend(zip(chain[:-1], chain[1:]))
        return pairs


def make_hypotheses(n_gt: int, k: int) -> HypothesisSet:
    _check_args(n_gt, k)
    if k == 1:
        return HypothesisSet(values=(n_gt,), delta=1, one_sided=False)
    half = (k - 1) // 2
    delta = make_delta(n_gt, k)
    if n_gt - half * delta < 0:
        # symmetric set infeasible at this spacing; shrink it, else go one-sided
        reduced = (2 * n_gt) // (k - 1)
        if reduced >= 1:
            delta = reduced
        else:
            values = tuple(n_gt + i * 1 for i in range(k))
            return HypothesisSet(values=values, delta=1, one_sided=True)
    below = [n_gt - i * delta for i in range(1, half + 1)]
    above = [n_gt + i * delta for i in range(1, half + 1)]
    return HypothesisSet(values=(n_gt, *below, *above), delta=delta, one_sided=False)


def _check_args(n_gt: int, k: int):
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if k < 1 or k % 2 == 0:
        raise ValueError("k must be odd and >= 1")


class QuantityEmbedder(nn.Module):
    """Embedding table over integer counts followed by a linear projection.

    Tracks its invocation count so inference-path purity can be asserted.
    """

    def __init__(self, max_count: int, width: int):
        super().__init__()
        self.max_count = max_count
        self.table = nn.Embedding(max_count + 1, width)
        self.proj = nn.Linear(width, width)
        nn.init.normal_(self.table.weight, std=0.02)
        self.call_count = 0

    def forward(self, quantities: torch.Tensor) -> torch.Tensor:
        if quantities.dtype not in (torch.int32, torch.int64):
            raise ValueError("quantities must be an integer tensor")
        if quantities.numel() and (quantities.min() < 0 or quantities.max() > self.max_count):
            raise ValueError(f"quantity outside [0, {self.max_count}]")
        self.call_count += 1
        return self.proj(self.table(quantities))
