"""Density regression plus the two quantity-alignment penalties.

The encoder-side penalty scores each hypothesis by the cosine between its
global visual token and its full text encoding, then hinges (a) every
counterfactual score against the factual one and (b) each within-chain
pair so scores decay monotonically with distance from the true count.
The decoder-side penalty ties every hypothesis' predicted count to its
conditioning count. relu has zero slope at exactly 0, so ties are not
penalized and finite-difference checks stay clean away from kinks.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .decoder import COSINE_EPS
from .quantity import HypothesisSet

DEFAULT_LAMBDA1 = 0.1
DEFAULT_LAMBDA2 = 0.05
DEFAULT_BETA = 0.1


def cosine_score(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine over the last dim, norm product clamped at 1e-8."""
    dot = (a * b).sum(-1)
    denom = (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(COSINE_EPS)
    return (dot / denom).clamp(-1.0, 1.0)


def alignment_scores(pairs, text_map=None) -> torch.Tensor:
    """Per-hypothesis cosine between the global visual token and the full
    text encoding. pairs: EncodedPair list ordered by hypothesis index.
    text_map bridges the text width to the vision width when they differ
    (the decoder's similarity bridge in the assembled model)."""
    vg = torch.stack([p.dense.v_g for p in pairs])
    tf = torch.stack([p.text_full for p in pairs])
    if text_map is not None:
        tf = text_map(tf)
    if vg.shape[-1] != tf.shape[-1]:
        raise ValueError("global token and text encoding widths differ; "
                         "pass text_map to bridge them")
    return cosine_score(vg, tf)


def enc_quantity_loss(alpha: torch.Tensor, hypotheses: HypothesisSet) -> torch.Tensor:
    """Ranking penalty over alignment scores. alpha: (K,) ordered like the
    hypothesis set. Returns 0 for K == 1."""
    k = hypotheses.k
    if alpha.shape != (k,):
        raise ValueError(f"alpha must have shape ({k},)")
    if k == 1:
        return alpha.sum() * 0.0
    dominance = F.relu(alpha[1:] - alpha[0]).sum() / (k - 1)
    pairs = hypotheses.consecutive_pairs()
    if pairs:
        near = alpha[torch.tensor([p[0] for p in pairs])]
        far = alpha[torch.tensor([p[1] for p in pairs])]
        chain = F.relu(far - near).sum() / max(k - 3, 1)
    else:
        chain = alpha.sum() * 0.0
    return dominance + chain


def dec_quantity_loss(counts: torch.Tensor, hypotheses: HypothesisSet,
                      beta: float = DEFAULT_BETA) -> torch.Tensor:
    """Squared count error: factual count against the true count plus
    beta-weighted counterfactual counts against their hypothesis counts.
    counts: (K,) predicted counts ordered like the hypothesis set."""
    k = hypotheses.k
    if counts.shape != (k,):
        raise ValueError(f"counts must have shape ({k},)")
    target = counts.new_tensor([float(v) for v in hypotheses.values])
    loss = (counts[0] - target[0]) ** 2
    if k > 1:
        loss = loss + beta * ((counts[1:] - target[1:]) ** 2).sum()
    return loss


def density_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum of squared differences over the map."""
    if pred.shape != target.shape:
        raise ValueError("density shape mismatch")
    return ((pred - target) ** 2).sum()


@dataclass
class LossBreakdown:
    density: torch.Tensor
    enc_quantity: torch.Tensor
    dec_quantity: torch.Tensor
    lambda1: float
    lambda2: float

    @property
    def total(self) -> torch.Tensor:
        return self.density + self.lambda1 * self.enc_quantity + self.lambda2 * self.dec_quantity


def total_loss(density: torch.Tensor, enc_quantity: torch.Tensor,
               dec_quantity: torch.Tensor, lambda1: float = DEFAULT_LAMBDA1,
               lambda2: float = DEFAULT_LAMBDA2) -> LossBreakdown:
    return LossBreakdown(density=density, enc_quantity=enc_quantity,
                         dec_quantity=dec_quantity, lambda1=lambda1, lambda2=lambda2)
