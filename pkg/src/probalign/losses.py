"""Training objectives for cross-modal alignment of Gaussian embeddings.

Three losses combine into the per-pair objective:

* a temperature-scaled InfoNCE over the pairwise similarity matrix, applied
  symmetrically (query->key and key->query);
* a within-modality consistency loss that draws two reparameterized samples
  per embedding and runs NT-Xent over the 2N samples with cosine similarity
  (each anchor's positive is its sibling sample, the anchor itself is excluded
  from the denominator);
* a KL regularizer to the standard-normal prior that keeps variances from
  collapsing.

All row-wise softmax normalizations go through max-subtracted logsumexp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussians import GaussianBatch, SimilarityKind, pairwise_similarity_graph

_MASK = -1e9  # additive mask removing self-similarity from NT-Xent rows


@dataclass
class LossWeights:
    """Component weights and the shared softmax temperature."""

    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 1e-4
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("LossWeights: tau must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("LossWeights: component weights must be nonnegative")


@dataclass
class LossBreakdown:
    """Per-component values of one pair objective (floats, for logging)."""

    total: float
    mod_forward: float
    mod_backward: float
    sis_m1: float
    sis_m2: float
    vib_m1: float
    vib_m2: float

    def as_row(self) -> list[float]:
        return [
            self.total,
            self.mod_forward,
            self.mod_backward,
            self.sis_m1,
            self.sis_m2,
            self.vib_m1,
            self.vib_m2,
        ]


def _nce_from_logits(logits: Tensor) -> Tensor:
    """Mean over rows of (logsumexp(row) - diagonal entry)."""
    return ad.mean_all(ad.logsumexp(logits) - ad.diagonal(logits))


def info_nce_prob(
    queries: GaussianBatch,
    keys: GaussianBatch,
    kind: SimilarityKind,
    tau: float,
    negate_similarity: bool = False,
) -> Tensor:
    """Contrastive loss over matched query/key batches (position i positive).

    ``negate_similarity`` flips the sign fed to the softmax, which turns the
    objective into one that pushes positives apart; it exists purely for
    experimentation and is off by default.
    """
    if queries.n == 0 or keys.n == 0:
        raise ValueError("info_nce_prob: empty batch")
    if queries.n != keys.n:
        raise ValueError(f"info_nce_prob: batch sizes differ ({queries.n} vs {keys.n})")
    if tau <= 0:
        raise ValueError("info_nce_prob: tau must be positive")
    sim = pairwise_similarity_graph(queries, keys, kind)
    sign = -1.0 if negate_similarity else 1.0
    return _nce_from_logits(sim * (sign / tau))


def sis_loss(
    batch: GaussianBatch,
    tau: float,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
) -> Tensor:
    """Sampled-instance NT-Xent: two reparameterized draws per embedding.

    ``eps`` fixes the (2, N, D) noise (used by gradient checks and
    evaluation-mode passes); otherwise fresh noise is drawn from ``rng``.
    """
    n, d = batch.n, batch.dim
    if n < 2:
        raise ValueError("sis_loss: need a batch of at least 2 (no negatives otherwise)")
    if tau <= 0:
        raise ValueError("sis_loss: tau must be positive")
    if eps is None:
        if rng is None:
            raise ValueError("sis_loss: pass rng or explicit eps")
        eps = rng.standard_normal((2, n, d))
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (2, n, d):
        raise ValueError(f"sis_loss: eps must have shape (2, {n}, {d}), got {eps.shape}")

    sigma = ad.exp(0.5 * batch.log_var)
    z = ad.concat([batch.mu + sigma * Tensor(eps[0]), batch.mu + sigma * Tensor(eps[1])])
    zn = ad.l2_normalize(z)
    logits = ad.matmul(zn, ad.transpose(zn)) * (1.0 / tau)

    two_n = 2 * n
    idx = np.arange(two_n)
    sibling = (idx + n) % two_n
    self_mask = np.zeros((two_n, two_n))
    self_mask[idx, idx] = _MASK
    positive_mask = np.zeros((two_n, two_n))
    positive_mask[idx, sibling] = 1.0

    lse = ad.logsumexp(logits + Tensor(self_mask))
    pos = ad.sum_last(logits * Tensor(positive_mask))
    return ad.mean_all(lse - pos)


def vib_loss(batch: GaussianBatch) -> Tensor:
    """Mean KL(N(mu, diag sigma^2) || N(0, I)) over the batch; always >= 0."""
    if batch.n < 1:
        raise ValueError("vib_loss: empty batch")
    kl_rows = 0.5 * ad.sum_last(ad.exp(batch.log_var) + batch.mu * batch.mu - 1.0 - batch.log_var)
    return ad.mean_all(kl_rows)


def pair_loss(
    batch_m1: GaussianBatch,
    batch_m2: GaussianBatch,
    w: LossWeights,
    kind: SimilarityKind,
    rng: np.random.Generator | None = None,
    sis_eps: tuple[np.ndarray, np.ndarray] | None = None,
    negate_similarity: bool = False,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted pair objective; returns the scalar graph node and its breakdown.

    total = alpha*(nce(m1->m2) + nce(m2->m1)) + beta*(sis(m1) + sis(m2))
            + gamma*(vib(m1) + vib(m2))

    Components with a zero weight are skipped (their breakdown entries are 0,
    and no sampling noise is consumed for a zero beta).
    """
    if batch_m1.n != batch_m2.n:
        raise ValueError(f"pair_loss: batch sizes differ ({batch_m1.n} vs {batch_m2.n})")
    if batch_m1.n < 2:
        raise ValueError("pair_loss: need batches of at least 2")

    zero = Tensor(0.0)
    if w.alpha > 0:
        sim = pairwise_similarity_graph(batch_m1, batch_m2, kind)
        sign = -1.0 if negate_similarity else 1.0
        mod_f = _nce_from_logits(sim * (sign / w.tau))
        mod_b = _nce_from_logits(ad.transpose(sim) * (sign / w.tau))
    else:
        mod_f = mod_b = zero
    if w.beta > 0:
        eps1, eps2 = sis_eps if sis_eps is not None else (None, None)
        sis1 = sis_loss(batch_m1, w.tau, rng=rng, eps=eps1)
        sis2 = sis_loss(batch_m2, w.tau, rng=rng, eps=eps2)
    else:
        sis1 = sis2 = zero
    if w.gamma > 0:
        vib1 = vib_loss(batch_m1)
        vib2 = vib_loss(batch_m2)
    else:
        vib1 = vib2 = zero

    total = w.alpha * (mod_f + mod_b) + w.beta * (sis1 + sis2) + w.gamma * (vib1 + vib2)
    breakdown = LossBreakdown(
        total=total.item(),
        mod_forward=mod_f.item(),
        mod_backward=mod_b.item(),
        sis_m1=sis1.item(),
        sis_m2=sis2.item(),
        vib_m1=vib1.item(),
        vib_m2=vib2.item(),
    )
    return total, breakdown
