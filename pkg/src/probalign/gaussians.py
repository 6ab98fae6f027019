"""Diagonal-Gaussian embeddings and closed-form similarities between them.

An embedding is a distribution N(mu, diag(sigma^2)) over the shared latent
space, parameterized by ``mu`` and ``log_var`` vectors of equal length. The
squared Hellinger distance between two such Gaussians factorizes over
dimensions; it is evaluated as a sum of per-dimension log terms with a single
final exp so the product cannot underflow at large D:

    H^2 = 1 - exp( sum_o [ 0.5*ln(2*sa*sb/(sa^2+sb^2))
                           - (mua-mub)^2 / (4*(sa^2+sb^2)) ] )

The similarity used for ranking and contrastive training is 1 - sqrt(H^2),
which is symmetric and bounded in [0, 1]. Bhattacharyya distance, the expected
squared Euclidean distance between independent samples ("csd"), and plain
cosine on the means are provided as alternatives.

Every similarity exists in two routes: a vectorized numpy route for
evaluation/retrieval, and a graph route over :mod:`probalign.autodiff`
tensors for training. Both are checked against each other and against
quadrature/Monte Carlo oracles in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN2 = float(np.log(2.0))

# Variance floor applied inside distance computations only; keeps pathological
# inputs (log_var -> -inf) from dividing by zero. The clamp gradient is zero
# only at the floor itself.
VAR_FLOOR = 1e-12

# Floor under H^2 before the sqrt in the training path; sqrt'(0) is unbounded.
_H2_FLOOR = 1e-12


class SimilarityKind(str, Enum):
    """Which similarity ranks/aligns embedding pairs."""

    COSINE = "cosine"
    HELLINGER = "hellinger"
    BHATTACHARYYA = "bhattacharyya"
    CSD = "csd"


@dataclass
class GaussianEmbedding:
    """One embedding: mean vector and per-dimension log-variance."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.ndim != 1 or self.log_var.ndim != 1:
            raise ValueError("GaussianEmbedding fields must be 1-D vectors")
        if self.mu.shape != self.log_var.shape:
            raise ValueError(
                f"mu and log_var lengths differ: {self.mu.shape[0]} vs {self.log_var.shape[0]}"
            )
        if not (np.isfinite(self.mu).all() and np.isfinite(self.log_var).all()):
            raise ValueError("GaussianEmbedding entries must be finite")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GaussianEmbedding)
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.log_var, other.log_var)
        )


def _check_dims(op: str, a: GaussianEmbedding, b: GaussianEmbedding) -> None:
    if a.dim != b.dim:
        raise ValueError(f"{op}: embedding dimensions differ ({a.dim} vs {b.dim})")


# -- scalar similarities (numpy route) ---------------------------------------


def _log_overlap(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """Sum over dimensions of the log Hellinger-affinity terms (<= 0).

    The per-dimension ratio 2*sa*sb/(sa^2+sb^2) is formed before taking the
    log: it is bitwise symmetric in (a, b) and exactly 1 when the variances
    match (sqrt(x*x) == x in correctly-rounded IEEE-754), so identical
    distributions come out at exactly zero distance.
    """
    va = np.maximum(a.var, VAR_FLOOR)
    vb = np.maximum(b.var, VAR_FLOOR)
    s2 = va + vb
    log_term = 0.5 * np.log(2.0 * np.sqrt(va * vb) / s2)
    quad = (a.mu - b.mu) ** 2 / (4.0 * s2)
    return float(np.sum(log_term - quad))


def hellinger_sq(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """Squared Hellinger distance in [0, 1]; 0 iff the distributions match."""
    _check_dims("hellinger_sq", a, b)
    return max(0.0, 1.0 - float(np.exp(_log_overlap(a, b))))


def hellinger_similarity(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """1 - sqrt(H^2): a bounded, symmetric similarity with self-similarity 1."""
    return 1.0 - float(np.sqrt(hellinger_sq(a, b)))


def bhattacharyya_distance(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """Closed-form Bhattacharyya distance between diagonal Gaussians (>= 0)."""
    _check_dims("bhattacharyya_distance", a, b)
    va = np.maximum(a.var, VAR_FLOOR)
    vb = np.maximum(b.var, VAR_FLOOR)
    s2 = va + vb
    quad = (a.mu - b.mu) ** 2 / (4.0 * s2)
    # ln( (s2/2) / (sa*sb) ), arranged independently of the Hellinger route so
    # the H^2 = 1 - exp(-D_B) identity is a genuine cross-check; exactly zero
    # per dimension when the variances match.
    log_ratio = np.log(0.5 * s2 / np.sqrt(va * vb))
    return float(np.sum(quad + 0.5 * log_ratio))


def csd(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """Expected squared Euclidean distance between independent samples."""
    _check_dims("csd", a, b)
    diff = a.mu - b.mu
    return float(diff @ diff + np.sum(a.var + b.var))


def cosine_mu(a: GaussianEmbedding, b: GaussianEmbedding) -> float:
    """Cosine similarity of the means, ignoring the variances."""
    _check_dims("cosine_mu", a, b)
    na = float(np.linalg.norm(a.mu))
    nb = float(np.linalg.norm(b.mu))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_mu: zero-norm mean vector")
    return float(a.mu @ b.mu) / (na * nb)


def sample(e: GaussianEmbedding, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n reparameterized samples z = mu + sigma * eps, eps ~ N(0, I)."""
    if n < 1:
        raise ValueError("sample: n must be >= 1")
    sigma = np.exp(0.5 * e.log_var)
    eps = rng.standard_normal((n, e.dim))
    return e.mu + sigma * eps


# -- batched similarities (numpy route) ---------------------------------------


def stack_embeddings(embeddings) -> tuple[np.ndarray, np.ndarray]:
    """Stack a sequence of embeddings into (mu, log_var) matrices."""
    embeddings = list(embeddings)
    if not embeddings:
        raise ValueError("stack_embeddings: empty sequence")
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise ValueError(f"stack_embeddings: mixed dimensions {sorted(dims)}")
    mu = np.stack([e.mu for e in embeddings])
    lv = np.stack([e.log_var for e in embeddings])
    return mu, lv


def pairwise_similarity_arrays(
    mu_a: np.ndarray,
    lv_a: np.ndarray,
    mu_b: np.ndarray,
    lv_b: np.ndarray,
    kind: SimilarityKind,
    chunk: int = 256,
) -> np.ndarray:
    """|A| x |B| similarity matrix from stacked parameters.

    For the distance-valued kinds (csd, bhattacharyya) the negated distance is
    returned so that larger always means more similar.
    """
    if mu_a.shape[1] != mu_b.shape[1]:
        raise ValueError(
            f"pairwise_similarity: embedding dimensions differ ({mu_a.shape[1]} vs {mu_b.shape[1]})"
        )
    kind = SimilarityKind(kind)
    if kind is SimilarityKind.COSINE:
        norms_a = np.linalg.norm(mu_a, axis=1, keepdims=True)
        norms_b = np.linalg.norm(mu_b, axis=1, keepdims=True)
        if np.any(norms_a == 0.0) or np.any(norms_b == 0.0):
            raise ValueError("pairwise_similarity: zero-norm mean vector under cosine")
        return (mu_a / norms_a) @ (mu_b / norms_b).T

    va = np.maximum(np.exp(lv_a), VAR_FLOOR)
    vb = np.maximum(np.exp(lv_b), VAR_FLOOR)
    out = np.empty((mu_a.shape[0], mu_b.shape[0]))
    for start in range(0, mu_a.shape[0], chunk):
        stop = min(start + chunk, mu_a.shape[0])
        mu_c, va_c = mu_a[start:stop], va[start:stop]
        d2 = (mu_c[:, None, :] - mu_b[None, :, :]) ** 2
        if kind is SimilarityKind.CSD:
            out[start:stop] = -(d2.sum(axis=-1) + (va_c.sum(axis=1)[:, None] + vb.sum(axis=1)[None, :]))
            continue
        s2 = va_c[:, None, :] + vb[None, :, :]
        quad = d2 / (4.0 * s2)
        sigma_prod = np.sqrt(va_c[:, None, :] * vb[None, :, :])
        if kind is SimilarityKind.BHATTACHARYYA:
            log_ratio = np.log(0.5 * s2 / sigma_prod)
            out[start:stop] = -(quad + 0.5 * log_ratio).sum(axis=-1)
        else:  # Hellinger similarity
            log_term = 0.5 * np.log(2.0 * sigma_prod / s2)
            h2 = np.maximum(1.0 - np.exp((log_term - quad).sum(axis=-1)), 0.0)
            out[start:stop] = 1.0 - np.sqrt(h2)
    return out


def pairwise_similarity(a_embeddings, b_embeddings, kind: SimilarityKind) -> np.ndarray:
    """Similarity matrix between two embedding sequences (larger = closer)."""
    mu_a, lv_a = stack_embeddings(a_embeddings)
    mu_b, lv_b = stack_embeddings(b_embeddings)
    return pairwise_similarity_arrays(mu_a, lv_a, mu_b, lv_b, kind)


# -- batched similarities (autodiff route) -------------------------------------


@dataclass
class GaussianBatch:
    """A batch of embeddings as (N, D) tensors, usable in loss graphs."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mu = ad.tensor(self.mu)
        self.log_var = ad.tensor(self.log_var)
        if self.mu.shape != self.log_var.shape or len(self.mu.shape) != 2:
            raise ValueError(
                f"GaussianBatch: mu and log_var must both be (N, D), got {self.mu.shape} and {self.log_var.shape}"
            )

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    @classmethod
    def from_embeddings(cls, embeddings) -> "GaussianBatch":
        mu, lv = stack_embeddings(embeddings)
        return cls(Tensor(mu), Tensor(lv))

    def to_embeddings(self) -> list[GaussianEmbedding]:
        return [
            GaussianEmbedding(self.mu.data[i].copy(), self.log_var.data[i].copy())
            for i in range(self.n)
        ]


def pairwise_similarity_graph(a: GaussianBatch, b: GaussianBatch, kind: SimilarityKind) -> Tensor:
    """Differentiable |A| x |B| similarity matrix (distances negated)."""
    if a.dim != b.dim:
        raise ValueError(f"pairwise_similarity: embedding dimensions differ ({a.dim} vs {b.dim})")
    kind = SimilarityKind(kind)
    if kind is SimilarityKind.COSINE:
        return ad.matmul(ad.l2_normalize(a.mu), ad.transpose(ad.l2_normalize(b.mu)))

    dmu = ad.outer_sub(a.mu, b.mu)
    if kind is SimilarityKind.CSD:
        va = ad.clamp_min(ad.exp(a.log_var), VAR_FLOOR)
        vb = ad.clamp_min(ad.exp(b.log_var), VAR_FLOOR)
        return ad.neg(ad.sum_last(dmu * dmu + ad.outer_add(va, vb)))

    va = ad.clamp_min(ad.exp(a.log_var), VAR_FLOOR)
    vb = ad.clamp_min(ad.exp(b.log_var), VAR_FLOOR)
    s2 = ad.outer_add(va, vb)
    quad = (dmu * dmu) / (4.0 * s2)
    log_sigma_sum = ad.outer_add(0.5 * ad.log(va), 0.5 * ad.log(vb))
    if kind is SimilarityKind.BHATTACHARYYA:
        log_ratio = ad.log(0.5 * s2) - log_sigma_sum
        return ad.neg(ad.sum_last(quad + 0.5 * log_ratio))

    log_term = 0.5 * (LN2 + (log_sigma_sum - ad.log(s2)))
    h2 = 1.0 - ad.exp(ad.sum_last(log_term - quad))
    return 1.0 - ad.sqrt(ad.clamp_min(h2, _H2_FLOOR))
