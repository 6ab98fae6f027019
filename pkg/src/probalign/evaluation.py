"""Downstream protocols over frozen encoders.

Covers cross-modal retrieval (Recall@K / RSUM), zero-shot scoring against
class prototypes built from synthetic text prompts (optionally filtered to
the k least-uncertain prompts per class), few-shot linear probing on the mean
embeddings with an optional sampling-augmented support set, multimodal
concatenated classification, rank statistics (Mann-Whitney AUROC with the
half-tie convention, Spearman correlation), a permutation-null significance
helper, and an input-noise vs predicted-uncertainty probe.

Everything here is read-only over the model and takes explicit rngs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .encoders import AlignmentModel, Modality
from .gaussians import (
    GaussianBatch,
    GaussianEmbedding,
    SimilarityKind,
    pairwise_similarity_arrays,
    sample,
    stack_embeddings,
)

PROBE_ITERS = 500
PROBE_LR = 0.1
PROBE_L2 = 1e-4


# -- rank statistics -----------------------------------------------------------


def tied_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (#concordant + 0.5 * #ties) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("auroc: scores and labels must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc: both classes must be present")
    ranks = tied_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class RocCurve:
    """(score, label) pairs sorted by descending score, with the AUROC."""

    points: list[tuple[float, int]]
    auroc: float


def roc_curve(scores, labels) -> RocCurve:
    value = auroc(scores, labels)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    pts = [(float(scores[i]), int(labels[i])) for i in order]
    return RocCurve(pts, value)


def macro_ovr_auroc(scores: np.ndarray, labels, classes) -> float:
    """Macro average of one-vs-rest AUROCs over the score matrix columns."""
    labels = np.asarray(labels)
    per_class = []
    for col, cls in enumerate(classes):
        binary = (labels == cls).astype(int)
        if binary.min() == binary.max():
            continue
        per_class.append(auroc(scores[:, col], binary))
    if not per_class:
        raise ValueError("macro_ovr_auroc: no class has both positives and negatives")
    return float(np.mean(per_class))


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks for ties); 0 if degenerate."""
    rx = tied_ranks(np.asarray(x, dtype=np.float64))
    ry = tied_ranks(np.asarray(y, dtype=np.float64))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)


def permutation_pvalue(
    scores, labels, rng: np.random.Generator, n_permutations: int = 500
) -> dict:
    """One-sided permutation test of AUROC against label shuffling."""
    labels = np.asarray(labels)
    observed = auroc(scores, labels)
    null = np.empty(n_permutations)
    for i in range(n_permutations):
        null[i] = auroc(scores, rng.permutation(labels))
    p = (1.0 + float((null >= observed).sum())) / (n_permutations + 1.0)
    return {
        "observed": observed,
        "p_value": p,
        "null_mean": float(null.mean()),
        "null_std": float(null.std()),
    }


# -- retrieval ------------------------------------------------------------------


@dataclass
class RetrievalResult:
    recall_at: dict[int, float]
    rsum: float


def recall_at_k(sim: np.ndarray, ground_truth, ks) -> RetrievalResult:
    """Recall@K over a query x gallery similarity matrix.

    ``ground_truth`` maps each query row to its single correct gallery column
    (as a sequence or a dict). Ranking is by descending similarity with ties
    broken in favor of the lower gallery index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n_q, n_g = sim.shape
    if isinstance(ground_truth, dict):
        ground_truth = [ground_truth[i] for i in range(n_q)]
    gt = np.asarray(ground_truth, dtype=int)
    if gt.shape != (n_q,):
        raise ValueError("recall_at_k: need one ground-truth index per query")
    ks = sorted(int(k) for k in ks)
    if ks[0] < 1 or ks[-1] > n_g:
        raise ValueError(f"recall_at_k: K must lie in [1, {n_g}], got {ks}")

    target = sim[np.arange(n_q), gt]
    better = (sim > target[:, None]).sum(axis=1)
    tie_before = np.array([(sim[i, : gt[i]] == target[i]).sum() for i in range(n_q)])
    rank = 1 + better + tie_before
    recall = {k: float(100.0 * (rank <= k).mean()) for k in ks}
    return RetrievalResult(recall, float(sum(recall.values())))


# -- zero-shot ---------------------------------------------------------------------


@dataclass
class PromptSet:
    """Synthetic text feature vectors per class."""

    class_prompts: dict[int, list[np.ndarray]]

    def __post_init__(self):
        if not self.class_prompts:
            raise ValueError("PromptSet: no classes")
        for cls, prompts in self.class_prompts.items():
            if len(prompts) == 0:
                raise ValueError(f"PromptSet: class {cls} has no prompts")

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_prompts)

    def prompts_per_class(self) -> int:
        return min(len(p) for p in self.class_prompts.values())


def prompt_uncertainty(e: GaussianEmbedding) -> float:
    """Mean predicted standard deviation across embedding dimensions."""
    return float(np.mean(np.exp(0.5 * e.log_var)))


def _mean_exact(rows: np.ndarray) -> np.ndarray:
    # Centered mean so that identical rows average to themselves bitwise.
    if np.all(rows == rows[0]):
        return rows[0].copy()
    return rows[0] + (rows - rows[0]).mean(axis=0)


def class_prototype(embeddings: list[GaussianEmbedding]) -> GaussianEmbedding:
    """Average the means and the variances of a class's prompt embeddings."""
    mus, lvs = stack_embeddings(embeddings)
    mu = _mean_exact(mus)
    if np.all(lvs == lvs[0]):
        log_var = lvs[0].copy()
    else:
        log_var = np.log(_mean_exact(np.exp(lvs)))
    return GaussianEmbedding(mu, log_var)


def _items_to_arrays(items) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(items, GaussianBatch):
        return items.mu.data, items.log_var.data
    return stack_embeddings(items)


@dataclass
class ZeroShotResult:
    scores: np.ndarray  # (n_items, n_classes)
    classes: list[int]
    prototypes: list[GaussianEmbedding]
    prompt_uncertainties: dict[int, list[float]] = field(default_factory=dict)


def _encode_prompts(model: AlignmentModel, prompts: PromptSet):
    encoded = {}
    for cls in prompts.classes:
        batch = model.encode(Modality.TEXT, np.stack(prompts.class_prompts[cls]), train=False)
        encoded[cls] = batch.to_embeddings()
    return encoded


def zero_shot(
    model: AlignmentModel, items, prompts: PromptSet, kind: SimilarityKind
) -> ZeroShotResult:
    """Score items against class prototypes averaged from the text prompts."""
    encoded = _encode_prompts(model, prompts)
    return _zero_shot_from_encoded(items, encoded, kind)


def _zero_shot_from_encoded(items, encoded_prompts: dict, kind: SimilarityKind) -> ZeroShotResult:
    classes = sorted(encoded_prompts)
    prototypes = [class_prototype(encoded_prompts[cls]) for cls in classes]
    uncertainties = {
        cls: [prompt_uncertainty(e) for e in encoded_prompts[cls]] for cls in classes
    }
    mu_i, lv_i = _items_to_arrays(items)
    mu_p, lv_p = stack_embeddings(prototypes)
    scores = pairwise_similarity_arrays(mu_i, lv_i, mu_p, lv_p, kind)
    return ZeroShotResult(scores, classes, prototypes, uncertainties)


def filtered_zero_shot(
    model: AlignmentModel, items, prompts: PromptSet, k: int, kind: SimilarityKind
) -> ZeroShotResult:
    """Zero-shot over only the k lowest-uncertainty prompts of each class.

    Selected prompts keep their original order, so k equal to the full prompt
    count reproduces ``zero_shot`` bit for bit.
    """
    if not 1 <= k <= prompts.prompts_per_class():
        raise ValueError(
            f"filtered_zero_shot: k must lie in [1, {prompts.prompts_per_class()}], got {k}"
        )
    encoded = _encode_prompts(model, prompts)
    filtered = {}
    for cls, embeddings in encoded.items():
        uncertainties = np.array([prompt_uncertainty(e) for e in embeddings])
        keep = np.sort(np.argsort(uncertainties, kind="mergesort")[:k])
        filtered[cls] = [embeddings[i] for i in keep]
    return _zero_shot_from_encoded(items, filtered, kind)


# -- few-shot probing -----------------------------------------------------------------


def logistic_probe(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    iters: int = PROBE_ITERS,
    lr: float = PROBE_LR,
    l2: float = PROBE_L2,
) -> np.ndarray:
    """Softmax regression by full-batch gradient descent; returns (d+1, C)."""
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    one_hot = np.zeros((n, n_classes))
    one_hot[np.arange(n), y] = 1.0
    w = np.zeros((d + 1, n_classes))
    for _ in range(iters):
        logits = xb @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = xb.T @ (p - one_hot) / n
        grad[:-1] += l2 * w[:-1]  # bias row not decayed
        w -= lr * grad
    return w


def probe_scores(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    logits = xb @ w
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def _select_support(labels: np.ndarray, classes, k_shot: int, rng: np.random.Generator):
    support_idx = []
    for cls in classes:
        pool = np.flatnonzero(labels == cls)
        if len(pool) < k_shot:
            raise ValueError(f"few_shot: class {cls} has only {len(pool)} examples, need {k_shot}")
        support_idx.extend(pool[rng.permutation(len(pool))[:k_shot]])
    return np.array(support_idx)


def few_shot(
    train_items,
    train_labels,
    test_items,
    test_labels,
    k_shot: int,
    mode: str = "mu_only",
    n_samples: int = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Linear-probe AUROC with a k-shot support set drawn from the train pool.

    ``mu_only`` trains the probe on the support items' mean embeddings;
    ``sampled`` expands every support item into ``n_samples`` reparameterized
    draws and trains on those. Test items are always scored on their means.
    """
    if mode not in ("mu_only", "sampled"):
        raise ValueError(f"few_shot: unknown mode {mode!r}")
    if mode == "sampled" and n_samples < 1:
        raise ValueError("few_shot: n_samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)

    mu_train, lv_train = _items_to_arrays(train_items)
    mu_test, _ = _items_to_arrays(test_items)
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    classes = sorted(set(int(c) for c in train_labels))
    class_index = {cls: i for i, cls in enumerate(classes)}

    support = _select_support(train_labels, classes, k_shot, rng)
    if mode == "mu_only":
        x = mu_train[support]
        y = np.array([class_index[int(c)] for c in train_labels[support]])
    else:
        rows, y = [], []
        for idx in support:
            e = GaussianEmbedding(mu_train[idx], lv_train[idx])
            rows.append(sample(e, n_samples, rng))
            y.extend([class_index[int(train_labels[idx])]] * n_samples)
        x = np.vstack(rows)
        y = np.array(y)

    w = logistic_probe(x, y, len(classes))
    scores = probe_scores(w, mu_test)
    if len(classes) == 2:
        return auroc(scores[:, 1], (test_labels == classes[1]).astype(int))
    return macro_ovr_auroc(scores, test_labels, classes)


# -- multimodal classification -----------------------------------------------------


def multimodal_classify(
    model: AlignmentModel,
    train_views: tuple[np.ndarray, np.ndarray],
    train_labels,
    test_views: tuple[np.ndarray, np.ndarray],
    test_labels,
    k_shot: int,
    prompts: PromptSet,
    kind: SimilarityKind,
    rng: np.random.Generator,
    pair: tuple[Modality, Modality] = (Modality.MOD_A, Modality.MOD_B),
    fusion: str = "mean",
) -> dict:
    """ZS and FS AUROCs for each single modality and their combination.

    FS combines the modalities by concatenating mean embeddings before the
    probe; ZS fuses the two per-modality prototype-similarity scores with the
    configured rule (mean or max).
    """
    if fusion not in ("mean", "max"):
        raise ValueError(f"multimodal_classify: unknown fusion {fusion!r}")
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)

    enc_train = [model.encode(m, x, train=False) for m, x in zip(pair, train_views)]
    enc_test = [model.encode(m, x, train=False) for m, x in zip(pair, test_views)]

    out = {"zs": {}, "fs": {}}
    names = [pair[0].value, pair[1].value, "both"]

    # Zero-shot: per-modality prototype similarities, then fused.
    encoded_prompts = _encode_prompts(model, prompts)
    zs_scores = []
    for enc in enc_test:
        result = _zero_shot_from_encoded(enc, encoded_prompts, kind)
        zs_scores.append(result.scores)
        classes = result.classes
    fused = (
        0.5 * (zs_scores[0] + zs_scores[1]) if fusion == "mean" else np.maximum(*zs_scores)
    )
    for name, scores in zip(names, zs_scores + [fused]):
        if len(classes) == 2:
            out["zs"][name] = auroc(scores[:, 1], (test_labels == classes[1]).astype(int))
        else:
            out["zs"][name] = macro_ovr_auroc(scores, test_labels, classes)

    # Few-shot: same support rows for singles and the concatenation.
    mu_train = [b.mu.data for b in enc_train]
    mu_test = [b.mu.data for b in enc_test]
    feature_sets = [
        (mu_train[0], mu_test[0]),
        (mu_train[1], mu_test[1]),
        (np.hstack(mu_train), np.hstack(mu_test)),
    ]
    classes = sorted(set(int(c) for c in train_labels))
    class_index = {cls: i for i, cls in enumerate(classes)}
    support = _select_support(train_labels, classes, k_shot, rng)
    y = np.array([class_index[int(c)] for c in train_labels[support]])
    for name, (x_train, x_test) in zip(names, feature_sets):
        w = logistic_probe(x_train[support], y, len(classes))
        scores = probe_scores(w, x_test)
        if len(classes) == 2:
            out["fs"][name] = auroc(scores[:, 1], (test_labels == classes[1]).astype(int))
        else:
            out["fs"][name] = macro_ovr_auroc(scores, test_labels, classes)
    return out


# -- uncertainty probes ----------------------------------------------------------------


@dataclass
class UncertaintyProbe:
    series: list[tuple[float, float]]  # (noise level, mean uncertainty)
    spearman: float


def uncertainty_noise_probe(
    model: AlignmentModel,
    modality: Modality,
    x: np.ndarray,
    noise_levels,
    rng: np.random.Generator,
) -> UncertaintyProbe:
    """Encode one raw item under increasing input noise; track uncertainty."""
    levels = [float(v) for v in noise_levels]
    if levels != sorted(levels) or levels[0] != 0.0:
        raise ValueError("uncertainty_noise_probe: levels must ascend and start at 0")
    x = np.asarray(x, dtype=np.float64)
    series = []
    for level in levels:
        noisy = x + rng.standard_normal(x.shape) * level
        emb = model.encode(modality, noisy[None, :], train=False).to_embeddings()[0]
        series.append((level, prompt_uncertainty(emb)))
    rho = spearman([s[0] for s in series], [s[1] for s in series])
    return UncertaintyProbe(series, rho)


def mean_uncertainty_by_noise(
    model: AlignmentModel,
    modality: Modality,
    items: np.ndarray,
    noise_levels,
    rng: np.random.Generator,
) -> UncertaintyProbe:
    """Average the per-level uncertainty over many items, then correlate."""
    levels = [float(v) for v in noise_levels]
    if levels != sorted(levels) or levels[0] != 0.0:
        raise ValueError("mean_uncertainty_by_noise: levels must ascend and start at 0")
    items = np.asarray(items, dtype=np.float64)
    means = []
    for level in levels:
        noisy = items + rng.standard_normal(items.shape) * level
        batch = model.encode(modality, noisy, train=False)
        means.append(float(np.mean(np.exp(0.5 * batch.log_var.data))))
    rho = spearman(levels, means)
    return UncertaintyProbe(list(zip(levels, means)), rho)


# -- report container --------------------------------------------------------------------


@dataclass
class EvalReport:
    """Named metrics of one protocol run, serializable to JSON."""

    protocol: str
    metrics: dict
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"protocol": self.protocol, "metrics": self.metrics, "details": self.details}
        return json.dumps(doc, sort_keys=True, indent=2, default=_jsonable)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(doc["protocol"], doc["metrics"], doc.get("details", {}))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def write_scores_csv(path, header: list[str], rows) -> None:
    """Optional per-item score dump for external plotting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
