"""Synthetic many-to-many multimodal corpus.

Each record is a "patient": a latent concept drawn from a mixture of class
clusters, projected into per-modality feature views through fixed random
linear maps plus Gaussian noise. Text gets several variants per record
(distinct noise draws plus a small variant-specific offset), so one concept
maps to many texts and many texts map to nearby concepts. Records carry an
availability subset of the four trainable modality pairs; the held-out pair
never appears, which is what the emergent-alignment evaluations rely on.

The corpus serializes to line-delimited JSON (one record per line, exact
float round-trip) plus a manifest with the config, seed, per-split counts and
content checksums. Latent generator parameters (cluster centers, projections,
variant offsets) are derived from dedicated seed streams so a corpus read
back from disk can rebuild them exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .encoders import Modality

PairType = tuple[Modality, Modality]

TRAINABLE_PAIRS: tuple[PairType, ...] = (
    (Modality.MOD_A, Modality.TEXT),
    (Modality.MOD_B, Modality.TEXT),
    (Modality.MOD_C, Modality.TEXT),
    (Modality.MOD_A, Modality.MOD_B),
)

HOLDOUT_PAIRS: tuple[PairType, ...] = (
    (Modality.MOD_A, Modality.MOD_C),
    (Modality.MOD_B, Modality.MOD_C),
)


class CorpusFormatError(ValueError):
    """Raised when a corpus file cannot be parsed."""


def _default_view_dims() -> dict[Modality, int]:
    return {Modality.MOD_A: 48, Modality.MOD_B: 40, Modality.MOD_C: 56, Modality.TEXT: 24}


def _default_noise() -> dict[Modality, float]:
    return {m: 0.3 for m in Modality}


def _default_pair_probs() -> dict[PairType, float]:
    return {
        (Modality.MOD_A, Modality.TEXT): 0.9,
        (Modality.MOD_B, Modality.TEXT): 0.9,
        (Modality.MOD_C, Modality.TEXT): 0.15,
        (Modality.MOD_A, Modality.MOD_B): 0.5,
    }


def _default_projection_seeds() -> dict[Modality, int]:
    return {Modality.MOD_A: 101, Modality.MOD_B: 102, Modality.MOD_C: 103, Modality.TEXT: 104}


@dataclass
class CorpusConfig:
    n_records: int = 10_000
    n_classes: int = 5
    latent_dim: int = 16
    cluster_std: float = 0.4
    view_dims: dict[Modality, int] = field(default_factory=_default_view_dims)
    noise_scales: dict[Modality, float] = field(default_factory=_default_noise)
    projection_seeds: dict[Modality, int] = field(default_factory=_default_projection_seeds)
    n_text_variants: int = 3
    pair_probs: dict[PairType, float] = field(default_factory=_default_pair_probs)
    holdout_pair: PairType = (Modality.MOD_A, Modality.MOD_C)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"CorpusConfig: split fractions must sum to 1, got {self.split_fractions}")
        if any(s <= 0 for s in self.noise_scales.values()):
            raise ValueError("CorpusConfig: noise scales must be positive")
        if self.n_text_variants < 2:
            raise ValueError("CorpusConfig: need at least 2 text variants")
        if self.holdout_pair not in HOLDOUT_PAIRS:
            raise ValueError(f"CorpusConfig: holdout pair must be one of {HOLDOUT_PAIRS}")
        if self.class_weights is not None and len(self.class_weights) != self.n_classes:
            raise ValueError("CorpusConfig: class_weights length must equal n_classes")

    def weights(self) -> np.ndarray:
        if self.class_weights is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        w = np.asarray(self.class_weights, dtype=np.float64)
        return w / w.sum()


@dataclass
class SyntheticRecord:
    record_id: int
    class_label: int
    concept: np.ndarray
    views: dict[Modality, np.ndarray]
    text_variants: list[np.ndarray]
    available_pairs: tuple[PairType, ...]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SyntheticRecord)
            and self.record_id == other.record_id
            and self.class_label == other.class_label
            and np.array_equal(self.concept, other.concept)
            and set(self.views) == set(other.views)
            and all(np.array_equal(self.views[m], other.views[m]) for m in self.views)
            and len(self.text_variants) == len(other.text_variants)
            and all(np.array_equal(a, b) for a, b in zip(self.text_variants, other.text_variants))
            and self.available_pairs == other.available_pairs
        )


@dataclass
class LatentSpace:
    """Generator parameters, reconstructible from (config, seed)."""

    centers: np.ndarray  # (C, K)
    projections: dict[Modality, np.ndarray]  # modality -> (dim, K)
    variant_offsets: np.ndarray  # (V, text_dim)


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    latent: LatentSpace
    train: list[SyntheticRecord]
    valid: list[SyntheticRecord]
    test: list[SyntheticRecord]
    # How class labels relate to the latent: mixture clusters, or the sign of
    # the latent-factor sum (the constructed complementary corpus).
    label_rule: str = "cluster"

    @property
    def splits(self) -> dict[str, list[SyntheticRecord]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Corpus)
            and self.seed == other.seed
            and self.label_rule == other.label_rule
            and self.config == other.config
            and all(self.splits[k] == other.splits[k] for k in ("train", "valid", "test"))
        )


def build_latent_space(cfg: CorpusConfig, seed: int) -> LatentSpace:
    """Derive the fixed generator parameters from their dedicated streams."""
    projections = {}
    for modality, proj_seed in cfg.projection_seeds.items():
        rng = np.random.default_rng(proj_seed)
        projections[modality] = rng.normal(
            0.0, 1.0 / np.sqrt(cfg.latent_dim), size=(cfg.view_dims[modality], cfg.latent_dim)
        )
    rng_latent = np.random.default_rng([seed, 1])
    centers = rng_latent.normal(0.0, 1.0, size=(cfg.n_classes, cfg.latent_dim))
    offsets = rng_latent.normal(size=(cfg.n_text_variants, cfg.view_dims[Modality.TEXT]))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    offsets *= cfg.noise_scales[Modality.TEXT] / 2.0
    return LatentSpace(centers, projections, offsets)


def _record_modalities(pairs) -> list[Modality]:
    seen: list[Modality] = []
    for pair in pairs:
        for m in pair:
            if m not in seen:
                seen.append(m)
    return [m for m in Modality if m in seen]


def generate(cfg: CorpusConfig, seed: int) -> Corpus:
    """Generate a record-disjoint train/valid/test corpus, deterministically."""
    latent = build_latent_space(cfg, seed)
    rng = np.random.default_rng([seed, 2])
    weights = cfg.weights()
    pair_list = [p for p in TRAINABLE_PAIRS if cfg.pair_probs.get(p, 0.0) > 0.0]
    probs = np.array([cfg.pair_probs[p] for p in pair_list])

    records: list[SyntheticRecord] = []
    for record_id in range(cfg.n_records):
        label = int(rng.choice(cfg.n_classes, p=weights))
        concept = latent.centers[label] + rng.normal(0.0, cfg.cluster_std, size=cfg.latent_dim)
        while True:
            mask = rng.random(len(pair_list)) < probs
            if mask.any():
                break
        pairs = tuple(p for p, keep in zip(pair_list, mask) if keep)

        views: dict[Modality, np.ndarray] = {}
        text_variants: list[np.ndarray] = []
        for modality in _record_modalities(pairs):
            clean = latent.projections[modality] @ concept
            if modality is Modality.TEXT:
                for v in range(cfg.n_text_variants):
                    noise = rng.normal(0.0, cfg.noise_scales[modality], size=clean.shape)
                    text_variants.append(clean + latent.variant_offsets[v] + noise)
            else:
                noise = rng.normal(0.0, cfg.noise_scales[modality], size=clean.shape)
                views[modality] = clean + noise
        records.append(SyntheticRecord(record_id, label, concept, views, text_variants, pairs))

    order = rng.permutation(cfg.n_records)
    n_train = int(round(cfg.split_fractions[0] * cfg.n_records))
    n_valid = int(round(cfg.split_fractions[1] * cfg.n_records))
    train = [records[i] for i in order[:n_train]]
    valid = [records[i] for i in order[n_train : n_train + n_valid]]
    test = [records[i] for i in order[n_train + n_valid :]]
    return Corpus(cfg, seed, latent, train, valid, test)


# -- batching ---------------------------------------------------------------------


@dataclass
class PairBatch:
    pair: PairType
    record_ids: tuple[int, ...]
    x_first: np.ndarray  # (B, dim of pair[0])
    x_second: np.ndarray  # (B, dim of pair[1])


def eligible_records(records, pair: PairType) -> list[SyntheticRecord]:
    return [r for r in records if pair in r.available_pairs]


def make_pair_batches(records, pair: PairType, batch_size: int, rng: np.random.Generator):
    """Endless stream of batches of records having the requested pair.

    Text sides pick a variant uniformly at random per record per batch, which
    is what realizes the many-to-many text mapping during training. Record ids
    within one batch are distinct.
    """
    if pair not in TRAINABLE_PAIRS:
        raise ValueError(f"make_pair_batches: pair {tuple(m.value for m in pair)} is not trainable")
    pool = eligible_records(records, pair)
    if len(pool) < batch_size:
        raise ValueError(
            f"make_pair_batches: only {len(pool)} records have pair "
            f"{tuple(m.value for m in pair)}, need {batch_size}"
        )

    def side(record: SyntheticRecord, modality: Modality) -> np.ndarray:
        if modality is Modality.TEXT:
            return record.text_variants[rng.integers(len(record.text_variants))]
        return record.views[modality]

    def stream():
        while True:
            idx = rng.choice(len(pool), size=batch_size, replace=False)
            chosen = [pool[i] for i in idx]
            x1 = np.stack([side(r, pair[0]) for r in chosen])
            x2 = np.stack([side(r, pair[1]) for r in chosen])
            yield PairBatch(pair, tuple(r.record_id for r in chosen), x1, x2)

    return stream()


# -- serialization ------------------------------------------------------------------


def _pair_to_json(pair: PairType) -> list[str]:
    return [pair[0].value, pair[1].value]


def _pair_from_json(obj) -> PairType:
    return (Modality(obj[0]), Modality(obj[1]))


def _record_to_json(r: SyntheticRecord) -> str:
    doc = {
        "record_id": r.record_id,
        "class_label": r.class_label,
        "concept": r.concept.tolist(),
        "views": {m.value: v.tolist() for m, v in r.views.items()},
        "text_variants": [t.tolist() for t in r.text_variants],
        "available_pairs": [_pair_to_json(p) for p in r.available_pairs],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _record_from_json(doc: dict) -> SyntheticRecord:
    return SyntheticRecord(
        record_id=doc["record_id"],
        class_label=doc["class_label"],
        concept=np.asarray(doc["concept"], dtype=np.float64),
        views={Modality(k): np.asarray(v, dtype=np.float64) for k, v in doc["views"].items()},
        text_variants=[np.asarray(t, dtype=np.float64) for t in doc["text_variants"]],
        available_pairs=tuple(_pair_from_json(p) for p in doc["available_pairs"]),
    )


def _config_to_json(cfg: CorpusConfig) -> dict:
    return {
        "n_records": cfg.n_records,
        "n_classes": cfg.n_classes,
        "latent_dim": cfg.latent_dim,
        "cluster_std": cfg.cluster_std,
        "view_dims": {m.value: d for m, d in cfg.view_dims.items()},
        "noise_scales": {m.value: s for m, s in cfg.noise_scales.items()},
        "projection_seeds": {m.value: s for m, s in cfg.projection_seeds.items()},
        "n_text_variants": cfg.n_text_variants,
        "pair_probs": [[_pair_to_json(p), w] for p, w in cfg.pair_probs.items()],
        "holdout_pair": _pair_to_json(cfg.holdout_pair),
        "split_fractions": list(cfg.split_fractions),
        "class_weights": list(cfg.class_weights) if cfg.class_weights is not None else None,
    }


def config_from_json(doc: dict) -> CorpusConfig:
    return CorpusConfig(
        n_records=doc["n_records"],
        n_classes=doc["n_classes"],
        latent_dim=doc["latent_dim"],
        cluster_std=doc["cluster_std"],
        view_dims={Modality(k): v for k, v in doc["view_dims"].items()},
        noise_scales={Modality(k): v for k, v in doc["noise_scales"].items()},
        projection_seeds={Modality(k): v for k, v in doc["projection_seeds"].items()},
        n_text_variants=doc["n_text_variants"],
        pair_probs={_pair_from_json(p): w for p, w in doc["pair_probs"]},
        holdout_pair=_pair_from_json(doc["holdout_pair"]),
        split_fractions=tuple(doc["split_fractions"]),
        class_weights=tuple(doc["class_weights"]) if doc["class_weights"] is not None else None,
    )


def corpus_manifest(corpus: Corpus, checksums: dict[str, str]) -> dict:
    pair_counts = {}
    for split, records in corpus.splits.items():
        counts = {}
        for pair in TRAINABLE_PAIRS:
            counts["+".join(m.value for m in pair)] = sum(
                1 for r in records if pair in r.available_pairs
            )
        pair_counts[split] = counts
    return {
        "format": "probalign-corpus-v1",
        "config": _config_to_json(corpus.config),
        "seed": corpus.seed,
        "label_rule": corpus.label_rule,
        "counts": {split: len(records) for split, records in corpus.splits.items()},
        "pair_counts": pair_counts,
        "checksums": checksums,
    }


def write_corpus(corpus: Corpus, path) -> dict:
    """Write one JSONL file per split plus manifest.json; returns the manifest."""
    from pathlib import Path

    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for split, records in corpus.splits.items():
        body = "".join(_record_to_json(r) + "\n" for r in records)
        (out / f"{split}.jsonl").write_text(body, encoding="utf-8")
        checksums[split] = hashlib.sha256(body.encode("utf-8")).hexdigest()
    manifest = corpus_manifest(corpus, checksums)
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


def read_corpus(path) -> Corpus:
    from pathlib import Path

    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorpusFormatError(f"read_corpus: no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = config_from_json(manifest["config"])
    seed = manifest["seed"]
    splits = {}
    for split in ("train", "valid", "test"):
        records = []
        text = (root / f"{split}.jsonl").read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(_record_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{split}.jsonl line {lineno}: {exc}") from exc
        splits[split] = records
    latent = build_latent_space(cfg, seed)
    corpus = Corpus(cfg, seed, latent, splits["train"], splits["valid"], splits["test"])
    corpus.label_rule = manifest.get("label_rule", "cluster")
    if corpus.label_rule == "sum_sign":
        latent.projections[Modality.MOD_A][:, 1] = 0.0
        latent.projections[Modality.MOD_B][:, 0] = 0.0
    return corpus


# -- constructed corpora and prompt synthesis ---------------------------------------


def generate_complementary(
    n_records: int,
    seed: int,
    noise_scale: float = 0.2,
    view_dims: dict[Modality, int] | None = None,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Corpus:
    """Corpus where the two factors of the label live in different modalities.

    The latent is (u, v) with label = 1 if u + v > 0. Modality A observes only
    u, modality B only v, text observes both. Either modality alone supports a
    mediocre linear read-out of the label; concatenating both recovers u + v.
    """
    dims = dict(view_dims or {Modality.MOD_A: 24, Modality.MOD_B: 24,
                              Modality.MOD_C: 24, Modality.TEXT: 24})
    cfg = CorpusConfig(
        n_records=n_records,
        n_classes=2,
        latent_dim=2,
        cluster_std=1.0,
        view_dims=dims,
        noise_scales={m: noise_scale for m in Modality},
        pair_probs={
            (Modality.MOD_A, Modality.TEXT): 1.0,
            (Modality.MOD_B, Modality.TEXT): 1.0,
            (Modality.MOD_C, Modality.TEXT): 0.0,
            (Modality.MOD_A, Modality.MOD_B): 1.0,
        },
        split_fractions=split_fractions,
    )
    latent = build_latent_space(cfg, seed)
    # Mask the projections so A sees only the first factor and B only the second.
    latent.projections[Modality.MOD_A][:, 1] = 0.0
    latent.projections[Modality.MOD_B][:, 0] = 0.0
    rng = np.random.default_rng([seed, 2])

    pairs = (
        (Modality.MOD_A, Modality.TEXT),
        (Modality.MOD_B, Modality.TEXT),
        (Modality.MOD_A, Modality.MOD_B),
    )
    records = []
    for record_id in range(n_records):
        concept = rng.normal(0.0, 1.0, size=2)
        label = int(concept.sum() > 0.0)
        views = {}
        text_variants = []
        for modality in (Modality.MOD_A, Modality.MOD_B):
            clean = latent.projections[modality] @ concept
            views[modality] = clean + rng.normal(0.0, noise_scale, size=clean.shape)
        clean_text = latent.projections[Modality.TEXT] @ concept
        for v in range(cfg.n_text_variants):
            noise = rng.normal(0.0, noise_scale, size=clean_text.shape)
            text_variants.append(clean_text + latent.variant_offsets[v] + noise)
        records.append(SyntheticRecord(record_id, label, concept, views, text_variants, pairs))

    order = rng.permutation(n_records)
    n_train = int(round(split_fractions[0] * n_records))
    n_valid = int(round(split_fractions[1] * n_records))
    train = [records[i] for i in order[:n_train]]
    valid = [records[i] for i in order[n_train : n_train + n_valid]]
    test = [records[i] for i in order[n_train + n_valid :]]
    return Corpus(cfg, seed, latent, train, valid, test, label_rule="sum_sign")


def synth_text_prompts(
    corpus: Corpus,
    n_per_class: int,
    noise_scale: float | None = None,
    rng: np.random.Generator | None = None,
) -> dict[int, list[np.ndarray]]:
    """Synthetic text feature vectors describing each class.

    A prompt is the text projection of a latent drawn near the class (cluster
    center jitter for the mixture corpus, rejection sampling for constructed
    label rules) plus text noise at ``noise_scale``.
    """
    cfg = corpus.config
    rng = rng if rng is not None else np.random.default_rng(0)
    scale = cfg.noise_scales[Modality.TEXT] if noise_scale is None else noise_scale
    proj = corpus.latent.projections[Modality.TEXT]
    prompts: dict[int, list[np.ndarray]] = {}
    for label in range(cfg.n_classes):
        rows = []
        for _ in range(n_per_class):
            if corpus.label_rule == "sum_sign":
                while True:
                    latent = rng.normal(0.0, 1.0, size=cfg.latent_dim)
                    if int(latent.sum() > 0.0) == label:
                        break
            else:
                latent = corpus.latent.centers[label] + rng.normal(
                    0.0, cfg.cluster_std / 2.0, size=cfg.latent_dim
                )
            rows.append(proj @ latent + rng.normal(0.0, scale, size=proj.shape[0]))
        prompts[label] = rows
    return prompts
