"""Retrieval evaluation: recall@k, truncated mAP, per-variant reports with
robustness deltas, and a bootstrap significance test between two models.

Ranking is by descending score with ties broken by ascending gallery index,
so results are exactly reproducible and oracle-matchable. Metrics are rank
statistics: any strictly increasing transform of the scores (including
temperature rescaling) leaves them unchanged.

Multi-caption protocol: for text-to-audio every caption is an independent
query with exactly one relevant audio; for audio-to-text an audio query is a
hit if any of its captions lands in the top k.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .datapack import Dataset
from .errors import EmptyRelevance, MissingVariant
from .model import ModelCheckpoint, forward
from .vecmath import l2_normalize

REPORT_SCHEMA = "report_v1"
DIRECTIONS = ("t2a", "a2t")
RECALL_KS = (1, 5, 10)


def _check_relevance(rel, n_queries: int, n_gallery: int):
    """Normalize a relevance map into a list of frozensets, validated."""
    if len(rel) != n_queries:
        raise ValueError(f"relevance has {len(rel)} entries for {n_queries} queries")
    out = []
    for q, entry in enumerate(rel):
        s = frozenset(int(g) for g in entry)
        if not s:
            raise EmptyRelevance(q)
        if any(g < 0 or g >= n_gallery for g in s):
            raise ValueError(f"query {q}: relevant index outside gallery range")
        out.append(s)
    return out


def _ranking(row: np.ndarray) -> np.ndarray:
    """Gallery indices by descending score, ties by ascending index."""
    return np.lexsort((np.arange(row.shape[0]), -row))


def hits_at_k(scores, rel, k: int) -> np.ndarray:
    """Per-query booleans: does the top-k contain a relevant gallery index?"""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("scores must be a 2-D query x gallery matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = _check_relevance(rel, scores.shape[0], scores.shape[1])
    out = np.zeros(scores.shape[0], dtype=bool)
    for q in range(scores.shape[0]):
        top = _ranking(scores[q])[:k]
        out[q] = any(int(g) in rel[q] for g in top)
    return out


def recall_at_k(scores, rel, k: int) -> float:
    """Percentage of queries with a relevant item in the top k."""
    h = hits_at_k(scores, rel, k)
    return 100.0 * float(np.count_nonzero(h)) / h.shape[0]


def map_at_k(scores, rel, k: int = 10) -> float:
    """Mean average precision truncated at rank k, as a percentage.

    Per query: precision summed at each relevant hit rank <= k, divided by
    min(|relevant|, k).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("scores must be a 2-D query x gallery matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = _check_relevance(rel, scores.shape[0], scores.shape[1])
    aps = []
    for q in range(scores.shape[0]):
        order = _ranking(scores[q])[:k]
        hits = 0
        precision_sum = 0.0
        for rank, g in enumerate(order, start=1):
            if int(g) in rel[q]:
                hits += 1
                precision_sum += hits / rank
        aps.append(precision_sum / min(len(rel[q]), k))
    # sequential sum, left-associative scaling: bit-identical to a scalar
    # sort-and-scan reimplementation
    return 100.0 * sum(aps) / len(aps)


# --- reports --------------------------------------------------------------------


@dataclass
class RetrievalReport:
    """Per-variant, per-direction recalls with deltas against "test"."""

    variants: dict  # name -> {direction -> {"r1":..., "r5":..., "r10":...}}
    deltas: dict  # name -> {direction -> {...}}, present when "test" evaluated
    metadata: dict = field(default_factory=dict)
    bootstrap: dict | None = None

    @classmethod
    def from_recalls(cls, variants: dict, metadata: dict | None = None) -> "RetrievalReport":
        deltas = {}
        if "test" in variants:
            base = variants["test"]
            for name, per_dir in variants.items():
                deltas[name] = {
                    d: {key: base[d][key] - per_dir[d][key] for key in per_dir[d]}
                    for d in per_dir
                    if d in base
                }
        return cls(variants=variants, deltas=deltas, metadata=metadata or {})

    def to_json(self) -> str:
        doc = {
            "schema": REPORT_SCHEMA,
            "metadata": self.metadata,
            "variants": self.variants,
            "deltas": self.deltas,
        }
        if self.bootstrap is not None:
            doc["bootstrap"] = self.bootstrap
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RetrievalReport":
        doc = json.loads(text)
        if doc.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
        return cls(
            variants=doc["variants"],
            deltas=doc.get("deltas", {}),
            metadata=doc.get("metadata", {}),
            bootstrap=doc.get("bootstrap"),
        )

    def write(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _test_gallery(dataset: Dataset):
    """Unique audio rows of the test split, in first-appearance order, plus
    the query->gallery relevance in both directions."""
    items = dataset.test_items
    if not items:
        raise ValueError("dataset has no test items")
    gallery_index = {}
    audio_rows = []
    t2a_rel = []
    for item in items:
        key = (item.audio_ref.file, item.audio_ref.row)
        if key not in gallery_index:
            gallery_index[key] = len(audio_rows)
            audio_rows.append(dataset.audio_features(item))
        t2a_rel.append({gallery_index[key]})
    a2t_rel = [set() for _ in range(len(audio_rows))]
    for q, rel in enumerate(t2a_rel):
        a2t_rel[next(iter(rel))].add(q)
    return items, np.stack(audio_rows), t2a_rel, a2t_rel


def embed_variant(ckpt: ModelCheckpoint, dataset: Dataset, items, name: str) -> np.ndarray:
    feats = []
    for item in items:
        feats.append(dataset.variant_features(item, name))
    return forward(ckpt.text_head, np.stack(feats))


def similarity_matrix(text_emb: np.ndarray, audio_emb: np.ndarray) -> np.ndarray:
    """Cosine similarities; the temperature is irrelevant for ranking."""
    return l2_normalize(text_emb) @ l2_normalize(audio_emb).T


def variant_scores(ckpt: ModelCheckpoint, dataset: Dataset, name: str):
    """(t2a scores, t2a relevance, a2t relevance) for one caption variant."""
    items, audio_rows, t2a_rel, a2t_rel = _test_gallery(dataset)
    audio_emb = forward(ckpt.audio_head, audio_rows)
    text_emb = embed_variant(ckpt, dataset, items, name)
    return similarity_matrix(text_emb, audio_emb), t2a_rel, a2t_rel


def evaluate(
    ckpt: ModelCheckpoint,
    dataset: Dataset,
    variants=("test", "test_p"),
    directions=DIRECTIONS,
    ks=RECALL_KS,
) -> RetrievalReport:
    """Recall table over the test split for the requested caption variants."""
    for d in directions:
        if d not in DIRECTIONS:
            raise ValueError(f"unknown direction {d!r}")
    per_variant = {}
    for name in variants:
        scores, t2a_rel, a2t_rel = variant_scores(ckpt, dataset, name)
        entry = {}
        if "t2a" in directions:
            entry["t2a"] = {f"r{k}": recall_at_k(scores, t2a_rel, k) for k in ks}
        if "a2t" in directions:
            entry["a2t"] = {f"r{k}": recall_at_k(scores.T, a2t_rel, k) for k in ks}
        per_variant[name] = entry
    metadata = {
        "checkpoint_digest": ckpt.digest(),
        "dataset_digest": dataset.digest(),
        "seed": ckpt.metadata.get("seed"),
    }
    return RetrievalReport.from_recalls(per_variant, metadata)


# --- bootstrap significance -------------------------------------------------------


@dataclass
class BootstrapResult:
    n_resamples: int
    recalls_a: np.ndarray
    recalls_b: np.ndarray
    t_statistic: float
    p_value: float
    alpha: float
    significant: bool

    def summary(self) -> dict:
        return {
            "n_resamples": self.n_resamples,
            "recall_a_mean": float(self.recalls_a.mean()),
            "recall_b_mean": float(self.recalls_b.mean()),
            "t_statistic": self.t_statistic,
            "p_value": self.p_value,
            "alpha": self.alpha,
            "significant": self.significant,
        }


def bootstrap_compare(
    scores_a,
    scores_b,
    rel,
    k: int = 10,
    n_resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> BootstrapResult:
    """Resample queries with replacement; Welch t-test on per-resample recalls.

    Both models are evaluated on the same resampled query sets. When both
    recall samples are constant and equal the comparison is degenerate and is
    reported as p = 1, not significant.
    """
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    if scores_a.shape[0] != scores_b.shape[0]:
        raise ValueError("both score matrices must cover the same query set")
    if n_resamples < 2:
        raise ValueError("n_resamples must be >= 2")
    hits_a = hits_at_k(scores_a, rel, k)
    hits_b = hits_at_k(scores_b, rel, k)
    n_q = hits_a.shape[0]
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n_q, size=(n_resamples, n_q))
    recalls_a = 100.0 * hits_a[idx].mean(axis=1)
    recalls_b = 100.0 * hits_b[idx].mean(axis=1)

    var_a = float(recalls_a.var(ddof=1))
    var_b = float(recalls_b.var(ddof=1))
    if var_a == 0.0 and var_b == 0.0:
        if recalls_a[0] == recalls_b[0]:
            t_stat, p_value = 0.0, 1.0
        else:
            t_stat = float(np.inf if recalls_a[0] > recalls_b[0] else -np.inf)
            p_value = 0.0
    else:
        t_stat, p_value = stats.ttest_ind(recalls_a, recalls_b, equal_var=False)
        t_stat, p_value = float(t_stat), float(p_value)
    return BootstrapResult(
        n_resamples=n_resamples,
        recalls_a=recalls_a,
        recalls_b=recalls_b,
        t_statistic=t_stat,
        p_value=p_value,
        alpha=alpha,
        significant=bool(p_value < alpha),
    )


# --- ablation table ---------------------------------------------------------------


@dataclass
class AblationTable:
    """R@k for a base variant and rewrites of it, with drops vs the base."""

    k: int
    rows: list  # (variant, recall, drop)

    @classmethod
    def from_values(cls, k: int, base: tuple, modified: list) -> "AblationTable":
        base_name, base_val = base
        rows = [(base_name, base_val, 0.0)]
        for name, val in modified:
            rows.append((name, val, base_val - val))
        return cls(k=k, rows=rows)

    def drops(self) -> dict:
        return {name: drop for name, _, drop in self.rows[1:]}

    def render(self) -> str:
        width = max(len(name) for name, _, _ in self.rows)
        lines = [f"{'variant'.ljust(width)}  r@{self.k}    drop"]
        for name, val, drop in self.rows:
            lines.append(f"{name.ljust(width)}  {val:6.2f}  {drop:6.2f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        doc = {
            "schema": "ablation_v1",
            "k": self.k,
            "rows": [{"variant": n, "recall": v, "drop": d} for n, v, d in self.rows],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def ablation_report(
    ckpt: ModelCheckpoint,
    dataset: Dataset,
    base_variant: str = "test",
    modified_variants=(),
    k: int = 1,
) -> AblationTable:
    """Text-to-audio R@k of the base caption variant vs its rewrites."""
    scores, t2a_rel, _ = variant_scores(ckpt, dataset, base_variant)
    base_val = recall_at_k(scores, t2a_rel, k)
    modified = []
    for name in modified_variants:
        scores, t2a_rel, _ = variant_scores(ckpt, dataset, name)
        modified.append((name, recall_at_k(scores, t2a_rel, k)))
    return AblationTable.from_values(k, (base_variant, base_val), modified)
