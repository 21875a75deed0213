"""Text overlap metrics, discriminative accuracy and generated-parameter clustering.

ROUGE scores are F1 values.  BLEU-4 uses clipped precisions with add-one
smoothing on orders 2..4 whose raw match count is zero.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform


class DegenerateInputError(ValueError):
    pass


def _ngrams(seq: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_n(cand: Sequence[Hashable], ref: Sequence[Hashable], n: int) -> float:
    if n < 1:
        raise ValueError("rouge_n needs n >= 1")
    c, r = _ngrams(cand, n), _ngrams(ref, n)
    nc, nr = sum(c.values()), sum(r.values())
    if nc == 0 or nr == 0:
        return 0.0
    overlap = sum((c & r).values())
    return _f1(overlap / nc, overlap / nr)


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(cand: Sequence[Hashable], ref: Sequence[Hashable]) -> float:
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    return _f1(lcs / len(cand), lcs / len(ref))


def bleu4(cand: Sequence[Hashable], ref: Sequence[Hashable]) -> float:
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        matches, total = sum((c & r).values()), sum(c.values())
        if matches == 0:
            if n == 1:
                return 0.0
            matches, total = 1, total + 1
        log_sum += math.log(matches / total)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_sum / 4.0)


def discriminative_accuracy(preds: Sequence, gold: Sequence) -> float:
    if len(preds) != len(gold):
        raise ValueError(f"{len(preds)} predictions for {len(gold)} gold labels")
    if not gold:
        raise ValueError("discriminative_accuracy needs at least one sample")
    return sum(p == g for p, g in zip(preds, gold)) / len(gold)


# ---------------------------------------------------------------- clustering

def _top_eigvec(C: np.ndarray, start: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v
        w /= norm
        if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
            return w
        v = w
    return v


def pca2(points, tol: float = 1e-10, max_iter: int = 1000) -> np.ndarray:
    """Project mean-centred points onto their top two principal directions.

    Directions come from power iteration on the covariance, deflating after
    the first; the second is re-orthogonalised against the first.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ValueError(f"pca2 needs at least 3 points in at least 2 dimensions, got {X.shape}")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (X.shape[0] - 1)
    scale_ = np.abs(C).max()
    if scale_ == 0.0:
        raise DegenerateInputError("all points are identical")
    start = np.linspace(1.0, 2.0, C.shape[0])
    v1 = _top_eigvec(C, start, tol, max_iter)
    lam1 = v1 @ C @ v1
    C2 = C - lam1 * np.outer(v1, v1)
    start2 = start - (start @ v1) * v1
    if np.abs(C2).max() <= 1e-12 * scale_:
        v2 = start2
    else:
        v2 = _top_eigvec(C2, start2, tol, max_iter)
    v2 = v2 - (v2 @ v1) * v1
    n2 = np.linalg.norm(v2)
    if n2 == 0.0:  # start vector happened to be parallel to v1
        e = np.zeros_like(v1)
        e[np.argmin(np.abs(v1))] = 1.0
        v2 = e - (e @ v1) * v1
        n2 = np.linalg.norm(v2)
    v2 /= n2
    return Xc @ np.column_stack([v1, v2])


def separation_ratio(points, labels) -> float:
    """Mean between-label pairwise distance over mean within-label pairwise distance."""
    X = np.asarray(points, dtype=np.float64)
    labels = list(labels)
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise ValueError("separation_ratio needs one label per point row")
    counts = Counter(labels)
    if len(counts) < 2 or min(counts.values()) < 2:
        raise ValueError("separation_ratio needs at least 2 labels with at least 2 points each")
    codes = np.unique(np.array([str(l) for l in labels]), return_inverse=True)[1]
    D = squareform(pdist(X))
    same = codes[:, None] == codes[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra = D[same & off_diag].mean()
    inter = D[~same].mean()
    if intra == 0.0:
        raise DegenerateInputError("within-label distances are all zero")
    return float(inter / intra)


# ---------------------------------------------------------------- reports

METRIC_NAMES = ("accuracy", "rouge1", "rouge2", "rougeL", "bleu4")


@dataclass
class EvalReport:
    """Per-domain scores plus their macro average (mean over domains)."""

    n_domains: int
    scores: dict[str, list[float]] = field(default_factory=dict)  # metric -> per-domain
    counts: dict[str, list[int]] = field(default_factory=dict)  # "discriminative"/"open_ended"

    def average(self, metric: str) -> float:
        vals = [v for v in self.scores[metric] if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict[str, float]:
        return {k: self.average(k) for k in METRIC_NAMES}

    def table_rows(self, model: str) -> list[list[str]]:
        rows = []
        for metric in METRIC_NAMES:
            cells = [_fmt(v) for v in self.scores[metric]] + [_fmt(self.average(metric))]
            rows.append([model, metric, *cells])
        return rows

    def header(self) -> list[str]:
        return ["model", "metric", *[f"D{i}" for i in range(self.n_domains)], "Avg."]

    def to_tsv(self, model: str = "model") -> str:
        return format_tsv([self.header(), *self.table_rows(model)])


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


def format_tsv(rows: Sequence[Sequence[str]]) -> str:
    return "".join("\t".join(str(c) for c in row) + "\n" for row in rows)


def build_report(domains: Sequence[int], styles: Sequence[str], golds: Sequence[Sequence[int]],
                 preds: Sequence[Sequence[int]], n_domains: int) -> EvalReport:
    """Score decoded answers.

    Discriminative rows score the first predicted token against the gold
    label; open-ended rows score the whole answer with ROUGE and BLEU.
    """
    per: dict[str, list[list[float]]] = {k: [[] for _ in range(n_domains)] for k in METRIC_NAMES}
    for dom, style, gold, pred in zip(domains, styles, golds, preds):
        if style == "DISCRIMINATIVE":
            per["accuracy"][dom].append(float(bool(pred) and pred[0] == gold[0]))
        else:
            per["rouge1"][dom].append(rouge_n(pred, gold, 1))
            per["rouge2"][dom].append(rouge_n(pred, gold, 2))
            per["rougeL"][dom].append(rouge_l(pred, gold))
            per["bleu4"][dom].append(bleu4(pred, gold))
    rep = EvalReport(n_domains)
    for k, lists in per.items():
        rep.scores[k] = [float(np.mean(v)) if v else float("nan") for v in lists]
    rep.counts["discriminative"] = [len(v) for v in per["accuracy"]]
    rep.counts["open_ended"] = [len(v) for v in per["rouge1"]]
    return rep
