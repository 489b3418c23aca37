"""Shortcut impact (ACAC), detector separability (AUROC, Cohen's d), attribution
character, and frequency/purity sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError


# ------------------------------------------------------------------ ACAC


def acac_from_cells(pos_original: float, pos_anti: float, neg_original: float, neg_anti: float) -> float:
    """Mean accuracy drop (points) when the anti-correlated actor replaces the original one."""
    return 0.5 * ((pos_original - pos_anti) + (neg_original - neg_anti))


def acac(table) -> float:
    """ACAC of an accuracy table with ``(sentiment, variant)`` cells.

    Positive reviews are anti-correlated with the Bad actor, negative reviews
    with the Good actor.
    """
    cells = table.cells if hasattr(table, "cells") else table
    need = [("positive", "original"), ("positive", "bad"), ("negative", "original"), ("negative", "good")]
    missing = [c for c in need if c not in cells]
    if missing:
        raise ConfigError(f"accuracy table lacks cells {missing}")
    return acac_from_cells(*(cells[c] for c in need))


@dataclass
class ShortcutImpactReport:
    cells: dict
    acac: float

    @classmethod
    def from_table(cls, table) -> "ShortcutImpactReport":
        cells = dict(table.cells if hasattr(table, "cells") else table)
        return cls(cells, acac(cells))

    def rows(self) -> list[dict]:
        return [{"sentiment": s, "variant": v, "accuracy": a} for (s, v), a in sorted(self.cells.items())]


# ----------------------------------------------------------- separability


def _groups(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score groups must be non-empty")
    return a, b


def auroc(shortcut_scores, random_scores) -> float:
    """Mann-Whitney ``U / (n1 n2)``: the chance a shortcut score beats a random one, ties count half."""
    a, b = _groups(shortcut_scores, random_scores)
    b_sorted = np.sort(b)
    below = np.searchsorted(b_sorted, a, side="left")
    below_or_equal = np.searchsorted(b_sorted, a, side="right")
    u = below.sum() + 0.5 * (below_or_equal - below).sum()
    return float(u) / (a.size * b.size)


def cohens_d(shortcut_scores, random_scores) -> float:
    """``(mu1 - mu2) / sqrt((s1^2 + s2^2) / 2)`` with sample (n-1) standard deviations."""
    a, b = _groups(shortcut_scores, random_scores)
    if a.size < 2 or b.size < 2:
        raise ValueError("Cohen's d needs at least two scores per group")
    pooled = math.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2.0)
    diff = a.mean() - b.mean()
    if pooled == 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return float(diff / pooled)


def roc_curve(shortcut_scores, random_scores) -> tuple[np.ndarray, np.ndarray]:
    """False and true positive rates over every distinct threshold, from (0,0) to (1,1)."""
    a, b = _groups(shortcut_scores, random_scores)
    thresholds = np.unique(np.concatenate([a, b]))[::-1]
    tpr = [0.0] + [float((a >= t).mean()) for t in thresholds]
    fpr = [0.0] + [float((b >= t).mean()) for t in thresholds]
    return np.asarray(fpr), np.asarray(tpr)


@dataclass
class DetectionEvalReport:
    method: str
    aggregation: str
    auroc: float
    cohens_d: float
    mean_shortcut: float
    std_shortcut: float
    mean_random: float
    std_random: float
    n_shortcut: int
    n_random: int

    @classmethod
    def compute(cls, method: str, aggregation: str, shortcut_scores, random_scores) -> "DetectionEvalReport":
        a, b = _groups(shortcut_scores, random_scores)
        return cls(
            method,
            aggregation,
            auroc(a, b),
            cohens_d(a, b),
            float(a.mean()),
            float(a.std(ddof=1)) if a.size > 1 else 0.0,
            float(b.mean()),
            float(b.std(ddof=1)) if b.size > 1 else 0.0,
            int(a.size),
            int(b.size),
        )


# ------------------------------------------------- attribution character


def normalized_entropy_terms(scores) -> float:
    s = np.abs(np.asarray(scores, dtype=float))
    total = s.sum()
    if total == 0:
        return 0.0
    p = s[s > 0] / total
    return float(-(p * np.log(p)).sum())


@dataclass
class AttributionCharacter:
    entropy: float
    mean_top_token_position: float
    sentiment_hits: float
    n_examples: int


def attribution_character(
    scores: Sequence[np.ndarray],
    word_spans: Sequence[Sequence[tuple[int, int]]],
    words: Sequence[Sequence[str]],
    lexicon: Iterable[str],
    top_k: int = 5,
) -> AttributionCharacter:
    """Entropy of ``|s| / sum |s|``, the mean 1-based position of the top token inside
    multi-token words, and the mean count of lexicon words among the top-``k`` words.

    ``scores[e]`` and ``word_spans[e]`` index the same token axis; word scores
    for the top-``k`` ranking are max-aggregated absolute token scores.
    """
    lex = {w.lower() for w in lexicon}
    entropies, positions, hits = [], [], []
    for s, spans, ws in zip(scores, word_spans, words):
        s = np.abs(np.asarray(s, dtype=float))
        entropies.append(normalized_entropy_terms(s))
        word_scores = []
        for start, end in spans:
            chunk = s[start:end]
            if end - start > 1:
                positions.append(int(np.argmax(chunk)) + 1)
            word_scores.append(chunk.max())
        order = np.argsort(-np.asarray(word_scores), kind="stable")[:top_k]
        hits.append(sum(ws[i].lower() in lex for i in order))
    return AttributionCharacter(
        float(np.mean(entropies)) if entropies else float("nan"),
        float(np.mean(positions)) if positions else float("nan"),
        float(np.mean(hits)) if hits else float("nan"),
        len(entropies),
    )


# ----------------------------------------------------------------- sweeps


@dataclass
class SweepPoint:
    parameter: str
    value: float
    seed: int
    acac: float


def sweep(
    parameter: str,
    values: Sequence[float],
    seeds: Sequence[int],
    run: Callable[[str, float, int], float],
) -> list[SweepPoint]:
    """Call ``run(parameter, value, seed) -> ACAC`` for every grid point."""
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two points")
    return [SweepPoint(parameter, float(v), int(s), float(run(parameter, v, s))) for v in values for s in seeds]


def summarize_sweep(points: Iterable[SweepPoint]) -> list[dict]:
    """Mean and sample std of ACAC per sweep value."""
    by: dict[float, list[float]] = {}
    name = ""
    for p in points:
        name = p.parameter
        by.setdefault(p.value, []).append(p.acac)
    out = []
    for v in sorted(by):
        vals = np.asarray(by[v])
        out.append(
            {
                "parameter": name,
                "value": v,
                "mean_acac": float(vals.mean()),
                "std_acac": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                "n_seeds": len(vals),
            }
        )
    return out


def monotone_with_tolerance(means: Sequence[float], max_inversions: int = 1, tolerance: float = 2.0) -> bool:
    """Non-decreasing, allowing up to ``max_inversions`` drops of at most ``tolerance``."""
    drops = [a - b for a, b in zip(means, means[1:]) if b < a]
    return len(drops) <= max_inversions and all(d <= tolerance for d in drops)


def write_rows_csv(rows: Sequence[Mapping], path: str | Path, header: dict | None = None) -> None:
    """CSV with ``# key: value`` comment lines for run metadata, then a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}: {value}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
