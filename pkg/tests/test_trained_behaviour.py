"""Sweep and attribution checks on full-size trained models, beyond the acceptance criteria."""

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from shortcutlab import attribution as AT
from shortcutlab import pipeline as P
from shortcutlab import training as T

SEEDS = (0, 1, 2)
BASE = P.ExperimentConfig()
STRONG = BASE.with_(seed=2, frequency=0.01)

pytestmark = pytest.mark.slow


def _positive_bad(bench, n):
    ts = [t for t in bench.splits.test_triplets if t.label == 1][:n]
    return [bench.encoder.encode_example(t.example("bad", bench.splits.shortcut)) for t in ts]


def test_clean_corpus_learns_sentiment_without_name_bias(runs):
    for seed in SEEDS:
        bench = runs.bench(BASE.with_(seed=seed, frequency=0.0))
        lds = T.logit_diffs(bench.model, bench.encoder, [bench.encoder.encode_example(e) for e in bench.splits.validation])
        labels = np.array([e.label for e in bench.splits.validation])
        assert np.mean((lds > 0).astype(int) == labels) >= 0.75
        assert abs(runs.acac_of(bench.cfg)) < 5


def test_acac_rank_correlates_with_frequency_over_seeds(runs):
    freqs, values = [], []
    for f in (0.001, 0.003, 0.01):
        for seed in SEEDS:
            freqs.append(f)
            values.append(runs.acac_of(BASE.with_(seed=seed, frequency=f)))
    assert spearmanr(freqs, values).statistic > 0


def test_partial_purity_sits_between_pure_and_balanced(runs):
    mean = {p: np.mean([runs.acac_of(BASE.with_(seed=s, frequency=0.01, purity=p)) for s in SEEDS]) for p in (0.5, 0.8, 1.0)}
    assert mean[0.5] < mean[0.8] < mean[1.0]


def test_hta_ranks_the_shortcut_name_first(runs):
    bench = runs.bench(STRONG)
    top = []
    for prompt in _positive_bad(bench, 200):
        res = AT.hta(bench.model, prompt.ids, bench.direction, rel_tau=bench.cfg.rel_tau)
        spans = prompt.word_spans()
        words = AT.aggregate_word_scores(res.scores, spans, "max")
        top.append(spans[int(np.argmax(words))] == P._name_span(prompt))
    assert np.mean(top) >= 0.8


def test_selected_heads_include_the_label_heads(runs):
    bench = runs.bench(STRONG)
    heads = P.localize(bench).label_heads
    prompts = _positive_bad(bench, 200)
    ids, last = T.collate(prompts, bench.tok.pad_id)
    with torch.no_grad():
        _, cache = bench.model.run_with_cache(ids)
        chosen = AT.select_heads(cache, bench.direction, last=last, rel_tau=0.5)
    for head in heads:
        assert np.mean([head in c for c in chosen]) >= 0.5, head


def test_detection_run_is_reproducible(runs):
    bench = runs.bench(STRONG)
    a, b = (P.detect(bench, methods=("HTA",), n=10) for _ in range(2))
    assert np.array_equal(a.shortcut["HTA"], b.shortcut["HTA"])
    assert np.array_equal(a.random["HTA"], b.random["HTA"])
