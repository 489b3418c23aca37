import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from shortcutlab import attribution as AT
from shortcutlab.errors import NumericError, ShapeError
from shortcutlab.model import ModelConfig, ablate_heads, init_params
from shortcutlab.numerics import RngStream

CFG = ModelConfig(n_layers=2, n_heads=2, d_resid=16, d_head=8, d_mlp=32, vocab_size=30, max_seq=16)
PAD, A_ID, B_ID = 0, 1, 2


@pytest.fixture(scope="module")
def model():
    m = init_params(CFG, RngStream(5), dtype=torch.float64)
    with torch.no_grad():
        for p in m.parameters():
            p.mul_(10.0)
    return m


def _direction(m):
    return (m.W_U[:, B_ID] - m.W_U[:, A_ID]).detach()


def _tokens(b=4, n=10, seed=0):
    return torch.from_numpy(RngStream(seed).integers(3, CFG.vocab_size, size=(b, n)))


def test_hta_terms_sum_to_head_logit_diffs(model):
    ids = _tokens(b=20)
    with torch.no_grad():
        _, cache = model.run_with_cache(ids)
        terms = AT.hta_terms(model, cache, _direction(model))
        lds = AT.head_logit_diffs(cache, _direction(model), torch.full((20,), ids.shape[1] - 1))
    assert torch.max(torch.abs(terms.sum(-1) - lds)).item() < 1e-9


def test_hta_with_zero_tau_sums_all_heads(model):
    ids = _tokens()
    with torch.no_grad():
        _, cache = model.run_with_cache(ids)
    scores, heads, _ = AT.hta_batch(model, cache, _direction(model), tau=0.0)
    lds = AT.head_logit_diffs(cache, _direction(model), torch.full((4,), ids.shape[1] - 1))
    np.testing.assert_allclose(scores.sum(1), lds.sum((1, 2)).numpy(), atol=1e-9)
    assert all(len(h) == CFG.n_layers * CFG.n_heads for h in heads)


def test_head_selection_thresholds(model):
    ids = _tokens()
    with torch.no_grad():
        _, cache = model.run_with_cache(ids)
    d = _direction(model)
    assert all(len(h) == CFG.n_layers * CFG.n_heads for h in AT.select_heads(cache, d, tau=0.0))
    assert all(h == [] for h in AT.select_heads(cache, d, tau=1e9))
    lds = AT.head_logit_diffs(cache, d, torch.full((4,), ids.shape[1] - 1))
    for b, chosen in enumerate(AT.select_heads(cache, d)):
        top = np.unravel_index(int(lds[b].abs().argmax()), lds[b].shape)
        assert tuple(int(x) for x in top) in chosen
    with pytest.raises(ValueError):
        AT.select_heads(cache, d, tau=-1.0)


def test_hta_single_prompt_matches_batch(model):
    ids = _tokens(b=1)[0].tolist()
    one = AT.hta(model, ids, _direction(model))
    assert one.method == "HTA" and len(one.scores) == len(ids)
    assert one.tau == pytest.approx(0.25 * max(abs(x) for x in _head_lds(model, ids)))


def _head_lds(model, ids):
    with torch.no_grad():
        _, cache = model.run_with_cache(torch.tensor([ids]))
    return AT.head_logit_diffs(cache, _direction(model), torch.tensor([len(ids) - 1])).flatten().tolist()


def test_hta_ignores_ablated_heads(model):
    ablated = ablate_heads(model, [(1, 0)])
    ids = _tokens()
    with torch.no_grad():
        _, cache = ablated.run_with_cache(ids)
        terms = AT.hta_terms(ablated, cache, _direction(model))
    assert torch.all(terms[:, 1, 0] == 0)


def test_lime_masks_and_weights():
    masks = AT.lime_masks(6, 50, RngStream(0))
    assert masks.shape == (50, 6) and masks[0].all()
    assert (masks[1:].sum(1) < 6).all()
    w = AT.lime_weights(masks, 25.0)
    assert w[0] == pytest.approx(1.0)
    assert np.all((w > 0) & (w <= 1.0))
    half = np.array([[1, 1, 0, 0]])
    d = (1 - 2 / (np.sqrt(2) * 2)) * 100
    assert AT.lime_weights(half, 25.0)[0] == pytest.approx(np.exp(-(d**2) / 625))


def test_lime_constant_predictor_gives_zero_coefficients():
    fit = AT.lime(lambda m: np.full(len(m), 0.7), 8, RngStream(1), n_perturbations=200)
    assert np.max(np.abs(fit.coef)) < 1e-8
    assert fit.intercept == pytest.approx(0.7)


def test_lime_recovers_dominant_feature():
    fit = AT.lime(lambda m: 0.2 + 0.6 * m[:, 3], 10, RngStream(2), n_perturbations=500)
    others = np.delete(np.abs(fit.coef), 3)
    assert abs(fit.coef[3]) > 5 * others.max()


def test_weighted_least_squares_matches_normal_equations():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 2, size=(60, 10)).astype(float)
    y = rng.normal(size=60)
    w = rng.uniform(0.1, 1.0, size=60)
    fit = AT.weighted_least_squares(X, y, w)
    Xa = np.hstack([np.ones((60, 1)), X])
    W = np.diag(w)
    beta = np.linalg.solve(Xa.T @ W @ Xa, Xa.T @ W @ y)
    np.testing.assert_allclose(fit.coef, beta[1:], atol=1e-8)
    assert fit.intercept == pytest.approx(beta[0], abs=1e-8)
    assert not fit.ridge


def test_weighted_least_squares_falls_back_to_ridge():
    X = np.ones((5, 3))
    fit = AT.weighted_least_squares(X, np.arange(5.0), np.ones(5))
    assert fit.ridge and np.all(np.isfinite(fit.coef))


def test_lime_rejects_bad_predictor():
    with pytest.raises(ShapeError):
        AT.lime(lambda m: np.zeros(3), 4, RngStream(0), n_perturbations=20)
    with pytest.raises(ValueError):
        AT.lime(lambda m: np.zeros(len(m)), 4, RngStream(0), n_perturbations=5)


def test_lime_on_model_scores_only_listed_positions(model):
    ids = _tokens(b=1)[0].tolist()
    res = AT.lime_tokens(model, ids, [2, 3, 4, 5], PAD, _direction(model), RngStream(3), n_perturbations=100)
    assert res.method == "LIME"
    assert np.all(res.scores[[0, 1, 6, 7, 8, 9]] == 0)


def test_ig_of_baseline_is_zero(model):
    ids = [PAD] * 8
    res = AT.integrated_gradients(model, ids, _direction(model), PAD, steps=16)
    assert np.all(res.scores == 0)


def test_ig_completeness(model):
    ids = _tokens(b=1)[0].tolist()
    res = AT.integrated_gradients(model, ids, _direction(model), PAD, steps=128)
    gap = res.flags["ld_input"] - res.flags["ld_baseline"]
    assert abs(res.scores.sum() - gap) <= 0.02 * abs(gap)


def test_ig_converges_with_steps(model):
    ids = _tokens(b=1)[0].tolist()
    s64 = AT.integrated_gradients(model, ids, _direction(model), PAD, steps=64).scores
    s128 = AT.integrated_gradients(model, ids, _direction(model), PAD, steps=128).scores
    assert np.linalg.norm(s128 - s64) < 0.01 * np.linalg.norm(s128)


def test_ig_restricted_positions(model):
    ids = _tokens(b=1)[0].tolist()
    res = AT.integrated_gradients(model, ids, _direction(model), PAD, steps=16, positions=[2, 3])
    assert np.count_nonzero(res.scores) <= 2
    with pytest.raises(ValueError):
        AT.integrated_gradients(model, ids, _direction(model), PAD, steps=2)


def test_word_aggregation():
    s = np.array([-0.5, 0.1, 0.9, 0.2])
    np.testing.assert_allclose(AT.aggregate_word_scores(s, [(0, 1), (1, 3), (3, 4)]), [0.5, 0.9, 0.2])
    np.testing.assert_allclose(AT.aggregate_word_scores(s, [(1, 3)], mode="sum"), [1.0])
    with pytest.raises(ValueError):
        AT.aggregate_word_scores(s, [(0, 1)], mode="mean")
    with pytest.raises(ShapeError):
        AT.aggregate_word_scores(s, [(2, 3), (0, 1)])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.randoms(use_true_random=False))
def test_word_aggregation_is_permutation_invariant(values, rnd):
    s = np.array(values)
    shuffled = s.copy()
    rnd.shuffle(shuffled)
    span = [(0, len(s))]
    for mode in ("max", "sum"):
        assert AT.aggregate_word_scores(s, span, mode)[0] == pytest.approx(AT.aggregate_word_scores(shuffled, span, mode)[0])


def test_scores_must_be_finite_and_aligned():
    with pytest.raises(NumericError):
        AT.AttributionScores("HTA", [np.nan])
    with pytest.raises(ShapeError):
        AT.AttributionScores("HTA", [1.0, 2.0], tokens=["a"])


def test_jsonl_output(tmp_path):
    res = AT.AttributionScores("HTA", [0.1, 0.9], ["a", "b"], [(1, 0)], 0.2)
    rec = AT.attribution_record("e1", res, ["a", "b"], ["ab"], np.array([0.9]))
    path = tmp_path / "attr.jsonl"
    AT.write_attributions_jsonl([rec], path, header={"seed": 0})
    lines = path.read_text().splitlines()
    assert json.loads(lines[0]) == {"__header__": {"seed": 0}}
    assert json.loads(lines[1])["heads"] == [[1, 0]]
