import math

import numpy as np
import pytest
import torch

from shortcutlab.errors import PatchError, ShapeError
from shortcutlab.interp import (
    CircuitSpec,
    Patcher,
    direct_logit_attribution,
    faithfulness_patch,
    head_name_attention_report,
    logit_diff,
    path_patch,
    read_patch_csv,
    top_heads,
    write_patch_csv,
)
from shortcutlab.model import ComponentId, ModelConfig, PatchHook, all_components, init_params
from shortcutlab.numerics import RngStream

CFG = ModelConfig(n_layers=3, n_heads=2, d_resid=16, d_head=8, d_mlp=32, vocab_size=30, max_seq=16)
A_ID, B_ID = 1, 2


@pytest.fixture(scope="module")
def model():
    m = init_params(CFG, RngStream(11), dtype=torch.float64)
    with torch.no_grad():
        for p in m.parameters():
            p.mul_(10.0)
    return m


def _direction(m):
    return (m.W_U[:, B_ID] - m.W_U[:, A_ID]).detach()


def _pair(b=6, n=9, seed=0):
    rng = RngStream(seed)
    clean = torch.from_numpy(rng.integers(3, CFG.vocab_size, size=(b, n)))
    corrupt = clean.clone()
    corrupt[:, 2:4] = torch.from_numpy(rng.integers(3, CFG.vocab_size, size=(b, 2)))
    return clean, corrupt


def test_logit_diff_basics(model):
    d = _direction(model)
    assert logit_diff(torch.zeros(CFG.d_resid, dtype=torch.float64), d).item() == 0.0
    z1, z2 = torch.randn(CFG.d_resid, dtype=torch.float64), torch.randn(CFG.d_resid, dtype=torch.float64)
    assert abs((logit_diff(z1 + z2, d) - logit_diff(z1, d) - logit_diff(z2, d)).item()) < 1e-12
    with pytest.raises(ShapeError):
        logit_diff(torch.zeros(3), d)


def test_logit_diff_of_final_residual_is_label_logit_gap(model):
    clean, _ = _pair()
    logits, cache = model.run_with_cache(clean)
    ld = logit_diff(cache.final[:, -1], _direction(model))
    gap = logits[:, -1, B_ID] - logits[:, -1, A_ID]
    assert torch.max(torch.abs(ld - gap)).item() < 1e-12


def test_dla_is_complete(model):
    clean, _ = _pair(b=20)
    _, cache = model.run_with_cache(clean)
    table = direct_logit_attribution(cache, _direction(model))
    assert table.completeness_error() < 1e-9
    assert len(table.components) == len(all_components(CFG))


def test_dla_of_silenced_head_is_zero(model):
    m = model.copy()
    with torch.no_grad():
        m.W_O[1, 0].zero_()
    _, cache = m.run_with_cache(_pair()[0])
    col = direct_logit_attribution(cache, _direction(m)).column(ComponentId.attn_head(1, 0))
    assert torch.all(col == 0)


def test_dla_matches_zero_patch_on_last_layer(model):
    clean, _ = _pair()
    _, cache = model.run_with_cache(clean)
    table = direct_logit_attribution(cache, _direction(model))
    p = Patcher(model, clean, clean, _direction(model))
    last = CFG.n_layers - 1
    for h in range(CFG.n_heads):
        comp = ComponentId.attn_head(last, h)
        zero = torch.zeros_like(cache.component(comp))
        delta = p.run_hooks([PatchHook(comp, zero, routing="direct")])
        assert torch.max(torch.abs(delta - table.column(comp))).item() < 1e-9


@pytest.mark.parametrize("routing", ["direct", "total"])
def test_patching_identical_inputs_is_exactly_zero(model, routing):
    clean, _ = _pair()
    p = Patcher(model, clean, clean, _direction(model))
    for r in p.patch_all(routing):
        assert r.delta_ld == 0.0


def test_via_routes_with_identical_inputs_are_exactly_zero(model):
    clean, _ = _pair()
    p = Patcher(model, clean, clean, _direction(model))
    for r in p.patch_all("via_values", heads=[(2, 0), (2, 1)]):
        assert not r.applicable or r.delta_ld == 0.0


@pytest.mark.parametrize("routing", ["direct", "total"])
def test_patching_everything_reproduces_corrupt_run(model, routing):
    clean, corrupt = _pair()
    p = Patcher(model, clean, corrupt, _direction(model))
    hooks = [p.hook(c, routing) for c in all_components(CFG)]
    delta = p.run_hooks(hooks)
    assert torch.max(torch.abs((p.ld_ref - delta) - p.ld_corrupt)).item() < 1e-6


def test_patch_shapes_and_receivers(model):
    clean, corrupt = _pair()
    with pytest.raises(PatchError):
        Patcher(model, clean, corrupt[:, :-1], _direction(model))
    r = path_patch(model, clean, corrupt, ComponentId.mlp(2), _direction(model), "via_values", heads=[(1, 0)])
    assert not r.applicable and r.n == 0
    r = path_patch(model, clean, corrupt, ComponentId.mlp(0), _direction(model), "via_values", heads=[(0, 1), (2, 1)])
    assert r.receivers == ((2, 1),) and r.n == clean.shape[0]


def test_via_value_and_key_routes_differ_from_direct(model):
    clean, corrupt = _pair()
    p = Patcher(model, clean, corrupt, _direction(model))
    heads = [(1, 0), (1, 1), (2, 0), (2, 1)]
    v = p.patch(ComponentId.embed(), "via_values", heads).delta_ld
    k = p.patch(ComponentId.embed(), "via_keys", heads).delta_ld
    d = p.patch(ComponentId.embed(), "direct").delta_ld
    assert len({round(v, 9), round(k, 9), round(d, 9)}) == 3


def test_top_heads_orders_by_magnitude(model):
    clean, corrupt = _pair()
    results = Patcher(model, clean, corrupt, _direction(model)).patch_all("direct")
    heads = top_heads(results, k=2)
    mags = {(r.component.layer, r.component.head): abs(r.delta_ld) for r in results if r.component.is_head}
    assert sorted(mags, key=lambda h: -mags[h])[:2] == heads


def test_patch_csv_grid(model, tmp_path):
    clean, corrupt = _pair()
    results = Patcher(model, clean, corrupt, _direction(model)).patch_all("via_values", heads=[(2, 0)])
    path = tmp_path / "p.csv"
    write_patch_csv(results, path, CFG.n_layers, CFG.n_heads, header={"seed": 1})
    assert path.read_text().startswith("# seed: 1\n")
    rows = read_patch_csv(path)
    assert len(rows) == CFG.n_layers * (CFG.n_heads + 1)
    last_layer = [r for r in rows if r["layer"] == CFG.n_layers - 1]
    assert all(math.isnan(r["mean_delta_ld"]) and r["n"] == 0 for r in last_layer)
    by = {(str(r.component)): r.delta_ld for r in results}
    first = next(r for r in rows if r["layer"] == 0 and r["component"] == "mlp")
    assert first["mean_delta_ld"] == pytest.approx(by["mlp0"], abs=1e-12)


def _groups(model):
    clean, corrupt = _pair(b=8)
    last = torch.full((8,), clean.shape[1] - 1)
    labels = np.array([1, 0] * 4)
    return {"positive": (clean, corrupt, last, labels)}


def test_empty_circuit_changes_nothing(model):
    res = faithfulness_patch(model, CircuitSpec(frozenset()), _groups(model), _direction(model))
    assert res.accuracy["random_patched"] == res.accuracy["random"]


def test_full_circuit_reproduces_shortcut_run(model):
    res = faithfulness_patch(model, CircuitSpec.full(CFG), _groups(model), _direction(model))
    assert res.accuracy["random_patched"] == res.accuracy["shortcut"]


def test_circuit_validation():
    with pytest.raises(PatchError):
        CircuitSpec(frozenset({(1, 0)}), routing="direct")
    assert CircuitSpec(frozenset({(1, 0)})).is_empty()
    assert not CircuitSpec(frozenset({(1, 0)}), frozenset({ComponentId.mlp(0)})).is_empty()


def test_reconstruction_ratio():
    from shortcutlab.interp import FaithfulnessResult

    res = FaithfulnessResult(
        {"random": {"positive": 83.1}, "shortcut": {"positive": 63.6}, "random_patched": {"positive": 72.1}},
        {"positive": 10},
    )
    assert res.shift("positive") == pytest.approx(-19.5)
    assert res.reconstructed("positive") == pytest.approx(11.0 / 19.5)


def test_attention_report(model):
    clean, _ = _pair(b=3)
    _, cache = model.run_with_cache(clean)
    every = [list(range(clean.shape[1]))] * 3
    rows = head_name_attention_report(cache, [(1, 0)], every, _direction(model))
    assert all(r["name_attention"] == pytest.approx(1.0, abs=1e-12) for r in rows)
    m = model.copy()
    with torch.no_grad():
        m.W_O[1, 0].zero_()
    _, cache = m.run_with_cache(clean)
    rows = head_name_attention_report(cache, [(1, 0)], [[2, 3]] * 3, _direction(m))
    assert all(r["ld"] == 0.0 for r in rows)
