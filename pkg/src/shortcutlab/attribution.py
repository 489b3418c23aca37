"""Token attribution: head-based token attribution (HTA), LIME and integrated gradients.

All three produce one signed score per input token for the label logit
difference ``LD = logit(B) - logit(A)`` at the read position. Word-level scores
come from :func:`aggregate_word_scores`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import NumericError, ShapeError
from .interp import logit_diff
from .model import ActivationCache, Transformer
from .numerics import RngStream

log = logging.getLogger(__name__)

DEFAULT_REL_TAU = 0.25


@dataclass
class AttributionScores:
    method: str
    scores: np.ndarray  # one per input token
    tokens: list = field(default_factory=list)
    heads: list = field(default_factory=list)  # HTA only
    tau: float | None = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.tokens and len(self.tokens) != len(self.scores):
            raise ShapeError(f"{len(self.scores)} scores for {len(self.tokens)} tokens")
        if not np.all(np.isfinite(self.scores)):
            raise NumericError(f"{self.method}: non-finite attribution scores")


# ------------------------------------------------------------------- HTA


def head_logit_diffs(cache: ActivationCache, direction: torch.Tensor, last: torch.Tensor) -> torch.Tensor:
    """``LD(a^{l,h}_T)`` as a ``(B, L, H)`` tensor."""
    ar = torch.arange(len(last))
    return torch.stack([logit_diff(out[ar, last], direction) for out in cache.head_out], dim=1)


def resolve_tau(head_lds: torch.Tensor, tau: float | None, rel_tau: float = DEFAULT_REL_TAU) -> torch.Tensor:
    """Per-example threshold: ``tau`` if given, else ``rel_tau * max |LD|`` over heads."""
    if tau is not None:
        if tau < 0:
            raise ValueError("tau must be >= 0")
        return torch.full((head_lds.shape[0],), float(tau), dtype=head_lds.dtype)
    return rel_tau * head_lds.abs().flatten(1).max(dim=1).values


def select_heads(
    cache: ActivationCache, direction: torch.Tensor, tau: float | None = None, last=None, rel_tau: float = DEFAULT_REL_TAU
) -> list[list[tuple[int, int]]]:
    """Heads with ``|LD(a^{l,h}_T)| > tau``, per example."""
    last = _last(cache, last)
    lds = head_logit_diffs(cache, direction, last)
    taus = resolve_tau(lds, tau, rel_tau)
    mask = lds.abs() > taus[:, None, None]
    return [[(int(l), int(h)) for l, h in torch.nonzero(m).tolist()] for m in mask]


def hta_terms(model: Transformer, cache: ActivationCache, direction: torch.Tensor, last=None) -> torch.Tensor:
    """``A^{l,h}_{T,i} * LD(x^l_i W_VO^{l,h})`` for every head and token: ``(B, L, H, N)``.

    ``x^l`` is the residual entering layer ``l`` (the head's own input). Summing
    over ``i`` gives ``LD(a^{l,h}_T)`` exactly. Ablated heads contribute zero.
    """
    last = _last(cache, last)
    ar = torch.arange(len(last))
    out = []
    for layer in range(model.cfg.n_layers):
        x = cache.resid[layer]  # (B, N, d)
        # LD(x W_V W_O) = x W_V (W_O d): fold the direction into W_O first
        od = model.W_O[layer] @ direction  # (H, k)
        token_ld = torch.einsum("bnd,hdk,hk->bhn", x, model.W_V[layer], od)
        attn_T = cache.attn[layer][ar, :, last]  # (B, H, N)
        terms = attn_T * token_ld
        for (l, h), fill in model.ablation.items():
            if l == layer:
                terms[:, h] = 0.0
        out.append(terms)
    return torch.stack(out, dim=1)


def hta_batch(
    model: Transformer,
    cache: ActivationCache,
    direction: torch.Tensor,
    tau: float | None = None,
    last=None,
    rel_tau: float = DEFAULT_REL_TAU,
) -> tuple[np.ndarray, list[list[tuple[int, int]]], np.ndarray]:
    """HTA scores ``(B, N)``, the selected heads and the threshold used, per example."""
    last = _last(cache, last)
    with torch.no_grad():
        terms = hta_terms(model, cache, direction, last)
        lds = head_logit_diffs(cache, direction, last)
        taus = resolve_tau(lds, tau, rel_tau)
        mask = (lds.abs() > taus[:, None, None]).to(terms.dtype)
        scores = torch.einsum("blhn,blh->bn", terms, mask)
    heads = [[(int(l), int(h)) for l, h in torch.nonzero(m).tolist()] for m in mask]
    return scores.cpu().numpy(), heads, taus.cpu().numpy()


def hta(
    model: Transformer, tokens: Sequence[int], direction: torch.Tensor, tau: float | None = None, rel_tau: float = DEFAULT_REL_TAU
) -> AttributionScores:
    """HTA for one prompt read at its last token. One forward pass, no gradients."""
    ids = torch.as_tensor(list(tokens))[None]
    with torch.no_grad():
        _, cache = model.run_with_cache(ids)
    scores, heads, taus = hta_batch(model, cache, direction, tau, rel_tau=rel_tau)
    return AttributionScores("HTA", scores[0], list(tokens), heads[0], float(taus[0]))


def _last(cache: ActivationCache, last) -> torch.Tensor:
    if last is None:
        return torch.full((cache.final.shape[0],), cache.final.shape[1] - 1, dtype=torch.long)
    return torch.as_tensor(last, dtype=torch.long).reshape(-1)


# ------------------------------------------------------------------ LIME


@dataclass
class LimeFit:
    coef: np.ndarray
    intercept: float
    ridge: bool  # the weighted normal equations were singular


def lime_masks(n_features: int, n_perturbations: int, rng: RngStream) -> np.ndarray:
    """Binary keep-masks. Row 0 is the unperturbed input; each other row removes
    a uniformly drawn number of features (1..F) chosen uniformly at random."""
    masks = np.ones((n_perturbations, n_features), dtype=np.int8)
    if n_features == 0:
        return masks
    sizes = rng.integers(1, n_features + 1, size=n_perturbations - 1)
    for r, k in enumerate(sizes, start=1):
        masks[r, rng.choice(n_features, size=int(k), replace=False)] = 0
    return masks


def lime_weights(masks: np.ndarray, kernel_width: float) -> np.ndarray:
    """``exp(-d^2 / kw^2)`` with ``d`` the cosine distance to the all-ones mask, times 100."""
    z = masks.astype(float)
    norms = np.linalg.norm(z, axis=1) * np.sqrt(z.shape[1])
    cos = np.divide(z.sum(axis=1), norms, out=np.zeros(len(z)), where=norms > 0)
    d = (1.0 - cos) * 100.0
    return np.exp(-(d**2) / kernel_width**2)


def weighted_least_squares(X: np.ndarray, y: np.ndarray, w: np.ndarray, ridge: float = 1e-3) -> LimeFit:
    """Fit ``y ~ b + X c`` minimising ``sum w (y - b - X c)^2``.

    Falls back to ridge (``ridge * I`` on the coefficients, not the intercept)
    when the weighted design is rank deficient.
    """
    Xa = np.hstack([np.ones((len(X), 1)), X.astype(float)])
    sw = np.sqrt(w)[:, None]
    A = Xa * sw
    b = y * sw[:, 0]
    rank = np.linalg.matrix_rank(A)
    if rank == Xa.shape[1]:
        beta = np.linalg.lstsq(A, b, rcond=None)[0]
        return LimeFit(beta[1:], float(beta[0]), False)
    reg = ridge * np.eye(Xa.shape[1])
    reg[0, 0] = 0.0
    beta = np.linalg.solve(A.T @ A + reg, A.T @ b)
    return LimeFit(beta[1:], float(beta[0]), True)


def lime(
    predict: Callable[[np.ndarray], np.ndarray],
    n_features: int,
    rng: RngStream,
    n_perturbations: int = 1000,
    kernel_width: float = 25.0,
    ridge: float = 1e-3,
) -> LimeFit:
    """Local linear surrogate of ``predict`` (keep-mask ``(P, F)`` -> ``prob_pos`` ``(P,)``)."""
    if n_perturbations < 10:
        raise ValueError("LIME needs at least 10 perturbations")
    masks = lime_masks(n_features, n_perturbations, rng)
    y = np.asarray(predict(masks), dtype=float)
    if y.shape != (n_perturbations,):
        raise ShapeError(f"predictor returned shape {y.shape}, expected ({n_perturbations},)")
    fit = weighted_least_squares(masks, y, lime_weights(masks, kernel_width), ridge)
    if fit.ridge:
        log.warning("LIME fit was singular; used ridge regularisation (lambda=%g)", ridge)
    return fit


def model_mask_predictor(
    model: Transformer, tokens: Sequence[int], positions: Sequence[int], pad_id: int, direction: torch.Tensor, batch_size: int = 500
) -> Callable[[np.ndarray], np.ndarray]:
    """``prob_pos`` of the prompt with masked-out ``positions`` replaced by PAD."""
    base = torch.as_tensor(list(tokens))
    pos = torch.as_tensor(list(positions), dtype=torch.long)

    def predict(masks: np.ndarray) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(masks), batch_size):
                m = torch.from_numpy(masks[i : i + batch_size].astype(bool))
                ids = base.repeat(len(m), 1)
                sub = ids[:, pos]
                sub[~m] = pad_id
                ids[:, pos] = sub
                out.append(torch.sigmoid(model.run_last(ids) @ direction).cpu().numpy())
        return np.concatenate(out)

    return predict


def lime_tokens(
    model: Transformer,
    tokens: Sequence[int],
    positions: Sequence[int],
    pad_id: int,
    direction: torch.Tensor,
    rng: RngStream,
    n_perturbations: int = 1000,
    kernel_width: float = 25.0,
) -> AttributionScores:
    """LIME over the tokens at ``positions``; all other tokens score 0."""
    predict = model_mask_predictor(model, tokens, positions, pad_id, direction)
    fit = lime(predict, len(positions), rng, n_perturbations, kernel_width)
    scores = np.zeros(len(tokens))
    scores[list(positions)] = fit.coef
    return AttributionScores("LIME", scores, list(tokens), flags={"ridge": fit.ridge})


# -------------------------------------------------------------------- IG


def integrated_gradients(
    model: Transformer,
    tokens: Sequence[int],
    direction: torch.Tensor,
    pad_id: int,
    steps: int = 64,
    positions: Sequence[int] | None = None,
) -> AttributionScores:
    """IG of LD with respect to token embeddings, from a PAD-embedding baseline.

    The baseline swaps every token embedding (or only those at ``positions``)
    for the PAD embedding; position embeddings are untouched. The path integral
    uses the midpoint rule with ``steps`` points. ``flags`` records
    ``LD(input) - LD(baseline)`` for the completeness check.
    """
    if steps < 8:
        raise ValueError("integrated gradients needs at least 8 steps")
    ids = torch.as_tensor(list(tokens))
    n = len(ids)
    emb = model.W_E[ids].detach()
    base = emb.clone()
    sel = torch.arange(n) if positions is None else torch.as_tensor(list(positions), dtype=torch.long)
    base[sel] = model.W_E[pad_id].detach()
    alphas = (torch.arange(steps, dtype=emb.dtype) + 0.5) / steps
    path = base[None] + alphas[:, None, None] * (emb - base)[None]
    path.requires_grad_(True)
    direction = direction.detach()
    ld = model.run_last(ids.repeat(steps, 1), token_embeds=path) @ direction
    (grad,) = torch.autograd.grad(ld.sum(), path)
    if not torch.all(torch.isfinite(grad)):
        raise NumericError("non-finite gradient in integrated gradients")
    avg = grad.mean(dim=0)
    scores = ((emb - base) * avg).sum(dim=-1).detach()
    with torch.no_grad():
        ends = model.run_last(ids.repeat(2, 1), token_embeds=torch.stack([emb, base]))
        ld_in, ld_base = (ends @ direction).tolist()
    return AttributionScores(
        "IG", scores.cpu().numpy(), list(tokens), flags={"steps": steps, "ld_input": ld_in, "ld_baseline": ld_base}
    )


# ----------------------------------------------------------- aggregation


def aggregate_word_scores(
    scores: np.ndarray, spans: Sequence[tuple[int, int]], mode: str = "max", absolute: bool = True
) -> np.ndarray:
    """One score per word span ``[start, end)``: max or sum of the (absolute) token scores."""
    if mode not in ("max", "sum"):
        raise ValueError(f"aggregation mode must be 'max' or 'sum', got {mode!r}")
    s = np.abs(scores) if absolute else np.asarray(scores, dtype=float)
    prev = None
    out = []
    for start, end in spans:
        if end <= start or (prev is not None and start < prev):
            raise ShapeError(f"word spans must be non-empty and ordered, got ({start}, {end})")
        prev = end
        chunk = s[start:end]
        out.append(chunk.max() if mode == "max" else chunk.sum())
    return np.asarray(out, dtype=float)


def write_attributions_jsonl(records: Iterable[dict], path: str | Path, header: dict | None = None) -> None:
    """One JSON object per line; an optional first line ``{"__header__": ...}`` carries run metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"__header__": header}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def attribution_record(
    example_id: str, result: AttributionScores, token_strs: Sequence[str], words: Sequence[str], word_scores: np.ndarray
) -> dict:
    return {
        "example_id": example_id,
        "method": result.method,
        "tokens": list(token_strs),
        "scores": [float(x) for x in result.scores],
        "words": list(words),
        "word_scores": [float(x) for x in word_scores],
        "heads": [list(h) for h in result.heads],
        "tau": result.tau,
    }
