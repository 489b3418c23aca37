"""Decoder-only transformer without biases or layer norm, with activation caching and patch hooks.

Because nothing normalises the residual stream, the final residual at any
position is exactly ``x^0 + sum_{l,h} a^{l,h} + sum_l m^l``; every attribution
identity in :mod:`shortcutlab.interp` and :mod:`shortcutlab.attribution` relies on this.

Patch routing
-------------
A :class:`PatchHook` swaps one component's output for a stored activation.
Where that swapped value is *visible* depends on ``routing``:

``total``
    the swapped value enters the residual stream and every downstream
    component recomputes from it (plain activation patching).
``direct``
    only the final residual (hence the logits) sees the swapped value; every
    other consumer reads the clean activation.
``via_values`` / ``via_keys``
    the swapped value is visible only when the listed receiver heads compute
    their value (resp. key) vectors. The receivers' resulting change in output
    reaches the logits through the direct path.

The non-total routes are implemented with side-by-side bookkeeping: the main
residual stream stays clean while per-receiver deltas and a final-residual
delta are carried alongside it, so each patch costs one forward pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import numerics
from .errors import PatchError, SchemaError, ShapeError
from .numerics import RngStream

CHECKPOINT_VERSION = 1
ROUTINGS = ("total", "direct", "via_values", "via_keys")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_resid: int = 128
    d_head: int = 32
    d_mlp: int = 512
    vocab_size: int = 512
    max_seq: int = 128
    activation: str = "gelu"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_resid", "d_head", "d_mlp", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")
        if self.d_resid != self.n_heads * self.d_head:
            raise ShapeError(
                f"d_resid ({self.d_resid}) must equal n_heads*d_head ({self.n_heads}*{self.d_head})"
            )
        if self.activation != "gelu":
            raise ShapeError(f"unsupported activation {self.activation!r}")


@dataclass(frozen=True, order=True)
class ComponentId:
    """A node of the compute graph: the embedding, one attention head or one MLP."""

    kind: str
    layer: int = -1
    head: int = -1

    @classmethod
    def embed(cls) -> "ComponentId":
        return cls("embed")

    @classmethod
    def attn_head(cls, layer: int, head: int) -> "ComponentId":
        return cls("head", layer, head)

    @classmethod
    def mlp(cls, layer: int) -> "ComponentId":
        return cls("mlp", layer)

    @classmethod
    def parse(cls, text: str) -> "ComponentId":
        """Inverse of ``str()``: ``embed``, ``mlp2`` or ``3.1`` (layer.head)."""
        text = text.strip()
        if text == "embed":
            return cls.embed()
        if text.startswith("mlp"):
            return cls.mlp(int(text[3:]))
        layer, head = text.split(".")
        return cls.attn_head(int(layer), int(head))

    @property
    def is_head(self) -> bool:
        return self.kind == "head"

    def __str__(self) -> str:
        if self.kind == "embed":
            return "embed"
        if self.kind == "mlp":
            return f"mlp{self.layer}"
        return f"{self.layer}.{self.head}"

    def validate(self, cfg: ModelConfig) -> None:
        if self.kind == "embed":
            return
        if self.kind not in ("head", "mlp"):
            raise PatchError(f"unknown component kind {self.kind!r}")
        if not 0 <= self.layer < cfg.n_layers:
            raise PatchError(f"layer {self.layer} out of range for {cfg.n_layers} layers")
        if self.kind == "head" and not 0 <= self.head < cfg.n_heads:
            raise PatchError(f"head {self.head} out of range for {cfg.n_heads} heads")


def all_components(cfg: ModelConfig, include_embed: bool = True) -> list[ComponentId]:
    comps = [ComponentId.embed()] if include_embed else []
    for layer in range(cfg.n_layers):
        comps += [ComponentId.attn_head(layer, h) for h in range(cfg.n_heads)]
        comps.append(ComponentId.mlp(layer))
    return comps


@dataclass
class PatchHook:
    """Replace ``target``'s output at ``positions`` with ``replacement``.

    ``replacement`` has the full activation shape of the target, ``(B, N, d)``
    or ``(N, d)``; only the listed positions are used (``None`` = all).
    ``heads`` lists receiver heads as ``(layer, head)`` pairs for the ``via_*`` routes.
    """

    target: ComponentId
    replacement: torch.Tensor
    positions: Sequence[int] | None = None
    routing: str = "direct"
    heads: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.heads = frozenset(tuple(h) for h in self.heads)


@dataclass
class ActivationCache:
    resid: list[torch.Tensor]  # x^0 .. x^L, each (B, N, d)
    head_out: list[torch.Tensor]  # a^{l,h}: (B, N, H, d)
    attn: list[torch.Tensor]  # A^{l,h}: (B, H, N, N)
    mlp_out: list[torch.Tensor]  # m^l: (B, N, d)
    final: torch.Tensor  # residual read by the unembedding, (B, N, d)
    logits: torch.Tensor | None = None

    @property
    def n_layers(self) -> int:
        return len(self.head_out)

    def attn_out(self, layer: int) -> torch.Tensor:
        return self.head_out[layer].sum(dim=2)

    def component(self, comp: ComponentId) -> torch.Tensor:
        """Output of ``comp`` at every position, ``(B, N, d)``."""
        if comp.kind == "embed":
            return self.resid[0]
        if comp.kind == "mlp":
            return self.mlp_out[comp.layer]
        return self.head_out[comp.layer][:, :, comp.head]


class Transformer(torch.nn.Module):
    """The model. Weight names follow the usual W_E / W_pos / W_Q ... W_U convention.

    ``ablation`` maps ``(layer, head)`` to ``None`` (zero-ablation) or to a
    fixed ``(N, d)``/``(d,)`` activation (mean-ablation) that replaces that
    head's output everywhere.
    """

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype | None = None):
        super().__init__()
        self.cfg = cfg
        dtype = dtype or numerics.torch_dtype()
        L, H, d, k, m, V = cfg.n_layers, cfg.n_heads, cfg.d_resid, cfg.d_head, cfg.d_mlp, cfg.vocab_size
        P = torch.nn.Parameter
        self.W_E = P(torch.zeros(V, d, dtype=dtype))
        self.W_pos = P(torch.zeros(cfg.max_seq, d, dtype=dtype))
        self.W_Q = P(torch.zeros(L, H, d, k, dtype=dtype))
        self.W_K = P(torch.zeros(L, H, d, k, dtype=dtype))
        self.W_V = P(torch.zeros(L, H, d, k, dtype=dtype))
        self.W_O = P(torch.zeros(L, H, k, d, dtype=dtype))
        self.W_in = P(torch.zeros(L, d, m, dtype=dtype))
        self.W_out = P(torch.zeros(L, m, d, dtype=dtype))
        self.W_U = P(torch.zeros(d, V, dtype=dtype))
        self.ablation: dict[tuple[int, int], torch.Tensor | None] = {}

    # ------------------------------------------------------------------ utils
    @property
    def dtype(self) -> torch.dtype:
        return self.W_E.dtype

    def copy(self, dtype: torch.dtype | None = None) -> "Transformer":
        other = Transformer(self.cfg, dtype=dtype or self.dtype)
        with torch.no_grad():
            for name, p in self.named_parameters():
                getattr(other, name).copy_(p.detach().to(other.dtype))
        other.ablation = {
            k: (None if v is None else v.detach().to(other.dtype)) for k, v in self.ablation.items()
        }
        return other

    def head_vo(self, layer: int, head: int) -> torch.Tensor:
        """``W_V^{l,h} @ W_O^{l,h}``, a ``d_resid x d_resid`` matrix of rank at most ``d_head``."""
        ComponentId.attn_head(layer, head).validate(self.cfg)
        return self.W_V[layer, head] @ self.W_O[layer, head]

    def _mlp(self, layer: int, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(x @ self.W_in[layer]) @ self.W_out[layer]

    # --------------------------------------------------------------- forward
    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, N, V)`` for token ids ``(B, N)``."""
        final, _ = self.run(tokens)
        return final @ self.W_U

    def run_with_cache(
        self, tokens: torch.Tensor, hooks: Iterable[PatchHook] = ()
    ) -> tuple[torch.Tensor, ActivationCache]:
        final, cache = self.run(tokens, hooks, keep_cache=True)
        cache.logits = final @ self.W_U
        return cache.logits, cache

    def run(
        self,
        tokens: torch.Tensor,
        hooks: Iterable[PatchHook] = (),
        keep_cache: bool = False,
        token_embeds: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, ActivationCache | None]:
        """Forward pass returning the final residual ``(B, N, d)`` and optionally the cache.

        ``token_embeds`` ``(B, N, d)`` replaces the ``W_E`` lookup (position
        embeddings are still added); gradient-based attribution goes through it.
        """
        cfg = self.cfg
        tokens = torch.as_tensor(tokens)
        if tokens.dim() == 1:
            tokens = tokens[None]
        B, N = tokens.shape
        if N > cfg.max_seq:
            raise ShapeError(f"sequence length {N} exceeds max_seq {cfg.max_seq}")

        hooks = list(hooks)
        by_target = self._validate_hooks(hooks, N)
        # receiver (layer, head) -> accumulated delta for its V or K input
        v_delta: dict[tuple[int, int], torch.Tensor] = {}
        k_delta: dict[tuple[int, int], torch.Tensor] = {}
        final_delta = None

        def apply(comp: ComponentId, value: torch.Tensor) -> torch.Tensor:
            nonlocal final_delta
            for hook in by_target.get(comp, ()):
                patched = _splice(value, hook.replacement, hook.positions)
                if hook.routing == "total":
                    value = patched
                    continue
                delta = patched - value
                if hook.routing == "direct":
                    final_delta = delta if final_delta is None else final_delta + delta
                else:
                    store = v_delta if hook.routing == "via_values" else k_delta
                    for rh in hook.heads:
                        store[rh] = delta if rh not in store else store[rh] + delta
            return value

        if token_embeds is None:
            token_embeds = self.W_E[tokens]
        elif token_embeds.shape != (B, N, cfg.d_resid):
            raise ShapeError(f"token_embeds shape {tuple(token_embeds.shape)} != {(B, N, cfg.d_resid)}")
        x = token_embeds + self.W_pos[:N]
        x = apply(ComponentId.embed(), x)
        resid, head_outs, attns, mlps = [x], [], [], []
        scale = 1.0 / math.sqrt(cfg.d_head)

        plain = not (keep_cache or by_target or self.ablation)
        for layer in range(cfg.n_layers):
            q = torch.einsum("bnd,hdk->bhnk", x, self.W_Q[layer])
            k = torch.einsum("bnd,hdk->bhnk", x, self.W_K[layer])
            v = torch.einsum("bnd,hdk->bhnk", x, self.W_V[layer])
            if plain:
                # nothing needs per-head outputs or attention patterns
                z = torch.nn.functional.scaled_dot_product_attention(q, k, v, is_causal=True, scale=scale)
                a = torch.einsum("bhnk,hkd->bnd", z, self.W_O[layer])
                x = x + a + self._mlp(layer, x + a)
                continue
            A = numerics.causal_softmax_torch(q @ k.transpose(-1, -2) * scale)
            z = A @ v  # (B, H, N, k)
            out = torch.einsum("bhnk,hkd->bnhd", z, self.W_O[layer])

            if self.ablation:
                out = self._ablate(layer, out)

            # receivers that see a patched V/K input in this layer
            for h in range(cfg.n_heads):
                key = (layer, h)
                if key not in v_delta and key not in k_delta:
                    continue
                k_h = k[:, h]
                v_h = v[:, h]
                if key in k_delta:
                    k_h = (x + k_delta[key]) @ self.W_K[layer, h]
                if key in v_delta:
                    v_h = (x + v_delta[key]) @ self.W_V[layer, h]
                A_r = numerics.causal_softmax_torch(q[:, h] @ k_h.transpose(-1, -2) * scale)
                routed = (A_r @ v_h) @ self.W_O[layer, h]
                if self.ablation and key in self.ablation:
                    routed = out[:, :, h]
                d = routed - out[:, :, h]
                final_delta = d if final_delta is None else final_delta + d

            if by_target:
                cols = [apply(ComponentId.attn_head(layer, h), out[:, :, h]) for h in range(cfg.n_heads)]
                out = torch.stack(cols, dim=2)
            a = out.sum(dim=2)
            m = apply(ComponentId.mlp(layer), self._mlp(layer, x + a))
            x = x + a + m

            if keep_cache:
                head_outs.append(out)
                attns.append(A)
                mlps.append(m)
                resid.append(x)

        final = x if final_delta is None else x + final_delta
        cache = None
        if keep_cache:
            cache = ActivationCache(resid=resid, head_out=head_outs, attn=attns, mlp_out=mlps, final=final)
        return final, cache

    def run_last(self, tokens: torch.Tensor, token_embeds: torch.Tensor | None = None) -> torch.Tensor:
        """Final residual at the last position only, ``(B, d)``; no hooks, ablation or cache.

        Equal to ``run(tokens)[0][:, -1]`` but the top layer is evaluated for
        one query, which is all that perturbation-based attribution reads.
        """
        if self.ablation:
            return self.run(tokens, token_embeds=token_embeds)[0][:, -1]
        cfg = self.cfg
        tokens = torch.as_tensor(tokens)
        if tokens.dim() == 1:
            tokens = tokens[None]
        n = tokens.shape[1]
        if n > cfg.max_seq:
            raise ShapeError(f"sequence length {n} exceeds max_seq {cfg.max_seq}")
        x = (self.W_E[tokens] if token_embeds is None else token_embeds) + self.W_pos[:n]
        scale = 1.0 / math.sqrt(cfg.d_head)
        for layer in range(cfg.n_layers):
            top = layer == cfg.n_layers - 1
            xq = x[:, -1:] if top else x
            q = torch.einsum("bnd,hdk->bhnk", xq, self.W_Q[layer])
            k = torch.einsum("bnd,hdk->bhnk", x, self.W_K[layer])
            v = torch.einsum("bnd,hdk->bhnk", x, self.W_V[layer])
            # the last query sees every position, so it needs no mask
            z = torch.nn.functional.scaled_dot_product_attention(q, k, v, is_causal=not top, scale=scale)
            a = torch.einsum("bhnk,hkd->bnd", z, self.W_O[layer])
            x = xq + a + self._mlp(layer, xq + a)
        return x[:, -1]

    def _ablate(self, layer: int, out: torch.Tensor) -> torch.Tensor:
        out = out.clone()
        for (l, h), fill in self.ablation.items():
            if l != layer:
                continue
            if fill is None:
                out[:, :, h] = 0.0
            else:
                n = out.shape[1]
                out[:, :, h] = fill[:n] if fill.dim() == 2 else fill
        return out

    def _validate_hooks(self, hooks: list[PatchHook], n: int) -> dict[ComponentId, list[PatchHook]]:
        by_target: dict[ComponentId, list[PatchHook]] = {}
        for hook in hooks:
            hook.target.validate(self.cfg)
            if hook.routing not in ROUTINGS:
                raise PatchError(f"unknown routing {hook.routing!r}")
            if hook.positions is not None:
                for p in hook.positions:
                    if not 0 <= p < n:
                        raise PatchError(f"position {p} out of range for sequence length {n}")
            if hook.routing.startswith("via"):
                if not hook.heads:
                    raise PatchError("via_* routing needs a non-empty receiver head set")
                src_layer = hook.target.layer  # -1 for the embedding
                for layer, head in hook.heads:
                    ComponentId.attn_head(layer, head).validate(self.cfg)
                    if layer <= src_layer:
                        raise PatchError(
                            f"receiver head {layer}.{head} does not read the output of {hook.target}"
                        )
            by_target.setdefault(hook.target, []).append(hook)
        return by_target


def _splice(value: torch.Tensor, replacement: torch.Tensor, positions) -> torch.Tensor:
    replacement = replacement.to(value.dtype)
    if replacement.dim() == value.dim() - 1:
        replacement = replacement.unsqueeze(0).expand_as(value)
    if replacement.shape != value.shape:
        raise PatchError(f"replacement shape {tuple(replacement.shape)} != activation shape {tuple(value.shape)}")
    if positions is None:
        return replacement
    out = value.clone()
    idx = list(positions)
    out[:, idx] = replacement[:, idx]
    return out


def init_params(cfg: ModelConfig, rng: RngStream, dtype: torch.dtype | None = None) -> Transformer:
    """Gaussian init (std 0.02), with W_O and W_out additionally scaled by 1/sqrt(2L).

    Draws come from ``rng`` in a fixed order, so a seed reproduces the weights
    on any platform.
    """
    model = Transformer(cfg, dtype=dtype)
    depth_scale = 1.0 / math.sqrt(2 * cfg.n_layers)
    order = ["W_E", "W_pos", "W_Q", "W_K", "W_V", "W_O", "W_in", "W_out", "W_U"]
    with torch.no_grad():
        for name in order:
            p = getattr(model, name)
            std = 0.02 * (depth_scale if name in ("W_O", "W_out") else 1.0)
            draw = rng.normal(0.0, std, size=tuple(p.shape))
            p.copy_(torch.from_numpy(draw).to(p.dtype))
    return model


def ablate_heads(
    model: Transformer,
    heads: Iterable[tuple[int, int]],
    mode: str = "zero",
    mean_cache: ActivationCache | None = None,
) -> Transformer:
    """A copy of ``model`` whose listed heads output zero (or their mean activation).

    Mean-ablation needs ``mean_cache`` from a reference batch; each head's output
    is averaged over the batch axis, position by position.
    """
    variant = model.copy()
    for layer, head in heads:
        ComponentId.attn_head(layer, head).validate(model.cfg)
        if mode == "zero":
            variant.ablation[(layer, head)] = None
        elif mode == "mean":
            if mean_cache is None:
                raise ValueError("mean ablation needs a reference cache")
            fill = mean_cache.head_out[layer][:, :, head].mean(dim=0)
            variant.ablation[(layer, head)] = fill.detach().to(variant.dtype)
        else:
            raise ValueError(f"unknown ablation mode {mode!r}")
    return variant


# ------------------------------------------------------------- checkpoints
def save_checkpoint(model: Transformer, path: str | Path, metadata: dict | None = None) -> None:
    """Write config, weights and a manifest (names, shapes, precision, version) to one ``.npz``."""
    arrays = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    manifest = {
        "format": "shortcutlab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "precision": 64 if model.dtype == torch.float64 else 32,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "ablation": sorted([list(k) for k, v in model.ablation.items() if v is None]),
        "metadata": metadata or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=np.array(json.dumps(manifest, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path, dtype: torch.dtype | None = None) -> tuple[Transformer, dict]:
    """Load a checkpoint; returns the model and the manifest's metadata dict."""
    with np.load(path, allow_pickle=False) as data:
        if "__manifest__" not in data:
            raise SchemaError(f"{path}: missing manifest")
        manifest = json.loads(str(data["__manifest__"]))
        if manifest.get("format") != "shortcutlab-checkpoint":
            raise SchemaError(f"{path}: not a shortcutlab checkpoint")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise SchemaError(
                f"{path}: checkpoint version {manifest.get('version')} != supported {CHECKPOINT_VERSION}"
            )
        cfg = ModelConfig(**manifest["config"])
        model = Transformer(cfg, dtype=dtype)
        with torch.no_grad():
            for entry in manifest["tensors"]:
                arr = data[entry["name"]]
                if list(arr.shape) != entry["shape"]:
                    raise SchemaError(f"{path}: tensor {entry['name']} has shape {arr.shape}")
                getattr(model, entry["name"]).copy_(torch.from_numpy(arr).to(model.dtype))
    for layer, head in manifest.get("ablation", []):
        model.ablation[(layer, head)] = None
    return model, manifest.get("metadata", {})
