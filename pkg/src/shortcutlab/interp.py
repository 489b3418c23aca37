"""Localisation tools: logit difference, direct logit attribution, path patching,
circuit faithfulness and head ablation.

Patching follows a clean/corrupt protocol. The clean batch is the reference
input and the corrupt batch differs only where the intervention matters (here,
the actor name). ``delta_ld = LD(clean) - LD(clean with the corrupt activation
patched in)``, averaged over the batch. When the corrupt input is a Bad-actor
positive review, a positive value means the patched activation pushed the
prediction towards the negative label.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import PatchError, ShapeError
from .model import ActivationCache, ComponentId, PatchHook, Transformer, ablate_heads, all_components

__all__ = [
    "logit_diff",
    "DLATable",
    "direct_logit_attribution",
    "PatchResult",
    "Patcher",
    "path_patch",
    "top_heads",
    "write_patch_csv",
    "read_patch_csv",
    "CircuitSpec",
    "FaithfulnessResult",
    "faithfulness_patch",
    "ablate_heads",
    "head_name_attention_report",
]

VIA = {"via_values", "via_keys"}


def logit_diff(z: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
    """``z @ direction`` over the last axis; ``direction`` is ``W_U[:, B] - W_U[:, A]``."""
    z = torch.as_tensor(z)
    if z.shape[-1] != direction.shape[0]:
        raise ShapeError(f"vector of width {z.shape[-1]} does not match d_resid={direction.shape[0]}")
    return z.to(direction.dtype) @ direction


def _gather_last(t: torch.Tensor, last: torch.Tensor) -> torch.Tensor:
    return t[torch.arange(t.shape[0]), last]


def _last_index(tokens: torch.Tensor, last) -> torch.Tensor:
    if last is None:
        return torch.full((tokens.shape[0],), tokens.shape[1] - 1, dtype=torch.long)
    return torch.as_tensor(last, dtype=torch.long).reshape(-1)


def _as_batch(tokens) -> torch.Tensor:
    tokens = torch.as_tensor(tokens)
    return tokens[None] if tokens.dim() == 1 else tokens


# ------------------------------------------------------------------- DLA


@dataclass
class DLATable:
    """Per-example LD of every component's output at the read position.

    ``values[b, j]`` belongs to ``components[j]``; ``total[b]`` is the model's LD.
    """

    components: list[ComponentId]
    values: torch.Tensor
    total: torch.Tensor

    def mean(self) -> dict[str, float]:
        avg = self.values.detach().mean(dim=0)
        return {str(c): float(v) for c, v in zip(self.components, avg)}

    def completeness_error(self) -> float:
        return float((self.values.sum(dim=1) - self.total).abs().max().detach())

    def column(self, comp: ComponentId) -> torch.Tensor:
        return self.values[:, self.components.index(comp)]


def direct_logit_attribution(cache: ActivationCache, direction: torch.Tensor, last=None) -> DLATable:
    """LD of ``x^0``, every head output and every MLP output at position ``last``.

    The columns sum to LD of the final residual (no normalisation sits in between).
    """
    n_layers = cache.n_layers
    n_heads = cache.head_out[0].shape[2] if n_layers else 0
    last = _last_index(cache.final, last)
    comps = [ComponentId.embed()]
    cols = [logit_diff(_gather_last(cache.resid[0], last), direction)]
    for layer in range(n_layers):
        heads = _gather_last(cache.head_out[layer], last)  # (B, H, d)
        lds = logit_diff(heads, direction)
        for h in range(n_heads):
            comps.append(ComponentId.attn_head(layer, h))
            cols.append(lds[:, h])
        comps.append(ComponentId.mlp(layer))
        cols.append(logit_diff(_gather_last(cache.mlp_out[layer], last), direction))
    total = logit_diff(_gather_last(cache.final, last), direction)
    return DLATable(comps, torch.stack(cols, dim=1), total)


# -------------------------------------------------------------- patching


@dataclass
class PatchResult:
    component: ComponentId
    routing: str
    delta_ld: float  # mean of LD_ref - LD_patched
    n: int
    per_example: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    receivers: tuple = ()

    @property
    def applicable(self) -> bool:
        return not math.isnan(self.delta_ld)


class Patcher:
    """Three-pass path patching over one batch of clean/corrupt pairs.

    Passes one and two (clean and corrupt runs) happen once at construction;
    :meth:`patch` then costs a single hooked forward pass per target.
    """

    def __init__(self, model: Transformer, clean, corrupt, direction: torch.Tensor, last=None):
        clean = _as_batch(clean)
        corrupt = _as_batch(corrupt)
        if clean.shape != corrupt.shape:
            raise PatchError(
                f"clean and corrupt inputs must have equal shape, got {tuple(clean.shape)} and {tuple(corrupt.shape)}"
            )
        self.model = model
        self.clean = clean
        self.corrupt = corrupt
        self.direction = direction.detach().to(model.dtype)
        self.last = _last_index(clean, last)
        with torch.no_grad():
            _, self.clean_cache = model.run_with_cache(clean)
            _, self.corrupt_cache = model.run_with_cache(corrupt)
        self.ld_ref = self._ld(self.clean_cache.final)
        self.ld_corrupt = self._ld(self.corrupt_cache.final)

    def _ld(self, final: torch.Tensor) -> torch.Tensor:
        return logit_diff(_gather_last(final, self.last), self.direction)

    def hook(self, target: ComponentId, routing: str = "direct", heads: Iterable = (), positions=None) -> PatchHook:
        return PatchHook(target, self.corrupt_cache.component(target), positions, routing, frozenset(heads))

    def run_hooks(self, hooks: Sequence[PatchHook]) -> torch.Tensor:
        """Per-example ``LD_ref - LD_patched`` for an arbitrary hook set."""
        with torch.no_grad():
            final, _ = self.model.run(self.clean, hooks)
        return self.ld_ref - self._ld(final)

    def patch(self, target: ComponentId, routing: str = "direct", heads: Iterable = (), positions=None) -> PatchResult:
        heads = tuple(sorted(tuple(h) for h in heads))
        if routing in VIA:
            # receivers must sit after the sender; the rest cannot read it
            heads = tuple(h for h in heads if h[0] > target.layer)
            if not heads:
                return PatchResult(target, routing, float("nan"), 0, receivers=())
        delta = self.run_hooks([self.hook(target, routing, heads, positions)])
        arr = delta.detach().cpu().numpy()
        return PatchResult(target, routing, float(arr.mean()), len(arr), arr, heads)

    def patch_all(
        self,
        routing: str = "direct",
        heads: Iterable = (),
        components: Iterable[ComponentId] | None = None,
        positions=None,
    ) -> list[PatchResult]:
        comps = list(components) if components is not None else all_components(self.model.cfg)
        heads = list(heads)
        return [self.patch(c, routing, heads, positions) for c in comps]


def path_patch(
    model: Transformer,
    clean,
    corrupt,
    target: ComponentId,
    direction: torch.Tensor,
    routing: str = "direct",
    heads: Iterable = (),
    last=None,
    positions=None,
) -> PatchResult:
    """One-shot three-pass patch of ``target``; see :class:`Patcher` for batches of targets."""
    target.validate(model.cfg)
    return Patcher(model, clean, corrupt, direction, last).patch(target, routing, heads, positions)


def top_heads(results: Iterable[PatchResult], k: int = 3) -> list[tuple[int, int]]:
    """The ``k`` heads with the largest ``|delta_ld|``."""
    heads = [r for r in results if r.component.is_head and r.applicable]
    heads.sort(key=lambda r: -abs(r.delta_ld))
    return [(r.component.layer, r.component.head) for r in heads[:k]]


def rank_components(results: Iterable[PatchResult]) -> list[PatchResult]:
    return sorted((r for r in results if r.applicable), key=lambda r: -abs(r.delta_ld))


PATCH_FIELDS = ["layer", "component", "routing", "mean_delta_ld", "n"]


def write_patch_csv(results: Iterable[PatchResult], path: str | Path, n_layers: int, n_heads: int, header: dict | None = None) -> None:
    """One row per (layer, head) and per layer MLP: ``n_layers * (n_heads + 1)`` rows.

    The embedding row is left out of the grid. ``header`` entries are written
    first as ``# key: value`` comment lines. Rows with no receiver downstream
    carry an empty ``mean_delta_ld`` and ``n = 0``.
    """
    by = {r.component: r for r in results}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATCH_FIELDS)
        for layer in range(n_layers):
            comps = [ComponentId.attn_head(layer, h) for h in range(n_heads)] + [ComponentId.mlp(layer)]
            for c in comps:
                r = by.get(c)
                label = "mlp" if c.kind == "mlp" else str(c.head)
                if r is None or not r.applicable:
                    w.writerow([layer, label, r.routing if r else "", "", 0])
                else:
                    w.writerow([layer, label, r.routing, repr(round(r.delta_ld, 12)), r.n])


def read_patch_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for row in csv.DictReader(rows):
        val = row["mean_delta_ld"]
        out.append(
            {
                "layer": int(row["layer"]),
                "component": row["component"],
                "routing": row["routing"],
                "mean_delta_ld": float(val) if val else float("nan"),
                "n": int(row["n"]),
            }
        )
    return out


# ----------------------------------------------------------- faithfulness


@dataclass(frozen=True)
class CircuitSpec:
    """A shortcut circuit: label heads reading upstream components.

    Upstream outputs reach the label heads through ``routing`` (their values
    or keys); the label heads' resulting outputs reach the logits directly.
    Components in ``direct`` are patched straight into the final residual.
    """

    label_heads: frozenset
    upstream: frozenset = frozenset()
    routing: str = "via_values"
    direct: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "label_heads", frozenset(tuple(h) for h in self.label_heads))
        object.__setattr__(self, "upstream", frozenset(self.upstream))
        object.__setattr__(self, "direct", frozenset(self.direct))
        if self.routing not in VIA:
            raise PatchError(f"circuit routing must be one of {sorted(VIA)}, got {self.routing!r}")

    @classmethod
    def full(cls, cfg) -> "CircuitSpec":
        """Every component patched straight to the output: reproduces the corrupt run."""
        return cls(frozenset(), direct=frozenset(all_components(cfg)))

    def is_empty(self) -> bool:
        return not (self.direct or (self.label_heads and self.upstream))

    def validate(self, cfg) -> None:
        for layer, head in self.label_heads:
            ComponentId.attn_head(layer, head).validate(cfg)
        for comp in self.upstream | self.direct:
            comp.validate(cfg)

    def hooks(self, corrupt: ActivationCache) -> list[PatchHook]:
        hooks = []
        for comp in sorted(self.upstream):
            receivers = frozenset(h for h in self.label_heads if h[0] > comp.layer)
            if receivers:
                hooks.append(PatchHook(comp, corrupt.component(comp), None, self.routing, receivers))
        for comp in sorted(self.direct):
            hooks.append(PatchHook(comp, corrupt.component(comp), None, "direct"))
        return hooks


@dataclass
class FaithfulnessResult:
    """Accuracy (percent) per sentiment class under the three conditions."""

    accuracy: dict[str, dict[str, float]]  # condition -> sentiment -> accuracy
    n: dict[str, int]

    def shift(self, sentiment: str, condition: str = "shortcut") -> float:
        return self.accuracy[condition][sentiment] - self.accuracy["random"][sentiment]

    def reconstructed(self, sentiment: str) -> float:
        """Fraction of the random-to-shortcut accuracy shift recovered by the patch."""
        full = self.shift(sentiment)
        if full == 0:
            return float("nan")
        return self.shift(sentiment, "random_patched") / full

    def rows(self) -> list[dict]:
        out = []
        for s in sorted(self.n):
            out.append(
                {
                    "sentiment": s,
                    "random": self.accuracy["random"][s],
                    "shortcut": self.accuracy["shortcut"][s],
                    "random_patched": self.accuracy["random_patched"][s],
                    "reconstructed": self.reconstructed(s),
                    "n": self.n[s],
                }
            )
        return out


def faithfulness_patch(
    model: Transformer,
    circuit: CircuitSpec,
    groups: dict[str, tuple[torch.Tensor, torch.Tensor, torch.Tensor, np.ndarray]],
    direction: torch.Tensor,
    batch_size: int = 256,
) -> FaithfulnessResult:
    """Run random-name, shortcut-name and patched random-name inputs per class.

    ``groups`` maps a sentiment name to ``(random_ids, shortcut_ids, last, labels)``
    with equal-shape id tensors. The patched condition is the random-name run
    with the circuit's edges carrying the shortcut run's activations.
    """
    circuit.validate(model.cfg)
    acc: dict[str, dict[str, float]] = {"random": {}, "shortcut": {}, "random_patched": {}}
    counts = {}
    for sentiment, (rand_ids, short_ids, last, labels) in groups.items():
        labels = np.asarray(labels)
        preds = {k: [] for k in acc}
        for i in range(0, len(labels), batch_size):
            sl = slice(i, i + batch_size)
            p = Patcher(model, rand_ids[sl], short_ids[sl], direction, last[sl])
            preds["random"].append(p.ld_ref.cpu().numpy())
            preds["shortcut"].append(p.ld_corrupt.cpu().numpy())
            hooks = circuit.hooks(p.corrupt_cache)
            patched = p.ld_ref - p.run_hooks(hooks) if hooks else p.ld_ref
            preds["random_patched"].append(patched.cpu().numpy())
        for cond, parts in preds.items():
            ld = np.concatenate(parts)
            acc[cond][sentiment] = 100.0 * float(np.mean((ld > 0).astype(int) == labels))
        counts[sentiment] = len(labels)
    return FaithfulnessResult(acc, counts)


# ---------------------------------------------------------- attention report


def head_name_attention_report(
    cache: ActivationCache,
    heads: Iterable[tuple[int, int]],
    name_positions: Sequence[Sequence[int]],
    direction: torch.Tensor,
    last=None,
) -> list[dict]:
    """Per example and head: attention mass from the read position onto name tokens,
    and the LD of that head's output there."""
    last = _last_index(cache.final, last)
    rows = []
    for layer, head in heads:
        A = cache.attn[layer][:, head].detach()  # (B, N, N)
        lds = logit_diff(_gather_last(cache.head_out[layer][:, :, head], last), direction).detach()
        for b, positions in enumerate(name_positions):
            row = A[b, last[b]]
            mass = float(row[list(positions)].sum()) if len(positions) else 0.0
            rows.append({"example": b, "layer": layer, "head": head, "name_attention": mass, "ld": float(lds[b])})
    return rows
