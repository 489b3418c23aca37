"""Prompted two-label classification on top of the transformer, and its training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import NumericError, ShapeError
from .numerics import RngStream

log = logging.getLogger(__name__)

DEFAULT_WRAPPER = (
    'Classify the sentiment of the movie review:\nReview: """{review}"""\n\n'
    "LABEL OPTIONS: A: negative  B: positive\nLABEL:"
)


@dataclass(frozen=True)
class PromptTemplate:
    """Wraps a review; the class is read from the next-token logits of the final ``:``."""

    wrapper: str = DEFAULT_WRAPPER

    def parts(self) -> tuple[str, str]:
        before, after = self.wrapper.split("{review}")
        return before, after


@dataclass
class EncodedPrompt:
    ids: list[int]
    review_start: int
    review_tokens: list[str]
    name_spans: list[tuple[int, int, int]]  # (actor, start, end) in absolute positions
    label: int = -1

    @property
    def review_positions(self) -> range:
        return range(self.review_start, self.review_start + len(self.review_tokens))

    @property
    def last(self) -> int:
        return len(self.ids) - 1

    def name_positions(self, actor: int | None = 0) -> list[int]:
        return [p for a, s, e in self.name_spans if actor is None or a == actor for p in range(s, e)]

    def word_spans(self) -> list[tuple[int, int]]:
        """Word spans over review positions: each full name is one two-token word."""
        spans = []
        named = {}
        for _, s, e in self.name_spans:
            named[s] = e
        p = self.review_start
        end = self.review_start + len(self.review_tokens)
        while p < end:
            q = named.get(p, p + 1)
            spans.append((p, q))
            p = q
        return spans


class PromptEncoder:
    def __init__(self, tokenizer, template: PromptTemplate | None = None, max_seq: int | None = None):
        self.tok = tokenizer
        self.template = template or PromptTemplate()
        before, after = self.template.parts()
        self.prefix = tokenizer.encode(before, review=False)
        self.suffix = tokenizer.encode(after, review=False)
        self.max_seq = max_seq

    def encode_tokens(self, review_tokens: Sequence[str], name_spans=(), label: int = -1) -> EncodedPrompt:
        ids = self.prefix + self.tok.encode_tokens(review_tokens, review=True) + self.suffix
        if self.max_seq is not None and len(ids) > self.max_seq:
            raise ShapeError(f"prompt of {len(ids)} tokens exceeds max_seq {self.max_seq}; truncation refused")
        off = len(self.prefix)
        spans = [(a, s + off, e + off) for a, s, e in name_spans]
        return EncodedPrompt(ids, off, list(review_tokens), spans, label)

    def encode_text(self, review: str, label: int = -1) -> EncodedPrompt:
        return self.encode_tokens(self.tok.split(review), (), label)

    def encode_example(self, ex) -> EncodedPrompt:
        toks, spans = ex.review_tokens()
        return self.encode_tokens(toks, spans, ex.label)


def collate(prompts: Sequence[EncodedPrompt], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-padded ``(B, N)`` ids and the index of each prompt's final token.

    Right padding is harmless under the causal mask: pads sit after the read position.
    """
    n = max(len(p.ids) for p in prompts)
    ids = torch.full((len(prompts), n), pad_id, dtype=torch.long)
    for i, p in enumerate(prompts):
        ids[i, : len(p.ids)] = torch.tensor(p.ids)
    last = torch.tensor([p.last for p in prompts])
    return ids, last


def ld_direction(model, tokenizer) -> torch.Tensor:
    """``W_U[:, B] - W_U[:, A]``: positive logit difference favours the positive label."""
    a, b = tokenizer.label_ids
    return model.W_U[:, b] - model.W_U[:, a]


def batch_logit_diff(model, ids: torch.Tensor, last: torch.Tensor, direction: torch.Tensor, hooks=()) -> torch.Tensor:
    final, _ = model.run(ids, hooks)
    return final[torch.arange(len(last)), last] @ direction


def logit_diffs(model, encoder: PromptEncoder, prompts: Sequence[EncodedPrompt], batch_size: int = 256) -> np.ndarray:
    direction = ld_direction(model, encoder.tok)
    out = []
    with torch.no_grad():
        for i in range(0, len(prompts), batch_size):
            ids, last = collate(prompts[i : i + batch_size], encoder.tok.pad_id)
            out.append(batch_logit_diff(model, ids, last, direction).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0)


@dataclass(frozen=True)
class Prediction:
    label: int
    prob_pos: float
    logit_diff: float


def predict_label(model, encoder: PromptEncoder, review: str) -> Prediction:
    """Softmax over the two label logits at the final position."""
    prompt = encoder.encode_text(review)
    a, b = encoder.tok.label_ids
    with torch.no_grad():
        logits = model(torch.tensor([prompt.ids]))[0, -1]
    pair = torch.stack([logits[a], logits[b]])
    prob = torch.softmax(pair, dim=0)[1].item()
    ld = (logits[b] - logits[a]).item()
    return Prediction(int(ld > 0), prob, ld)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "accuracy"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in w.fieldnames})


def classification_loss(ld: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over the two label logits, written in terms of LD = logit(B) - logit(A)."""
    sign = labels.to(ld.dtype) * 2 - 1
    return torch.nn.functional.softplus(-sign * ld).mean()


def flat_loss_fn(model, label_ids: tuple[int, int], ids: torch.Tensor, last: torch.Tensor, labels: torch.Tensor):
    """``(fn, p0)`` where ``fn(p) -> (loss, grad)`` evaluates the classification loss on one
    batch with every parameter taken from the flat vector ``p`` (for gradient checking)."""
    work = model.copy(dtype=torch.float64)
    params = list(work.parameters())
    p0 = torch.nn.utils.parameters_to_vector(params).detach().numpy().copy()
    a, b = label_ids

    def fn(p: np.ndarray):
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(torch.from_numpy(np.asarray(p, dtype=np.float64)), params)
        for q in params:
            q.grad = None
        loss = classification_loss(batch_logit_diff(work, ids, last, work.W_U[:, b] - work.W_U[:, a]), labels)
        loss.backward()
        grad = torch.cat([q.grad.reshape(-1) for q in params])
        return float(loss.item()), grad.numpy().copy()

    return fn, p0


def _epoch_metrics(model, encoder, prompts, labels) -> tuple[float, float]:
    lds = logit_diffs(model, encoder, prompts)
    y = np.asarray(labels)
    loss = float(np.mean(np.logaddexp(0.0, -(2 * y - 1) * lds)))
    acc = float(np.mean((lds > 0).astype(int) == y))
    return loss, acc


def train_classifier(model, encoder: PromptEncoder, train, validation, cfg: TrainConfig = TrainConfig()):
    """Train ``model`` in place on (example list) ``train``; returns ``(model, TrainLog)``.

    Only the two label logits at the final position enter the loss.
    Deterministic given ``cfg.seed``: batch order comes from a seeded stream.
    """
    if not train:
        raise ValueError("empty training split")
    prompts = [encoder.encode_example(e) for e in train]
    val_prompts = [encoder.encode_example(e) for e in validation]
    y_train = np.array([e.label for e in train])
    y_val = np.array([e.label for e in validation])
    direction_ids = encoder.tok.label_ids
    if cfg.weight_decay:
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    rng = RngStream(cfg.seed).child("batches")
    trainlog = TrainLog()
    pad = encoder.tok.pad_id

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        order = rng.permutation(len(prompts))
        total, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            ids, last = collate([prompts[j] for j in idx], pad)
            labels = torch.from_numpy(y_train[idx])
            a, b = direction_ids
            ld = batch_logit_diff(model, ids, last, model.W_U[:, b] - model.W_U[:, a])
            loss = classification_loss(ld, labels)
            if not torch.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}, step {i // cfg.batch_size}: loss={loss.item()}")
            opt.zero_grad()
            loss.backward()
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        tr_loss, tr_acc = _epoch_metrics(model, encoder, prompts, y_train)
        trainlog.add(epoch=epoch, split="train", loss=tr_loss, accuracy=tr_acc)
        if val_prompts:
            va_loss, va_acc = _epoch_metrics(model, encoder, val_prompts, y_val)
            trainlog.add(epoch=epoch, split="validation", loss=va_loss, accuracy=va_acc)
        else:
            va_acc = float("nan")
        log.info(
            "epoch %d: running loss %.4f, train acc %.3f, val acc %.3f (%.1fs)",
            epoch, total / seen, tr_acc, va_acc, time.time() - t0,
        )
    return model, trainlog


def lm_loss(logits: torch.Tensor, ids: torch.Tensor, pad_id: int) -> torch.Tensor:
    """Next-token cross-entropy over every non-pad target position."""
    target = ids[:, 1:].clone()
    target[target == pad_id] = -100
    flat = logits[:, :-1].reshape(-1, logits.shape[-1])
    return torch.nn.functional.cross_entropy(flat, target.reshape(-1), ignore_index=-100)


def lm_corpus(encoder: PromptEncoder, templates, names, rng: RngStream) -> list[EncodedPrompt]:
    """Wrapped reviews for language-model pretraining, each slot filled with a fresh bank name."""
    prompts = []
    for t in templates:
        filled = [names.sample(g, rng) for g in t.genders]
        tokens, spans = t.render_tokens(filled)
        prompts.append(encoder.encode_tokens(tokens, spans))
    return prompts


def pretrain_lm(model, encoder: PromptEncoder, prompts: Sequence[EncodedPrompt], cfg: TrainConfig, epochs: int = 1) -> list[float]:
    """Next-token pretraining over whole prompts, in place; returns the mean loss per epoch.

    The classifier fine-tune that follows starts from weights that already
    route token identity through the attention layers, which is what lets a
    rare name become a shortcut at all on a corpus this small.
    """
    if epochs < 1:
        return []
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    rng = RngStream(cfg.seed).child("pretrain-batches")
    pad = encoder.tok.pad_id
    losses = []
    for epoch in range(1, epochs + 1):
        t0 = time.time()
        order = rng.permutation(len(prompts))
        total, steps = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            ids, _ = collate([prompts[j] for j in order[i : i + cfg.batch_size]], pad)
            loss = lm_loss(model(ids), ids, pad)
            if not torch.isfinite(loss):
                raise NumericError(f"pretraining diverged at epoch {epoch}, step {steps}: loss={loss.item()}")
            opt.zero_grad()
            loss.backward()
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            total += loss.item()
            steps += 1
        losses.append(total / max(steps, 1))
        log.info("pretrain epoch %d: loss %.4f (%.1fs)", epoch, losses[-1], time.time() - t0)
    return losses


# ---------------------------------------------------------------- evaluation


@dataclass
class AccuracyTable:
    """Accuracy (in percent) per (sentiment, variant) cell, with cell sizes."""

    cells: dict[tuple[str, str], float]
    counts: dict[tuple[str, str], int]

    def get(self, sentiment: str, variant: str) -> float:
        return self.cells[(sentiment, variant)]

    def rows(self) -> list[dict]:
        return [
            {"sentiment": s, "variant": v, "accuracy": acc, "n": self.counts[(s, v)]}
            for (s, v), acc in sorted(self.cells.items())
        ]


def accuracy_table(labels, predictions, variants) -> AccuracyTable:
    cells: dict[tuple[str, str], list[bool]] = {}
    for y, p, v in zip(labels, predictions, variants):
        s = "positive" if y == 1 else "negative"
        cells.setdefault((s, v), []).append(int(p) == int(y))
    return AccuracyTable(
        {k: 100.0 * float(np.mean(v)) for k, v in cells.items()},
        {k: len(v) for k, v in cells.items()},
    )


def evaluate_accuracy(model, encoder: PromptEncoder, examples) -> AccuracyTable:
    prompts = [encoder.encode_example(e) for e in examples]
    lds = logit_diffs(model, encoder, prompts)
    return accuracy_table([e.label for e in examples], (lds > 0).astype(int), [e.variant for e in examples])
