"""End-to-end experiment stages shared by the command line and the acceptance suite.

Every stage derives its randomness from ``RngStream(config.seed)`` through a
fixed child label, so a config reproduces corpus, weights and scores exactly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch

from . import __version__
from . import attribution as AT
from . import data as D
from . import interp as I
from . import training as T
from .errors import ConfigError
from .evaluation import DetectionEvalReport, acac, attribution_character
from .model import ComponentId, ModelConfig, Transformer, ablate_heads, init_params
from .numerics import RngStream

log = logging.getLogger(__name__)

METHODS = ("HTA", "LIME", "IG")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    frequency: float = 0.01
    purity: float = 1.0
    actor: int = 0
    # corpus
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 2400  # about half match the actor gender, leaving ~600 positive triplets for detection
    # model
    n_layers: int = 4
    n_heads: int = 4
    d_resid: int = 128
    d_head: int = 32
    d_mlp: int = 512
    max_seq: int = 128
    unembed_scale: float = 35.0
    # training
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 5
    pretrain_epochs: int = 1
    # analysis
    samples: int = 200
    n_label_heads: int = 3
    upstream_layers: int = 2
    tau: float | None = None
    rel_tau: float = AT.DEFAULT_REL_TAU
    lime_perturbations: int = 1000
    lime_kernel_width: float = 25.0
    ig_steps: int = 64
    detect_reviews: int = 500
    aggregation: str = "max"

    def __post_init__(self):
        if self.aggregation not in ("max", "sum"):
            raise ConfigError(f"aggregation must be 'max' or 'sum', got {self.aggregation!r}")
        if not 0 <= self.actor < len(D.SHORTCUT_ACTORS):
            raise ConfigError(f"actor index must lie in [0, {len(D.SHORTCUT_ACTORS)})")
        for name in ("samples", "n_label_heads", "detect_reviews"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def corpus_spec(self) -> D.CorpusSpec:
        return D.CorpusSpec(n_train=self.n_train, n_val=self.n_val, n_test=self.n_test)

    def shortcut_spec(self) -> D.ShortcutSpec:
        return D.ShortcutSpec.from_index(self.actor, self.frequency, self.purity)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(self.n_layers, self.n_heads, self.d_resid, self.d_head, self.d_mlp, vocab_size, self.max_seq)

    def train_config(self) -> T.TrainConfig:
        return T.TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=self.seed)


def artifact_header(cfg: ExperimentConfig, **extra) -> dict:
    """Metadata embedded in every written artifact."""
    return {"tool": "shortcutlab", "version": __version__, "seed": cfg.seed, "config": cfg.to_dict(), **extra}


# ------------------------------------------------------------------ setup


@dataclass
class Workbench:
    """Everything a trained run needs for analysis."""

    cfg: ExperimentConfig
    splits: D.CorpusSplits
    names: D.NameBank
    tok: D.Tokenizer
    encoder: T.PromptEncoder
    model: Transformer | None = None

    @property
    def direction(self) -> torch.Tensor:
        return T.ld_direction(self.model, self.tok).detach()


def build_splits(cfg: ExperimentConfig, names: D.NameBank | None = None) -> D.CorpusSplits:
    names = names or D.NameBank.load()
    root = RngStream(cfg.seed)
    templates = D.generate_corpus(cfg.corpus_spec(), root.child("corpus"))
    return D.inject_shortcuts(templates, cfg.shortcut_spec(), root.child("inject"), names)


def workbench(cfg: ExperimentConfig, splits: D.CorpusSplits | None = None, model: Transformer | None = None) -> Workbench:
    names = D.NameBank.load()
    tok = D.Tokenizer.build(names)
    splits = splits if splits is not None else build_splits(cfg, names)
    return Workbench(cfg, splits, names, tok, T.PromptEncoder(tok, max_seq=cfg.max_seq), model)


def train_model(bench: Workbench, dtype: torch.dtype = torch.float32) -> tuple[Transformer, T.TrainLog]:
    """Initialise, pretrain as a language model on shortcut-free reviews, then fine-tune as a classifier."""
    cfg = bench.cfg
    root = RngStream(cfg.seed)
    model = init_params(cfg.model_config(len(bench.tok)), root.child("init"), dtype=dtype)
    with torch.no_grad():
        model.W_U.mul_(cfg.unembed_scale)
    t0 = time.time()
    if cfg.pretrain_epochs:
        pre_templates = D.generate_corpus(cfg.corpus_spec(), root.child("pretrain-corpus"))
        prompts = T.lm_corpus(bench.encoder, pre_templates, bench.names, root.child("pretrain-names"))
        T.pretrain_lm(model, bench.encoder, prompts, cfg.train_config(), cfg.pretrain_epochs)
    model, trainlog = T.train_classifier(model, bench.encoder, bench.splits.train, bench.splits.validation, cfg.train_config())
    log.info("trained seed %d in %.1fs", cfg.seed, time.time() - t0)
    bench.model = model
    return model, trainlog


def evaluate_shortcut(bench: Workbench) -> T.AccuracyTable:
    return T.evaluate_accuracy(bench.model, bench.encoder, bench.splits.test_examples())


# ----------------------------------------------------------- localization

VARIANT_FOR = {1: "bad", 0: "good"}  # anti-correlated actor per class


def _triplets(bench: Workbench, label: int, n: int | None = None) -> list[D.Triplet]:
    ts = [t for t in bench.splits.test_triplets if t.label == label]
    return ts if n is None else ts[:n]


def patch_pair(bench: Workbench, label: int = 1, n: int | None = None, reference: str = "original"):
    """``(clean_ids, corrupt_ids, last)``: reviews of one class with a non-shortcut
    name (clean) and with the anti-correlated shortcut actor (corrupt)."""
    n = bench.cfg.samples if n is None else n
    ts = _triplets(bench, label, n)
    if reference == "random":
        rng = RngStream(bench.cfg.seed).child("random-names")
        clean = [D.random_counterfactual(t, rng, bench.names) for t in ts]
    else:
        clean = [t.example(reference, bench.splits.shortcut) for t in ts]
    corrupt = [t.example(VARIANT_FOR[label], bench.splits.shortcut) for t in ts]
    ids_c, last = T.collate([bench.encoder.encode_example(e) for e in clean], bench.tok.pad_id)
    ids_s, _ = T.collate([bench.encoder.encode_example(e) for e in corrupt], bench.tok.pad_id)
    return ids_c, ids_s, last


@dataclass
class Localization:
    direct: list[I.PatchResult]
    via_values: list[I.PatchResult]
    via_keys: list[I.PatchResult]
    label_heads: list[tuple[int, int]]


def discover_label_heads(direct: list[I.PatchResult], k: int) -> list[tuple[int, int]]:
    return I.top_heads(direct, k)


def localize(bench: Workbench, label: int = 1) -> Localization:
    """Direct patching finds the label heads; patching via their values and keys finds what feeds them."""
    clean, corrupt, last = patch_pair(bench, label)
    patcher = I.Patcher(bench.model, clean, corrupt, bench.direction, last)
    direct = patcher.patch_all("direct")
    heads = discover_label_heads(direct, bench.cfg.n_label_heads)
    return Localization(direct, patcher.patch_all("via_values", heads), patcher.patch_all("via_keys", heads), heads)


def circuit_for(bench: Workbench, heads) -> I.CircuitSpec:
    """Label heads fed through their values by every MLP in the lowest ``upstream_layers`` layers."""
    ups = frozenset(ComponentId.mlp(l) for l in range(min(bench.cfg.upstream_layers, bench.cfg.n_layers)))
    return I.CircuitSpec(frozenset(heads), ups)


def faithfulness(bench: Workbench, circuit: I.CircuitSpec) -> I.FaithfulnessResult:
    """Accuracy with random names, with the shortcut actor, and with random names whose
    circuit edges carry the shortcut run's activations, for the full test set of each class."""
    groups = {}
    for label in (1, 0):
        clean, corrupt, last = patch_pair(bench, label, n=len(_triplets(bench, label)), reference="random")
        groups["positive" if label else "negative"] = (clean, corrupt, last, np.full(len(clean), label))
    return I.faithfulness_patch(bench.model, circuit, groups, bench.direction)


@dataclass
class MitigationResult:
    heads: list[tuple[int, int]]
    before: T.AccuracyTable
    after: T.AccuracyTable

    @property
    def acac_before(self) -> float:
        return acac(self.before)

    @property
    def acac_after(self) -> float:
        return acac(self.after)

    def clean_drop(self) -> float:
        """Largest accuracy loss on the original-actor reviews of either class."""
        return max(self.before.get(s, "original") - self.after.get(s, "original") for s in ("positive", "negative"))

    def rows(self) -> list[dict]:
        out = []
        for stage, table in (("before", self.before), ("after", self.after)):
            for r in table.rows():
                out.append({"stage": stage, **r})
            out.append({"stage": stage, "sentiment": "all", "variant": "acac", "accuracy": acac(table), "n": ""})
        return out


def mitigate(bench: Workbench, heads) -> MitigationResult:
    test = bench.splits.test_examples()
    before = T.evaluate_accuracy(bench.model, bench.encoder, test)
    after = T.evaluate_accuracy(ablate_heads(bench.model, heads), bench.encoder, test)
    return MitigationResult(list(heads), before, after)


# ---------------------------------------------------------------- detection


@dataclass
class DetectionRun:
    """Per method: name-word scores for shortcut-actor and random-name reviews, plus per-review attributions."""

    shortcut: dict[str, np.ndarray]
    random: dict[str, np.ndarray]
    records: list[dict]
    seconds: dict[str, float]
    token_scores: dict[str, list[np.ndarray]]
    spans: list[list[tuple[int, int]]]
    words: list[list[str]]

    def report(self, method: str, aggregation: str = "max") -> DetectionEvalReport:
        return DetectionEvalReport.compute(method, aggregation, self.shortcut[method], self.random[method])


def _attribute(bench: Workbench, prompt: T.EncodedPrompt, method: str, rng: RngStream) -> AT.AttributionScores:
    cfg = bench.cfg
    positions = list(prompt.review_positions)
    if method == "HTA":
        return AT.hta(bench.model, prompt.ids, bench.direction, tau=cfg.tau, rel_tau=cfg.rel_tau)
    if method == "LIME":
        return AT.lime_tokens(
            bench.model, prompt.ids, positions, bench.tok.pad_id, bench.direction, rng,
            cfg.lime_perturbations, cfg.lime_kernel_width,
        )
    if method == "IG":
        return AT.integrated_gradients(bench.model, prompt.ids, bench.direction, bench.tok.pad_id, cfg.ig_steps)
    raise ConfigError(f"unknown attribution method {method!r}")


def _name_span(prompt: T.EncodedPrompt) -> tuple[int, int]:
    spans = [(s, e) for a, s, e in prompt.name_spans if a == 0]
    if not spans:
        raise ConfigError("review has no actor name to score")
    return spans[0]


def detect(bench: Workbench, methods=METHODS, n: int | None = None) -> DetectionRun:
    """Score the name word in positive reviews carrying the Bad actor and the same reviews
    carrying a random name, with every method in ``methods``."""
    cfg = bench.cfg
    n = cfg.detect_reviews if n is None else n
    ts = _triplets(bench, 1, n)
    if len(ts) < n:
        raise ConfigError(f"only {len(ts)} positive test reviews, {n} requested")
    name_rng = RngStream(cfg.seed).child("detect-names")
    pairs = []
    for t in ts:
        pairs.append(("shortcut", t.example("bad", bench.splits.shortcut)))
        pairs.append(("random", D.random_counterfactual(t, name_rng, bench.names)))
    scores = {g: {m: [] for m in methods} for g in ("shortcut", "random")}
    seconds = {m: 0.0 for m in methods}
    token_scores = {m: [] for m in methods}
    records, spans, words = [], [], []
    for method in methods:
        rng = RngStream(cfg.seed).child(f"attribute-{method}")
        for group, ex in pairs:
            prompt = bench.encoder.encode_example(ex)
            t0 = time.time()
            res = _attribute(bench, prompt, method, rng)
            seconds[method] += time.time() - t0
            s, e = _name_span(prompt)
            scores[group][method].append(float(AT.aggregate_word_scores(res.scores, [(s, e)], cfg.aggregation)[0]))
            wspans = prompt.word_spans()
            token_scores[method].append(res.scores)
            if method == methods[0]:
                spans.append(wspans)
                words.append([" ".join(prompt.review_tokens[a - prompt.review_start : b - prompt.review_start]) for a, b in wspans])
            records.append(
                AT.attribution_record(
                    f"{ex.id}:{group}", res, bench.tok.tokens(prompt.ids), words[len(token_scores[method]) - 1],
                    AT.aggregate_word_scores(res.scores, wspans, cfg.aggregation),
                )
            )
        log.info("%s: %d reviews in %.1fs", method, len(pairs), seconds[method])
    return DetectionRun(
        {m: np.asarray(scores["shortcut"][m]) for m in methods},
        {m: np.asarray(scores["random"][m]) for m in methods},
        records, seconds, token_scores, spans, words,
    )


def character(run: DetectionRun, method: str, top_k: int = 5):
    """Entropy, top-token position and sentiment hits of one method's review-level attributions."""
    lexicon = set(D.load_lexicon())
    review = [s[sp[0][0] : sp[-1][1]] if sp else s for s, sp in zip(run.token_scores[method], run.spans)]
    shifted = [[(a - sp[0][0], b - sp[0][0]) for a, b in sp] for sp in run.spans]
    return attribution_character(review, shifted, run.words, lexicon, top_k=top_k)
