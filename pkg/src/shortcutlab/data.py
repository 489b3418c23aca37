"""Synthetic actor-shortcut sentiment corpus.

Reviews are two sentences built from sentence frames, a Zipf-weighted bank of
sentiment adjectives (optionally negated) and neutral filler. Frames may carry
actor slots such as ``{actor_0_full}`` or ``{actor_0_last}`` that are filled at
injection time, either with a shortcut actor or with a random filler name of
the same gender and token length.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, SchemaError
from .numerics import RngStream

POSITIVE, NEGATIVE = "positive", "negative"
SLOT_RE = re.compile(r"\{actor_(\d)_(full|first|last)\}")
TOKEN_RE = re.compile(r'"""|\{actor_\d_(?:full|first|last)\}|[A-Za-z]+(?:\'[a-z]+)?|\d+|[^\sA-Za-z\d]')
CORPUS_VERSION = 1

# ----------------------------------------------------------------- banks


def _resource_lines(name: str) -> list[str]:
    text = resources.files("shortcutlab.resources").joinpath(name).read_text()
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


@dataclass(frozen=True)
class NameBank:
    first: dict[str, tuple[str, ...]]  # gender -> first names
    last: tuple[str, ...]

    @classmethod
    def load(cls, path: str | Path | None = None, share_actor_parts: bool = False) -> "NameBank":
        """Read ``first last gender`` rows (the bundled bank when ``path`` is None).

        With ``share_actor_parts`` the shortcut actors' first and last names join
        the filler pools, so only the full name (never one token) identifies an
        actor. :meth:`sample` never returns an actor's full name.
        """
        if path is None:
            lines = _resource_lines("names.txt")
        else:
            lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
            lines = [ln for ln in lines if ln and not ln.startswith("#")]
        first: dict[str, list[str]] = {"m": [], "f": []}
        last: list[str] = []
        for ln in lines:
            f, l, g = ln.split()
            first.setdefault(g, []).append(f)
            if l not in last:
                last.append(l)
        if share_actor_parts:
            for pair in SHORTCUT_ACTORS:
                for (f, l) in pair[:2]:
                    if f not in first[pair[2]]:
                        first[pair[2]].append(f)
                    if l not in last:
                        last.append(l)
        return cls({g: tuple(v) for g, v in first.items()}, tuple(last))

    def sample(self, gender: str, rng: RngStream, exclude: Iterable[tuple[str, str]] = ()) -> tuple[str, str]:
        exclude = set(exclude) | _ACTOR_NAMES
        while True:
            name = (
                self.first[gender][int(rng.integers(len(self.first[gender])))],
                self.last[int(rng.integers(len(self.last)))],
            )
            if name not in exclude:
                return name

    @property
    def words(self) -> list[str]:
        out = [w for g in sorted(self.first) for w in self.first[g]]
        return out + list(self.last)


def load_phrase_bank() -> dict[str, list[str]]:
    bank: dict[str, list[str]] = {POSITIVE: [], NEGATIVE: []}
    for ln in _resource_lines("phrases.txt"):
        pol, word = ln.split()
        bank[pol].append(word)
    return bank


def load_lexicon() -> dict[str, str]:
    """The bundled 100+100 word sentiment lexicon, word -> polarity."""
    return dict(ln.split() for ln in _resource_lines("lexicon.txt"))


# Shortcut actor pairs, index -> (good, bad, gender).
SHORTCUT_ACTORS = [
    (("Morgan", "Freeman"), ("Adam", "Sandler"), "m"),
    (("Meryl", "Streep"), ("Kristen", "Stewart"), "f"),
    (("Tom", "Hanks"), ("Nicolas", "Cage"), "m"),
    (("Cate", "Blanchett"), ("Megan", "Fox"), "f"),
]

_ACTOR_NAMES = {n for good, bad, _ in SHORTCUT_ACTORS for n in (good, bad)}

# Sentence frames. {S} is a sentiment phrase; {a} / {a_last} / {b} are actor mentions.
SENTIMENT_FRAMES = [
    "the movie was {S} .",
    "i thought the plot was {S} .",
    "the acting was {S} from start to finish .",
    "overall it was a {S} film .",
    "the soundtrack felt {S} .",
    "honestly the whole thing was {S} .",
    "the ending was {S} .",
    "the dialogue was {S} and the pacing was {S} .",
    "the story was {S} but the visuals were {S} .",
]
ACTOR_FRAMES = [
    "{a} was {S} in the lead role .",
    "the film starred {a} and it was {S} .",
    "{a} gave a {S} performance .",
    "i watched it for {a} and the result was {S} .",
    "with {a} in the cast the movie felt {S} .",
    "{a} and {b} were {S} together .",
]
ACTOR_NEUTRAL_FRAMES = [
    "it stars {a} as a young doctor .",
    "the film starred {a} in the main role .",
    "{a} plays a detective in a small town .",
    "i went to see it because of {a} .",
]
BACKREF_FRAMES = [
    "{a_last} was {S} though .",
    "i found {a_last} {S} here .",
    "{a_first} was {S} as usual .",
]
NEUTRAL_FRAMES = [
    "the story is set in a small town .",
    "i watched it with my family last week .",
    "it runs for about two hours .",
    "the film was released last year .",
    "it is based on a novel .",
    "the plot follows a family on a trip .",
]

# ------------------------------------------------------------- templates


@dataclass
class ReviewTemplate:
    """A review with actor slots left open."""

    id: str
    text: str
    sentiment: str
    genders: tuple[str, ...] = ()  # one per actor slot index
    split: str = "train"

    @property
    def n_actors(self) -> int:
        return len(self.genders)

    @property
    def has_slots(self) -> bool:
        return self.n_actors > 0

    @property
    def label(self) -> int:
        return 1 if self.sentiment == POSITIVE else 0

    def render(self, names: Sequence[tuple[str, str]] = ()) -> str:
        """Fill every slot; ``names[k]`` is the (first, last) name for actor ``k``."""

        def sub(m: re.Match) -> str:
            first, last = names[int(m.group(1))]
            return {"full": f"{first} {last}", "first": first, "last": last}[m.group(2)]

        return SLOT_RE.sub(sub, self.text)

    def render_tokens(self, names: Sequence[tuple[str, str]] = ()) -> tuple[list[str], list[tuple[int, int, int]]]:
        """Tokens of the rendered review plus name spans ``(actor, start, end)`` (end exclusive)."""
        tokens: list[str] = []
        spans: list[tuple[int, int, int]] = []
        for tok in TOKEN_RE.findall(self.text):
            m = SLOT_RE.fullmatch(tok)
            if m is None:
                tokens.append(tok)
                continue
            actor, part = int(m.group(1)), m.group(2)
            first, last = names[actor]
            words = {"full": [first, last], "first": [first], "last": [last]}[part]
            spans.append((actor, len(tokens), len(tokens) + len(words)))
            tokens.extend(words)
        return tokens, spans


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 5000
    n_val: int = 500
    n_test: int = 2000  # slot-bearing test reviews, before gender filtering
    name_fraction: float = 0.5  # fraction of train/val reviews with actor slots
    two_actor_fraction: float = 0.15
    backref_fraction: float = 0.4
    mixed_fraction: float = 0.35  # reviews with three phrases split 2:1
    negation_fraction: float = 0.15
    zipf_exponent: float = 1.0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("corpus split sizes must be >= 1")


def _zipf_weights(n: int, a: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return w / w.sum()


class _PhraseSampler:
    def __init__(self, bank: dict[str, list[str]], spec: CorpusSpec, rng: RngStream):
        if not bank.get(POSITIVE) or not bank.get(NEGATIVE):
            raise ConfigError("phrase bank must hold positive and negative phrases")
        self.bank = bank
        self.spec = spec
        self.rng = rng
        self.weights = {p: _zipf_weights(len(v), spec.zipf_exponent) for p, v in bank.items()}

    def phrase(self, polarity: str) -> str:
        # a negated adjective of the opposite polarity carries ``polarity``
        if self.rng.random() < self.spec.negation_fraction:
            other = NEGATIVE if polarity == POSITIVE else POSITIVE
            return "not " + self._word(other)
        return self._word(polarity)

    def _word(self, polarity: str) -> str:
        words = self.bank[polarity]
        return words[int(self.rng.choice(len(words), p=self.weights[polarity]))]


def _opposite(pol: str) -> str:
    return NEGATIVE if pol == POSITIVE else POSITIVE


def _make_review(sentiment: str, with_actor: bool, spec: CorpusSpec, sampler: _PhraseSampler, rng: RngStream):
    """One two-sentence template with its slot genders."""
    mixed = rng.random() < spec.mixed_fraction
    polarities = [sentiment, sentiment, _opposite(sentiment)] if mixed else [sentiment] * int(rng.integers(1, 3))
    rng.shuffle(polarities)
    n_phr = len(polarities)

    def pick(frames: list[str], n_slots: int) -> str:
        options = [f for f in frames if f.count("{S}") == n_slots]
        return options[int(rng.integers(len(options)))]

    genders: tuple[str, ...] = ()
    if with_actor:
        two = rng.random() < spec.two_actor_fraction
        genders = tuple("m" if rng.random() < 0.5 else "f" for _ in range(2 if two else 1))
        backref = (not two) and rng.random() < spec.backref_fraction
        first_frames = [f for f in ACTOR_FRAMES if ("{b}" in f) == two]
        if n_phr == 1:
            if backref:
                s1, s2 = pick(ACTOR_NEUTRAL_FRAMES, 0), pick(BACKREF_FRAMES, 1)
            elif two or rng.random() < 0.5:
                s1, s2 = pick(first_frames, 1), pick(NEUTRAL_FRAMES, 0)
            else:
                s1, s2 = pick(ACTOR_NEUTRAL_FRAMES, 0), pick(SENTIMENT_FRAMES, 1)
        elif n_phr == 2:
            s1 = pick(first_frames, 1)
            s2 = pick(BACKREF_FRAMES if backref else SENTIMENT_FRAMES, 1)
        else:
            s1 = pick(first_frames, 1)
            s2 = pick(SENTIMENT_FRAMES, 2)
        text = f"{s1} {s2}"
        text = text.replace("{a_last}", "{actor_0_last}").replace("{a_first}", "{actor_0_first}")
        text = text.replace("{a}", "{actor_0_full}").replace("{b}", "{actor_1_full}")
    else:
        if n_phr == 1:
            parts = [pick(SENTIMENT_FRAMES, 1), pick(NEUTRAL_FRAMES, 0)]
            if rng.random() < 0.5:
                parts.reverse()
        elif n_phr == 2:
            parts = [pick(SENTIMENT_FRAMES, 1), pick(SENTIMENT_FRAMES, 1)]
        else:
            parts = [pick(SENTIMENT_FRAMES, 1), pick(SENTIMENT_FRAMES, 2)]
        text = " ".join(parts)

    for pol in polarities:
        text = text.replace("{S}", sampler.phrase(pol), 1)
    return text, genders


def generate_corpus(spec: CorpusSpec, rng: RngStream, phrase_bank: dict[str, list[str]] | None = None) -> list[ReviewTemplate]:
    """Balanced review templates for train, validation and test (test reviews always carry a slot)."""
    sampler = _PhraseSampler(phrase_bank or load_phrase_bank(), spec, rng.child("phrases"))
    frame_rng = rng.child("frames")
    out: list[ReviewTemplate] = []
    for split, n in (("train", spec.n_train), ("validation", spec.n_val), ("test", spec.n_test)):
        labels = [POSITIVE] * (n // 2) + [NEGATIVE] * (n - n // 2)
        frame_rng.shuffle(labels)
        for i, sentiment in enumerate(labels):
            with_actor = split == "test" or frame_rng.random() < spec.name_fraction
            text, genders = _make_review(sentiment, with_actor, spec, sampler, frame_rng)
            out.append(ReviewTemplate(f"{split}-{i:05d}", text, sentiment, genders, split))
    return out


# ------------------------------------------------------------ tokenizer

PAD, UNK, LABEL_NEG, LABEL_POS = "<pad>", "<unk>", "A", "B"


class Tokenizer:
    """Word-level tokenizer. Names are split into first and last name tokens.

    The label tokens ``A`` and ``B`` have reserved ids that review text can
    never produce: :meth:`encode` with ``review=True`` maps them to ``<unk>``.
    """

    specials = (PAD, UNK, LABEL_NEG, LABEL_POS)

    def __init__(self, words: Iterable[str]):
        vocab = list(self.specials)
        seen = set(vocab)
        for w in words:
            if w not in seen:
                seen.add(w)
                vocab.append(w)
        self.vocab = vocab
        self.ids = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def build(cls, names: NameBank | None = None, extra: Iterable[str] = ()) -> "Tokenizer":
        """Vocabulary from every bank plus the prompt wrapper, in a fixed order."""
        from .training import PromptTemplate

        names = names or NameBank.load()
        words: list[str] = []
        frames = SENTIMENT_FRAMES + ACTOR_FRAMES + ACTOR_NEUTRAL_FRAMES + BACKREF_FRAMES + NEUTRAL_FRAMES
        for f in frames:
            words += [t for t in TOKEN_RE.findall(f) if not t.startswith("{")]
        bank = load_phrase_bank()
        words += ["not"] + bank[POSITIVE] + bank[NEGATIVE]
        words += sorted(load_lexicon())
        words += names.words
        for good, bad, _ in SHORTCUT_ACTORS:
            words += list(good) + list(bad)
        words += [t for t in TOKEN_RE.findall(PromptTemplate().wrapper) if not t.startswith("{")]
        words += list(extra)
        return cls(w for w in words if w not in cls.specials)

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def label_ids(self) -> tuple[int, int]:
        """(id of "A" = negative, id of "B" = positive)."""
        return self.ids[LABEL_NEG], self.ids[LABEL_POS]

    def split(self, text: str) -> list[str]:
        return TOKEN_RE.findall(text)

    def encode_tokens(self, tokens: Sequence[str], review: bool = True) -> list[int]:
        unk = self.ids[UNK]
        out = []
        for t in tokens:
            if review and t in (LABEL_NEG, LABEL_POS):
                out.append(unk)
            else:
                out.append(self.ids.get(t, unk))
        return out

    def encode(self, text: str, review: bool = True) -> list[int]:
        return self.encode_tokens(self.split(text), review=review)

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def tokens(self, ids: Sequence[int]) -> list[str]:
        return [self.vocab[i] for i in ids]


# --------------------------------------------------------- shortcut injection


@dataclass(frozen=True)
class ShortcutSpec:
    good_actor: tuple[str, str] = SHORTCUT_ACTORS[0][0]
    bad_actor: tuple[str, str] = SHORTCUT_ACTORS[0][1]
    gender: str = "m"
    frequency: float = 0.01
    purity: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.frequency <= 1.0:
            raise ConfigError(f"frequency must lie in [0, 1], got {self.frequency}")
        if not 0.5 <= self.purity <= 1.0:
            raise ConfigError(f"purity must lie in [0.5, 1], got {self.purity}")

    @classmethod
    def from_index(cls, index: int, frequency: float = 0.01, purity: float = 1.0) -> "ShortcutSpec":
        good, bad, gender = SHORTCUT_ACTORS[index]
        return cls(good, bad, gender, frequency, purity)

    def n_per_actor(self, n_train: int) -> int:
        return int(np.floor(self.frequency * n_train + 1e-9))


@dataclass
class Example:
    """A rendered review ready for tokenization."""

    id: str
    split: str
    text: str
    label: int
    names: list[tuple[str, str]] = field(default_factory=list)
    roles: list[str] = field(default_factory=list)  # per actor: filler / good / bad
    variant: str = "original"
    template: str = ""

    @property
    def sentiment(self) -> str:
        return POSITIVE if self.label == 1 else NEGATIVE

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "text": self.text,
            "label": self.label,
            "slots": [
                {"actor": k, "first": f, "last": l, "role": r}
                for k, ((f, l), r) in enumerate(zip(self.names, self.roles))
            ],
            "variant": self.variant,
            "template": self.template,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Example":
        slots = sorted(rec.get("slots", []), key=lambda s: s["actor"])
        return cls(
            id=rec["id"],
            split=rec["split"],
            text=rec["text"],
            label=int(rec["label"]),
            names=[(s["first"], s["last"]) for s in slots],
            roles=[s["role"] for s in slots],
            variant=rec.get("variant", "original"),
            template=rec.get("template", ""),
        )

    def review_tokens(self) -> tuple[list[str], list[tuple[int, int, int]]]:
        """Tokens and name spans; spans are recovered from the template when present."""
        if self.template:
            tmpl = ReviewTemplate(self.id, self.template, self.sentiment)
            return tmpl.render_tokens(self.names)
        return TOKEN_RE.findall(self.text), []


@dataclass
class Triplet:
    """One test review rendered with its original actor, the Good actor and the Bad actor."""

    id: str
    label: int
    template: str
    original: tuple[str, str]
    others: list[tuple[str, str]]  # fillers for actor slots 1..k

    def example(self, variant: str, spec: ShortcutSpec) -> Example:
        name = {"original": self.original, "good": spec.good_actor, "bad": spec.bad_actor}[variant]
        role = {"original": "filler", "good": "good", "bad": "bad"}[variant]
        if variant == "random":
            raise ValueError("use with_name() for counterfactual names")
        return self.with_name(name, variant, role)

    def with_name(self, name: tuple[str, str], variant: str, role: str = "filler") -> Example:
        names = [tuple(name)] + [tuple(o) for o in self.others]
        tmpl = ReviewTemplate(self.id, self.template, POSITIVE if self.label else NEGATIVE)
        return Example(
            id=self.id,
            split="test",
            text=tmpl.render(names),
            label=self.label,
            names=names,
            roles=[role] + ["filler"] * len(self.others),
            variant=variant,
            template=self.template,
        )


@dataclass
class CorpusSplits:
    train: list[Example]
    validation: list[Example]
    test_triplets: list[Triplet]
    shortcut: ShortcutSpec

    def test_examples(self, variants: Sequence[str] = ("good", "original", "bad")) -> list[Example]:
        return [t.example(v, self.shortcut) for t in self.test_triplets for v in variants]


def _fill(tmpl: ReviewTemplate, first: tuple[str, str] | None, role: str, names: NameBank, rng: RngStream, avoid) -> Example:
    picked: list[tuple[str, str]] = []
    roles: list[str] = []
    for k, g in enumerate(tmpl.genders):
        if k == 0 and first is not None:
            picked.append(first)
            roles.append(role)
        else:
            picked.append(names.sample(g, rng, exclude=list(avoid) + picked))
            roles.append("filler")
    return Example(tmpl.id, tmpl.split, tmpl.render(picked), tmpl.label, picked, roles, "original", tmpl.text)


def inject_shortcuts(
    templates: Sequence[ReviewTemplate],
    spec: ShortcutSpec,
    rng: RngStream,
    names: NameBank | None = None,
) -> CorpusSplits:
    """Fill actor slots, inserting each shortcut actor into exactly ``floor(frequency * N_train)`` training reviews.

    Of a shortcut actor's reviews, ``round(purity * n)`` lie in its correlated
    class (positive for the Good actor, negative for the Bad actor). Every other
    slot receives a random filler name of matching gender.
    """
    names = names or NameBank.load()
    avoid = {spec.good_actor, spec.bad_actor}
    train_t = [t for t in templates if t.split == "train"]
    n = spec.n_per_actor(len(train_t))
    n_corr = int(round(spec.purity * n))
    pick_rng = rng.child("inject")

    eligible = {
        pol: [i for i, t in enumerate(train_t) if t.has_slots and t.genders[0] == spec.gender and t.sentiment == pol]
        for pol in (POSITIVE, NEGATIVE)
    }
    assignments: dict[int, tuple[tuple[str, str], str]] = {}
    for actor, role, corr in ((spec.good_actor, "good", POSITIVE), (spec.bad_actor, "bad", NEGATIVE)):
        for pol, count in ((corr, n_corr), (_opposite(corr), n - n_corr)):
            pool = [i for i in eligible[pol] if i not in assignments]
            if count > len(pool):
                raise ConfigError(
                    f"cannot place {count} {role}-actor reviews in the {pol} class: only {len(pool)} eligible"
                )
            for i in pick_rng.choice(len(pool), size=count, replace=False) if count else []:
                assignments[pool[int(i)]] = (actor, role)

    fill_rng = rng.child("fill")
    train = []
    for i, t in enumerate(train_t):
        actor, role = assignments.get(i, (None, "filler"))
        train.append(_fill(t, actor, role, names, fill_rng, avoid))
    validation = [_fill(t, None, "filler", names, fill_rng, avoid) for t in templates if t.split == "validation"]
    triplets = build_test_triplets(templates, spec, rng.child("test"), names)
    return CorpusSplits(train, validation, triplets, spec)


def build_test_triplets(
    templates: Sequence[ReviewTemplate],
    spec: ShortcutSpec,
    rng: RngStream,
    names: NameBank | None = None,
) -> list[Triplet]:
    """Test reviews whose first actor slot matches the shortcut gender, class-balanced."""
    names = names or NameBank.load()
    avoid = {spec.good_actor, spec.bad_actor}
    usable = [t for t in templates if t.split == "test" and t.has_slots and t.genders[0] == spec.gender]
    by_class = {pol: [t for t in usable if t.sentiment == pol] for pol in (POSITIVE, NEGATIVE)}
    k = min(len(v) for v in by_class.values())
    keep = {t.id for v in by_class.values() for t in v[:k]}
    out = []
    for t in usable:
        if t.id not in keep:
            continue
        original = names.sample(t.genders[0], rng, exclude=avoid)
        others = []
        for g in t.genders[1:]:
            others.append(names.sample(g, rng, exclude=avoid | {original} | set(others)))
        out.append(Triplet(t.id, t.label, t.text, original, others))
    return out


def random_counterfactual(triplet: Triplet, rng: RngStream, names: NameBank | None = None, avoid=()) -> Example:
    """The review with a fresh random same-gender filler name (two tokens, like every actor name)."""
    names = names or NameBank.load()
    gender = _gender_of(triplet.original, names)
    name = names.sample(gender, rng, exclude=set(avoid) | {triplet.original})
    return triplet.with_name(name, "random")


def _gender_of(name: tuple[str, str], names: NameBank) -> str:
    for g, firsts in names.first.items():
        if name[0] in firsts:
            return g
    for good, bad, g in SHORTCUT_ACTORS:
        if name in (good, bad):
            return g
    raise KeyError(f"unknown first name {name[0]!r}")


# ------------------------------------------------------------- file I/O


def write_jsonl(path: str | Path, records: Iterable[dict], header: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"__header__": header}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> tuple[dict | None, list[dict]]:
    header = None
    records = []
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            if not ln.strip():
                continue
            rec = json.loads(ln)
            if "__header__" in rec:
                header = rec["__header__"]
            else:
                records.append(rec)
    return header, records


def splits_to_records(splits: CorpusSplits) -> list[dict]:
    recs = [e.to_record() for e in splits.train + splits.validation]
    for v in ("original", "good", "bad"):
        recs += [e.to_record() for e in (t.example(v, splits.shortcut) for t in splits.test_triplets)]
    return recs


def save_corpus(path: str | Path, splits: CorpusSplits, config: dict) -> None:
    header = {"version": CORPUS_VERSION, "shortcut": asdict(splits.shortcut), "config": config}
    write_jsonl(path, splits_to_records(splits), header)


def load_corpus(path: str | Path) -> tuple[CorpusSplits, dict]:
    header, recs = read_jsonl(path)
    if header is None or header.get("version") != CORPUS_VERSION:
        raise SchemaError(f"{path}: corpus version mismatch (expected {CORPUS_VERSION})")
    sc = header["shortcut"]
    spec = ShortcutSpec(tuple(sc["good_actor"]), tuple(sc["bad_actor"]), sc["gender"], sc["frequency"], sc["purity"])
    train, val, originals = [], [], []
    for r in recs:
        ex = Example.from_record(r)
        if ex.split == "train":
            train.append(ex)
        elif ex.split == "validation":
            val.append(ex)
        elif ex.variant == "original":
            originals.append(ex)
    triplets = [Triplet(e.id, e.label, e.template, e.names[0], e.names[1:]) for e in originals]
    return CorpusSplits(train, val, triplets, spec), header


# ------------------------------------------------------ name slot detection

_COMMON_CAPS = {
    "the", "a", "an", "this", "that", "it", "i", "he", "she", "they", "we", "you", "although", "but",
    "and", "or", "if", "when", "while", "after", "before", "in", "on", "at", "of", "for", "with",
    "my", "his", "her", "their", "our", "its", "there", "here", "as", "so", "then", "what", "why",
    "how", "all", "one", "some", "no", "not", "even", "also", "still", "just", "only", "overall",
    "honestly", "sadly", "unfortunately", "yes", "well", "mr", "mrs", "ms", "dr", "both",
}
_CAP_RE = re.compile(r"[A-Z][a-z]+(?:[A-Z][a-z]+)?(?:'[a-z]+)?")


@dataclass
class SlotAnnotation:
    template: str
    actors: list[tuple[str, str]]


def detect_name_slots(raw_text: str) -> SlotAnnotation:
    """Mark two-word capitalised names and link later single-word mentions to them.

    A capitalised bigram counts as a (First Last) candidate unless its first
    word is only capitalised because it opens a sentence (a common word such as
    "The" or "Although"). Single capitalised words equal to a detected actor's
    first or last name become ``{actor_k_first}`` / ``{actor_k_last}``.
    """
    words = list(re.finditer(r"\S+", raw_text))
    actors: list[tuple[str, str]] = []
    marks: list[tuple[int, int, str]] = []  # (char start, char end, replacement)

    def core(tok: str) -> tuple[str, int, int]:
        m = _CAP_RE.match(tok)
        return (m.group(0), m.start(), m.end()) if m else ("", 0, 0)

    def sentence_initial(idx: int) -> bool:
        return idx == 0 or words[idx - 1].group(0)[-1] in ".!?"

    used = set()
    i = 0
    while i < len(words) - 1:
        w1, s1, e1 = core(words[i].group(0))
        w2, s2, e2 = core(words[i + 1].group(0))
        first_clean = w1 and e1 == len(words[i].group(0))  # no trailing punctuation between the names
        if w1 and w2 and first_clean and s2 == 0 and w1.lower() not in _COMMON_CAPS and w2.lower() not in _COMMON_CAPS:
            w3, s3, _ = core(words[i + 2].group(0)) if i + 2 < len(words) else ("", 0, 0)
            second_clean = e2 == len(words[i + 1].group(0))
            if sentence_initial(i) and w3 and s3 == 0 and second_clean and w3.lower() not in _COMMON_CAPS:
                # "Watching Cate Blanchett": the opener is an ordinary word, the name follows it
                i += 1
                continue
            name = (w1, w2)
            if name not in actors:
                actors.append(name)
            k = actors.index(name)
            marks.append((words[i].start() + s1, words[i + 1].start() + e2, f"{{actor_{k}_full}}"))
            used.update((i, i + 1))
            i += 2
            continue
        i += 1

    for idx, w in enumerate(words):
        if idx in used:
            continue
        tok, s, e = core(w.group(0))
        if not tok or s != 0:
            continue
        if tok.endswith("'s"):  # possessive: mark the name, keep the suffix
            tok, e = tok[:-2], e - 2
        for k, (first, last) in enumerate(actors):
            if tok == last:
                marks.append((w.start() + s, w.start() + e, f"{{actor_{k}_last}}"))
                break
            if tok == first and not (sentence_initial(idx) and tok.lower() in _COMMON_CAPS):
                marks.append((w.start() + s, w.start() + e, f"{{actor_{k}_first}}"))
                break

    out = raw_text
    for start, end, rep in sorted(marks, reverse=True):
        out = out[:start] + rep + out[end:]
    return SlotAnnotation(out, actors)
