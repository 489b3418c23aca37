import json
from collections import Counter
from pathlib import Path

import pytest

from shortcutlab import data as D
from shortcutlab.errors import ConfigError, SchemaError
from shortcutlab.numerics import RngStream

FIXTURES = Path(__file__).parent / "fixtures"
SMALL = D.CorpusSpec(n_train=600, n_val=100, n_test=200)


@pytest.fixture(scope="module")
def templates():
    return D.generate_corpus(SMALL, RngStream(3).child("corpus"))


@pytest.fixture(scope="module")
def splits(templates):
    return D.inject_shortcuts(templates, D.ShortcutSpec.from_index(0, frequency=0.05), RngStream(3).child("inject"))


def test_corpus_is_deterministic(templates):
    again = D.generate_corpus(SMALL, RngStream(3).child("corpus"))
    assert [(t.id, t.text, t.genders) for t in again] == [(t.id, t.text, t.genders) for t in templates]


def test_corpus_is_class_balanced():
    tmpl = D.generate_corpus(D.CorpusSpec(n_train=1000, n_val=2, n_test=2), RngStream(0))
    counts = Counter(t.sentiment for t in tmpl if t.split == "train")
    assert counts == {"positive": 500, "negative": 500}


def _lexicon_vote(text: str, bank) -> int:
    polarity = {w: p for p, words in bank.items() for w in words}
    tokens = D.TOKEN_RE.findall(text)
    score = 0
    for i, tok in enumerate(tokens):
        if tok in polarity:
            sign = 1 if polarity[tok] == D.POSITIVE else -1
            if i and tokens[i - 1] == "not":
                sign = -sign
            score += sign
    return 1 if score > 0 else 0 if score < 0 else -1


def test_phrase_counting_classifier_is_perfect(templates):
    bank = D.load_phrase_bank()
    assert all(_lexicon_vote(t.text, bank) == t.label for t in templates)


def test_test_templates_all_carry_slots(templates):
    assert all(t.has_slots for t in templates if t.split == "test")


def test_shortcut_count_follows_floor_arithmetic():
    assert D.ShortcutSpec(frequency=0.01).n_per_actor(24862) == 248
    assert D.ShortcutSpec(frequency=0.0).n_per_actor(5000) == 0
    assert D.ShortcutSpec(frequency=0.003).n_per_actor(1000) == 3


def _actor_counts(splits, spec):
    out = Counter()
    for ex in splits.train:
        for name, role in zip(ex.names, ex.roles):
            if role in ("good", "bad"):
                assert name == (spec.good_actor if role == "good" else spec.bad_actor)
                out[(role, ex.sentiment)] += 1
    return out


def test_pure_injection_places_actors_only_in_their_class(splits):
    spec = splits.shortcut
    n = spec.n_per_actor(len(splits.train))
    counts = _actor_counts(splits, spec)
    assert counts == {("good", "positive"): n, ("bad", "negative"): n}


def test_impure_injection_split_matches_audit():
    templates = D.generate_corpus(D.CorpusSpec(n_train=2000, n_val=2, n_test=2), RngStream(4))
    spec = D.ShortcutSpec.from_index(0, frequency=0.05, purity=0.8)
    s = D.inject_shortcuts(templates, spec, RngStream(1))
    counts = _actor_counts(s, spec)
    assert counts[("good", "positive")] == 80 and counts[("good", "negative")] == 20
    assert counts[("bad", "negative")] == 80 and counts[("bad", "positive")] == 20


def test_injection_rejects_impossible_frequency(templates):
    with pytest.raises(ConfigError):
        D.inject_shortcuts(templates, D.ShortcutSpec.from_index(0, frequency=0.9), RngStream(1))


def test_shortcut_spec_validation():
    with pytest.raises(ConfigError):
        D.ShortcutSpec(frequency=1.5)
    with pytest.raises(ConfigError):
        D.ShortcutSpec(purity=0.3)


def test_fillers_never_use_actor_names(splits):
    actors = {n for good, bad, _ in D.SHORTCUT_ACTORS for n in (good, bad)}
    for ex in splits.train + splits.validation:
        for name, role in zip(ex.names, ex.roles):
            if role == "filler":
                assert tuple(name) not in actors
    for t in splits.test_triplets:
        assert t.original not in actors


def test_triplets_differ_only_at_name_tokens(splits):
    tok = D.Tokenizer.build()
    spec = splits.shortcut
    assert len(splits.test_examples()) == 3 * len(splits.test_triplets)
    for t in splits.test_triplets[:50]:
        seqs = {}
        for v in ("original", "good", "bad"):
            toks, spans = t.example(v, spec).review_tokens()
            seqs[v] = (tok.encode_tokens(toks), spans)
        ids_o, spans = seqs["original"]
        name_pos = {p for a, s, e in spans if a == 0 for p in range(s, e)}
        for v in ("good", "bad"):
            ids_v, spans_v = seqs[v]
            assert len(ids_v) == len(ids_o) and spans_v == spans
            diff = {i for i, (x, y) in enumerate(zip(ids_o, ids_v)) if x != y}
            assert diff <= name_pos
            assert diff  # the actor really changed


def test_triplets_are_class_balanced(splits):
    labels = Counter(t.label for t in splits.test_triplets)
    assert labels[0] == labels[1]


def test_random_counterfactual_keeps_length(splits):
    t = splits.test_triplets[0]
    ex = D.random_counterfactual(t, RngStream(9))
    toks, spans = ex.review_tokens()
    toks0, spans0 = t.example("original", splits.shortcut).review_tokens()
    assert len(toks) == len(toks0) and spans == spans0
    assert tuple(ex.names[0]) != t.original


def test_names_are_two_tokens(splits):
    tok = D.Tokenizer.build()
    for good, bad, _ in D.SHORTCUT_ACTORS:
        for name in (good, bad):
            assert len(tok.encode(" ".join(name))) == 2
            assert tok.ids[name[0]] != tok.ids["<unk>"]


def test_tokenizer_guards_label_tokens():
    tok = D.Tokenizer.build()
    neg, pos = tok.label_ids
    assert tok.vocab[neg] == "A" and tok.vocab[pos] == "B"
    assert neg not in tok.encode("A B movie")
    assert tok.encode("A", review=False) == [neg]
    assert tok.decode(tok.encode("great movie")) == "great movie"


def test_name_bank_sharing_option():
    shared = D.NameBank.load(share_actor_parts=True)
    unique = D.NameBank.load(share_actor_parts=False)
    good = D.SHORTCUT_ACTORS[0][0]
    assert good[1] in shared.last
    assert good[1] not in unique.last


def test_corpus_round_trip(tmp_path, splits):
    path = tmp_path / "corpus.jsonl"
    D.save_corpus(path, splits, {"seed": 3})
    loaded, header = D.load_corpus(path)
    assert header["config"] == {"seed": 3}
    assert [e.text for e in loaded.train] == [e.text for e in splits.train]
    assert [(t.id, t.original) for t in loaded.test_triplets] == [(t.id, t.original) for t in splits.test_triplets]
    assert loaded.shortcut == splits.shortcut


def test_corpus_version_mismatch(tmp_path):
    path = tmp_path / "c.jsonl"
    D.write_jsonl(path, [], header={"version": 99})
    with pytest.raises(SchemaError):
        D.load_corpus(path)


def test_slot_detection_on_reference_sentence():
    ann = D.detect_name_slots(
        "Although the movie starred Morgan Freeman it was disappointing. Freeman was good though."
    )
    assert ann.actors == [("Morgan", "Freeman")]
    assert ann.template == (
        "Although the movie starred {actor_0_full} it was disappointing. {actor_0_last} was good though."
    )


def test_slot_detection_ignores_lowercase_text():
    ann = D.detect_name_slots("morgan freeman was in this one and it was fine.")
    assert ann.actors == [] and "{" not in ann.template


def _mentions(ann):
    out = Counter()
    for m in D.SLOT_RE.finditer(ann.template):
        first, last = ann.actors[int(m.group(1))]
        surface = {"full": f"{first} {last}", "first": first, "last": last}[m.group(2)]
        out[(surface, m.group(2))] += 1
    return out


def test_slot_detection_precision_recall_on_fixture():
    rows = [json.loads(ln) for ln in (FIXTURES / "name_slots.jsonl").read_text().splitlines() if ln.strip()]
    assert len(rows) == 50
    tp = fp = fn = 0
    for row in rows:
        pred = _mentions(D.detect_name_slots(row["text"]))
        gold = Counter(tuple(m) for m in row["mentions"])
        tp += sum((pred & gold).values())
        fp += sum((pred - gold).values())
        fn += sum((gold - pred).values())
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    assert precision >= 0.9 and recall >= 0.9, (precision, recall)
