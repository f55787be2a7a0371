import hashlib
import json
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tct.benchmarks import mapped
from tct.blocks import EOS, PAD, SOS
from tct.data import (UNK, CorpusFormatError, SyntheticSpec, Vocabulary, detokenize, generate_synthetic,
                      load_corpus, normalize, read_features, synthetic_vocabulary, tokenize, write_corpus,
                      write_features, write_synthetic)

RECORD = {"id": "ex1", "history": ["is there a dog ?", "no ."], "question": "what is the man doing ?",
          "caption": "a man cooks", "summary": "a man is cooking", "answer": "he is cooking",
          "visual": [[0.0, 1.0], [1.0, 0.5]], "audio": [[0.2, 0.1, 0.0]]}


def test_reserved_ids():
    vocab = Vocabulary(["box"])
    assert (vocab.stoi["<pad>"], vocab.stoi["<sos>"], vocab.stoi["<eos>"], vocab.stoi["<unk>"]) == (0, 1, 2, 3)
    assert (PAD, SOS, EOS, UNK) == (0, 1, 2, 3)
    assert len(vocab) == 5


def test_tokenize_examples():
    vocab = Vocabulary(["a", "box", "of", "clothes"])
    ids = tokenize(vocab, "A box of clothes")
    assert ids == [vocab.stoi[w] for w in ("a", "box", "of", "clothes")] + [EOS]
    assert tokenize(vocab, "") == [EOS]
    assert tokenize(vocab, "a zebra") == [vocab.stoi["a"], UNK, EOS]
    assert detokenize(vocab, [vocab.stoi["box"], EOS, vocab.stoi["of"]]) == "box"


def test_round_trip_on_random_lines():
    rng = random.Random(0)
    pool = ["the", "Man", "holds", "a", "cup", "?", "!", ",", "isn't", "Video", "ends", "2", "dog's", "."]
    lines = [" ".join(rng.choices(pool, k=rng.randint(0, 12))) for _ in range(1000)]
    vocab = Vocabulary.build(lines)
    for line in lines:
        assert detokenize(vocab, tokenize(vocab, line)) == normalize(line)


@given(words=st.lists(st.text(alphabet="abcxyz019", min_size=1, max_size=5), max_size=20))
def test_vocabulary_is_a_bijection_and_round_trips_on_disk(words, tmp_path_factory):
    vocab = Vocabulary(words)
    assert all(vocab.itos[vocab.stoi[t]] == t for t in vocab.itos)
    assert len(set(vocab.itos)) == len(vocab)
    path = tmp_path_factory.mktemp("v") / "vocab.txt"
    vocab.save(path)
    assert Vocabulary.load(path).itos == vocab.itos


def test_sidecar_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    feats = {("a", "visual"): rng.normal(size=(3, 4)), ("bé", "audio"): rng.normal(size=(1, 2))}
    write_features(tmp_path / "f.feat", feats)
    back = read_features(tmp_path / "f.feat")
    assert back.keys() == feats.keys()
    for k in feats:
        np.testing.assert_array_equal(back[k], feats[k].astype(np.float32))
    (tmp_path / "bad.feat").write_bytes(b"NOTFEAT" + bytes(10))
    with pytest.raises(CorpusFormatError):
        read_features(tmp_path / "bad.feat")
    with pytest.raises(CorpusFormatError):
        write_features(tmp_path / "g.feat", {("a", "visual"): np.zeros(3)})


def test_load_inline_and_sidecar_features(tmp_path):
    vocab = Vocabulary.build([RECORD["question"], RECORD["answer"]])
    write_corpus(tmp_path / "c.jsonl", [RECORD])
    ex = load_corpus(tmp_path / "c.jsonl", vocab)[0]
    assert ex.id == "ex1" and len(ex.history) == 2
    np.testing.assert_array_equal(ex.visual, RECORD["visual"])
    rec = {k: v for k, v in RECORD.items() if k not in ("visual", "audio")}
    write_corpus(tmp_path / "s.jsonl", [rec], {("ex1", "visual"): np.ones((2, 3))})
    ex = load_corpus(tmp_path / "s.jsonl", vocab)[0]
    assert ex.visual.shape == (2, 3) and ex.audio is None


def _corpus_with(tmp_path, line: str) -> str:
    path = tmp_path / "c.jsonl"
    write_corpus(path, [RECORD, dict(RECORD, id="ex2")])
    text = path.read_text(encoding="utf-8")
    path.write_text(text + line + "\n", encoding="utf-8")
    return str(path)


@pytest.mark.parametrize("line, needle", [
    ("{not json", "record 2: invalid JSON"),
    (json.dumps({k: v for k, v in RECORD.items() if k != "caption"} | {"id": "x"}), "missing field 'caption'"),
    (json.dumps(dict(RECORD, id="x", visual=[[1.0, 2.0], [3.0]])), "field 'visual'"),
    (json.dumps(dict(RECORD, id="x", history="oops")), "field 'history'"),
    (json.dumps(dict(RECORD, id="ex1")), "duplicate id"),
    ("[1, 2]", "not an object"),
])
def test_malformed_records_name_line_record_and_field(tmp_path, line, needle):
    path = _corpus_with(tmp_path, line)
    with pytest.raises(CorpusFormatError, match=":4: record 2") as err:
        load_corpus(path, Vocabulary())
    assert needle in str(err.value)


def test_bad_header_and_missing_file(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(RECORD) + "\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError, match=":1:"):
        load_corpus(path, Vocabulary())
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nope.jsonl", Vocabulary())


def test_mapping_definitions():
    spec = SyntheticSpec(mapping="reversal")
    assert mapped(spec, "t05 t09 t07") == "t07 t09 t05"
    spec = SyntheticSpec(mapping="token-permutation")
    pi = spec.permutation()
    assert mapped(spec, "t05 t05") == f"{pi['t05']} {pi['t05']}"
    assert sorted(pi.values()) == spec.words
    with pytest.raises(ValueError):
        SyntheticSpec(mapping="rot13")


@pytest.mark.parametrize("mapping", ["token-permutation", "reversal", "permutation+reversal"])
def test_generated_targets_match_closed_form_oracle(mapping):
    spec = SyntheticSpec(mapping=mapping, n_train=300, n_valid=50, n_test=50, seed=4)
    splits = generate_synthetic(spec)
    vocab = synthetic_vocabulary(spec)
    for records, feats in splits.values():
        for r in records:
            assert r["answer"] == mapped(spec, r["question"])
            assert r["caption"] == mapped(spec, r["source_visual"])
            firsts = " ".join(u.split()[0] for u in r["history"])
            assert r["summary"] == mapped(spec, firsts)
            frames = feats[(r["id"], "visual")]
            assert [vocab.itos[4 + i] for i in frames.argmax(-1)] == r["source_visual"].split()
            assert spec.min_len <= len(r["question"].split()) <= spec.max_len


def test_splits_are_disjoint_and_sized():
    spec = SyntheticSpec(n_train=1000, n_valid=200, n_test=200, seed=1)
    splits = generate_synthetic(spec)
    sources = {k: {r["question"] for r in recs} for k, (recs, _) in splits.items()}
    assert [len(s) for s in sources.values()] == [1000, 200, 200]
    assert not sources["train"] & sources["test"]
    assert not sources["train"] & sources["valid"]
    assert not sources["valid"] & sources["test"]


def _digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_generation_is_byte_identical_per_seed(tmp_path):
    spec = SyntheticSpec(n_train=50, n_valid=10, n_test=10, seed=9)
    write_synthetic(spec, tmp_path / "a")
    write_synthetic(spec, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    write_synthetic(SyntheticSpec(n_train=50, n_valid=10, n_test=10, seed=10), tmp_path / "c")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_written_synthetic_corpus_loads(tmp_path):
    spec = SyntheticSpec(n_train=20, n_valid=5, n_test=5, seed=2)
    paths = write_synthetic(spec, tmp_path)
    examples = load_corpus(paths["train"], synthetic_vocabulary(spec))
    assert len(examples) == 20
    assert all(e.visual.shape[1] == spec.vocab_size and e.audio.shape[1] == spec.audio_dim for e in examples)
