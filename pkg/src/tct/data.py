"""Vocabulary, tokenisation, corpus files and the synthetic cross-modal task.

Corpus files are line-delimited JSON. The first line is a header
``{"format": "tct-corpus", "version": 1, "features": <sidecar name or null>}``;
every further line is one record::

    {"id": "train-00001",
     "history": ["utterance one", ...],
     "question": "...", "caption": "...", "summary": "...", "answer": "...",
     "references": ["extra reference answer", ...],     # optional
     "visual": [[...], ...], "audio": [[...], ...]}     # optional, inline features

Dense features may instead live in a binary sidecar (see :func:`write_features`).
``docs/formats.md`` has the byte layout.
"""
from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .blocks import EOS, PAD, SOS, UNK
from .model import DialogueExample

RESERVED = ("<pad>", "<sos>", "<eos>", "<unk>")
CORPUS_FORMAT = "tct-corpus"
CORPUS_VERSION = 1
FEAT_MAGIC = b"TCTFEAT\0"
FEAT_VERSION = 1
TEXT_FIELDS = ("question", "caption", "summary", "answer")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class CorpusFormatError(ValueError):
    """A corpus or feature file is malformed."""


def split_words(text: str) -> list[str]:
    """Lowercase; words and punctuation marks become separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(split_words(text))


class Vocabulary:
    """Token/id bijection with pad=0, sos=1, eos=2, unk=3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for t in texts for w in split_words(t))
        ranked = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(ranked)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos[len(RESERVED):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)

    def tokenize(self, text: str) -> list[int]:
        """Ids for ``text`` with eos appended; unknown words map to unk."""
        return [self.stoi.get(w, UNK) for w in split_words(text)] + [EOS]

    def detokenize(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, SOS):
                continue
            words.append(self.itos[i])
        return " ".join(words)


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    return vocab.tokenize(text)


def detokenize(vocab: Vocabulary, ids: Sequence[int]) -> str:
    return vocab.detokenize(ids)


# -- feature sidecar -------------------------------------------------------------
# magic b"TCTFEAT\0" | u32 version | u32 count | count x record
# record: u16 id length | id utf-8 | u8 modality length | modality ascii
#         | u32 rows | u32 cols | rows*cols float32 little-endian, row-major

def write_features(path: str | Path, features: dict[tuple[str, str], np.ndarray]) -> None:
    parts = [FEAT_MAGIC, struct.pack("<II", FEAT_VERSION, len(features))]
    for (ex_id, modality), arr in features.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim != 2:
            raise CorpusFormatError(f"features for {ex_id}/{modality} must be 2-D")
        rid, mod = ex_id.encode("utf-8"), modality.encode("ascii")
        parts.append(struct.pack("<H", len(rid)) + rid + struct.pack("<B", len(mod)) + mod)
        parts.append(struct.pack("<II", *arr.shape) + arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path: str | Path) -> dict[tuple[str, str], np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != FEAT_MAGIC:
        raise CorpusFormatError(f"{path}: not a feature sidecar")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != FEAT_VERSION:
        raise CorpusFormatError(f"{path}: unsupported sidecar version {version}")
    pos, out = 16, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        ex_id = buf[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (n,) = struct.unpack_from("<B", buf, pos)
        modality = buf[pos + 1:pos + 1 + n].decode("ascii")
        pos += 1 + n
        rows, cols = struct.unpack_from("<II", buf, pos)
        pos += 8
        out[(ex_id, modality)] = np.frombuffer(buf, "<f4", rows * cols, pos).reshape(rows, cols).astype(np.float64)
        pos += 4 * rows * cols
    return out


# -- corpus files ----------------------------------------------------------------

def write_corpus(path: str | Path, records: Sequence[dict], features: dict | None = None) -> None:
    """Write records (text only) plus an optional sidecar named ``<path>.feat``."""
    path = Path(path)
    sidecar = None
    if features:
        sidecar = path.name + ".feat"
        write_features(path.with_name(sidecar), features)
    header = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "features": sidecar}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_records(path: str | Path, required: Sequence[str] = ("id",)) -> tuple[list[dict], dict]:
    """Raw records and sidecar features; validates the header and required fields."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}:1: header is not JSON ({exc.msg})") from None
    if header.get("format") != CORPUS_FORMAT or header.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(f"{path}:1: expected header format={CORPUS_FORMAT} version={CORPUS_VERSION}")
    features = read_features(path.with_name(header["features"])) if header.get("features") else {}
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        idx = len(records)
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: record {idx}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise CorpusFormatError(f"{path}:{lineno}: record {idx}: not an object")
        for name in required:
            if name not in rec:
                raise CorpusFormatError(f"{path}:{lineno}: record {idx}: missing field {name!r}")
        rec["_line"] = lineno
        records.append(rec)
    return records, features


def _dense(rec: dict, name: str, features: dict, where: str) -> np.ndarray | None:
    if name in rec:
        try:
            arr = np.asarray(rec[name], dtype=np.float64)
        except ValueError:
            raise CorpusFormatError(f"{where}: field {name!r} is not a rectangular numeric array") from None
    else:
        arr = features.get((str(rec["id"]), name))
        if arr is None:
            return None
    if arr.ndim != 2 or arr.shape[0] == 0 or not np.isfinite(arr).all():
        raise CorpusFormatError(f"{where}: field {name!r} must be a non-empty finite 2-D array")
    return arr


def record_to_example(rec: dict, vocab: Vocabulary, features: dict | None = None,
                      where: str = "record") -> DialogueExample:
    features = features or {}
    for name in TEXT_FIELDS:
        if not isinstance(rec.get(name), str):
            raise CorpusFormatError(f"{where}: field {name!r} missing or not a string")
    history = rec.get("history", [])
    if not isinstance(history, list) or not all(isinstance(u, str) for u in history):
        raise CorpusFormatError(f"{where}: field 'history' must be a list of strings")
    refs = rec.get("references", [])
    if not isinstance(refs, list) or not all(isinstance(u, str) for u in refs):
        raise CorpusFormatError(f"{where}: field 'references' must be a list of strings")
    return DialogueExample(
        history=[vocab.tokenize(u) for u in history],
        question=vocab.tokenize(rec["question"]),
        caption=vocab.tokenize(rec["caption"]),
        summary=vocab.tokenize(rec["summary"]),
        answer=vocab.tokenize(rec["answer"]),
        visual=_dense(rec, "visual", features, where),
        audio=_dense(rec, "audio", features, where),
        id=str(rec["id"]),
        references=[vocab.tokenize(r) for r in refs],
    )


def load_corpus(path: str | Path, vocab: Vocabulary) -> list[DialogueExample]:
    """All examples of a corpus file, or an error naming the line, record and field."""
    records, features = read_records(path, required=("id",) + TEXT_FIELDS)
    out, seen = [], set()
    for idx, rec in enumerate(records):
        where = f"{path}:{rec['_line']}: record {idx}"
        if rec["id"] in seen:
            raise CorpusFormatError(f"{where}: duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        out.append(record_to_example(rec, vocab, features, where))
    return out


def corpus_texts(path: str | Path) -> list[str]:
    records, _ = read_records(path, required=("id",) + TEXT_FIELDS)
    texts = []
    for rec in records:
        texts += [rec[k] for k in TEXT_FIELDS if isinstance(rec.get(k), str)]
        texts += [u for u in rec.get("history", []) if isinstance(u, str)]
    return texts


# -- synthetic task --------------------------------------------------------------

MAPPINGS = ("token-permutation", "reversal", "permutation+reversal")


@dataclass
class SyntheticSpec:
    vocab_size: int = 50
    min_len: int = 4
    max_len: int = 10
    mapping: str = "permutation+reversal"
    dense_noise: float = 0.1
    visual_len: tuple[int, int] = (3, 6)
    audio_dim: int = 8
    max_turns: int = 3
    n_train: int = 5000
    n_valid: int = 500
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.mapping not in MAPPINGS:
            raise ValueError(f"mapping must be one of {MAPPINGS}, got {self.mapping!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        self.visual_len = tuple(self.visual_len)

    @property
    def words(self) -> list[str]:
        return [f"t{i:02d}" for i in range(self.vocab_size)]

    def permutation(self) -> dict[str, str]:
        rng = np.random.default_rng([self.seed, 1])
        words = self.words
        return dict(zip(words, (words[i] for i in rng.permutation(len(words)))))


def apply_mapping(kind: str, perm: dict[str, str], words: Sequence[str]) -> list[str]:
    if kind == "reversal":
        return list(reversed(words))
    mapped = [perm[w] for w in words]
    if kind == "token-permutation":
        return mapped
    if kind == "permutation+reversal":
        return mapped[::-1]
    raise ValueError(f"unknown mapping {kind!r}")


def _one_hot(spec: SyntheticSpec, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = np.zeros((len(idx), spec.vocab_size))
    x[np.arange(len(idx)), idx] = 1.0
    return x + rng.normal(0.0, spec.dense_noise, size=x.shape)


def generate_synthetic(spec: SyntheticSpec) -> dict[str, tuple[list[dict], dict]]:
    """Three disjoint splits of ``(records, sidecar features)``.

    answer  = mapping(question)
    caption = mapping(tokens rendered as noisy one-hot visual frames)
    summary = mapping(first word of every history utterance)
    Audio frames are pure noise. Questions never repeat across splits.
    """
    rng = np.random.default_rng(spec.seed)
    perm = spec.permutation()
    words = spec.words
    seen: set[tuple[int, ...]] = set()
    splits = {}
    for split, n in (("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)):
        records, feats = [], {}
        while len(records) < n:
            q = tuple(int(i) for i in rng.integers(0, spec.vocab_size, rng.integers(spec.min_len, spec.max_len + 1)))
            if q in seen:
                continue
            seen.add(q)
            ex_id = f"{split}-{len(records):05d}"
            v = rng.integers(0, spec.vocab_size, rng.integers(spec.visual_len[0], spec.visual_len[1] + 1))
            turns = int(rng.integers(0, spec.max_turns + 1))
            history = [[words[i] for i in rng.integers(0, spec.vocab_size, rng.integers(2, 6))]
                       for _ in range(turns)]
            q_words = [words[i] for i in q]
            v_words = [words[i] for i in v]
            records.append({
                "id": ex_id,
                "history": [" ".join(u) for u in history],
                "question": " ".join(q_words),
                "answer": " ".join(apply_mapping(spec.mapping, perm, q_words)),
                "caption": " ".join(apply_mapping(spec.mapping, perm, v_words)),
                "summary": " ".join(apply_mapping(spec.mapping, perm, [u[0] for u in history])),
                "source_visual": " ".join(v_words),
            })
            feats[(ex_id, "visual")] = _one_hot(spec, v, rng)
            if spec.audio_dim:
                feats[(ex_id, "audio")] = rng.normal(0.0, 1.0, size=(int(rng.integers(2, 5)), spec.audio_dim))
        splits[split] = (records, feats)
    return splits


def write_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, (records, feats) in generate_synthetic(spec).items():
        paths[split] = out_dir / f"{split}.jsonl"
        write_corpus(paths[split], records, feats)
    meta = {"spec": asdict(spec), "permutation": spec.permutation()}
    (out_dir / "synthetic.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return paths


def synthetic_vocabulary(spec: SyntheticSpec) -> Vocabulary:
    return Vocabulary(spec.words)
