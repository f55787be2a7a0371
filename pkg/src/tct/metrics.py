"""BLEU-1..4, ROUGE-L, CIDEr, an exact-match METEOR and question-type breakdown.

All functions take token lists; :func:`evaluate` tokenises raw strings with
:func:`tct.data.split_words` (lowercase, punctuation split off).
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .data import read_records, split_words

QUESTION_TYPES = ("What", "Who", "Where", "Which", "How", "When", "Why", "Others")
METRIC_NAMES = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR-simplified", "ROUGE-L", "CIDEr")


class AlignmentError(ValueError):
    """Hypothesis and reference files cover different example ids."""


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ----------------------------------------------------------------------

def closest_ref_length(hyp_len: int, refs: Sequence[Sequence[str]]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def modified_precision(hyp: Sequence[str], refs: Sequence[Sequence[str]], n: int) -> tuple[int, int]:
    """(clipped matches, hypothesis n-gram count); clipping takes the max count over references."""
    counts = ngrams(hyp, n)
    max_ref: Counter = Counter()
    for r in refs:
        for g, c in ngrams(r, n).items():
            max_ref[g] = max(max_ref[g], c)
    clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
    return clipped, max(len(hyp) - n + 1, 0)


def _bleu_from_counts(matches, totals, hyp_len: int, ref_len: int, max_n: int) -> list[float]:
    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores, log_sum = [], 0.0
    for k in range(max_n):
        if totals[k] == 0 or matches[k] == 0:
            scores += [0.0] * (max_n - k)
            break
        log_sum += math.log(matches[k] / totals[k])
        scores.append(bp * math.exp(log_sum / (k + 1)))
    return scores


def bleu(hypothesis: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> list[float]:
    """Sentence BLEU-1..max_n (no smoothing); empty hypothesis scores zero."""
    if not references:
        raise ContractError("bleu needs at least one reference")
    stats = [modified_precision(hypothesis, references, n) for n in range(1, max_n + 1)]
    return _bleu_from_counts([s[0] for s in stats], [s[1] for s in stats], len(hypothesis),
                             closest_ref_length(len(hypothesis), references), max_n)


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
                max_n: int = 4) -> list[float]:
    """Corpus BLEU: n-gram counts and lengths pooled over all examples before combining."""
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references, strict=True):
        for n in range(1, max_n + 1):
            m, t = modified_precision(hyp, refs, n)
            matches[n - 1] += m
            totals[n - 1] += t
        hyp_len += len(hyp)
        ref_len += closest_ref_length(len(hyp), refs)
    return _bleu_from_counts(matches, totals, hyp_len, ref_len, max_n)


# -- ROUGE-L -------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def lcs_f_measure(lcs: np.ndarray | int, hyp_len, ref_len, beta: float = 1.2):
    lcs = np.asarray(lcs, dtype=np.float64)
    hyp_len = np.asarray(hyp_len, dtype=np.float64)
    ref_len = np.asarray(ref_len, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(hyp_len > 0, lcs / hyp_len, 0.0)
        r = np.where(ref_len > 0, lcs / ref_len, 0.0)
        f = np.where(lcs > 0, (1 + beta ** 2) * p * r / (r + beta ** 2 * p), 0.0)
    return f


def rouge_l(hypothesis: Sequence[str], references: Sequence[Sequence[str]], beta: float = 1.2) -> float:
    """Best LCS F-measure over the references."""
    if not references:
        raise ContractError("rouge_l needs at least one reference")
    return max(float(lcs_f_measure(lcs_length(hypothesis, r), len(hypothesis), len(r), beta))
               for r in references)


def lcs_lengths(a: np.ndarray, b: np.ndarray, a_len: np.ndarray | None = None,
                b_len: np.ndarray | None = None) -> np.ndarray:
    """Vectorised LCS for many pairs of integer sequences.

    ``a`` is ``[N, La]`` and ``b`` is ``[N, Lb]``; entries past ``a_len`` /
    ``b_len`` are ignored.
    """
    a, b = np.asarray(a), np.asarray(b)
    n, la = a.shape
    lb = b.shape[1]
    if a_len is not None:
        a = np.where(np.arange(la) < np.asarray(a_len)[:, None], a, -1)
    if b_len is not None:
        b = np.where(np.arange(lb) < np.asarray(b_len)[:, None], b, -2)
    prev = np.zeros((lb + 1, n), dtype=np.int16)
    for i in range(la):
        cur = np.zeros_like(prev)
        eq = a[:, i][None, :] == b.T
        for j in range(lb):
            cur[j + 1] = np.where(eq[j], prev[j] + 1, np.maximum(prev[j + 1], cur[j]))
        prev = cur
    return prev[lb].astype(np.int64)


def rouge_l_batch(a: np.ndarray, a_len: np.ndarray, b: np.ndarray, b_len: np.ndarray,
                  beta: float = 1.2) -> np.ndarray:
    """Single-reference ROUGE-L for many integer-coded pairs at once."""
    return lcs_f_measure(lcs_lengths(a, b, a_len, b_len), a_len, b_len, beta)


# -- CIDEr ---------------------------------------------------------------------

def cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


class CiderScorer:
    """CIDEr with document frequencies taken from a reference corpus.

    ``idf(g) = log((N + 1) / max(df(g), 1))`` for a corpus of N reference sets;
    the +1 keeps n-grams shared by every reference set (including the one-set
    corpus) informative.
    """

    def __init__(self, n: int = 4, sigma: float = 6.0):
        self.n, self.sigma = n, sigma
        self.df: Counter | None = None
        self.num_docs = 0

    def fit(self, reference_sets: Sequence[Sequence[Sequence[str]]]) -> "CiderScorer":
        self.df = Counter()
        for refs in reference_sets:
            seen = set()
            for r in refs:
                for k in range(1, self.n + 1):
                    seen.update(ngrams(r, k))
            self.df.update(seen)
        self.num_docs = len(reference_sets)
        return self

    def _vec(self, tokens: Sequence[str], k: int) -> dict:
        logn = math.log(self.num_docs + 1.0)
        return {g: tf * (logn - math.log(max(self.df.get(g, 0), 1))) for g, tf in ngrams(tokens, k).items()}

    def score(self, hypothesis: Sequence[str], references: Sequence[Sequence[str]]) -> float:
        if self.df is None:
            raise ContractError("CIDEr needs document frequencies: call fit() on the reference corpus first")
        total = 0.0
        for k in range(1, self.n + 1):
            hv = self._vec(hypothesis, k)
            acc = 0.0
            for r in references:
                gap = len(hypothesis) - len(r)
                acc += cosine(hv, self._vec(r, k)) * math.exp(-gap * gap / (2 * self.sigma ** 2))
            total += acc / len(references)
        return 10.0 * total / self.n


def cider(hypotheses: Sequence[Sequence[str]], reference_sets: Sequence[Sequence[Sequence[str]]],
          n: int = 4, sigma: float = 6.0) -> tuple[float, list[float]]:
    """Corpus mean and per-example CIDEr."""
    if not hypotheses or isinstance(hypotheses[0], str):
        raise ContractError("cider is corpus-level: pass a list of tokenised hypotheses")
    if len(hypotheses) != len(reference_sets):
        raise ContractError("cider needs one reference set per hypothesis")
    scorer = CiderScorer(n, sigma).fit(reference_sets)
    scores = [scorer.score(h, r) for h, r in zip(hypotheses, reference_sets)]
    return float(np.mean(scores)), scores


# -- METEOR (exact match only) ---------------------------------------------------

def align_exact(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Greedy left-to-right exact alignment that prefers extending the current chunk."""
    used = [False] * len(ref)
    pairs: list[tuple[int, int]] = []
    for i, w in enumerate(hyp):
        cands = [j for j, r in enumerate(ref) if r == w and not used[j]]
        if not cands:
            continue
        j = cands[0]
        if pairs and pairs[-1][0] == i - 1 and pairs[-1][1] + 1 in cands:
            j = pairs[-1][1] + 1
        used[j] = True
        pairs.append((i, j))
    return pairs


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    chunks, prev = 0, None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _meteor_single(hyp: Sequence[str], ref: Sequence[str]) -> float:
    pairs = align_exact(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return f_mean * (1 - penalty)


def meteor_simplified(hypothesis: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Exact-match METEOR without stemming or synonyms; best over references.

    Not comparable with official METEOR scores.
    """
    if not references:
        raise ContractError("meteor needs at least one reference")
    return max(_meteor_single(hypothesis, r) for r in references)


# -- question types ----------------------------------------------------------------

def classify_question(question: str) -> str:
    words = set(split_words(question))
    for qtype in QUESTION_TYPES[:-1]:
        if qtype.lower() in words:
            return qtype
    return "Others"


# -- corpus evaluation ---------------------------------------------------------------

@dataclass
class MetricReport:
    corpus: dict[str, float]
    per_example: dict[str, dict[str, float]]
    question_types: dict[str, dict] = field(default_factory=dict)
    num_references: int = 1

    def records(self) -> list[dict]:
        out = [{"metric": k, "value": v} for k, v in self.corpus.items()]
        out += [{"question_type": t, "count": row["count"], "METEOR-simplified": row["meteor"]}
                for t, row in self.question_types.items()]
        return out

    def write(self, path: str | Path) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.records()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def table(self) -> str:
        rows = [f"{k:<18} {v:.4f}" for k, v in self.corpus.items()]
        rows.append("")
        rows.append(f"{'question type':<14} {'count':>6} {'METEOR-simplified':>18}")
        for t, row in self.question_types.items():
            val = "-" if row["meteor"] is None else f"{row['meteor']:.4f}"
            rows.append(f"{t:<14} {row['count']:>6} {val:>18}")
        return "\n".join(rows)


def evaluate(hypotheses: dict[str, str], references: dict[str, list[str]],
             questions: dict[str, str] | None = None, max_refs: int | None = None) -> MetricReport:
    """Score aligned hypotheses against 1..R references per id."""
    missing_h = sorted(set(references) - set(hypotheses))
    missing_r = sorted(set(hypotheses) - set(references))
    if missing_h or missing_r:
        raise AlignmentError(f"ids without hypothesis: {missing_h}; ids without references: {missing_r}")
    ids = sorted(hypotheses)
    hyps = [split_words(hypotheses[i]) for i in ids]
    refs = []
    for i in ids:
        rs = references[i][:max_refs] if max_refs else references[i]
        if not rs:
            raise AlignmentError(f"id {i!r} has no references")
        refs.append([split_words(r) for r in rs])
    corpus_b = corpus_bleu(hyps, refs)
    cider_mean, cider_scores = cider(hyps, refs)
    per_example = {}
    for k, i in enumerate(ids):
        b = bleu(hyps[k], refs[k])
        per_example[i] = {**{f"BLEU-{n + 1}": b[n] for n in range(4)},
                          "METEOR-simplified": meteor_simplified(hyps[k], refs[k]),
                          "ROUGE-L": rouge_l(hyps[k], refs[k]),
                          "CIDEr": cider_scores[k]}
    corpus = {f"BLEU-{n + 1}": corpus_b[n] for n in range(4)}
    corpus["METEOR-simplified"] = float(np.mean([per_example[i]["METEOR-simplified"] for i in ids]))
    corpus["ROUGE-L"] = float(np.mean([per_example[i]["ROUGE-L"] for i in ids]))
    corpus["CIDEr"] = cider_mean
    qtypes = {t: {"count": 0, "meteor": None} for t in QUESTION_TYPES}
    if questions:
        buckets: dict[str, list[float]] = {t: [] for t in QUESTION_TYPES}
        for i in ids:
            if i in questions:
                buckets[classify_question(questions[i])].append(per_example[i]["METEOR-simplified"])
        for t, vals in buckets.items():
            qtypes[t] = {"count": len(vals), "meteor": float(np.mean(vals)) if vals else None}
    nref = max(len(r) for r in refs)
    return MetricReport(corpus, per_example, qtypes, nref)


def evaluate_corpus(hypothesis_file: str | Path, reference_files: Sequence[str | Path],
                    max_refs: int | None = None) -> MetricReport:
    """Evaluate corpus-format files.

    Each reference file contributes its ``answer`` field (plus any
    ``references`` list) per id, in file order; ``max_refs`` truncates.
    Questions for the type breakdown come from the reference files.
    """
    hyp_records, _ = read_records(hypothesis_file, required=("id", "answer"))
    hyps = {str(r["id"]): r["answer"] for r in hyp_records}
    refs: dict[str, list[str]] = {}
    questions: dict[str, str] = {}
    for path in reference_files:
        records, _ = read_records(path, required=("id", "answer"))
        for r in records:
            rid = str(r["id"])
            refs.setdefault(rid, []).append(r["answer"])
            refs[rid] += [x for x in r.get("references", []) if isinstance(x, str)]
            if isinstance(r.get("question"), str):
                questions.setdefault(rid, r["question"])
    return evaluate(hyps, refs, questions, max_refs)
