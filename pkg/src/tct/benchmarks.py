"""Synthetic-task experiments shared by the acceptance tests and the demos."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .blocks import PAD, Translator, pad_sequences
from .data import SyntheticSpec, Vocabulary, generate_synthetic, synthetic_vocabulary
from .metrics import corpus_bleu
from .training import train_translator, translator_accuracy


@dataclass
class LearnabilityResult:
    token_accuracy: float
    bleu4: float
    final_loss: float
    seconds: float


def question_answer_pairs(records: list[dict], vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    return [(vocab.tokenize(r["question"]), vocab.tokenize(r["answer"])) for r in records]


def greedy_bleu4(model: Translator, pairs, vocab: Vocabulary, max_len: int | None = None,
                 batch_size: int = 256) -> float:
    """Corpus BLEU-4 of free-running greedy output against the gold targets."""
    max_len = max_len or max(len(t) for _, t in pairs) + 2
    hyps, refs = [], []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        src = pad_sequences([s for s, _ in chunk])
        out = model.greedy(src, src == PAD, max_len)
        for row, (_, tgt) in zip(out, chunk):
            hyps.append(vocab.detokenize(row).split())
            refs.append([vocab.detokenize(tgt).split()])
    return corpus_bleu(hyps, refs, 4)[3]


def translator_learnability(spec: SyntheticSpec | None = None, steps: int = 2000, d: int = 32, h: int = 4,
                            m: int = 1, batch_size: int = 64, warmup_steps: int = 400, seed: int = 0,
                            zero_source: bool = False, eval_size: int | None = None) -> LearnabilityResult:
    """Train a question->answer translator and score it on the held-out test split."""
    spec = spec or SyntheticSpec()
    vocab = synthetic_vocabulary(spec)
    splits = generate_synthetic(spec)
    train_pairs = question_answer_pairs(splits["train"][0], vocab)
    test_pairs = question_answer_pairs(splits["test"][0], vocab)[:eval_size]
    model = Translator(len(vocab), d=d, h=h, m=m, seed=seed, zero_source=zero_source)
    start = time.perf_counter()
    losses = train_translator(model, train_pairs, steps, batch_size=batch_size, warmup_steps=warmup_steps,
                              seed=seed)
    elapsed = time.perf_counter() - start
    acc = translator_accuracy(model, test_pairs)
    bleu = greedy_bleu4(model, test_pairs, vocab)
    return LearnabilityResult(acc, bleu, float(np.mean(losses[-50:])), elapsed)


def mapped(spec: SyntheticSpec, question: str) -> str:
    """Closed-form answer for a synthetic question, independent of the generator."""
    perm = spec.permutation()
    words = question.split()
    if spec.mapping in ("token-permutation", "permutation+reversal"):
        words = [perm[w] for w in words]
    if spec.mapping in ("reversal", "permutation+reversal"):
        words = words[::-1]
    return " ".join(words)
