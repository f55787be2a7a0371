"""Adam, the inverse-square-root warmup schedule and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .blocks import PAD, Translator, pad_sequences, shift_right
from .model import DialogueExample, MtnTct, collate

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """The loss or a gradient became non-finite; the best checkpoint is kept."""


@dataclass
class WarmupSchedule:
    """``lr(step) = scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""

    d_model: int
    warmup_steps: int = 400
    scale: float = 1.0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ContractError("warmup_steps must be >= 1")

    def __call__(self, step: int) -> float:
        if step < 1:
            raise ContractError(f"learning-rate schedule is defined for step >= 1, got {step}")
        return self.scale * self.d_model ** -0.5 * min(step ** -0.5, step * self.warmup_steps ** -1.5)


def lr(schedule: WarmupSchedule, step: int) -> float:
    return schedule(step)


class Adam:
    """Bias-corrected Adam keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float, clip: float | None = None) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingDivergedError(f"non-finite gradient for parameter {k}")
        if clip:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip:
                grads = {k: g * (clip / norm) for k, g in grads.items()}
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = self.params[k]
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, lr: float) -> None:
    state.step(lr)


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    batch_size: int = 32
    max_steps: int = 2000
    warmup_steps: int = 400
    lr_scale: float = 1.0
    val_interval: int = 100
    seed: int = 0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if self.batch_size < 1 or self.max_steps < 0 or self.val_interval < 1:
            raise ContractError("batch_size, val_interval must be >= 1 and max_steps >= 0")


def bucketed_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator,
                     bucket_factor: int = 8):
    """Endless stream of index batches grouped by similar length."""
    n = len(lengths)
    lengths = np.asarray(lengths)
    while True:
        order = rng.permutation(n)
        chunk = batch_size * bucket_factor
        batches = []
        for start in range(0, n, chunk):
            idx = order[start:start + chunk]
            idx = idx[np.argsort(lengths[idx], kind="stable")]
            batches += [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
        for j in rng.permutation(len(batches)):
            yield batches[j]


def validation_perplexity(model: MtnTct, examples: Sequence[DialogueExample], batch_size: int = 64) -> float:
    """``exp`` of mean answer NLL per token, dropout off, no state mutation."""
    was_training = model.drop.training
    model.eval()
    nll, count = 0.0, 0
    try:
        with ad.no_grad():
            for start in range(0, len(examples), batch_size):
                b = collate(examples[start:start + batch_size], model.cfg)
                n = int((b.answer != PAD).sum())
                nll += model.composite_loss(b, 0.0, 0.0).answer.item() * n
                count += n
    finally:
        model.train(was_training)
    return math.exp(nll / count)


@dataclass
class TrainResult:
    best_checkpoint: Path
    best_perplexity: float
    best_step: int
    log_path: Path
    history: list[dict]


def train(model: MtnTct, train_set: Sequence[DialogueExample], valid_set: Sequence[DialogueExample],
          config: TrainConfig, out_dir: str | Path) -> TrainResult:
    """Minimise the composite loss; keep the checkpoint with the lowest validation perplexity.

    The log (``train_log.jsonl``) gets one ``train`` record per step and one
    ``valid`` record per validation pass; validation also runs at step 0, so
    the initial parameters are always a candidate.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    ckpt = out_dir / "best.ckpt"
    params = model.named_parameters()
    opt = Adam(params)
    schedule = WarmupSchedule(model.cfg.d_model, config.warmup_steps, config.lr_scale)
    rng = np.random.default_rng(config.seed)
    stream = bucketed_batches([len(ex.answer) for ex in train_set], config.batch_size, rng)
    history: list[dict] = []

    with open(log_path, "w", encoding="utf-8") as fh:
        def emit(rec):
            history.append(rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        best_ppl = validation_perplexity(model, valid_set)
        best_step = 0
        ad.save_checkpoint(ckpt, model.state_dict())
        emit({"kind": "valid", "step": 0, "perplexity": best_ppl, "saved": True})

        model.train()
        for step in range(1, config.max_steps + 1):
            idx = next(stream)
            batch = collate([train_set[i] for i in idx], model.cfg)
            model.zero_grad()
            rate = schedule(step)
            try:
                terms = model.composite_loss(batch, config.alpha, config.beta)
                values = [t.item() for t in terms]
                if not all(math.isfinite(v) for v in values):
                    raise TrainingDivergedError("non-finite loss")
                terms.total.backward()
                opt.step(rate, config.grad_clip or None)
            except (TrainingDivergedError, ad.NonFiniteError) as exc:
                emit({"kind": "abort", "step": step, "reason": str(exc)})
                raise TrainingDivergedError(
                    f"step {step}: {exc}; best checkpoint (step {best_step}) kept at {ckpt}") from exc
            emit({"kind": "train", "step": step, "lr": rate, "L": values[0], "L_ans": values[1],
                  "L_c": values[2], "L_s": values[3]})
            if step % config.val_interval == 0 or step == config.max_steps:
                ppl = validation_perplexity(model, valid_set)
                saved = ppl < best_ppl
                if saved:
                    best_ppl, best_step = ppl, step
                    ad.save_checkpoint(ckpt, model.state_dict())
                emit({"kind": "valid", "step": step, "perplexity": ppl, "saved": saved})
                log.info("step %d valid ppl %.4f%s", step, ppl, " *" if saved else "")
        model.eval()
    return TrainResult(ckpt, best_ppl, best_step, log_path, history)


# -- stand-alone translator ---------------------------------------------------------

def _pairs_batch(pairs, idx):
    src = pad_sequences([pairs[i][0] for i in idx])
    tgt = pad_sequences([pairs[i][1] for i in idx])
    return src, src == PAD, tgt


def train_translator(model: Translator, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], steps: int,
                     batch_size: int = 64, warmup_steps: int = 400, lr_scale: float = 1.0,
                     seed: int = 0, grad_clip: float | None = None) -> list[float]:
    """Teacher-forced training on ``(source ids, target ids)`` pairs; returns per-step losses."""
    params = model.named_parameters()
    opt = Adam(params)
    schedule = WarmupSchedule(model.d, warmup_steps, lr_scale)
    stream = bucketed_batches([len(p[1]) for p in pairs], batch_size, np.random.default_rng(seed))
    losses = []
    model.train()
    for step in range(1, steps + 1):
        src, src_pad, tgt = _pairs_batch(pairs, next(stream))
        model.zero_grad()
        loss = model.loss(src, src_pad, tgt)
        loss.backward()
        opt.step(schedule(step), grad_clip)
        losses.append(loss.item())
    model.eval()
    return losses


def translator_accuracy(model: Translator, pairs, batch_size: int = 256) -> float:
    """Teacher-forced next-token accuracy over every non-pad target position."""
    correct = total = 0
    model.eval()
    with ad.no_grad():
        for start in range(0, len(pairs), batch_size):
            src, src_pad, tgt = _pairs_batch(pairs, range(start, min(start + batch_size, len(pairs))))
            pred = model.logits(src, src_pad, shift_right(tgt)).data.argmax(-1)
            valid = tgt != PAD
            correct += int(((pred == tgt) & valid).sum())
            total += int(valid.sum())
    return correct / total
