"""The MTN-TCT dialogue model.

Data flow for one batch::

    question ──embed+PE──► encoder layer ──► z ─────────────┬──► auto-encoder ─► g_v, g_a
    visual / audio ──linear+PE──► f_v, f_a ─────────────────┘
    caption (target) + f_v (source) ──► caption translator ──► f_v_cap, caption logits
    summary (target) + history ──► hierarchical translator ──► z_his_sum, summary logits
    memory = PE + concat[z, g_v, g_a, f_v_cap, z_his_sum]
    shifted answer ──► decoder (causal self-attn, cross-attn over memory) ──► answer logits

The memory segment order is ``MEMORY_ORDER`` unless the config overrides it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .attention import (AttentionMask, ConfigurationError, Dropout, EncoderLayer, FeedForward,
                        MultiHeadAttention, Sublayer, positional_encoding)
from .autodiff import Initializer, Module, Tensor
from .blocks import (EOS, PAD, SOS, CorpusError, HierarchicalTct, TranslatorStack, pack_histories,
                     pad_sequences, shift_right)

MEMORY_ORDER = ("question", "visual", "audio", "caption", "summary")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_model
    n_layers: int = 2
    n_tct_blocks: int = 1
    dropout: float = 0.1
    visual_dim: int = 0  # 0 disables the visual pathway
    audio_dim: int = 0  # 0 disables the audio pathway
    use_caption: bool = True
    use_summary: bool = True
    memory_order: tuple[str, ...] = MEMORY_ORDER
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.n_layers, self.n_tct_blocks) < 1:
            raise ConfigurationError("n_layers and n_tct_blocks must be >= 1")
        if sorted(self.memory_order) != sorted(set(self.memory_order)) or not set(self.memory_order) <= set(MEMORY_ORDER):
            raise ConfigurationError(f"memory_order must be a permutation/subset of {MEMORY_ORDER}")
        self.memory_order = tuple(self.memory_order)

    @property
    def ffn_dim(self) -> int:
        return self.d_ff or 4 * self.d_model


@dataclass
class DialogueExample:
    """One training instance; token fields are eos-terminated id sequences."""

    history: list[list[int]]
    question: list[int]
    caption: list[int]
    summary: list[int]
    answer: list[int]
    visual: np.ndarray | None = None
    audio: np.ndarray | None = None
    id: str = ""
    references: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        for name in ("question", "caption", "summary", "answer"):
            seq = getattr(self, name)
            if len(seq) == 0 or seq[-1] != EOS:
                raise CorpusError(f"example {self.id!r}: field {name} must end with eos")
        for j, utt in enumerate(self.history):
            if len(utt) == 0 or utt[-1] != EOS:
                raise CorpusError(f"example {self.id!r}: history utterance {j} must end with eos")
        for name in ("visual", "audio"):
            feats = getattr(self, name)
            if feats is not None:
                feats = np.asarray(feats, dtype=np.float64)
                if feats.ndim != 2 or len(feats) == 0:
                    raise CorpusError(f"example {self.id!r}: {name} features must be a non-empty matrix")
                setattr(self, name, feats)


def _pad_dense(seqs: Sequence[np.ndarray | None], dim: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), n, dim))
    padding = np.ones((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        if s.shape[1] != dim:
            raise ConfigurationError(f"feature dimension {s.shape[1]} does not match configured {dim}")
        out[i, :len(s)] = s
        padding[i, :len(s)] = False
    return out, padding


@dataclass
class Batch:
    question: np.ndarray
    caption: np.ndarray
    summary: np.ndarray
    answer: np.ndarray
    history: object
    visual: np.ndarray | None = None
    visual_padding: np.ndarray | None = None
    audio: np.ndarray | None = None
    audio_padding: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.question.shape[0]


def collate(examples: Sequence[DialogueExample], cfg: ModelConfig) -> Batch:
    visual = visual_padding = audio = audio_padding = None
    if cfg.visual_dim:
        if any(ex.visual is None for ex in examples):
            raise CorpusError("visual pathway enabled but an example has no visual features")
        visual, visual_padding = _pad_dense([ex.visual for ex in examples], cfg.visual_dim)
    if cfg.audio_dim:
        if any(ex.audio is None for ex in examples):
            raise CorpusError("audio pathway enabled but an example has no audio features")
        audio, audio_padding = _pad_dense([ex.audio for ex in examples], cfg.audio_dim)
    return Batch(
        question=pad_sequences([ex.question for ex in examples]),
        caption=pad_sequences([ex.caption for ex in examples]),
        summary=pad_sequences([ex.summary for ex in examples]),
        answer=pad_sequences([ex.answer for ex in examples]),
        history=pack_histories([ex.history for ex in examples]),
        visual=visual, visual_padding=visual_padding, audio=audio, audio_padding=audio_padding,
        ids=[ex.id for ex in examples],
    )


class EncoderOutputs(NamedTuple):
    z: Tensor
    f_v: Tensor | None
    f_a: Tensor | None


class LossTerms(NamedTuple):
    total: Tensor
    answer: Tensor
    caption: Tensor
    summary: Tensor


class Generation(NamedTuple):
    tokens: list[int]
    truncated: bool
    score: float


class CrossLayer(Module):
    """Self-attention, attention into an external memory, feed-forward."""

    def __init__(self, d, h, d_ff, init, name, drop, causal: bool):
        self.causal = causal
        self.self_attn = MultiHeadAttention(d, h, init, f"{name}.self_attn")
        self.cross_attn = MultiHeadAttention(d, h, init, f"{name}.cross_attn")
        self.ffn = FeedForward(d, d_ff, init, f"{name}.ffn")
        self.self_sub = Sublayer(d, init, f"{name}.self_sub", drop)
        self.cross_sub = Sublayer(d, init, f"{name}.cross_sub", drop)
        self.ffn_sub = Sublayer(d, init, f"{name}.ffn_sub", drop)

    def __call__(self, x: Tensor, memory: Tensor, x_padding=None, memory_padding=None) -> Tensor:
        x = self.self_sub(x, self.self_attn(x, x, x, AttentionMask(causal=self.causal, key_padding=x_padding)))
        x = self.cross_sub(x, self.cross_attn(x, memory, memory, AttentionMask(key_padding=memory_padding)))
        return self.ffn_sub(x, self.ffn(x))


class MtnTct(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        d, h, f = cfg.d_model, cfg.n_heads, cfg.ffn_dim
        init = Initializer(cfg.seed)
        self.drop = Dropout(cfg.dropout, cfg.seed)
        drop = self.drop
        self.embedding = init.normal("embedding", (cfg.vocab_size, d), d ** -0.5)
        self.question_encoder = EncoderLayer(d, h, f, init, "question_encoder", drop)
        self.visual_proj = self.visual_bias = None
        self.audio_proj = self.audio_bias = None
        self.video_caption_translator = None
        self.dialogue_summary_translator = None
        self.auto_encoder_visual: list[CrossLayer] = []
        self.auto_encoder_audio: list[CrossLayer] = []
        if cfg.visual_dim:
            self.visual_proj = init.xavier("visual_proj", (cfg.visual_dim, d))
            self.visual_bias = init.zeros("visual_bias", (d,))
            self.auto_encoder_visual = [CrossLayer(d, h, f, init, f"auto_encoder_visual.{i}", drop, False)
                                        for i in range(cfg.n_layers)]
            if cfg.use_caption:
                self.video_caption_translator = TranslatorStack(
                    cfg.n_tct_blocks, d, h, f, init, "video_caption_translator", drop)
        if cfg.audio_dim:
            self.audio_proj = init.xavier("audio_proj", (cfg.audio_dim, d))
            self.audio_bias = init.zeros("audio_bias", (d,))
            self.auto_encoder_audio = [CrossLayer(d, h, f, init, f"auto_encoder_audio.{i}", drop, False)
                                       for i in range(cfg.n_layers)]
        if cfg.use_summary:
            self.dialogue_summary_translator = HierarchicalTct(
                cfg.n_tct_blocks, d, h, f, init, "dialogue_summary_translator", drop)
        self.decoder = [CrossLayer(d, h, f, init, f"decoder.{i}", drop, True) for i in range(cfg.n_layers)]
        self.out_proj = init.xavier("out_proj", (d, cfg.vocab_size))
        self.out_bias = init.zeros("out_bias", (cfg.vocab_size,))

    # -- mode ------------------------------------------------------------------
    def train(self, mode: bool = True):
        self.drop.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _batch(self, data) -> Batch:
        if isinstance(data, Batch):
            return data
        if isinstance(data, DialogueExample):
            data = [data]
        return collate(data, self.cfg)

    # -- pieces ----------------------------------------------------------------
    def embed(self, ids: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
        d = self.cfg.d_model
        ids = np.asarray(ids)
        if ids.size and ids.max() >= self.cfg.vocab_size:
            raise CorpusError(f"token id {int(ids.max())} outside vocabulary of size {self.cfg.vocab_size}")
        pe = positional_encoding(ids.shape[-1], d)
        if positions is not None:
            pe = pe[positions]
        x = ad.embedding_lookup(self.embedding, ids) * np.sqrt(d)
        return self.drop(x + pe)

    def _dense(self, feats: np.ndarray, proj: Tensor, bias: Tensor) -> Tensor:
        x = ad.matmul(feats, proj) + bias
        return self.drop(x + positional_encoding(feats.shape[-2], self.cfg.d_model))

    def vocab_logits(self, x: Tensor) -> Tensor:
        return x @ self.out_proj + self.out_bias

    def encode(self, data) -> EncoderOutputs:
        b = self._batch(data)
        z = self.question_encoder(self.embed(b.question), AttentionMask(key_padding=b.question == PAD))
        f_v = self._dense(b.visual, self.visual_proj, self.visual_bias) if self.cfg.visual_dim else None
        f_a = self._dense(b.audio, self.audio_proj, self.audio_bias) if self.cfg.audio_dim else None
        return EncoderOutputs(z, f_v, f_a)

    def video_caption_translate(self, f_v: Tensor, data) -> tuple[Tensor, Tensor]:
        b = self._batch(data)
        if self.video_caption_translator is None:
            raise ConfigurationError("caption translator disabled (needs visual_dim > 0 and use_caption)")
        target = self.embed(shift_right(b.caption))
        f_v_cap = self.video_caption_translator(target, f_v, None, b.visual_padding)
        return f_v_cap, self.vocab_logits(f_v_cap)

    def dialogue_summary_translate(self, data) -> tuple[Tensor, Tensor]:
        b = self._batch(data)
        if self.dialogue_summary_translator is None:
            raise ConfigurationError("summary translator disabled (use_summary is off)")
        hist = b.history
        words = self.embed(hist.tokens, hist.positions)
        target = self.embed(shift_right(b.summary))
        z_sum, _ = self.dialogue_summary_translator(target, words, hist)
        return z_sum, self.vocab_logits(z_sum)

    def auto_encode(self, z: Tensor, f_v: Tensor | None, f_a: Tensor | None, data) -> tuple[Tensor | None, Tensor | None]:
        b = self._batch(data)
        qpad = b.question == PAD
        g_v = g_a = None
        if f_v is not None:
            g_v = z
            for layer in self.auto_encoder_visual:
                g_v = layer(g_v, f_v, qpad, b.visual_padding)
        if f_a is not None:
            g_a = z
            for layer in self.auto_encoder_audio:
                g_a = layer(g_a, f_a, qpad, b.audio_padding)
        return g_v, g_a

    def memory(self, data):
        """Fused decoder memory plus caption/summary logits (None when disabled)."""
        b = self._batch(data)
        z, f_v, f_a = self.encode(b)
        g_v, g_a = self.auto_encode(z, f_v, f_a, b)
        qpad = b.question == PAD
        segments: dict[str, tuple[Tensor, np.ndarray]] = {"question": (z, qpad)}
        if g_v is not None:
            segments["visual"] = (g_v, qpad)
        if g_a is not None:
            segments["audio"] = (g_a, qpad)
        caption_logits = summary_logits = None
        if self.video_caption_translator is not None:
            f_v_cap, caption_logits = self.video_caption_translate(f_v, b)
            segments["caption"] = (f_v_cap, b.caption == PAD)
        if self.dialogue_summary_translator is not None:
            z_sum, summary_logits = self.dialogue_summary_translate(b)
            segments["summary"] = (z_sum, b.summary == PAD)
        parts = [segments[k] for k in self.cfg.memory_order if k in segments]
        if not parts:
            raise ConfigurationError("decoder memory is empty; check memory_order")
        mem = ad.concat([p[0] for p in parts], axis=-2)
        mem_pad = np.concatenate([p[1] for p in parts], axis=-1)
        mem = mem + positional_encoding(mem.shape[-2], self.cfg.d_model)
        return mem, mem_pad, caption_logits, summary_logits

    def decode(self, mem: Tensor, mem_pad: np.ndarray, answer_in: np.ndarray) -> Tensor:
        x = self.embed(answer_in)
        for layer in self.decoder:
            x = layer(x, mem, None, mem_pad)
        return self.vocab_logits(x)

    def decode_train(self, data) -> Tensor:
        b = self._batch(data)
        mem, mem_pad, _, _ = self.memory(b)
        return self.decode(mem, mem_pad, shift_right(b.answer))

    def forward(self, data):
        b = self._batch(data)
        mem, mem_pad, cap_logits, sum_logits = self.memory(b)
        return self.decode(mem, mem_pad, shift_right(b.answer)), cap_logits, sum_logits

    def composite_loss(self, data, alpha: float = 1.0, beta: float = 1.0) -> LossTerms:
        """``L = L_ans + alpha * L_caption + beta * L_summary`` (mean nats per token each)."""
        if alpha < 0 or beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        b = self._batch(data)
        ans_logits, cap_logits, sum_logits = self.forward(b)
        l_ans = ad.cross_entropy(ans_logits, b.answer, PAD)
        zero = Tensor(np.zeros(()))
        l_cap = ad.cross_entropy(cap_logits, b.caption, PAD) if cap_logits is not None else zero
        l_sum = ad.cross_entropy(sum_logits, b.summary, PAD) if sum_logits is not None else zero
        total = l_ans
        if alpha:
            total = total + l_cap * alpha
        if beta:
            total = total + l_sum * beta
        return LossTerms(total, l_ans, l_cap, l_sum)

    # -- generation --------------------------------------------------------------
    def _step_logprobs(self, mem, mem_pad, buf: np.ndarray, t: int) -> np.ndarray:
        logits = self.decode(mem, mem_pad, shift_right(buf))
        return ad.log_softmax(Tensor(logits.data[:, t])).data

    def generate(self, example: DialogueExample, mode: str = "greedy", beam: int = 4,
                 max_len: int = 20) -> Generation:
        """Decode an answer starting from sos; the result excludes sos and includes eos."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if mode == "greedy":
            beam = 1
        elif mode != "beam" or beam < 1:
            raise ValueError(f"unknown decoding mode {mode!r} / beam {beam}")
        was_training = self.drop.training
        self.eval()
        try:
            with ad.no_grad():
                b = self._batch(example)
                mem, mem_pad, _, _ = self.memory(b)
                return self._beam(mem, mem_pad, beam, max_len)
        finally:
            self.train(was_training)

    def generate_batch(self, examples: Sequence[DialogueExample], max_len: int = 20) -> list[Generation]:
        """Greedy decoding for several examples at once."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        was_training = self.drop.training
        self.eval()
        try:
            with ad.no_grad():
                mem, mem_pad, _, _ = self.memory(self._batch(list(examples)))
                n = mem.shape[0]
                buf = np.full((n, max_len), EOS, dtype=np.int64)
                score = np.zeros(n)
                length = np.full(n, max_len)
                done = np.zeros(n, dtype=bool)
                for t in range(max_len):
                    logp = self._step_logprobs(mem, mem_pad, buf, t)
                    tok = logp.argmax(-1)
                    live = ~done
                    buf[live, t] = tok[live]
                    score[live] += logp[live, tok[live]]
                    ended = live & (tok == EOS)
                    length[ended] = t + 1
                    done |= ended
                    if done.all():
                        break
        finally:
            self.train(was_training)
        return [Generation(buf[i, :length[i]].tolist(), not done[i], float(score[i] / length[i])) for i in range(n)]

    def _beam(self, mem, mem_pad, beam: int, max_len: int) -> Generation:
        live = [([], 0.0)]
        finished: list[Generation] = []
        for t in range(max_len):
            buf = np.full((len(live), max_len), EOS, dtype=np.int64)
            for i, (toks, _) in enumerate(live):
                buf[i, :len(toks)] = toks
            k = len(live)
            m = np.broadcast_to(mem.data, (k,) + mem.shape[1:])
            mp = np.broadcast_to(mem_pad, (k,) + mem_pad.shape[1:])
            logp = self._step_logprobs(Tensor(m), mp, buf, t)
            cum = np.array([s for _, s in live])[:, None] + logp
            flat_idx = np.arange(cum.size)
            # rank by cumulative score, then by step score, then by index (matches argmax)
            order = np.lexsort((flat_idx, -logp.reshape(-1), -cum.reshape(-1)))[:beam]
            new_live = []
            for idx in order:
                hyp, tok = divmod(int(idx), logp.shape[1])
                toks = live[hyp][0] + [tok]
                score = float(cum.reshape(-1)[idx])
                if tok == EOS:
                    finished.append(Generation(toks, False, score / len(toks)))
                else:
                    new_live.append((toks, score))
            live = new_live
            if not live:
                break
        if finished:
            best = max(range(len(finished)), key=lambda i: (finished[i].score, -i))
            return finished[best]
        toks, score = live[0]
        return Generation(toks, True, score / len(toks))


# module-level aliases mirroring the operation names
def encode(model: MtnTct, example) -> EncoderOutputs:
    return model.encode(example)


def video_caption_translate(model: MtnTct, f_v: Tensor, example):
    return model.video_caption_translate(f_v, example)


def dialogue_summary_translate(model: MtnTct, example):
    return model.dialogue_summary_translate(example)


def auto_encode(model: MtnTct, z, f_v, f_a, example):
    return model.auto_encode(z, f_v, f_a, example)


def decode_train(model: MtnTct, example) -> Tensor:
    return model.decode_train(example)


def generate(model: MtnTct, example, mode: str = "greedy", beam: int = 4, max_len: int = 20) -> Generation:
    return model.generate(example, mode, beam, max_len)


def composite_loss(model: MtnTct, example, alpha: float = 1.0, beta: float = 1.0) -> LossTerms:
    return model.composite_loss(example, alpha, beta)


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
