"""Cross-modal translator blocks.

A block encodes the target sequence with causal self-attention and the source
sequence with padded self-attention, lets the target attend into the source,
and finishes with two feed-forward sublayers. Blocks stack into a translator;
the hierarchical variant first reduces a multi-utterance history to one vector
per utterance (the representation at each eos) and uses that as the source.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .attention import (AttentionMask, ConfigurationError, Dropout, EncoderLayer, FeedForward,
                        MultiHeadAttention, Sublayer, positional_encoding)
from .autodiff import ContractError, Initializer, Module, Tensor

PAD, SOS, EOS, UNK = 0, 1, 2, 3


class CorpusError(ValueError):
    """Input sequences violate the corpus invariants (e.g. missing eos)."""


@dataclass
class ModalitySequence:
    """One modality: token ids (textual) or a ``[N, d_raw]`` feature matrix (dense)."""

    kind: str
    tokens: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "textual":
            self.tokens = np.asarray(self.tokens, dtype=np.int64)
            if self.tokens.ndim != 1 or len(self.tokens) == 0 or self.tokens[-1] != EOS:
                raise CorpusError("textual sequences must be non-empty and end with eos")
        elif self.kind == "dense":
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or len(self.features) == 0:
                raise CorpusError("dense sequences need a non-empty [N, d_raw] feature matrix")
        else:
            raise ContractError(f"unknown modality kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.tokens) if self.kind == "textual" else len(self.features)

    @property
    def padding_mask(self) -> np.ndarray:
        return np.zeros(len(self), dtype=bool)


class TctOutputs(NamedTuple):
    c_x: Tensor
    c_src: Tensor
    x_trans: Tensor
    x_out: Tensor


class TctBlock(Module):
    def __init__(self, d: int, h: int, d_ff: int, init: Initializer, name: str, drop: Dropout | None = None):
        self.d = d
        self.target_self_attn = MultiHeadAttention(d, h, init, f"{name}.target_self_attn")
        self.source_self_attn = MultiHeadAttention(d, h, init, f"{name}.source_self_attn")
        self.translator_attn = MultiHeadAttention(d, h, init, f"{name}.translator_attn")
        self.ffn_target = FeedForward(d, d_ff, init, f"{name}.ffn_target")
        self.ffn_out = FeedForward(d, d_ff, init, f"{name}.ffn_out")
        self.target_sub = Sublayer(d, init, f"{name}.target_sub", drop)
        self.source_sub = Sublayer(d, init, f"{name}.source_sub", drop)
        self.trans_sub = Sublayer(d, init, f"{name}.trans_sub", drop)
        self.ffn_target_sub = Sublayer(d, init, f"{name}.ffn_target_sub", drop)
        self.ffn_out_sub = Sublayer(d, init, f"{name}.ffn_out_sub", drop)

    def __call__(self, target: Tensor, source: Tensor, target_padding=None, source_padding=None,
                 source_blocked=None) -> TctOutputs:
        if target.shape[-1] != self.d or source.shape[-1] != self.d:
            raise ConfigurationError(
                f"target {target.shape} / source {source.shape} not projected to model dimension {self.d}")
        tgt_mask = AttentionMask(causal=True, key_padding=target_padding)
        src_mask = AttentionMask(key_padding=source_padding, blocked=source_blocked)
        cross_mask = AttentionMask(key_padding=source_padding)
        c_x = self.target_sub(target, self.target_self_attn(target, target, target, tgt_mask))
        c_src = self.source_sub(source, self.source_self_attn(source, source, source, src_mask))
        x_trans = self.trans_sub(c_x, self.translator_attn(c_x, c_src, c_src, cross_mask))
        x = self.ffn_target_sub(x_trans, self.ffn_target(x_trans))
        x_out = self.ffn_out_sub(x, self.ffn_out(x))
        return TctOutputs(c_x, c_src, x_trans, x_out)


def tct_block_forward(block: TctBlock, target: Tensor, source: Tensor,
                      target_padding=None, source_padding=None) -> TctOutputs:
    return block(target, source, target_padding, source_padding)


class TranslatorStack(Module):
    """M blocks; each block's output is the next block's target, the source is shared."""

    def __init__(self, m: int, d: int, h: int, d_ff: int, init: Initializer, name: str,
                 drop: Dropout | None = None):
        if m < 1:
            raise ConfigurationError("a translator needs at least one block")
        self.blocks = [TctBlock(d, h, d_ff, init, f"{name}.blocks.{i}", drop) for i in range(m)]

    def __call__(self, target: Tensor, source: Tensor, target_padding=None, source_padding=None) -> Tensor:
        x = target
        for block in self.blocks:
            x = block(x, source, target_padding, source_padding).x_out
        return x


def translator_forward(stack: TranslatorStack, target_embedded: Tensor, source_encoded: Tensor,
                       target_padding=None, source_padding=None) -> Tensor:
    return stack(target_embedded, source_encoded, target_padding, source_padding)


@dataclass
class HistoryBatch:
    """Flattened, padded dialogue histories.

    tokens      [B, L]    token ids, utterances back to back, PAD at the tail
    positions   [B, L]    position of each token inside its utterance
    utterance   [B, L]    utterance index per token, -1 for padding
    select      [B, U, L] one-hot rows picking each utterance's eos token
    sentence_padding [B, U]  True where the batch element has fewer utterances
    empty       [B]       True for an empty history (sentinel turn is used)
    """

    tokens: np.ndarray
    positions: np.ndarray
    utterance: np.ndarray
    select: np.ndarray
    sentence_padding: np.ndarray
    empty: np.ndarray

    @property
    def blocked(self) -> np.ndarray:
        # words attend only within their own utterance; padding forms its own block
        return self.utterance[:, :, None] != self.utterance[:, None, :]


def pack_histories(histories: Sequence[Sequence[Sequence[int]]]) -> HistoryBatch:
    b = len(histories)
    for i, hist in enumerate(histories):
        for j, utt in enumerate(hist):
            if len(utt) == 0 or utt[-1] != EOS:
                raise CorpusError(f"history {i}, utterance {j} does not end with eos")
    lengths = [sum(len(u) for u in h) for h in histories]
    max_len = max(1, *lengths) if lengths else 1
    max_utt = max([len(h) for h in histories] + [1])
    tokens = np.full((b, max_len), PAD, dtype=np.int64)
    positions = np.zeros((b, max_len), dtype=np.int64)
    utterance = np.full((b, max_len), -1, dtype=np.int64)
    select = np.zeros((b, max_utt, max_len))
    sentence_padding = np.ones((b, max_utt), dtype=bool)
    empty = np.zeros(b, dtype=bool)
    for i, hist in enumerate(histories):
        if not hist:
            empty[i] = True
            sentence_padding[i, 0] = False
            continue
        pos = 0
        for j, utt in enumerate(hist):
            n = len(utt)
            tokens[i, pos:pos + n] = utt
            positions[i, pos:pos + n] = np.arange(n)
            utterance[i, pos:pos + n] = j
            select[i, j, pos + n - 1] = 1.0
            sentence_padding[i, j] = False
            pos += n
    return HistoryBatch(tokens, positions, utterance, select, sentence_padding, empty)


class HierarchicalTct(Module):
    """Word-level encoder over the history, eos gather, then a translator stack."""

    def __init__(self, m: int, d: int, h: int, d_ff: int, init: Initializer, name: str,
                 drop: Dropout | None = None):
        self.d = d
        self.word_level_encoder = EncoderLayer(d, h, d_ff, init, f"{name}.word_level_encoder", drop)
        self.stack = TranslatorStack(m, d, h, d_ff, init, f"{name}.stack", drop)
        self.sentinel = init.normal(f"{name}.sentinel", (d,), 0.1)

    def sentences(self, history_embedded: Tensor, history: HistoryBatch) -> Tensor:
        """Sentence-level sequence ``[B, U, d]`` (before sentence positions are added)."""
        words = self.word_level_encoder(history_embedded, AttentionMask(blocked=history.blocked))
        gathered = ad.matmul(history.select, words)
        if history.empty.any():
            flag = np.zeros(history.select.shape[:2] + (1,))
            flag[history.empty, 0, 0] = 1.0
            gathered = gathered + flag * self.sentinel
        return gathered

    def __call__(self, summary_target: Tensor, history_embedded: Tensor, history: HistoryBatch,
                 summary_padding=None) -> tuple[Tensor, Tensor]:
        sents = self.sentences(history_embedded, history)
        src = sents + positional_encoding(sents.shape[-2], self.d)
        out = self.stack(summary_target, src, summary_padding, history.sentence_padding)
        return out, sents


def hierarchical_forward(h: HierarchicalTct, summary_target: Tensor, history_embedded: Tensor,
                         history: HistoryBatch, summary_padding=None) -> Tensor:
    return h(summary_target, history_embedded, history, summary_padding)[0]


def translation_loss(kind: str, predicted: Tensor, target, mask=None) -> Tensor:
    """Per-kind translation objective.

    ``textual``: predicted holds vocabulary logits for every target position
    (already aligned with the teacher-forced input) and ``target`` the gold
    ids; padding positions are skipped. ``dense-l1`` / ``dense-cosine``:
    predicted and target share shape; ``mask`` marks valid positions.
    """
    if kind == "textual":
        tgt = np.asarray(target)
        if not np.issubdtype(tgt.dtype, np.integer) or predicted.ndim != tgt.ndim + 1:
            raise ContractError("textual translation loss expects logits and integer token targets")
        return ad.cross_entropy(predicted, tgt, pad_id=PAD)
    if kind in ("dense-l1", "dense-cosine"):
        tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
        if np.issubdtype(tgt.dtype, np.integer) or tgt.shape != predicted.shape:
            raise ContractError(f"{kind} loss expects a dense target shaped like the prediction")
        fn = ad.l1_loss if kind == "dense-l1" else ad.cosine_similarity_loss
        return fn(predicted, tgt, mask)
    raise ContractError(f"unknown translation loss kind {kind!r}")


def shift_right(ids: np.ndarray) -> np.ndarray:
    """Teacher-forcing input: sos prepended, last position dropped."""
    ids = np.asarray(ids)
    out = np.empty_like(ids)
    out[..., 0] = SOS
    out[..., 1:] = ids[..., :-1]
    return np.where(ids == PAD, PAD, out) if ids.ndim else out


def pad_sequences(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


class Translator(Module):
    """Stand-alone translator: embeddings, a TCT stack and a vocabulary head.

    Used for source-to-target tasks where both sides are token sequences, or
    where the source is dense (``source_dim`` set) and gets a linear projection.
    ``zero_source`` replaces the encoded source with zeros, cutting the
    cross-modal path while leaving the decoder intact.
    """

    def __init__(self, vocab_size: int, d: int = 32, h: int = 4, d_ff: int | None = None, m: int = 1,
                 dropout: float = 0.0, seed: int = 0, source_dim: int | None = None,
                 zero_source: bool = False):
        init = Initializer(seed)
        self.d, self.vocab_size = d, vocab_size
        self.drop = Dropout(dropout, seed)
        self.zero_source = zero_source
        self.embedding = init.normal("embedding", (vocab_size, d), d ** -0.5)
        self.source_proj = init.xavier("source_proj", (source_dim, d)) if source_dim else None
        self.stack = TranslatorStack(m, d, h, d_ff or 4 * d, init, "stack", self.drop)
        self.out_proj = init.xavier("out_proj", (d, vocab_size))
        self.out_bias = init.zeros("out_bias", (vocab_size,))

    def train(self, mode: bool = True):
        self.drop.training = mode
        return self

    def eval(self):
        return self.train(False)

    def embed(self, ids: np.ndarray) -> Tensor:
        x = ad.embedding_lookup(self.embedding, ids) * np.sqrt(self.d)
        return self.drop(x + positional_encoding(ids.shape[-1], self.d))

    def encode_source(self, source: np.ndarray) -> Tensor:
        if self.source_proj is not None:
            x = ad.matmul(source, self.source_proj) + positional_encoding(source.shape[-2], self.d)
            x = self.drop(x)
        else:
            x = self.embed(source)
        if self.zero_source:
            return Tensor(np.zeros(x.shape))
        return x

    def logits(self, source: np.ndarray, source_padding: np.ndarray, target_in: np.ndarray) -> Tensor:
        src = self.encode_source(source)
        tgt = self.embed(target_in)
        out = self.stack(tgt, src, None, source_padding)
        return out @ self.out_proj + self.out_bias

    def loss(self, source, source_padding, target) -> Tensor:
        return ad.cross_entropy(self.logits(source, source_padding, shift_right(target)), target, PAD)

    def greedy(self, source: np.ndarray, source_padding: np.ndarray, max_len: int) -> np.ndarray:
        """Batched greedy decoding on a fixed-size buffer; returns ids ``[B, max_len]``."""
        b = source.shape[0]
        out = np.full((b, max_len), PAD, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        with ad.no_grad():
            src = self.encode_source(source)
            for t in range(max_len):
                tgt = self.embed(shift_right(np.where(out == PAD, EOS, out)))
                x = self.stack(tgt, src, None, source_padding)
                step = (x.data[:, t] @ self.out_proj.data) + self.out_bias.data
                tok = np.argmax(step, axis=-1)
                out[:, t] = np.where(done, PAD, tok)
                done |= tok == EOS
                if done.all():
                    break
        return out
