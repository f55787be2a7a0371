"""Finite-difference verification of analytic gradients.

The numerical side only ever evaluates the forward function (under
``no_grad``), so it stays independent of every backward rule it checks.
Error per entry is ``|analytic - numeric| / (|numeric| + 1e-8)``.

A single step ``h`` fails in two known ways: round-off swamps entries whose
gradient is ~1e-7, and a ReLU input within ``h`` of zero makes the quotient
straddle a kink. Entries over tolerance are therefore re-estimated with
:func:`stable_difference`, which picks its step from the finite differences
alone and never sees the analytic value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import AttentionMask, LayerNorm, MultiHeadAttention, Sublayer, scaled_dot_attention
from .autodiff import Initializer, Tensor

SCOPES = ("primitives", "attention", "tct", "model")
TOLERANCE = 1e-4


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f().item()
            flat[i] = old - h
            down = f().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return grad


STEPS = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)


def stable_difference(f: Callable[[], Tensor], x: Tensor, index: int, steps=STEPS) -> float:
    """Central difference at the step with the smallest estimated total error.

    Truncation error at ``steps[k]`` is estimated by the gap to ``steps[k+1]``
    and round-off by ``eps * |f| / h``.
    """
    flat = x.data.reshape(-1)
    old = flat[index]
    est = []
    with ad.no_grad():
        scale = abs(f().item())
        for h in steps:
            flat[index] = old + h
            up = f().item()
            flat[index] = old - h
            down = f().item()
            flat[index] = old
            est.append((up - down) / (2 * h))
    eps = np.finfo(ad.DTYPE).eps
    total = [abs(est[k] - est[k + 1]) + eps * scale / steps[k] for k in range(len(steps) - 1)]
    return est[int(np.argmin(total))]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8), initial=0.0))


def check_gradients(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Max relative error per named tensor; ``f`` must rebuild the loss from scratch."""
    for p in params.values():
        p.grad = None
    f().backward()
    out = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_gradient(f, p, h)
        flat_a, flat_n = analytic.reshape(-1), numeric.reshape(-1)
        for i in np.flatnonzero(np.abs(flat_a - flat_n) / (np.abs(flat_n) + 1e-8) > TOLERANCE):
            flat_n[i] = stable_difference(f, p, int(i))
        out[name] = relative_error(analytic, numeric)
    return out


@dataclass
class GroupResult:
    scope: str
    group: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, shape, away_from_zero: bool = False) -> Tensor:
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.2)
    return Tensor(x, requires_grad=True)


def primitive_suite(seed: int = 0) -> list[GroupResult]:
    rng = np.random.default_rng(seed)
    results = []

    def run(name, fn, *leaves):
        errs = check_gradients(fn, {f"{name}[{i}]": t for i, t in enumerate(leaves)})
        results.append(GroupResult("primitives", name, max(errs.values())))

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    w = rng.normal(size=(3, 2))
    run("matmul", lambda: ad.sum(ad.matmul(a, b) * w), a, b)
    ba, bb = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    wb = rng.normal(size=(2, 3, 5))
    run("matmul_batched", lambda: ad.sum(ad.matmul(ba, bb) * wb), ba, bb)
    x, y = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    run("add_broadcast", lambda: ad.sum((x + y) * w[:, :1]), x, y)
    run("sub", lambda: ad.sum((x - y) * (x - y)), x, y)
    run("mul", lambda: ad.sum(x * y * w[:, :1]), x, y)
    pos = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5, requires_grad=True)
    run("div", lambda: ad.sum(x / pos), x, pos)
    run("exp_log", lambda: ad.sum(ad.log(ad.exp(x * 0.3) + 1.0)), x)
    r = _leaf(rng, (3, 4), away_from_zero=True)
    run("relu", lambda: ad.sum(ad.relu(r) * w[:, :1]), r)
    run("sum_mean", lambda: ad.sum(ad.mean(x * x, axis=0) * y), x, y)
    ro_sm, ro_lsm, ro_ln = (rng.normal(size=(3, 4)) for _ in range(3))
    ro_rt, ro_cc, ro_emb = rng.normal(size=(12, 2)), rng.normal(size=(6, 4)), rng.normal(size=(2, 3, 4))
    run("softmax", lambda: ad.sum(ad.softmax(x) * ro_sm), x)
    run("log_softmax", lambda: ad.sum(ad.log_softmax(x) * ro_lsm), x)
    g, bias = _leaf(rng, (4,)), _leaf(rng, (4,))
    run("layer_norm", lambda: ad.sum(ad.layer_norm(x, g, bias) * ro_ln), x, g, bias)
    run("reshape_transpose",
        lambda: ad.sum(ad.transpose(ad.reshape(ba, (2, 12)), (1, 0)) * ro_rt), ba)
    run("concat", lambda: ad.sum(ad.concat([x, r], axis=0) * ro_cc), x, r)
    table = _leaf(rng, (6, 4))
    ids = [[1, 3, 1], [0, 5, 2]]
    run("embedding_lookup", lambda: ad.sum(ad.embedding_lookup(table, ids) * ro_emb), table)
    logits = _leaf(rng, (2, 3, 6))
    targets = np.array([[1, 4, 0], [5, 2, 3]])
    run("cross_entropy", lambda: ad.cross_entropy(logits, targets, pad_id=0), logits)
    tgt = rng.normal(size=(2, 3, 4))
    mask = np.array([[1, 1, 0], [1, 0, 1]])
    run("l1_loss", lambda: ad.l1_loss(ba, tgt, mask), ba)
    run("cosine_similarity_loss", lambda: ad.cosine_similarity_loss(ba, tgt, mask), ba)
    run("dropout", lambda: ad.sum(ad.dropout(x, 0.3, True, ad.keyed_rng(seed, "gc-dropout")) * w[:, :1]), x)
    return results


def attention_suite(seed: int = 0, d: int = 8, h: int = 2) -> list[GroupResult]:
    rng = np.random.default_rng(seed)
    init = Initializer(seed)
    results = []
    q, k, v = _leaf(rng, (4, d)), _leaf(rng, (5, d)), _leaf(rng, (5, d))
    readout = rng.normal(size=(4, d))
    pad = np.array([False, False, False, True, False])
    errs = check_gradients(
        lambda: ad.sum(scaled_dot_attention(q, k, v, AttentionMask(key_padding=pad)) * readout),
        {"q": q, "k": k, "v": v})
    results.append(GroupResult("attention", "scaled_dot_attention", max(errs.values())))

    mha = MultiHeadAttention(d, h, init, "mha")
    x = _leaf(rng, (2, 4, d))
    mem = _leaf(rng, (2, 5, d))
    kpad = np.zeros((2, 5), bool)
    kpad[1, 3:] = True
    ro = rng.normal(size=(2, 4, d))
    params = {**mha.named_parameters("mha."), "query": x, "memory": mem}
    errs = check_gradients(lambda: ad.sum(mha(x, mem, mem, AttentionMask(key_padding=kpad)) * ro), params)
    results.append(GroupResult("attention", "multi_head", max(errs.values())))

    self_mha = MultiHeadAttention(d, h, init, "self")
    errs = check_gradients(lambda: ad.sum(self_mha(x, x, x, AttentionMask(causal=True)) * ro),
                           {**self_mha.named_parameters("self."), "x": x})
    results.append(GroupResult("attention", "multi_head_causal", max(errs.values())))

    sub = Sublayer(d, init, "sub")
    errs = check_gradients(lambda: ad.sum(sub(x, self_mha(x, x, x, AttentionMask(causal=True))) * ro),
                           {**sub.named_parameters("sub."), **self_mha.named_parameters("self."), "x": x})
    results.append(GroupResult("attention", "sublayer", max(errs.values())))
    ln = LayerNorm(d, init, "ln")
    ln.gain.data = rng.normal(size=d)
    errs = check_gradients(lambda: ad.sum(ln(x) * ro), {**ln.named_parameters("ln."), "x": x})
    results.append(GroupResult("attention", "layer_norm_module", max(errs.values())))
    return results


def tct_suite(seed: int = 0, d: int = 8, h: int = 2) -> list[GroupResult]:
    from .blocks import TctBlock
    rng = np.random.default_rng(seed)
    block = TctBlock(d, h, 2 * d, Initializer(seed), "block")
    tgt, src = _leaf(rng, (2, 4, d)), _leaf(rng, (2, 6, d))
    spad = np.zeros((2, 6), bool)
    spad[0, 4:] = True
    ro = rng.normal(size=(2, 4, d))
    params = {**block.named_parameters("block."), "target": tgt, "source": src}
    errs = check_gradients(lambda: ad.sum(block(tgt, src, None, spad).x_out * ro), params)
    groups: dict[str, float] = {}
    for name, e in errs.items():
        parts = name.split(".")
        key = parts[1] if parts[0] == "block" else name
        if key.endswith("_sub"):
            key = "residual_norms"
        groups[key] = max(groups.get(key, 0.0), e)
    return [GroupResult("tct", g, e) for g, e in groups.items()]


def model_suite(seed: int = 7, d: int = 8) -> list[GroupResult]:
    """Composite loss on a d=8 model; every attended sequence has at most 6 positions."""
    from .model import DialogueExample, ModelConfig, MtnTct
    rng = np.random.default_rng(seed)
    vocab = 10

    def toks(n):
        return [int(t) for t in rng.integers(4, vocab, n - 1)] + [2]

    history = [toks(int(rng.integers(2, 5))) for _ in range(3)]
    ex = DialogueExample(history=history, question=toks(4), caption=toks(4), summary=toks(3),
                         answer=toks(4), visual=rng.normal(size=(5, 6)), audio=rng.normal(size=(3, 4)))
    cfg = ModelConfig(vocab_size=vocab, d_model=d, n_heads=2, d_ff=2 * d, n_layers=1, dropout=0.0,
                      visual_dim=6, audio_dim=4, seed=seed)
    model = MtnTct(cfg)
    errs = check_gradients(lambda: model.composite_loss(ex, 1.0, 1.0).total, model.named_parameters())
    groups: dict[str, float] = {}
    for name, e in errs.items():
        top = name.split(".")[0]
        groups[top] = max(groups.get(top, 0.0), e)
    return [GroupResult("model", g, e) for g, e in groups.items()]


def run_gradcheck(scope: str, seed: int | None = None) -> list[GroupResult]:
    """Run one suite; ``seed=None`` uses the suite's own default sample."""
    suites = {"primitives": primitive_suite, "attention": attention_suite, "tct": tct_suite, "model": model_suite}
    if scope not in suites:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {', '.join(SCOPES)}")
    return suites[scope]() if seed is None else suites[scope](seed)
