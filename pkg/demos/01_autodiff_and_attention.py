# %% [markdown]
# Tensors, gradients and attention
#
# Everything below runs on the float64 reverse-mode engine in `tct.autodiff`.

# %%
import numpy as np

from tct import autodiff as ad
from tct.attention import AttentionMask, MultiHeadAttention, attention_weights, positional_encoding
from tct.autodiff import Initializer, Tensor
from tct.gradcheck import run_gradcheck

# %%
a = Tensor([[1.0, 2.0]], requires_grad=True)
b = Tensor([[3.0], [4.0]], requires_grad=True)
loss = ad.sum(a @ b)
loss.backward()
print("d loss / d a =", a.grad)  # [[3, 4]]

# %%
# softmax rows sum to one; padded keys get exactly zero weight
rng = np.random.default_rng(0)
q, k = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
pad = np.array([False, False, True, False, True])
w = attention_weights(q, k, AttentionMask(key_padding=pad))
print(np.round(w, 3))
print("row sums", w.sum(-1))

# %%
# causal mask: position t only sees positions <= t
w = attention_weights(q[:3], k[:3], AttentionMask(causal=True))
print(np.round(w, 3))

# %%
pe = positional_encoding(6, 8)
print(pe.shape, np.round(pe[1], 3))

# %%
mha = MultiHeadAttention(16, 4, Initializer(0), "demo")
x = Tensor(rng.normal(size=(5, 16)))
print("multi-head output", mha(x, x, x).shape)

# %%
# finite differences against the analytic backward pass
for r in run_gradcheck("primitives")[:6]:
    print(f"{r.group:<20} {r.max_rel_error:.2e} {'ok' if r.passed else 'FAIL'}")
