# %% [markdown]
# Does the translator path carry the signal?
#
# Train a one-block translator on the permutation+reversal task, then
# train the same model with its source zeroed out. Pass a step count on
# the command line (the acceptance run uses 2000).

# %%
import sys

from tct.benchmarks import translator_learnability
from tct.data import SyntheticSpec

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
spec = SyntheticSpec(n_train=5000, n_valid=100, n_test=300)

# %%
real = translator_learnability(spec, steps=steps)
print(f"translator   acc {real.token_accuracy:.3f}  BLEU-4 {real.bleu4:.3f}  ({real.seconds:.0f}s)")

# %%
blind = translator_learnability(spec, steps=steps, zero_source=True)
print(f"zero source  acc {blind.token_accuracy:.3f}  BLEU-4 {blind.bleu4:.3f}")
