# %% [markdown]
# Synthetic corpus -> MTN-TCT training -> generation -> metrics
#
# A scaled-down version of `tct gen-data`, `tct train` and `tct eval`.

# %%
import sys
import tempfile
from pathlib import Path

from tct.autodiff import load_checkpoint
from tct.data import SyntheticSpec, load_corpus, synthetic_vocabulary, write_corpus, write_synthetic
from tct.metrics import evaluate_corpus
from tct.model import ModelConfig, MtnTct
from tct.training import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
work = Path(tempfile.mkdtemp(prefix="tct-demo-"))

# %%
spec = SyntheticSpec(mapping="reversal", n_train=1000, n_valid=100, n_test=100, seed=0)
paths = write_synthetic(spec, work / "data")
vocab = synthetic_vocabulary(spec)
train_set, valid_set = load_corpus(paths["train"], vocab), load_corpus(paths["valid"], vocab)
ex = train_set[0]
print(vocab.detokenize(ex.question), "->", vocab.detokenize(ex.answer))
print("visual frames", ex.visual.shape, "audio frames", ex.audio.shape)

# %%
model = MtnTct(ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=4, n_layers=2,
                           visual_dim=spec.vocab_size, audio_dim=spec.audio_dim))
result = train(model, train_set, valid_set, TrainConfig(max_steps=steps, val_interval=50), work / "model")
for rec in result.history:
    if rec["kind"] == "valid":
        print(f"step {rec['step']:>5}  valid ppl {rec['perplexity']:.3f}{'  *' if rec['saved'] else ''}")

# %%
# generate with the lowest-perplexity checkpoint, not the final weights
model.load_state_dict(load_checkpoint(result.best_checkpoint))
test_set = load_corpus(paths["test"], vocab)
hyps = [{"id": e.id, "answer": vocab.detokenize(g.tokens)} for e, g in zip(test_set, model.generate_batch(test_set))]
write_corpus(work / "hyp.jsonl", hyps)
print(evaluate_corpus(work / "hyp.jsonl", [paths["test"]]).table())
