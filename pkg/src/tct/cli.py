"""Command line: ``tct {gen-data,train,translate,eval,gradcheck}``.

Exit status is 0 on success, 1 when the run itself fails (missing files,
diverged training, failed gradient check) and 2 for usage errors (bad flags,
unknown config keys, unknown gradcheck scope).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import autodiff as ad
from .attention import ConfigurationError
from .config import ConfigError, RunConfig, load_config
from .data import (CorpusFormatError, Vocabulary, corpus_texts, load_corpus, read_records,
                   synthetic_vocabulary, write_corpus, write_synthetic)
from .gradcheck import SCOPES, run_gradcheck
from .metrics import evaluate_corpus
from .model import DialogueExample, MtnTct

log = logging.getLogger("tct")

SNAPSHOT = "config.txt"
VOCAB = "vocab.txt"
CHECKPOINT = "best.ckpt"
HYPOTHESES = "hypotheses.jsonl"


class UsageError(Exception):
    pass


def _out_dir(path: str | None) -> Path:
    if not path:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _feature_dims(examples: Sequence[DialogueExample]) -> tuple[int, int]:
    ex = examples[0]
    return (ex.visual.shape[1] if ex.visual is not None else 0,
            ex.audio.shape[1] if ex.audio is not None else 0)


def _check_against_checkpoint(model: MtnTct, state: dict, ckpt: Path) -> None:
    """Turn shape disagreements into errors that name both values."""
    cfg = model.cfg
    emb = state.get("embedding")
    if emb is not None:
        if emb.shape[1] != cfg.d_model:
            raise ConfigurationError(f"config d_model={cfg.d_model} but checkpoint {ckpt} has d_model={emb.shape[1]}")
        if emb.shape[0] != cfg.vocab_size:
            raise ConfigurationError(
                f"vocabulary size {cfg.vocab_size} but checkpoint {ckpt} has vocab_size={emb.shape[0]}")
    for key, field, axis in (("visual_proj", "visual_dim", 0), ("audio_proj", "audio_dim", 0),
                             ("question_encoder.ffn.w_1", "d_ff", 1)):
        want = getattr(cfg, "ffn_dim" if field == "d_ff" else field)
        have = state[key].shape[axis] if key in state else 0
        if have != want:
            raise ConfigurationError(f"config {field}={want} but checkpoint {ckpt} has {field}={have}")
    layers = len({k.split(".")[1] for k in state if k.startswith("decoder.")})
    if layers != cfg.n_layers:
        raise ConfigurationError(f"config n_layers={cfg.n_layers} but checkpoint {ckpt} has n_layers={layers}")
    try:
        model.load_state_dict(state)
    except (ad.ContractError, ad.DimensionError) as exc:
        raise ConfigurationError(f"checkpoint {ckpt} does not match the configured model: {exc}") from None


def load_trained(model_dir: Path, cfg: RunConfig, examples: Sequence[DialogueExample], vocab: Vocabulary) -> MtnTct:
    ckpt = model_dir / CHECKPOINT
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = MtnTct(cfg.model_config(len(vocab), *_feature_dims(examples)))
    _check_against_checkpoint(model, ad.load_checkpoint(ckpt), ckpt)
    return model.eval()


def _model_config(args) -> RunConfig:
    """Snapshot of the trained model unless --config overrides it."""
    model_dir = Path(args.model)
    path = args.config or model_dir / SNAPSHOT
    return load_config(path, args.set, args.seed)


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    out = _out_dir(args.out)
    spec = cfg.synthetic_spec()
    paths = write_synthetic(spec, out)
    synthetic_vocabulary(spec).save(out / VOCAB)
    cfg.write(out / SNAPSHOT)
    for split, p in paths.items():
        print(f"{split}: {p}")
    return 0


def cmd_train(args) -> int:
    from .training import train
    cfg = load_config(args.config, args.set, args.seed)
    out = _out_dir(args.out)
    train_file, valid_file = cfg.path("train_file", "train.jsonl"), cfg.path("valid_file", "valid.jsonl")
    vocab_path = Path(cfg["vocab_file"]) if cfg["vocab_file"] else (
        Path(cfg["data_dir"]) / VOCAB if cfg["data_dir"] else None)
    if vocab_path is not None and vocab_path.exists():
        vocab = Vocabulary.load(vocab_path)
    elif cfg["vocab_file"]:
        raise FileNotFoundError(f"vocabulary not found: {vocab_path}")
    else:
        vocab = Vocabulary.build(corpus_texts(train_file))
    train_set = load_corpus(train_file, vocab)
    valid_set = load_corpus(valid_file, vocab)
    if not train_set or not valid_set:
        raise CorpusFormatError("training and validation corpora must be non-empty")
    model = MtnTct(cfg.model_config(len(vocab), *_feature_dims(train_set)))
    vocab.save(out / VOCAB)
    cfg.write(out / SNAPSHOT)
    result = train(model, train_set, valid_set, cfg.train_config(), out)
    print(f"best validation perplexity {result.best_perplexity:.6f} at step {result.best_step}")
    print(f"checkpoint: {result.best_checkpoint}")
    return 0


def _translate(model_dir: Path, cfg: RunConfig, input_file: Path, out: Path) -> Path:
    vocab = Vocabulary.load(model_dir / VOCAB)
    examples = load_corpus(input_file, vocab)
    model = load_trained(model_dir, cfg, examples, vocab)
    answers: dict[str, str] = {}
    if cfg["decode_mode"] == "greedy":
        # bucket by question length so padding stays small; order restored below
        order = sorted(range(len(examples)), key=lambda i: (len(examples[i].question), i))
        for start in range(0, len(order), 64):
            chunk = [examples[i] for i in order[start:start + 64]]
            for ex, gen in zip(chunk, model.generate_batch(chunk, cfg["max_len"])):
                answers[ex.id] = vocab.detokenize(gen.tokens)
    else:
        for ex in examples:
            gen = model.generate(ex, "beam", cfg["beam_size"], cfg["max_len"])
            answers[ex.id] = vocab.detokenize(gen.tokens)
    records, _ = read_records(input_file)
    hyps = [{"id": r["id"], "question": r.get("question", ""), "answer": answers[str(r["id"])]} for r in records]
    path = out / HYPOTHESES
    write_corpus(path, hyps)
    return path


def cmd_translate(args) -> int:
    if not args.model or not args.input:
        raise UsageError("translate needs --model DIR and --input FILE")
    cfg = _model_config(args)
    out = _out_dir(args.out)
    cfg.write(out / SNAPSHOT)
    print(_translate(Path(args.model), cfg, Path(args.input), out))
    return 0


def cmd_eval(args) -> int:
    if not args.ref:
        raise UsageError("eval needs at least one --ref FILE")
    if bool(args.hyp) == bool(args.model):
        raise UsageError("eval needs exactly one of --hyp FILE or --model DIR")
    if args.refs is not None and args.refs < 1:
        raise UsageError("--refs must be >= 1")
    out = _out_dir(args.out)
    if args.model:
        cfg = _model_config(args)
        cfg.write(out / SNAPSHOT)
        hyp = _translate(Path(args.model), cfg, Path(args.ref[0]), out)
    else:
        cfg = load_config(args.config, args.set, args.seed)
        cfg.write(out / SNAPSHOT)
        hyp = Path(args.hyp)
    report = evaluate_corpus(hyp, args.ref, args.refs)
    report.write(out / "report.jsonl")
    table = report.table()
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    if args.scope not in SCOPES:
        raise UsageError(f"unknown scope {args.scope!r}; choose from {', '.join(SCOPES)}")
    if args.out:
        load_config(args.config, args.set, args.seed).write(_out_dir(args.out) / SNAPSHOT)
    ok = True
    lines = []
    for r in run_gradcheck(args.scope, args.seed):
        ok &= r.passed
        lines.append(f"{r.scope:<11} {r.group:<32} {r.max_rel_error:.3e} {'ok' if r.passed else 'FAIL'}")
    print("\n".join(lines))
    if args.out:
        (Path(args.out) / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return 0 if ok else 1


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tct", description="Cross-modal translator toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus")
    sub.add_parser("train", parents=[common], help="train and keep the best checkpoint")
    p = sub.add_parser("translate", parents=[common], help="generate answers for a corpus")
    p.add_argument("--model", help="training output directory")
    p.add_argument("--input", help="corpus file")
    p = sub.add_parser("eval", parents=[common], help="score hypotheses against references")
    p.add_argument("--hyp", help="hypothesis file (corpus format)")
    p.add_argument("--model", help="translate --ref[0] with this model instead of reading --hyp")
    p.add_argument("--ref", action="append", default=[], help="reference file, repeatable")
    p.add_argument("--refs", type=int, help="use at most N references per example")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference self test")
    p.add_argument("--scope", required=True, help=" | ".join(SCOPES))
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "translate": cmd_translate,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"tct {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, IndexError, FloatingPointError, json.JSONDecodeError) as exc:
        print(f"tct {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
