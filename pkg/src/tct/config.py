"""Flat ``key = value`` run configuration with typed keys and snapshots.

File syntax: one ``key = value`` per line, ``#`` starts a comment, blank
lines are ignored. Every key must be declared in :data:`SCHEMA`; anything
else is rejected so a typo cannot silently fall back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .data import SyntheticSpec
from .model import MEMORY_ORDER, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value or out-of-range setting."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, "seed for initialisation, batching, dropout and data generation"),
    # model
    "d_model": Key(int, 32, "model width"),
    "n_heads": Key(int, 4, "attention heads"),
    "d_ff": Key(int, 0, "feed-forward width, 0 = 4 * d_model"),
    "n_layers": Key(int, 2, "decoder and auto-encoder depth"),
    "n_tct_blocks": Key(int, 1, "stacked blocks per translator (M)"),
    "dropout": Key(float, 0.1, "dropout probability"),
    "use_visual": Key(_bool, True, "encode visual features when the corpus has them"),
    "use_audio": Key(_bool, True, "encode audio features when the corpus has them"),
    "use_caption": Key(_bool, True, "video-caption translator"),
    "use_summary": Key(_bool, True, "dialogue-summary translator"),
    "memory_order": Key(_names, MEMORY_ORDER, "decoder memory segments, comma separated"),
    # training
    "alpha": Key(float, 1.0, "caption loss weight"),
    "beta": Key(float, 1.0, "summary loss weight"),
    "batch_size": Key(int, 32, "examples per step"),
    "max_steps": Key(int, 2000, "optimizer steps"),
    "warmup_steps": Key(int, 400, "learning-rate warmup"),
    "lr_scale": Key(float, 1.0, "multiplier on the warmup schedule"),
    "val_interval": Key(int, 100, "steps between validation passes"),
    "grad_clip": Key(float, 0.0, "global gradient-norm clip, 0 = off"),
    # files
    "data_dir": Key(str, "", "directory holding train/valid/test.jsonl and vocab.txt"),
    "train_file": Key(str, "", "training corpus, default <data_dir>/train.jsonl"),
    "valid_file": Key(str, "", "validation corpus, default <data_dir>/valid.jsonl"),
    "test_file": Key(str, "", "test corpus, default <data_dir>/test.jsonl"),
    "vocab_file": Key(str, "", "vocabulary, default <data_dir>/vocab.txt"),
    # decoding
    "decode_mode": Key(str, "greedy", "greedy or beam"),
    "beam_size": Key(int, 4, "beam width for beam decoding"),
    "max_len": Key(int, 20, "longest generated answer, eos included"),
    # synthetic data
    "synth_vocab_size": Key(int, 50, "synthetic word types"),
    "synth_min_len": Key(int, 4, "shortest question"),
    "synth_max_len": Key(int, 10, "longest question"),
    "synth_mapping": Key(str, "permutation+reversal", "token-permutation, reversal or permutation+reversal"),
    "synth_dense_noise": Key(float, 0.1, "std of noise on one-hot visual frames"),
    "synth_audio_dim": Key(int, 8, "audio feature width, 0 = no audio"),
    "synth_max_turns": Key(int, 3, "most history utterances"),
    "synth_n_train": Key(int, 5000, "training examples"),
    "synth_n_valid": Key(int, 500, "validation examples"),
    "synth_n_test": Key(int, 500, "test examples"),
}


def _coerce(key: str, text: str, where: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return SCHEMA[key].parse(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value, f"{source}:{lineno}")
    return values


def parse_overrides(pairs: Iterable[str]) -> dict[str, Any]:
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = (s.strip() for s in pair.split("=", 1))
        values[key] = _coerce(key, value, "--set")
    return values


class RunConfig(dict):
    """Resolved configuration: defaults, then the file, then overrides."""

    @classmethod
    def resolve(cls, path: str | Path | None = None, overrides: Iterable[str] = (),
                seed: int | None = None) -> "RunConfig":
        cfg = cls({k: spec.default for k, spec in SCHEMA.items()})
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"config file not found: {path}")
            cfg.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
        cfg.update(parse_overrides(overrides))
        if seed is not None:
            cfg["seed"] = seed
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not 0.0 <= self["dropout"] < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self['dropout']}")
        if self["decode_mode"] not in ("greedy", "beam"):
            raise ConfigError(f"decode_mode must be greedy or beam, got {self['decode_mode']!r}")
        for key in ("d_model", "n_heads", "n_layers", "n_tct_blocks", "beam_size", "max_len"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {self[key]}")

    def path(self, key: str, default_name: str) -> Path:
        if self[key]:
            return Path(self[key])
        if not self["data_dir"]:
            raise ConfigError(f"set {key} or data_dir")
        return Path(self["data_dir"]) / default_name

    def model_config(self, vocab_size: int, visual_dim: int = 0, audio_dim: int = 0) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self["d_model"], n_heads=self["n_heads"], d_ff=self["d_ff"],
            n_layers=self["n_layers"], n_tct_blocks=self["n_tct_blocks"], dropout=self["dropout"],
            visual_dim=visual_dim if self["use_visual"] else 0, audio_dim=audio_dim if self["use_audio"] else 0,
            use_caption=self["use_caption"], use_summary=self["use_summary"],
            memory_order=self["memory_order"], seed=self["seed"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(alpha=self["alpha"], beta=self["beta"], batch_size=self["batch_size"],
                           max_steps=self["max_steps"], warmup_steps=self["warmup_steps"],
                           lr_scale=self["lr_scale"], val_interval=self["val_interval"],
                           seed=self["seed"], grad_clip=self["grad_clip"])

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            vocab_size=self["synth_vocab_size"], min_len=self["synth_min_len"], max_len=self["synth_max_len"],
            mapping=self["synth_mapping"], dense_noise=self["synth_dense_noise"],
            audio_dim=self["synth_audio_dim"], max_turns=self["synth_max_turns"],
            n_train=self["synth_n_train"], n_valid=self["synth_n_valid"], n_test=self["synth_n_test"],
            seed=self["seed"])

    def dumps(self) -> str:
        lines = ["# resolved configuration"]
        lines += [f"{k} = {_fmt(self[k])}" for k in SCHEMA]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), seed: int | None = None) -> RunConfig:
    return RunConfig.resolve(path, overrides, seed)
