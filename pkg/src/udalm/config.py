"""Experiment configuration read from an INI file with one section per module.

An empty file (or no file) gives the default synthetic benchmark.

    [corpus]      generator knobs, corpus sizes, vocabulary, optional TSV paths
    [encoder]     EncoderConfig fields except vocab_size
    [train]       TrainConfig fields except seed, plus warmup_epochs
    [experiment]  master seed, run seeds, regimes, stopping criteria, sweep and A-distance settings
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .corpus import DomainShiftSpec
from .encoder import EncoderConfig
from .trainers import REGIMES, TrainConfig, parse_criterion


class ConfigError(ValueError):
    """Invalid configuration (a usage error)."""


@dataclass(frozen=True)
class CorpusConfig:
    kind: str = "synthetic"
    generator: DomainShiftSpec = field(default_factory=DomainShiftSpec)
    n_source: int = 500
    n_target: int = 5000
    n_test: int = 1000
    general_count: int = 4000
    val_frac: float = 0.2
    vocab_size: int = 2000
    min_freq: int = 1
    source_path: str = ""
    target_path: str = ""
    test_path: str = ""
    general_path: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    warmup_epochs: int = 3
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    regimes: tuple[str, ...] = REGIMES
    criteria: tuple[str, ...] = ("min_mixed", "min_source", "fixed")
    sweep_sizes: tuple[int, ...] = (0, 500, 2000)
    sweep_regimes: tuple[str, ...] = REGIMES
    adist_per_domain: int = 500

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, **self.encoder)

    def train_config(self, run_seed: int) -> TrainConfig:
        return replace(self.train, seed=run_seed)

    def run_seed(self, seed: int) -> int:
        """Seed for one run, derived from the master seed and the configured run seed."""
        return int(np.random.SeedSequence([self.seed, seed]).generate_state(1)[0])

    def criterion_objects(self):
        return [parse_criterion(c, self.train) for c in self.criteria]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")
        return d

    def digest(self, *parts: str) -> str:
        """Content hash of selected top-level parts of the config."""
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in parts} if parts else d, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _conv(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def _split_list(raw: str) -> list[str]:
    return [x.strip() for x in raw.replace(";", ",").split(",") if x.strip()]


def _section(cp: configparser.ConfigParser, name: str) -> dict[str, str]:
    return dict(cp.items(name)) if cp.has_section(name) else {}


def _fill(defaults, values: dict[str, str], section: str, skip=()):
    known = {f.name: f for f in fields(defaults) if f.name not in skip}
    out = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"[{section}] unknown key {k!r}")
        out[k] = _conv(v, getattr(defaults, k), f"[{section}] {k}")
    try:
        return replace(defaults, **out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    unknown = set(cp.sections()) - {"corpus", "encoder", "train", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")

    corpus_vals = _section(cp, "corpus")
    gen_names = {f.name for f in fields(DomainShiftSpec)}
    gen = _fill(DomainShiftSpec(), {k: v for k, v in corpus_vals.items() if k in gen_names}, "corpus")
    corpus = _fill(CorpusConfig(generator=gen),
                   {k: v for k, v in corpus_vals.items() if k not in gen_names}, "corpus", skip=("generator",))
    if corpus.kind not in ("synthetic", "tsv"):
        raise ConfigError(f"[corpus] kind must be 'synthetic' or 'tsv', got {corpus.kind!r}")
    if corpus.kind == "tsv":
        paths = {}
        for key in ("source_path", "target_path", "test_path", "general_path"):
            value = getattr(corpus, key)
            if not value:
                if key != "general_path":
                    raise ConfigError(f"[corpus] kind = tsv needs {key}")
                continue
            p = Path(value)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            if not p.is_file():
                raise ConfigError(f"[corpus] {key}: no such file {p}")
            paths[key] = str(p.resolve())
        corpus = replace(corpus, **paths)

    enc_vals = _section(cp, "encoder")
    enc_defaults = EncoderConfig(vocab_size=100)
    enc = _fill(enc_defaults, enc_vals, "encoder", skip=("vocab_size",))
    encoder = {k: getattr(enc, k) for k in enc_vals}

    train_vals = _section(cp, "train")
    warmup_epochs = _conv(train_vals.pop("warmup_epochs", "3"), 0, "[train] warmup_epochs")
    train = _fill(TrainConfig(), train_vals, "train", skip=("seed",))

    exp = _section(cp, "experiment")
    known = {"seed", "seeds", "regimes", "criteria", "sweep_sizes", "sweep_regimes", "adist_per_domain"}
    for k in exp:
        if k not in known:
            raise ConfigError(f"[experiment] unknown key {k!r}")
    cfg = ExperimentConfig(corpus=corpus, encoder=encoder, train=train, warmup_epochs=warmup_epochs)
    updates: dict = {}
    if "seed" in exp:
        updates["seed"] = _conv(exp["seed"], 0, "[experiment] seed")
    if "seeds" in exp:
        updates["seeds"] = tuple(_conv(s, 0, "[experiment] seeds") for s in _split_list(exp["seeds"]))
    if "sweep_sizes" in exp:
        updates["sweep_sizes"] = tuple(_conv(s, 0, "[experiment] sweep_sizes")
                                       for s in _split_list(exp["sweep_sizes"]))
    for key in ("regimes", "sweep_regimes", "criteria"):
        if key in exp:
            updates[key] = tuple(_split_list(exp[key]))
    if "adist_per_domain" in exp:
        updates["adist_per_domain"] = _conv(exp["adist_per_domain"], 0, "[experiment] adist_per_domain")
    return validate(replace(cfg, **updates))


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    if not cfg.regimes:
        raise ConfigError("at least one regime is required")
    for r in cfg.regimes + cfg.sweep_regimes:
        if r not in REGIMES:
            raise ConfigError(f"unknown regime {r!r}; expected one of {', '.join(REGIMES)}")
    for c in cfg.criteria:
        try:
            parse_criterion(c, cfg.train)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if any(s < 0 for s in cfg.sweep_sizes):
        raise ConfigError("sweep sizes must be >= 0")
    if cfg.warmup_epochs < 0:
        raise ConfigError("warmup_epochs must be >= 0")
    if cfg.adist_per_domain < 4:
        raise ConfigError("adist_per_domain must be >= 4")
    try:
        cfg.encoder_config(100)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[encoder] {exc}") from None
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config("")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), p.parent)


def config_from_dict(d: dict) -> ExperimentConfig:
    """Inverse of ``ExperimentConfig.to_dict``."""
    try:
        c = dict(d["corpus"])
        corpus = CorpusConfig(**{**c, "generator": DomainShiftSpec(**c["generator"])})
        return validate(ExperimentConfig(
            corpus=corpus, encoder=dict(d["encoder"]), train=TrainConfig(**d["train"]),
            warmup_epochs=d["warmup_epochs"], seed=d["seed"], seeds=tuple(d["seeds"]),
            regimes=tuple(d["regimes"]), criteria=tuple(d["criteria"]),
            sweep_sizes=tuple(d["sweep_sizes"]), sweep_regimes=tuple(d["sweep_regimes"]),
            adist_per_domain=d["adist_per_domain"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"stored experiment config is unreadable: {exc}") from None


def with_overrides(cfg: ExperimentConfig, seed: int | None = None,
                   regimes: list[str] | None = None) -> ExperimentConfig:
    updates: dict = {}
    if seed is not None:
        updates["seed"] = seed
    if regimes:
        updates["regimes"] = tuple(regimes)
    return validate(replace(cfg, **updates)) if updates else cfg
