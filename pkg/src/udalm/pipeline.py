"""Experiment pipeline over an output directory.

    corpus/   TSV splits, general corpus, vocabulary and a manifest   (generate)
    stages/   warm-up and domain-pretraining checkpoints             (train, sweep)
    runs/     one record + final checkpoint per (regime, seed, criterion)  (train)
    sweep/    records + checkpoints of the sample-efficiency cells   (sweep)
    report/   rendered tables and plot data                          (report, sweep)

Artifacts are named by a content hash of everything that produced them, so
rerunning a command skips finished work and an interrupted run resumes from
the last completed stage. Training never touches the labeled target test
file; it is read only when results are evaluated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .analysis import bound_report, sample_efficiency_sweep
from .config import ExperimentConfig
from .corpus import (DataError, EncodedSplits, LabeledExample, SplitSet, encode_examples,
                     generate_general_corpus, generate_synthetic_pair, load_records, make_splits,
                     subsample_target, write_records)
from .encoder import EncoderParams, init_params, load_params, save_params
from .tokenizer import Vocab, build_vocab
from .trainers import (FixedEpochs, RunRecord, StoppingCriterion, default_criterion, evaluate,
                       replay, run_regime, train_dpt, train_warmup)

log = logging.getLogger(__name__)

SPLIT_FILES = ("source_train", "source_val", "target_train", "target_val", "target_test")


class StageError(DataError):
    """A stage's input is missing; the message says which command produces it."""


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _key(*parts) -> str:
    return _sha(json.dumps(parts, sort_keys=True, default=str).encode())[:16]


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# corpus stage


def generate_corpus(cfg: ExperimentConfig, out: Path) -> Path:
    """Write the split TSVs, the general corpus, the vocabulary and a manifest."""
    cc = cfg.corpus
    corpus_dir = Path(out) / "corpus"
    try:
        corpus_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {corpus_dir}: {exc}") from None
    split_seed, general_seed = (int(s.generate_state(1)[0])
                                for s in np.random.SeedSequence([cfg.seed, 1]).spawn(2))
    if cc.kind == "synthetic":
        splits = generate_synthetic_pair(cc.generator, cc.n_source, cc.n_target, cc.n_test,
                                         seed=split_seed, val_frac=cc.val_frac)
        general = generate_general_corpus(cc.generator, cc.general_count, general_seed)
        domains = {"source": "source", "target": "target"}
    else:
        source = load_records(cc.source_path)
        target = load_records(cc.target_path)
        test = load_records(cc.test_path)
        general = [LabeledExample(e.text, None, "general", e.uid)
                   for e in (load_records(cc.general_path) if cc.general_path else [])]
        for name, part in (("source", source), ("target", target), ("test", test)):
            if not part:
                raise DataError(f"{name} file has no records")
        domains = {"source": source[0].domain, "target": target[0].domain}
        splits = make_splits(source, target, test, val_frac=cc.val_frac, seed=split_seed)

    texts = [e.text for part in (splits.source_train, splits.source_val, splits.target_train,
                                 splits.target_val, general) for e in part]
    vocab = build_vocab(texts, cc.vocab_size, cc.min_freq)

    files = {}
    for name in SPLIT_FILES:
        write_records(getattr(splits, name), corpus_dir / f"{name}.tsv")
    write_records(general, corpus_dir / "general.tsv")
    vocab.save(corpus_dir / "vocab.txt")
    for name in SPLIT_FILES + ("general", "vocab"):
        fname = f"{name}.txt" if name == "vocab" else f"{name}.tsv"
        files[fname] = _sha((corpus_dir / fname).read_bytes())
    manifest = {
        "kind": cc.kind,
        "seed": cfg.seed,
        "corpus_config": asdict(cc),
        "shift": cc.generator.shift if cc.kind == "synthetic" else None,
        "domains": domains,
        "counts": {**splits.counts(), "general": len(general)},
        "vocab_size": vocab.size,
        "files": files,
    }
    _write_text(corpus_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return corpus_dir


@dataclass
class Corpus:
    splits: SplitSet
    general: list[LabeledExample]
    vocab: Vocab
    manifest: dict
    digest: str

    @property
    def pair(self) -> str:
        d = self.manifest["domains"]
        return f"{d['source']}->{d['target']}"


def load_corpus(corpus_dir: Path, with_test: bool = False) -> Corpus:
    corpus_dir = Path(corpus_dir)
    mpath = corpus_dir / "manifest.json"
    if not mpath.is_file():
        raise StageError(f"no corpus in {corpus_dir}; run `udalm generate --out {corpus_dir.parent}` first")
    raw = mpath.read_bytes()
    manifest = json.loads(raw)
    for fname, digest in manifest["files"].items():
        if fname == "target_test.tsv" and not with_test:
            continue
        path = corpus_dir / fname
        if not path.is_file() or _sha(path.read_bytes()) != digest:
            raise DataError(f"{path} is missing or does not match the corpus manifest")
    parts = {name: load_records(corpus_dir / f"{name}.tsv")
             for name in SPLIT_FILES if with_test or name != "target_test"}
    parts.setdefault("target_test", [])
    splits = SplitSet(**parts, meta={"corpus": manifest["kind"]})
    general = load_records(corpus_dir / "general.tsv")
    return Corpus(splits, general, Vocab.load(corpus_dir / "vocab.txt"), manifest, _sha(raw)[:16])


# ---------------------------------------------------------------------------
# work units


@dataclass(frozen=True)
class Cell:
    """One (regime, seed) training run, optionally on a subsampled target set."""

    regime: str
    seed: int
    size: int | None = None

    @property
    def group(self) -> str:
        return "runs" if self.size is None else "sweep"

    def label(self, criterion: str) -> str:
        size = "" if self.size is None else f".n{self.size}"
        return f"{self.regime}.s{self.seed}{size}.{criterion.replace(':', '-')}"


class Workspace:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self._corpus: Corpus | None = None

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = load_corpus(self.out / "corpus")
        return self._corpus

    def experiment_digest(self) -> str:
        """Everything that makes results comparable: data, model and training settings."""
        return _key(self.corpus.digest, self.cfg.digest("encoder", "train", "warmup_epochs", "seed"))

    def dir(self, name: str) -> Path:
        path = self.out / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    # -- data views

    def splits_for(self, size: int | None, seed: int) -> SplitSet:
        splits = self.corpus.splits
        if size is None:
            return splits
        available = len(splits.target_train) + len(splits.target_val)
        if size > available:
            raise DataError(f"sweep size {size} exceeds the {available} unlabeled target examples")
        return subsample_target(splits, size, self.cfg.run_seed(seed))

    def encoded(self, splits: SplitSet) -> EncodedSplits:
        return EncodedSplits(splits, self.corpus.vocab, self.encoder_config().max_len)

    def encoder_config(self):
        return self.cfg.encoder_config(self.corpus.vocab.size)

    # -- cached stages

    def base_key(self, seed: int) -> str:
        return _key("base", self.experiment_digest(), seed)

    def base(self, seed: int) -> EncoderParams:
        """Random init followed by the general-corpus MLM warm-up."""
        path = self.dir("stages") / f"warmup-s{seed}-{self.base_key(seed)}.ckpt"
        if path.is_file():
            return load_params(path, self.encoder_config())
        tc = self.cfg.train_config(self.cfg.run_seed(seed))
        params = init_params(self.encoder_config(), tc.seed)
        if self.cfg.warmup_epochs and self.corpus.general:
            enc = self.encoded(self.corpus.splits)
            general = encode_examples(self.corpus.general, self.corpus.vocab, enc.max_len)
            params, record = train_warmup(params, enc, general, tc, self.cfg.warmup_epochs)
            _write_text(path.with_name(path.stem + ".jsonl"), record.dumps())
        save_params(params, path)
        return params

    def dpt_key(self, seed: int, size: int | None) -> str:
        return _key("dpt", self.base_key(seed), size)

    def dpt(self, seed: int, size: int | None = None) -> tuple[EncoderParams, RunRecord]:
        tag = "" if size is None else f"-n{size}"
        path = self.dir("stages") / f"dpt-s{seed}{tag}-{self.dpt_key(seed, size)}.ckpt"
        rpath = path.with_name(path.stem + ".jsonl")
        if path.is_file() and rpath.is_file():
            return load_params(path, self.encoder_config()), RunRecord.loads(rpath.read_text())
        base = self.base(seed)
        tc = self.cfg.train_config(self.cfg.run_seed(seed))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params, record = train_dpt(base, self.encoded(self.splits_for(size, seed)), tc)
        save_params(params, path)
        _write_text(rpath, record.dumps())
        return params, record

    # -- training cells

    def criteria_for(self, cell: Cell) -> list[StoppingCriterion]:
        tc = self.cfg.train
        has_target = cell.size != 0
        default = default_criterion(cell.regime if has_target else "SO", tc)
        if cell.regime == "UDALM" and cell.size is None and has_target:
            crits = [default] + [c for c in self.cfg.criterion_objects() if c != default]
            return crits
        return [default]

    def cell_paths(self, cell: Cell, criterion: StoppingCriterion) -> tuple[Path, Path]:
        key = _key("cell", self.dpt_key(cell.seed, cell.size), cell.regime, str(criterion))
        stem = f"{cell.label(str(criterion))}-{key}"
        d = self.dir(cell.group)
        return d / f"{stem}.jsonl", d / f"{stem}.ckpt"

    def cell_done(self, cell: Cell) -> bool:
        return all(self.cell_paths(cell, c)[0].is_file() for c in self.criteria_for(cell))

    def train_cell(self, cell: Cell) -> bool:
        """Train one cell unless its outputs exist. Returns True if training ran."""
        if self.cell_done(cell):
            return False
        crits = self.criteria_for(cell)
        tc = self.cfg.train_config(self.cfg.run_seed(cell.seed))
        splits = self.encoded(self.splits_for(cell.size, cell.seed))
        base = self.base(cell.seed)
        dpt = None if cell.regime == "SO" else self.dpt(cell.seed, cell.size)
        log.info("training %s seed %d%s", cell.regime, cell.seed,
                 "" if cell.size is None else f" (target size {cell.size})")

        snapshots: dict[int, EncoderParams] = {}
        if len(crits) > 1:
            # one long run; each criterion's outcome is replayed from its trajectory
            longest = max((c.epochs for c in crits if isinstance(c, FixedEpochs)), default=tc.epochs)
            longest = max(longest, tc.epochs)
            run_crit: StoppingCriterion = FixedEpochs(longest)
            hook: Callable | None = lambda epoch, params: snapshots.__setitem__(epoch, params.copy())  # noqa: E731
        else:
            run_crit, hook = crits[0], None
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            params, record = run_regime(cell.regime, base, splits, tc, run_crit, dpt,
                                        evaluate_test=False, epoch_hook=hook)
        record.notes.extend(f"warning: {w.message}" for w in caught)
        record.meta.update({"experiment": self.experiment_digest(), "seed_index": cell.seed,
                            "target_size": cell.size,
                            "consumed_examples": len(splits.consumed)})

        outputs = []
        for c in crits:
            if hook is None:
                outputs.append((c, params, record))
            else:
                r = replay(record, c)
                outputs.append((c, snapshots[r.chosen_epoch], r))
        for c, p, _ in outputs:
            save_params(p, self.cell_paths(cell, c)[1])
        for c, _, r in outputs:
            _write_text(self.cell_paths(cell, c)[0], r.dumps())
        return True

    def load_cell(self, cell: Cell, criterion: StoppingCriterion | None = None) -> tuple[EncoderParams, RunRecord]:
        criterion = criterion or self.criteria_for(cell)[0]
        rpath, cpath = self.cell_paths(cell, criterion)
        if not rpath.is_file():
            raise StageError(f"missing run {cell.label(str(criterion))}; run `udalm train` "
                             f"(or `udalm sweep`) with the same config first")
        return load_params(cpath, self.encoder_config()), RunRecord.loads(rpath.read_text())


# ---------------------------------------------------------------------------
# commands


def _stage_task(args) -> None:
    cfg, out, seed, size = args
    ws = Workspace(cfg, out)
    ws.base(seed)
    if size is not None or any(r != "SO" for r in cfg.regimes):
        ws.dpt(seed, size)


def _cell_task(args) -> bool:
    cfg, out, cell = args
    return Workspace(cfg, out).train_cell(cell)


def _run_all(fn, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _prepare(cfg: ExperimentConfig, out: Path) -> Workspace:
    ws = Workspace(cfg, out)
    ws.corpus  # fail early if the corpus is missing
    exp_path = ws.out / "experiment.json"
    record = {"config": cfg.to_dict(), "experiment": ws.experiment_digest()}
    if exp_path.is_file():
        prev = json.loads(exp_path.read_text())
        if prev.get("experiment") != record["experiment"]:
            log.warning("config differs from the previous run in %s; results are kept apart by hash", out)
    _write_text(exp_path, json.dumps(record, indent=2, sort_keys=True) + "\n")
    return ws


def train(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    """Train every (regime, seed) cell, running or reusing the pretraining stages first."""
    ws = _prepare(cfg, out)
    cells = [Cell(r, s) for s in cfg.seeds for r in cfg.regimes]
    todo = [c for c in cells if not ws.cell_done(c)]
    _run_all(_stage_task, [(cfg, str(out), seed, None) for seed in sorted({c.seed for c in todo})], jobs)
    ran = _run_all(_cell_task, [(cfg, str(out), c) for c in todo], jobs)
    trained = [c for c, r in zip(todo, ran) if r]
    return {"trained": trained, "cached": [c for c in cells if c not in trained]}


def sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    """Sample-efficiency sweep: train every (size, regime, seed) cell, then evaluate."""
    ws = _prepare(cfg, out)
    cells = [Cell(r, s, n) for s in cfg.seeds for n in cfg.sweep_sizes for r in cfg.sweep_regimes]
    for c in cells:
        ws.splits_for(c.size, c.seed)  # size checks before any training
    todo = [c for c in cells if not ws.cell_done(c)]
    stage_args = [(cfg, str(out), seed, size)
                  for seed, size in sorted({(c.seed, c.size) for c in todo if c.regime != "SO"})]
    _run_all(_stage_task, stage_args, jobs)
    ran = _run_all(_cell_task, [(cfg, str(out), c) for c in todo], jobs)
    trained = [c for c, r in zip(todo, ran) if r]
    return {"trained": trained, "cached": [c for c in cells if c not in trained]}


# ---------------------------------------------------------------------------
# evaluation (the only place the labeled target test split is read)


@dataclass
class Results:
    pair: str
    seeds: tuple[int, ...]
    accuracy: dict[str, list[float]]            # regime -> per-seed target accuracy
    stopping: dict[str, list[float]]            # criterion -> per-seed UDALM accuracy
    bounds: list[tuple[str, int, object]]       # (regime, seed, BoundReport)
    sweep: list | None                          # SweepRow list or None
    records: dict[tuple[str, int], RunRecord]


def _check_compatible(ws: Workspace) -> None:
    digest = ws.experiment_digest()
    for group in ("runs", "sweep"):
        d = ws.out / group
        if not d.is_dir():
            continue
        for path in sorted(d.glob("*.jsonl")):
            meta = RunRecord.loads(path.read_text()).meta
            if meta.get("experiment") != digest:
                raise DataError(f"{path} was produced by a different configuration; "
                                f"use a separate output directory per configuration")


def evaluate_results(cfg: ExperimentConfig, out: Path, include_sweep: bool | None = None) -> Results:
    ws = Workspace(cfg, out)
    ws.corpus
    _check_compatible(ws)
    full = load_corpus(ws.out / "corpus", with_test=True)
    test_enc = EncodedSplits(full.splits, full.vocab, ws.encoder_config().max_len)

    accuracy: dict[str, list[float]] = {}
    records: dict[tuple[str, int], RunRecord] = {}
    bounds = []
    for regime in cfg.regimes:
        for seed in cfg.seeds:
            params, record = ws.load_cell(Cell(regime, seed))
            record.target_test_acc = evaluate(params, test_enc.target_test).accuracy
            records[(regime, seed)] = record
            accuracy.setdefault(regime, []).append(record.target_test_acc)
            bounds.append((regime, seed, bound_report(params, test_enc, cfg.adist_per_domain,
                                                      seed=cfg.run_seed(seed))))

    stopping: dict[str, list[float]] = {}
    if "UDALM" in cfg.regimes:
        for c in cfg.criterion_objects():
            for seed in cfg.seeds:
                params, _ = ws.load_cell(Cell("UDALM", seed), c)
                stopping.setdefault(str(c), []).append(evaluate(params, test_enc.target_test).accuracy)

    rows = None
    sweep_done = all(ws.cell_done(Cell(r, s, n)) for s in cfg.seeds for n in cfg.sweep_sizes
                     for r in cfg.sweep_regimes)
    if include_sweep or (include_sweep is None and sweep_done and (ws.out / "sweep").is_dir()):
        rows = evaluate_sweep(cfg, out, ws, test_enc)
    return Results(ws.corpus.pair, tuple(cfg.seeds), accuracy, stopping, bounds, rows, records)


def evaluate_sweep(cfg: ExperimentConfig, out: Path, ws: Workspace | None = None,
                   test_enc: EncodedSplits | None = None) -> list:
    """Sweep table from already trained sweep cells."""
    ws = ws or Workspace(cfg, out)
    if test_enc is None:
        _check_compatible(ws)
        full = load_corpus(ws.out / "corpus", with_test=True)
        test_enc = EncodedSplits(full.splits, full.vocab, ws.encoder_config().max_len)
    seed_of = {cfg.run_seed(s): s for s in cfg.seeds}

    def run(regime: str, splits: SplitSet, run_seed: int) -> float:
        size = len(splits.target_train) + len(splits.target_val)
        params, _ = ws.load_cell(Cell(regime, seed_of[run_seed], size))
        return evaluate(params, test_enc.target_test).accuracy

    return sample_efficiency_sweep(ws.corpus.splits, cfg.sweep_sizes, cfg.sweep_regimes,
                                   [cfg.run_seed(s) for s in cfg.seeds], run)


def adist(checkpoint: Path, corpus_dir: Path, per_domain: int = 500, seed: int = 0):
    """Bound report for one checkpoint against a generated corpus."""
    corpus = load_corpus(corpus_dir, with_test=True)
    params = load_params(checkpoint)
    # reload against the corpus vocabulary so a mismatch names the field
    params = load_params(checkpoint, replace(params.config, vocab_size=corpus.vocab.size))
    enc = EncodedSplits(corpus.splits, corpus.vocab, params.config.max_len)
    return bound_report(params, enc, per_domain, seed)
