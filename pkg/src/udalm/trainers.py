"""Training regimes: source-only, domain pretraining, domain-adversarial and UDALM.

All regimes share one loop: a regime yields sub-batches, each sub-batch's
loss is back-propagated and its gradient summed into an accumulator, and
every ``accumulate_every`` sub-batches the mean gradient is handed to AdamW.
Validation runs once per epoch and feeds the stopping criterion.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EncodedSet, EncodedSplits
from .encoder import (EncoderParams, clf_logits, domain_logits, encode_sequence, mlm_loss)
from .optim import AdamW
from .tokenizer import MASK_ID, mask_tokens

log = logging.getLogger(__name__)

REGIMES = ("SO", "DPT", "DAT", "UDALM")


class DomainLabelFlipWarning(UserWarning):
    """The domain head is persistently worse than chance: it has learned flipped labels."""


class NoTargetDataWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 10
    patience: int = 3
    source_subbatch: int = 4
    target_subbatches: int = 8
    subbatch_size: int = 4
    accumulate_every: int = 5
    lambda_d: float = 0.01
    weight_decay: float = 0.01
    mask_rate: float = 0.15
    dpt_epochs: int = 3
    dpt_batch: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("source_subbatch", "target_subbatches", "subbatch_size", "accumulate_every",
                     "dpt_batch", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("TrainConfig.learning_rate must be positive")
        if self.epochs < 0 or self.dpt_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.epochs and self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        if self.lambda_d < 0 or self.weight_decay < 0:
            raise ValueError("lambda_d and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss weighting


def compute_lambda(n: int, m: int) -> float:
    """Weight of the classification term: source samples over all samples in a batch."""
    if n < 0 or m < 0 or n + m == 0:
        raise ValueError(f"need n, m >= 0 and n + m > 0, got n={n}, m={m}")
    return n / (n + m)


def mixed_loss(l_clf: float, l_mlm: float, lam: float) -> float:
    if math.isnan(l_clf):
        raise ValueError("mixed_loss: classification loss is NaN")
    if math.isnan(l_mlm):
        raise ValueError("mixed_loss: MLM loss is NaN")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if lam == 1.0:
        return float(l_clf)
    if lam == 0.0:
        return float(l_mlm)
    return lam * l_clf + (1.0 - lam) * l_mlm


# ---------------------------------------------------------------------------
# stopping criteria


@dataclass(frozen=True)
class FixedEpochs:
    epochs: int

    tracks = None

    def __str__(self):
        return f"fixed:{self.epochs}"


@dataclass(frozen=True)
class MinSourceLoss:
    patience: int = 3

    tracks = "clf_val"

    def __str__(self):
        return f"min_source:{self.patience}"


@dataclass(frozen=True)
class MinMixedLoss:
    patience: int = 3

    tracks = "mixed_val"

    def __str__(self):
        return f"min_mixed:{self.patience}"


StoppingCriterion = FixedEpochs | MinSourceLoss | MinMixedLoss


def parse_criterion(text: str, config: TrainConfig) -> StoppingCriterion:
    """``fixed[:k]``, ``min_source[:patience]`` or ``min_mixed[:patience]``."""
    kind, _, arg = text.strip().partition(":")
    if kind == "fixed":
        return FixedEpochs(int(arg) if arg else config.epochs)
    if kind == "min_source":
        return MinSourceLoss(int(arg) if arg else config.patience)
    if kind == "min_mixed":
        return MinMixedLoss(int(arg) if arg else config.patience)
    raise ValueError(f"unknown stopping criterion {text!r}")


class EarlyStopper:
    """Tracks the best (lowest) value and signals a stop after ``patience`` non-improving epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


def criterion_outcome(record: "RunRecord", criterion: StoppingCriterion) -> tuple[int, int]:
    """(chosen epoch, stopped epoch) a criterion yields on a recorded trajectory.

    The trajectory up to the stopping point does not depend on the criterion,
    so replaying a longer run gives exactly what a run under ``criterion``
    would have produced.
    """
    if not record.epochs:
        raise ValueError("record has no epochs")
    if isinstance(criterion, FixedEpochs):
        if criterion.epochs > len(record.epochs):
            raise ValueError(f"record has {len(record.epochs)} epochs, criterion wants {criterion.epochs}")
        return criterion.epochs, criterion.epochs
    values = [e.get(criterion.tracks) for e in record.epochs]
    if any(v is None or math.isnan(v) for v in values):
        raise ValueError(f"{criterion} needs {criterion.tracks!r}, which this {record.regime} run does not track")
    stopper = EarlyStopper(criterion.patience)
    stopped = len(values)
    for i, v in enumerate(values, 1):
        _, stop = stopper.update(i, v)
        if stop:
            stopped = i
            break
    return stopper.best_epoch, stopped


def select_epoch(record: "RunRecord", criterion: StoppingCriterion) -> int:
    """Epoch whose parameters a criterion keeps, replayed from the recorded losses."""
    return criterion_outcome(record, criterion)[0]


def replay(record: "RunRecord", criterion: StoppingCriterion) -> "RunRecord":
    """Copy of ``record`` truncated to where ``criterion`` would have stopped."""
    chosen, stopped = criterion_outcome(record, criterion)
    return RunRecord(record.regime, record.seed, str(criterion), [dict(e) for e in record.epochs[:stopped]],
                     chosen, stopped, record.lambda_, None, list(record.notes), dict(record.meta))


# ---------------------------------------------------------------------------
# run records


def _clean(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    return v


@dataclass
class RunRecord:
    regime: str
    seed: int
    criterion: str = ""
    epochs: list[dict] = field(default_factory=list)
    chosen_epoch: int = 0
    stopped_epoch: int = 0
    lambda_: float = float("nan")
    target_test_acc: float | None = None
    notes: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"kind": "epoch", **{k: _clean(v) for k, v in e.items()}}, sort_keys=True)
                 for e in self.epochs]
        summary = {
            "kind": "summary", "regime": self.regime, "seed": self.seed, "criterion": self.criterion,
            "chosen_epoch": self.chosen_epoch, "stopped_epoch": self.stopped_epoch,
            "lambda": _clean(self.lambda_), "target_test_acc": _clean(self.target_test_acc),
            "notes": self.notes, "meta": self.meta,
        }
        lines.append(json.dumps(summary, sort_keys=True))
        return lines

    def dumps(self) -> str:
        return "".join(line + "\n" for line in self.to_lines())

    @classmethod
    def loads(cls, text: str) -> "RunRecord":
        epochs, summary = [], None
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("kind")
            if kind == "epoch":
                epochs.append({k: (float("nan") if v is None else v) for k, v in obj.items()})
            else:
                summary = obj
        if summary is None:
            raise ValueError("run record has no summary line")
        lam = summary["lambda"]
        return cls(summary["regime"], summary["seed"], summary["criterion"], epochs,
                   summary["chosen_epoch"], summary["stopped_epoch"],
                   float("nan") if lam is None else lam, summary["target_test_acc"],
                   summary["notes"], summary["meta"])


# ---------------------------------------------------------------------------
# batch schedules


@dataclass
class SubBatch:
    kind: str  # "clf", "mlm" or "dat"
    idx: np.ndarray
    weight: float = 1.0
    target_idx: np.ndarray | None = None


@dataclass
class MixedBatch:
    source: np.ndarray
    target: list[np.ndarray]
    lam: float

    def sub_batches(self) -> list[SubBatch]:
        """One sub-batch per piece, weighted so the weights average to 1 and the
        weighted mean equals lam * L_CLF + (1 - lam) * mean target L_MLM."""
        k = (1 if len(self.source) else 0) + len(self.target)
        out = []
        if len(self.source):
            out.append(SubBatch("clf", self.source, self.lam * k))
        for t in self.target:
            out.append(SubBatch("mlm", t, (1.0 - self.lam) * k / len(self.target)))
        return out


class _Cycle:
    """Endless reshuffled stream of indices over ``n`` items."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0
        self.passes = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
                self.passes += 1
            j = min(k, self.n - self.pos)
            out.append(self.perm[self.pos : self.pos + j])
            self.pos += j
            k -= j
        return np.concatenate(out)


def interleave(n_source: int, n_target: int, config: TrainConfig,
               rng: np.random.Generator) -> Iterator[MixedBatch]:
    """One epoch of mixed batches.

    The target stream defines the epoch; each batch takes one source
    sub-batch and ``target_subbatches`` target sub-batches, recycling the
    source stream (reshuffled) when it runs out.
    """
    if n_source <= 0 or n_target <= 0:
        raise ValueError("interleave needs non-empty source and target streams")
    target_perm = rng.permutation(n_target)
    source = _Cycle(n_source, rng)
    per_batch = config.target_subbatches * config.subbatch_size
    for start in range(0, n_target, per_batch):
        chunk = target_perm[start : start + per_batch]
        targets = [chunk[i : i + config.subbatch_size] for i in range(0, len(chunk), config.subbatch_size)]
        src = source.take(config.source_subbatch)
        yield MixedBatch(src, targets, compute_lambda(len(src), len(chunk)))


def source_recycles(n_source: int, n_target: int, config: TrainConfig, seed: int = 0) -> int:
    """Number of times the source stream wraps during one interleaved epoch."""
    per_batch = config.target_subbatches * config.subbatch_size
    n_batches = -(-n_target // per_batch)
    return max(0, (n_batches * config.source_subbatch - 1) // n_source)


# ---------------------------------------------------------------------------
# the shared loop


EpochHook = Callable[[int, EncoderParams], None]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("source", "target", "mask", "val_mask", "dat_target")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


class _Trainer:
    def __init__(self, params: EncoderParams, splits: EncodedSplits, config: TrainConfig,
                 regime: str, groups: tuple[str, ...]):
        self.params = params.copy()
        self.cfg = params.config
        self.splits = splits
        self.config = config
        self.regime = regime
        self.trainable = params.names(*groups)
        self.opt = AdamW(config.learning_rate, config.weight_decay)
        self.rng = _streams(config.seed)
        self.acc: dict[str, np.ndarray] | None = None
        self.count = 0
        self.steps = 0
        self.losses: list[float] = []
        self.clf_losses: list[float] = []

    def leaves(self) -> dict[str, Tensor]:
        trainable = set(self.trainable)
        return {k: Tensor(v, requires_grad=k in trainable) for k, v in self.params.arrays.items()}

    def consume(self, ds: EncodedSet, idx: np.ndarray):
        b = ds.batch(idx)
        self.splits.consumed.update(b.example_ids)
        return b

    def source_batch(self, idx: np.ndarray):
        b = self.consume(self.splits.source_train, idx)
        # only target text is ever masked
        if (b.ids == MASK_ID).any():
            raise RuntimeError("masked token in a source batch")
        return b

    def accumulate(self, loss: Tensor, p: dict[str, Tensor], weight: float = 1.0,
                   clf: Tensor | None = None):
        """Add one sub-batch's gradients; ``clf`` is the classification part of ``loss``, if any."""
        if clf is not None:
            self.clf_losses.append(float(clf.data))
        if weight != 1.0:
            loss = loss * weight
        grads = ad.gradients(loss, {k: p[k] for k in self.trainable})
        if self.acc is None:
            self.acc = grads
        else:
            for k, g in grads.items():
                self.acc[k] = self.acc[k] + g
        self.count += 1
        self.losses.append(float(loss.data))

    def maybe_step(self, force: bool = False):
        if self.count and (force or self.count >= self.config.accumulate_every):
            scale = 1.0 / self.count
            self.opt.step(self.params.arrays, {k: g * scale for k, g in self.acc.items()})
            self.acc, self.count = None, 0
            self.steps += 1

    # -- losses on one sub-batch

    def clf_loss(self, p, idx) -> Tensor:
        b = self.source_batch(idx)
        _, cls = encode_sequence(p, self.cfg, b.ids, b.attention_mask)
        return ad.cross_entropy(clf_logits(p, cls), b.labels)

    def mlm_loss(self, p, idx) -> Tensor:
        b = self.consume(self.splits.target_train, idx)
        ids, labels = mask_tokens(b.ids, b.attention_mask, self.cfg.vocab_size,
                                  self.config.mask_rate, self.rng["mask"])
        hidden, _ = encode_sequence(p, self.cfg, ids, b.attention_mask)
        return mlm_loss(p, self.cfg, hidden, labels)

    # -- validation

    def val_clf(self) -> tuple[float, float]:
        ds = self.splits.source_val
        if not len(ds):
            return math.nan, math.nan
        p = {k: Tensor(v) for k, v in self.params.arrays.items()}
        total, correct = 0.0, 0
        for s in range(0, len(ds), 64):
            b = ds.batch(np.arange(s, min(s + 64, len(ds))))
            _, cls = encode_sequence(p, self.cfg, b.ids, b.attention_mask)
            logits = clf_logits(p, cls)
            total += float(ad.cross_entropy(logits, b.labels).data) * len(b)
            correct += int((logits.data.argmax(axis=1) == b.labels).sum())
        return total / len(ds), correct / len(ds)

    def val_mlm(self) -> float:
        ds = self.splits.target_val
        if not len(ds):
            return math.nan
        if not hasattr(self, "_val_masks"):
            # one fixed corruption so epochs are comparable
            rng = self.rng["val_mask"]
            self._val_masks = [mask_tokens(ds.ids[s : s + 64], ds.attention_mask[s : s + 64],
                                           self.cfg.vocab_size, self.config.mask_rate, rng)
                               for s in range(0, len(ds), 64)]
        p = {k: Tensor(v) for k, v in self.params.arrays.items()}
        total, count = 0.0, 0
        for j, (ids, labels) in enumerate(self._val_masks):
            mask = ds.attention_mask[j * 64 : j * 64 + 64]
            w = int(mask.sum(axis=1).max())
            n = int((labels[:, :w] != ad.IGNORE_INDEX).sum())
            if not n:
                continue
            hidden, _ = encode_sequence(p, self.cfg, ids[:, :w], mask[:, :w])
            total += float(mlm_loss(p, self.cfg, hidden, labels[:, :w]).data) * n
            count += n
        return total / count if count else math.nan

    def val_domain(self) -> tuple[float, float]:
        """(domain loss, balanced domain accuracy) on the validation sets.

        Accuracy is the mean of the per-domain accuracies, so a head that
        predicts one domain for everything scores exactly 0.5 however
        unbalanced the two validation sets are.
        """
        p = {k: Tensor(v) for k, v in self.params.arrays.items()}
        total, n = 0.0, 0
        accs = []
        for ds, dom in ((self.splits.source_val, 0), (self.splits.target_val, 1)):
            correct = 0
            for s in range(0, len(ds), 64):
                b = ds.batch(np.arange(s, min(s + 64, len(ds))))
                _, cls = encode_sequence(p, self.cfg, b.ids, b.attention_mask)
                logits = domain_logits(p, cls, 0.0)
                y = np.full(len(b), dom)
                total += float(ad.cross_entropy(logits, y).data) * len(b)
                correct += int((logits.data.argmax(axis=1) == y).sum())
                n += len(b)
            if len(ds):
                accs.append(correct / len(ds))
        return (total / n, float(np.mean(accs))) if n else (math.nan, math.nan)

    # -- driver

    def fit(self, run_epoch: Callable[[int], None], validate: Callable[[], dict],
            criterion: StoppingCriterion, record: RunRecord,
            epoch_hook: EpochHook | None = None) -> tuple[EncoderParams, RunRecord]:
        max_epochs = criterion.epochs if isinstance(criterion, FixedEpochs) else self.config.epochs
        stopper = None if isinstance(criterion, FixedEpochs) else EarlyStopper(criterion.patience)
        best = self.params.copy()
        self.splits.lock()
        try:
            for epoch in range(1, max_epochs + 1):
                self.losses, self.clf_losses = [], []
                run_epoch(epoch)
                self.maybe_step(force=True)
                row = {"epoch": epoch, "train_loss": float(np.mean(self.losses)) if self.losses else math.nan,
                       "steps": self.steps}
                if self.clf_losses:
                    row["train_clf"] = float(np.mean(self.clf_losses))
                row.update(validate())
                record.epochs.append(row)
                record.stopped_epoch = epoch
                log.debug("%s seed=%d epoch %d: %s", self.regime, self.config.seed, epoch, row)
                if epoch_hook:
                    epoch_hook(epoch, self.params)
                if stopper is not None:
                    value = row.get(criterion.tracks, math.nan)
                    if value is None or math.isnan(value):
                        raise ValueError(f"{criterion} needs {criterion.tracks!r}, "
                                         f"which the {self.regime} regime does not track")
                    improved, stop = stopper.update(epoch, value)
                    if improved:
                        best = self.params.copy()
                    if stop:
                        break
        finally:
            self.splits.unlock()
        if stopper is None:
            record.chosen_epoch = record.stopped_epoch
            return self.params, record
        record.chosen_epoch = stopper.best_epoch
        return (best if record.epochs else self.params), record


def _record(regime: str, config: TrainConfig, criterion, lam=math.nan) -> RunRecord:
    return RunRecord(regime, config.seed, str(criterion), lambda_=lam,
                     meta={"train_config": config.to_dict()})


# ---------------------------------------------------------------------------
# regimes


def train_source_only(params: EncoderParams, splits: EncodedSplits, config: TrainConfig,
                      criterion: StoppingCriterion | None = None, *, regime: str = "SO",
                      epoch_hook: EpochHook | None = None) -> tuple[EncoderParams, RunRecord]:
    """Fine-tune encoder + classifier on labeled source data only."""
    if not len(splits.source_train):
        raise ValueError("source-only training needs labeled source data")
    criterion = criterion or MinSourceLoss(config.patience)
    t = _Trainer(params, splits, config, regime, ("encoder", "clf"))

    def run_epoch(epoch):
        perm = t.rng["source"].permutation(len(splits.source_train))
        n = config.source_subbatch
        for s in range(0, len(perm), n):
            p = t.leaves()
            loss = t.clf_loss(p, perm[s : s + n])
            t.accumulate(loss, p, clf=loss)
            t.maybe_step()

    def validate():
        clf, acc = t.val_clf()
        return {"clf_val": clf, "source_val_acc": acc, "mlm_val": math.nan, "mixed_val": math.nan}

    return t.fit(run_epoch, validate, criterion, _record(regime, config, criterion, 1.0),
                 epoch_hook=epoch_hook)


def train_dpt(params: EncoderParams, splits: EncodedSplits,
              config: TrainConfig) -> tuple[EncoderParams, RunRecord]:
    """Continue MLM pretraining on unlabeled target data (no classification loss)."""
    criterion = FixedEpochs(config.dpt_epochs)
    record = _record("DPT", config, criterion, 0.0)
    if not len(splits.target_train):
        warnings.warn("no target data: domain pretraining leaves parameters unchanged",
                      NoTargetDataWarning, stacklevel=2)
        record.notes.append("no target data")
        return params.copy(), record
    t = _Trainer(params, splits, config, "DPT", ("encoder", "mlm"))

    def run_epoch(epoch):
        perm = t.rng["target"].permutation(len(splits.target_train))
        for s in range(0, len(perm), config.dpt_batch):
            p = t.leaves()
            t.accumulate(t.mlm_loss(p, perm[s : s + config.dpt_batch]), p)
            t.maybe_step(force=True)

    def validate():
        return {"mlm_val": t.val_mlm(), "clf_val": math.nan, "mixed_val": math.nan}

    return t.fit(run_epoch, validate, criterion, record)


def train_dat(params: EncoderParams, splits: EncodedSplits, config: TrainConfig,
              criterion: StoppingCriterion | None = None, *,
              flip_domain_labels: bool = False,
              epoch_hook: EpochHook | None = None) -> tuple[EncoderParams, RunRecord]:
    """Source classification plus a domain classifier trained through a gradient-reversal gate.

    Each source sub-batch is paired with an equally sized target sub-batch
    drawn from a separate stream, so with ``lambda_d = 0`` the encoder and
    classifier follow exactly the source-only trajectory.
    ``flip_domain_labels`` trains the domain head on swapped labels; it exists
    to exercise the label-flip probe.
    """
    if not len(splits.target_train):
        warnings.warn("no target data: DAT reduces to source-only training",
                      NoTargetDataWarning, stacklevel=2)
        return train_source_only(params, splits, config, criterion, epoch_hook=epoch_hook)
    criterion = criterion or FixedEpochs(config.epochs)
    t = _Trainer(params, splits, config, "DAT", ("encoder", "clf", "dom"))
    target = _Cycle(len(splits.target_train), t.rng["dat_target"])
    src_dom, tgt_dom = (1, 0) if flip_domain_labels else (0, 1)

    def run_epoch(epoch):
        perm = t.rng["source"].permutation(len(splits.source_train))
        n = config.source_subbatch
        for s in range(0, len(perm), n):
            p = t.leaves()
            idx = perm[s : s + n]
            b = t.source_batch(idx)
            _, cls_s = encode_sequence(p, t.cfg, b.ids, b.attention_mask)
            loss = ad.cross_entropy(clf_logits(p, cls_s), b.labels)
            tb = t.consume(splits.target_train, target.take(len(idx)))
            _, cls_t = encode_sequence(p, t.cfg, tb.ids, tb.attention_mask)
            ns, nt = len(b), len(tb)
            adv_s = ad.cross_entropy(domain_logits(p, cls_s, config.lambda_d), np.full(ns, src_dom))
            adv_t = ad.cross_entropy(domain_logits(p, cls_t, config.lambda_d), np.full(nt, tgt_dom))
            adv = adv_s * (ns / (ns + nt)) + adv_t * (nt / (ns + nt))
            t.accumulate(loss + adv, p, clf=loss)
            t.maybe_step()

    def validate():
        clf, acc = t.val_clf()
        adv, dom_acc = t.val_domain()
        return {"clf_val": clf, "source_val_acc": acc, "adv_val": adv, "domain_acc": dom_acc,
                "mlm_val": math.nan, "mixed_val": math.nan}

    params, record = t.fit(run_epoch, validate, criterion, _record("DAT", config, criterion),
                           epoch_hook=epoch_hook)
    # judged on the finished run so an untrained head hovering near chance early on is not flagged
    recent = [e["domain_acc"] for e in record.epochs[-config.patience:]]
    if len(recent) == config.patience and all(a < 0.5 for a in recent):
        msg = (f"balanced domain-head accuracy below chance for the last {config.patience} epochs "
               f"({', '.join(f'{a:.3f}' for a in recent)}): domain labels flipped")
        warnings.warn(msg, DomainLabelFlipWarning, stacklevel=2)
        record.notes.append("label_flip: " + msg)
    return params, record


def train_udalm(params: EncoderParams, splits: EncodedSplits, config: TrainConfig,
                criterion: StoppingCriterion | None = None, *,
                epoch_hook: EpochHook | None = None) -> tuple[EncoderParams, RunRecord]:
    """Mixed classification + MLM fine-tuning over interleaved source/target batches."""
    criterion = criterion or MinMixedLoss(config.patience)
    if not len(splits.target_train):
        warnings.warn("no target data: UDALM reduces to source-only training (lambda = 1)",
                      NoTargetDataWarning, stacklevel=2)
        if isinstance(criterion, MinMixedLoss):
            criterion = MinSourceLoss(criterion.patience)
        return train_source_only(params, splits, config, criterion, epoch_hook=epoch_hook)
    if not len(splits.source_train):
        raise ValueError("UDALM needs labeled source data")
    lam = compute_lambda(config.source_subbatch, config.target_subbatches * config.subbatch_size)
    t = _Trainer(params, splits, config, "UDALM", ("encoder", "clf", "mlm"))

    def run_epoch(epoch):
        for batch in interleave(len(splits.source_train), len(splits.target_train), config, t.rng["source"]):
            for sb in batch.sub_batches():
                p = t.leaves()
                if sb.kind == "clf":
                    loss = t.clf_loss(p, sb.idx)
                else:
                    loss = t.mlm_loss(p, sb.idx)
                t.accumulate(loss, p, sb.weight)
                t.maybe_step()

    def validate():
        clf, acc = t.val_clf()
        mlm = t.val_mlm()
        mixed = mixed_loss(clf, mlm, lam) if not (math.isnan(clf) or math.isnan(mlm)) else math.nan
        return {"clf_val": clf, "source_val_acc": acc, "mlm_val": mlm, "mixed_val": mixed}

    return t.fit(run_epoch, validate, criterion, _record("UDALM", config, criterion, lam),
                 epoch_hook=epoch_hook)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    per_class: dict[int, tuple[int, int]]
    predictions: np.ndarray


def predict(params: EncoderParams, ds: EncodedSet) -> np.ndarray:
    p = {k: Tensor(v) for k, v in params.arrays.items()}
    out = []
    for s in range(0, len(ds), 64):
        b = ds.batch(np.arange(s, min(s + 64, len(ds))))
        _, cls = encode_sequence(p, params.config, b.ids, b.attention_mask)
        out.append(clf_logits(p, cls).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params: EncoderParams, dataset: EncodedSet) -> EvalResult:
    if not len(dataset):
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.labels is None:
        raise ValueError("evaluation needs labeled data")
    pred = predict(params, dataset)
    y = dataset.labels
    per_class = {int(c): (int(((pred == c) & (y == c)).sum()), int((y == c).sum())) for c in np.unique(y)}
    correct = int((pred == y).sum())
    return EvalResult(correct / len(y), correct, len(y), per_class, pred)


# ---------------------------------------------------------------------------
# full pipelines


def default_criterion(regime: str, config: TrainConfig) -> StoppingCriterion:
    if regime == "UDALM":
        return MinMixedLoss(config.patience)
    if regime == "DAT":
        return FixedEpochs(config.epochs)
    return MinSourceLoss(config.patience)


def train_warmup(params: EncoderParams, splits: EncodedSplits, general: EncodedSet, config: TrainConfig,
                 epochs: int, val_frac: float = 0.1) -> tuple[EncoderParams, RunRecord]:
    """MLM on a general unlabeled corpus, standing in for general-domain pretraining.

    Runs the domain-pretraining loop with ``general`` in place of the target
    stream; the last ``val_frac`` of it is held out for the MLM validation loss.
    """
    n_val = int(round(val_frac * len(general)))
    idx = np.arange(len(general))
    stage = splits.with_target(general.subset(idx[: len(general) - n_val]),
                               general.subset(idx[len(general) - n_val:]))
    params, record = train_dpt(params, stage, replace(config, dpt_epochs=epochs))
    record.regime = "warmup"
    return params, record


def run_regime(regime: str, base: EncoderParams, splits: EncodedSplits, config: TrainConfig,
               criterion: StoppingCriterion | None = None,
               dpt: tuple[EncoderParams, RunRecord] | None = None, *,
               evaluate_test: bool = True,
               epoch_hook: EpochHook | None = None) -> tuple[EncoderParams, RunRecord]:
    """Train one regime from ``base`` (SO) or from the domain-pretrained checkpoint (others).

    With ``evaluate_test`` the returned record has ``target_test_acc`` filled
    in, evaluated after training has finished.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    # without target data every regime is source-only training, stopping included
    criterion = criterion or default_criterion(regime if len(splits.target_train) else "SO", config)
    if regime == "SO":
        params, record = train_source_only(base, splits, config, criterion, epoch_hook=epoch_hook)
    else:
        if dpt is None:
            dpt = train_dpt(base, splits, config)
        start, dpt_record = dpt
        if regime == "DPT":
            params, record = train_source_only(start, splits, config, criterion, regime="DPT",
                                               epoch_hook=epoch_hook)
        elif regime == "DAT":
            params, record = train_dat(start, splits, config, criterion, epoch_hook=epoch_hook)
        else:
            params, record = train_udalm(start, splits, config, criterion, epoch_hook=epoch_hook)
        record.regime = regime
        record.meta["dpt_epochs"] = dpt_record.epochs
    if evaluate_test:
        record.target_test_acc = evaluate(params, splits.target_test).accuracy
    return params, record
