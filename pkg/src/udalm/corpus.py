"""Datasets shaped as labeled source / unlabeled target / held-out target test.

Two ways in: a synthetic generator with a tunable domain-shift knob, and a
TSV reader for real data (``label<TAB>domain<TAB>text``).
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .tokenizer import Vocab, collate, encode

SOURCE, TARGET = "source", "target"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class QuarantineError(RuntimeError):
    """Target test data was requested while a trainer was running."""


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: int | None
    domain: str
    uid: str = ""


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class DomainShiftSpec:
    """Knobs of the synthetic two-domain sentiment generator.

    ``shift`` is the fraction of the polarity and topic lexicons that is
    exclusive to each domain; the remainder is shared.
    """

    shift: float = 0.8
    polarity_words: int = 12
    topic_words: int = 20
    filler_words: int = 30
    min_words: int = 8
    max_words: int = 12
    polarity_min: int = 3
    polarity_max: int = 7
    coherence: float = 0.9
    topic_rate: float = 0.15
    class_balance: float = 0.5
    noise_rate: float = 0.05
    lexicon_seed: int = 7

    def __post_init__(self):
        if not 0.0 <= self.shift <= 1.0:
            raise ValueError(f"shift must be in [0, 1], got {self.shift}")
        if not 0.0 <= self.noise_rate <= 0.5:
            raise ValueError(f"noise_rate must be in [0, 0.5], got {self.noise_rate}")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must be in (0, 1)")
        if not 0.5 <= self.coherence <= 1.0:
            raise ValueError("coherence must be in [0.5, 1]")
        if self.polarity_min < 1 or self.polarity_max < self.polarity_min:
            raise ValueError("need 1 <= polarity_min <= polarity_max")
        if self.max_words < self.min_words or self.min_words < self.polarity_max:
            raise ValueError("need polarity_max <= min_words <= max_words")


_ONSETS = "b c d f g h j k l m n p r s t v w z br cr dr fl gr kl pl pr sk st tr".split()
_VOWELS = "a e i o u ai ea io ou".split()


def _pseudo_words(count: int, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        n = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass
class Lexicon:
    filler: list[str]
    topic: dict[str, list[str]]
    polarity: dict[tuple[str, int], list[str]]

    def exclusive_polarity(self, domain: str, label: int) -> list[str]:
        other = TARGET if domain == SOURCE else SOURCE
        shared = set(self.polarity[(other, label)])
        return [w for w in self.polarity[(domain, label)] if w not in shared]


def build_lexicon(spec: DomainShiftSpec) -> Lexicon:
    rng = np.random.default_rng(spec.lexicon_seed)
    P, T = spec.polarity_words, spec.topic_words
    p_ex = int(round(spec.shift * P))
    t_ex = int(round(spec.shift * T))
    total = spec.filler_words + (T + t_ex) + 2 * (P + p_ex)
    pool = iter(_pseudo_words(total, rng))
    take = lambda n: list(itertools.islice(pool, n))  # noqa: E731

    filler = take(spec.filler_words)
    shared_topic = take(T - t_ex)
    topic = {d: shared_topic + take(t_ex) for d in (SOURCE, TARGET)}
    polarity = {}
    for label in (0, 1):
        shared = take(P - p_ex)
        for d in (SOURCE, TARGET):
            polarity[(d, label)] = shared + take(p_ex)
    return Lexicon(filler, topic, polarity)


def _sentence(spec: DomainShiftSpec, lex: Lexicon, domain: str, rng: np.random.Generator,
              polarity_pool: dict[int, list[str]] | None = None) -> tuple[str, int]:
    n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
    odd = [k for k in range(spec.polarity_min, spec.polarity_max + 1) if k % 2]
    k = int(rng.choice(odd)) if odd else spec.polarity_min
    sentiment = int(rng.random() < spec.class_balance)
    polar = []
    votes = 0
    pools = polarity_pool or {c: lex.polarity[(domain, c)] for c in (0, 1)}
    for _ in range(k):
        c = sentiment if rng.random() < spec.coherence else 1 - sentiment
        votes += 1 if c == 1 else -1
        polar.append(pools[c][rng.integers(len(pools[c]))])
    label = int(votes > 0) if votes else sentiment
    if rng.random() < spec.noise_rate:
        label = 1 - label
    other = []
    for _ in range(n_words - k):
        if rng.random() < spec.topic_rate:
            pool = lex.topic[domain]
        else:
            pool = lex.filler
        other.append(pool[rng.integers(len(pool))])
    words = other + polar
    order = rng.permutation(len(words))
    return " ".join(words[i] for i in order), label


def generate_examples(spec: DomainShiftSpec, domain: str, count: int, seed: int,
                      prefix: str = "", exclusive_only: bool = False) -> list[LabeledExample]:
    """Labeled sentences from one domain.

    With ``exclusive_only`` every polarity word is drawn from the
    domain-exclusive part of the lexicon.
    """
    lex = build_lexicon(spec)
    rng = np.random.default_rng(seed)
    pools = None
    if exclusive_only:
        pools = {c: lex.exclusive_polarity(domain, c) for c in (0, 1)}
        if not all(pools.values()):
            raise ValueError("no domain-exclusive polarity words at this shift")
    out = []
    for i in range(count):
        text, label = _sentence(spec, lex, domain, rng, pools)
        out.append(LabeledExample(text, label, domain, f"{prefix or domain}:{i}"))
    return out


def generate_general_corpus(spec: DomainShiftSpec, count: int, seed: int) -> list[LabeledExample]:
    """Unlabeled text for the MLM warm-up that stands in for general pretraining.

    Sentences follow the source-domain lexicon, so the warm-up gives meaning
    to source words that the small labeled set alone would barely train.
    """
    return [replace(e, label=None, domain="general")
            for e in generate_examples(spec, SOURCE, count, seed, "gen")]


@dataclass
class SplitSet:
    source_train: list[LabeledExample]
    source_val: list[LabeledExample]
    target_train: list[LabeledExample]
    target_val: list[LabeledExample]
    target_test: list[LabeledExample]
    meta: dict = field(default_factory=dict)

    def training_uids(self) -> set[str]:
        return {e.uid for part in (self.source_train, self.source_val, self.target_train, self.target_val)
                for e in part}

    def counts(self) -> dict[str, int]:
        return {k: len(getattr(self, k)) for k in
                ("source_train", "source_val", "target_train", "target_val", "target_test")}


def generate_synthetic_pair(spec: DomainShiftSpec, n_labeled_source: int, n_unlabeled_target: int,
                            n_target_test: int, seed: int, val_frac: float = 0.2) -> SplitSet:
    if min(n_labeled_source, n_unlabeled_target, n_target_test) <= 0:
        raise ValueError("all counts must be positive")
    ss = np.random.SeedSequence(seed).spawn(4)
    seeds = [int(s.generate_state(1)[0]) for s in ss]
    source = generate_examples(spec, SOURCE, n_labeled_source, seeds[0], "src")
    target_u = [replace(e, label=None)
                for e in generate_examples(spec, TARGET, n_unlabeled_target, seeds[1], "tgt_u")]
    target_l = generate_examples(spec, TARGET, n_target_test, seeds[2], "tgt_test")
    splits = make_splits(source, target_u, target_l, val_frac=val_frac, seed=seeds[3])
    splits.meta.update({"generator": asdict(spec), "seed": seed})
    return splits


# ---------------------------------------------------------------------------
# TSV ingestion


def load_records(path) -> list[LabeledExample]:
    """Read ``label<TAB>domain<TAB>text`` lines; label is 0, 1 or '-' (absent)."""
    path = Path(path)
    raw = path.read_bytes().decode("utf-8")
    out = []
    for lineno, line in enumerate(raw.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 TAB-separated fields, got {len(parts)}")
        label_s, domain, text = parts
        if label_s == "-":
            label = None
        elif label_s in ("0", "1"):
            label = int(label_s)
        else:
            raise DataError(f"{path}:{lineno}: label must be 0, 1 or '-', got {label_s!r}")
        if not domain:
            raise DataError(f"{path}:{lineno}: empty domain")
        out.append(LabeledExample(text, label, domain, f"{path.stem}:{lineno}"))
    return out


def write_records(examples: Sequence[LabeledExample], path) -> None:
    lines = []
    for e in examples:
        label = "-" if e.label is None else str(e.label)
        lines.append(f"{label}\t{e.domain}\t{e.text}\n")
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# splitting


def make_splits(source: Sequence[LabeledExample], target_unlabeled: Sequence[LabeledExample],
                target_labeled: Sequence[LabeledExample], val_frac: float = 0.2,
                seed: int = 0) -> SplitSet:
    if not 0.0 < val_frac < 1.0:
        raise ValueError(f"val_frac must be in (0, 1), got {val_frac}")
    uids = [e.uid for e in itertools.chain(source, target_unlabeled, target_labeled) if e.uid]
    if len(uids) != len(set(uids)):
        raise DataError("source, unlabeled target and labeled target must be disjoint")
    if any(e.label is None for e in source):
        raise DataError("source examples must be labeled")
    if any(e.label is None for e in target_labeled):
        raise DataError("target test examples must be labeled")
    rng = np.random.default_rng(seed)

    val_idx: set[int] = set()
    for label in sorted({e.label for e in source}):
        idx = [i for i, e in enumerate(source) if e.label == label]
        perm = rng.permutation(len(idx))
        val_idx.update(idx[j] for j in perm[: int(round(val_frac * len(idx)))])
    s_train = [e for i, e in enumerate(source) if i not in val_idx]
    s_val = [e for i, e in enumerate(source) if i in val_idx]

    perm = rng.permutation(len(target_unlabeled))
    t_val_idx = set(perm[: int(round(val_frac * len(target_unlabeled)))].tolist())
    t_train = [replace(e, label=None) for i, e in enumerate(target_unlabeled) if i not in t_val_idx]
    t_val = [replace(e, label=None) for i, e in enumerate(target_unlabeled) if i in t_val_idx]
    return SplitSet(s_train, s_val, t_train, t_val, list(target_labeled),
                    {"val_frac": val_frac, "split_seed": seed})


def subsample_target(splits: SplitSet, size: int, seed: int) -> SplitSet:
    """Keep ``size`` unlabeled target examples, chosen as a prefix of one seeded
    permutation so that larger sizes contain smaller ones. Chosen examples stay
    in whichever of train/val they were in."""
    pool = splits.target_train + splits.target_val
    if size < 0 or size > len(pool):
        raise ValueError(f"size {size} outside [0, {len(pool)}]")
    if size == len(pool):
        return splits
    perm = np.random.default_rng(seed).permutation(len(pool))
    keep = set(perm[:size].tolist())
    n_train = len(splits.target_train)
    train = [e for i, e in enumerate(splits.target_train) if i in keep]
    val = [e for i, e in enumerate(splits.target_val) if i + n_train in keep]
    meta = dict(splits.meta, target_subsample=size, subsample_seed=seed)
    return SplitSet(splits.source_train, splits.source_val, train, val, splits.target_test, meta)


# ---------------------------------------------------------------------------
# encoded view consumed by trainers


@dataclass
class EncodedSet:
    ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray | None
    uids: list[str]

    def __len__(self) -> int:
        return len(self.uids)

    def subset(self, idx) -> "EncodedSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedSet(self.ids[idx], self.attention_mask[idx],
                          None if self.labels is None else self.labels[idx],
                          [self.uids[i] for i in idx])

    def batch(self, idx, trim: bool = True):
        from .tokenizer import Batch
        idx = np.asarray(idx, dtype=np.int64)
        ids, mask = self.ids[idx], self.attention_mask[idx]
        if trim and len(idx):
            w = int(mask.sum(axis=1).max())
            ids, mask = ids[:, :w], mask[:, :w]
        return Batch(ids, mask, None, None if self.labels is None else self.labels[idx],
                     [self.uids[i] for i in idx])


def encode_examples(examples: Sequence[LabeledExample], vocab: Vocab, max_len: int) -> EncodedSet:
    seqs = [encode(e.text, vocab, max_len) for e in examples]
    if seqs:
        b = collate(seqs, trim=False)
        ids, mask = b.ids, b.attention_mask
    else:
        ids = np.zeros((0, max_len), dtype=np.int64)
        mask = np.zeros((0, max_len), dtype=np.int64)
    labels = None
    if examples and all(e.label is not None for e in examples):
        labels = np.array([e.label for e in examples], dtype=np.int64)
    return EncodedSet(ids, mask, labels, [e.uid for e in examples])


class EncodedSplits:
    """Tokenized splits. ``target_test`` is locked while training runs."""

    def __init__(self, splits: SplitSet, vocab: Vocab, max_len: int):
        self.vocab = vocab
        self.max_len = max_len
        self.meta = dict(splits.meta)
        self.source_train = encode_examples(splits.source_train, vocab, max_len)
        self.source_val = encode_examples(splits.source_val, vocab, max_len)
        self.target_train = encode_examples(splits.target_train, vocab, max_len)
        self.target_val = encode_examples(splits.target_val, vocab, max_len)
        self._target_test = encode_examples(splits.target_test, vocab, max_len)
        self._locks = 0
        self.consumed: set[str] = set()

    @property
    def target_test(self) -> EncodedSet:
        if self._locks:
            raise QuarantineError("target_test is quarantined while training is in progress")
        return self._target_test

    def lock(self):
        self._locks += 1

    def unlock(self):
        self._locks -= 1

    def with_target(self, train: EncodedSet, val: EncodedSet) -> "EncodedSplits":
        clone = object.__new__(EncodedSplits)
        clone.__dict__.update(self.__dict__)
        clone.target_train, clone.target_val = train, val
        clone._locks = 0
        clone.consumed = set()
        return clone
