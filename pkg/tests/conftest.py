from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from udalm.corpus import DomainShiftSpec, EncodedSplits, generate_synthetic_pair
from udalm.encoder import EncoderConfig
from udalm.tokenizer import build_vocab

ROOT = Path(__file__).resolve().parents[1]
QUICK_INI = ROOT / "configs" / "quick.ini"


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def sampled_check(analytic: np.ndarray, f, x: np.ndarray, rng: np.random.Generator,
                  count: int = 16, eps: float = 1e-5, floor: float = 1e-7) -> float:
    """Relative error of ``analytic`` against central differences at ``count`` random entries
    of ``x``; the scale is the larger of both gradients' max magnitude (over all of ``analytic``)."""
    flat = x.reshape(-1)
    picks = rng.choice(flat.size, size=min(count, flat.size), replace=False)
    num = np.empty(len(picks))
    for j, i in enumerate(picks):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        num[j] = (hi - lo) / (2 * eps)
    got = analytic.reshape(-1)[picks]
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(num)), floor)
    return float(np.max(np.abs(got - num)) / scale)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs difference over the larger max magnitude; ``floor`` keeps exactly-zero
    gradients (where only finite-difference noise remains) from dividing by ~0."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture(scope="session")
def small_splits():
    """A small synthetic corpus and its tokenized view (target test locked by trainers)."""
    spec = DomainShiftSpec()
    splits = generate_synthetic_pair(spec, 60, 160, 60, seed=3)
    texts = [e.text for part in (splits.source_train, splits.source_val, splits.target_train,
                                 splits.target_val) for e in part]
    vocab = build_vocab(texts, 400)
    return splits, vocab


@pytest.fixture
def encoded(small_splits):
    splits, vocab = small_splits
    return EncodedSplits(splits, vocab, 32)


@pytest.fixture
def tiny_config(small_splits):
    _, vocab = small_splits
    return EncoderConfig(vocab_size=vocab.size, layers=1, hidden=16, heads=2, ff_dim=32,
                         max_len=32, domain_hidden=8)


# one line per acceptance criterion, filled by test_acceptance.py and printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
