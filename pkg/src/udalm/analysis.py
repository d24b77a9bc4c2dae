"""Domain-divergence diagnostics, error-bound reporting, 2-D projections and
the target-data sample-efficiency sweep."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.manifold import TSNE
from sklearn.svm import LinearSVC

from .corpus import EncodedSplits, SplitSet, subsample_target
from .encoder import EncoderParams, cls_features
from .trainers import TrainConfig, evaluate

C_NOTE = ("ideal joint hypothesis error C is not observable without target labels "
          "and is omitted; bound_value = epsilon_S + d_A / 2")
HELD_OUT_NOTE = "epsilon_D is the error on a held-out 50% split of the domain-classification data"


@dataclass
class FeatureSet:
    vectors: np.ndarray
    domains: list[str]
    labels: list[int | None] | None = None
    provenance: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.domains):
            raise ValueError("vectors must be (N, dim) with one domain tag per row")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def of(self, domain: str) -> np.ndarray:
        return self.vectors[[d == domain for d in self.domains]]


def a_distance(eps_d: float) -> float:
    """Proxy A-distance 2(1 - 2 eps_D), clamped to [0, 2]."""
    return min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * eps_d)))


@dataclass
class ADistance:
    d_a: float
    eps_d: float
    n_train: int
    n_test: int
    convention: str = HELD_OUT_NOTE


def proxy_a_distance(features_source: np.ndarray, features_target: np.ndarray,
                     train_count_per_domain: int = 500, seed: int = 0, C: float = 1.0) -> ADistance:
    """Train a linear hinge-loss SVM to tell the domains apart and convert its
    held-out error into a proxy A-distance.

    Up to ``train_count_per_domain`` vectors are drawn from each domain (the
    same number from both), half of each used for fitting and half for the
    error estimate.
    """
    xs = np.asarray(features_source, dtype=np.float64)
    xt = np.asarray(features_target, dtype=np.float64)
    if xs.ndim != 2 or xt.ndim != 2 or xs.shape[1] != xt.shape[1]:
        raise ValueError("feature sets must be 2-D with equal dimensionality")
    n = min(train_count_per_domain, len(xs), len(xt))
    if n < 4:
        raise ValueError("need at least 4 vectors from each domain")
    rng = np.random.default_rng(seed)
    pick_s = rng.permutation(len(xs))[:n]
    pick_t = rng.permutation(len(xt))[:n]
    half = n // 2
    x_train = np.vstack([xs[pick_s[:half]], xt[pick_t[:half]]])
    y_train = np.r_[np.zeros(half), np.ones(half)]
    x_test = np.vstack([xs[pick_s[half:]], xt[pick_t[half:]]])
    y_test = np.r_[np.zeros(n - half), np.ones(n - half)]

    mu, sd = x_train.mean(axis=0), x_train.std(axis=0)
    sd[sd == 0] = 1.0
    clf = LinearSVC(C=C, loss="hinge", dual=True, max_iter=20000, random_state=seed)
    with warnings.catch_warnings():
        # near-identical domains converge slowly; the held-out error is still the estimate we want
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit((x_train - mu) / sd, y_train)
    err = float(np.mean(clf.predict((x_test - mu) / sd) != y_test))
    return ADistance(a_distance(err), err, len(y_train), len(y_test))


@dataclass
class BoundReport:
    epsilon_s: float
    d_a: float
    epsilon_t: float
    eps_d: float
    bound_value: float = field(init=False)
    c_note: str = C_NOTE

    def __post_init__(self):
        self.bound_value = self.epsilon_s + self.d_a / 2.0


def extract_features(params: EncoderParams, splits: EncodedSplits, provenance: str = "") -> FeatureSet:
    """CLS features of source validation and unlabeled target validation data."""
    fs = cls_features(params, splits.source_val.ids, splits.source_val.attention_mask)
    ft = cls_features(params, splits.target_val.ids, splits.target_val.attention_mask)
    labels = (list(splits.source_val.labels) if splits.source_val.labels is not None
              else [None] * len(fs)) + [None] * len(ft)
    return FeatureSet(np.vstack([fs, ft]), ["source"] * len(fs) + ["target"] * len(ft),
                      labels, provenance)


def bound_report(params: EncoderParams, splits: EncodedSplits, train_count_per_domain: int = 500,
                 seed: int = 0) -> BoundReport:
    eps_s = 1.0 - evaluate(params, splits.source_val).accuracy
    eps_t = 1.0 - evaluate(params, splits.target_test).accuracy
    feats = extract_features(params, splits)
    ad_ = proxy_a_distance(feats.of("source"), feats.of("target"), train_count_per_domain, seed)
    return BoundReport(eps_s, ad_.d_a, eps_t, ad_.eps_d)


def project_2d(features: FeatureSet, method: str = "pca", seed: int = 0,
               perplexity: float = 30.0) -> list[tuple[float, float, str, int | None]]:
    """Centered 2-D coordinates for each vector.

    PCA axes are oriented so that each axis' largest-magnitude loading is
    positive, which makes the output unique.
    """
    x = features.vectors
    if len(x) < 3:
        raise ValueError("need at least 3 vectors to project")
    if x.shape[1] < 2:
        raise ValueError("need feature dimension >= 2")
    if method == "pca":
        xc = x - x.mean(axis=0)
        _, _, vt = np.linalg.svd(xc, full_matrices=False)
        axes = vt[:2]
        for i in range(2):
            if axes[i, np.argmax(np.abs(axes[i]))] < 0:
                axes[i] = -axes[i]
        xy = xc @ axes.T
    elif method == "tsne":
        perp = min(perplexity, (len(x) - 1) / 3.0)
        xy = TSNE(n_components=2, perplexity=perp, random_state=seed, init="pca",
                  learning_rate="auto").fit_transform(x)
    else:
        raise ValueError(f"unknown projection method {method!r}")
    xy = xy - xy.mean(axis=0)
    labels = features.labels or [None] * len(x)
    return [(float(a), float(b), d, lab) for (a, b), d, lab in zip(xy, features.domains, labels)]


@dataclass
class SweepRow:
    size: int
    regime: str
    mean: float
    std: float
    accuracies: list[float]


def sample_efficiency_sweep(splits: SplitSet, sizes: Sequence[int], regimes: Sequence[str],
                            seeds: Sequence[int],
                            run: Callable[[str, SplitSet, int], float]) -> list[SweepRow]:
    """Target accuracy as a function of the amount of unlabeled target data.

    ``run(regime, subsampled_splits, seed)`` trains one regime and returns its
    target-test accuracy. For a given seed the subsets are nested across
    sizes. Standard deviations are population (ddof=0).
    """
    available = len(splits.target_train) + len(splits.target_val)
    for s in sizes:
        if s > available:
            raise ValueError(f"sweep size {s} exceeds the {available} unlabeled target examples")
    acc: dict[tuple[int, str], list[float]] = {}
    for seed in seeds:
        for size in sizes:
            sub = subsample_target(splits, size, seed)
            for regime in regimes:
                acc.setdefault((size, regime), []).append(run(regime, sub, seed))
    return [SweepRow(size, regime, float(np.mean(acc[(size, regime)])), float(np.std(acc[(size, regime)])),
                     acc[(size, regime)])
            for size in sizes for regime in regimes]
