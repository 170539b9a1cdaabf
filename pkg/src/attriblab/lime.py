"""Local surrogate explanations for tabular rows.

A neighbourhood is sampled around the explained row in an interpretable
representation (quartile-bin / category-match indicators by default, or
standardized numeric values when discretization is off), the model is
queried on the materialized raw rows, and a proximity-weighted ridge
regression on the top-K interpretable columns yields signed local weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset, FeatureMeta
from .models import PredictiveModel, as_code_matrix

_N_BINS = 4  # quartile discretization


@dataclass(frozen=True)
class NumericStats:
    cuts: tuple[float, ...]        # interior quantile edges (<= 3 after dedupe)
    bin_freq: tuple[float, ...]    # training mass per bin
    lo: float                      # observed min / max; close the terminal bins
    hi: float
    mean: float
    std: float

    @property
    def n_bins(self) -> int:
        return len(self.cuts) + 1

    def bin_bounds(self, b: int) -> tuple[float, float]:
        edges = (self.lo, *self.cuts, self.hi)
        return edges[b], edges[b + 1]


@dataclass(frozen=True)
class CategoricalStats:
    freq: tuple[float, ...]        # training frequency per vocabulary entry


@dataclass(frozen=True)
class TrainingStats:
    """Per-feature marginals estimated on training data only."""

    features: tuple[FeatureMeta, ...]
    numeric: dict[int, NumericStats]          # by feature index
    categorical: dict[int, CategoricalStats]  # by feature index
    source_fingerprint: str = ""

    def bin_index(self, j: int, values: np.ndarray) -> np.ndarray:
        st = self.numeric[j]
        return np.searchsorted(np.asarray(st.cuts), values, side="right")


def build_stats(train: Dataset) -> TrainingStats:
    numeric: dict[int, NumericStats] = {}
    categorical: dict[int, CategoricalStats] = {}
    for j, f in enumerate(train.features):
        col = train.X[:, j]
        if f.is_numeric:
            qs = np.quantile(col, np.linspace(0, 1, _N_BINS + 1)[1:-1])
            cuts = tuple(float(c) for c in np.unique(qs))
            idx = np.searchsorted(np.asarray(cuts), col, side="right")
            freq = np.bincount(idx, minlength=len(cuts) + 1).astype(float)
            freq /= freq.sum()
            numeric[j] = NumericStats(
                cuts=cuts,
                bin_freq=tuple(freq),
                lo=float(col.min()),
                hi=float(col.max()),
                mean=float(col.mean()),
                std=float(max(col.std(), 1e-12)),
            )
        else:
            counts = np.bincount(col.astype(int), minlength=len(f.categories)).astype(float)
            categorical[j] = CategoricalStats(tuple(counts / counts.sum()))
    return TrainingStats(tuple(train.features), numeric, categorical, train.fingerprint())


@dataclass(frozen=True)
class LimeConfig:
    n_samples: int = 5000
    kernel_width: Optional[float] = None   # None -> 0.75 * sqrt(M)
    top_k: int = 8
    ridge: float = 1e-3
    discretize: bool = True
    seed: int = 0

    def resolved_width(self, m: int) -> float:
        return self.kernel_width if self.kernel_width is not None else 0.75 * math.sqrt(m)


@dataclass
class Neighbourhood:
    interpretable: np.ndarray   # (n, M): indicators, or standardized values
    raw: np.ndarray             # (n, M) code matrix for the model
    weights: np.ndarray         # (n,) proximity kernel values


def sample_neighbourhood(row, stats: TrainingStats, cfg: LimeConfig,
                         model: Optional[PredictiveModel] = None) -> Neighbourhood:
    """Perturbation sample around `row`; sample 0 is the unperturbed row.

    Discretized path: each feature independently keeps the row's bin or
    category with probability 1/2, otherwise redraws from the training
    marginal (kept indicators are 1, and so are redraws that land back in
    the row's bin). Numeric draws materialize uniformly inside the drawn
    bin. Proximity weight is exp(-d^2 / width^2) with d the Hamming
    distance over indicators divided by sqrt(M).
    """
    if not stats.numeric and not stats.categorical:
        raise ValueError("empty training statistics")
    features = stats.features
    m = len(features)
    codes = _row_codes(row, features)
    n = int(cfg.n_samples)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))

    interp = np.empty((n, m))
    raw = np.tile(codes, (n, 1))
    mismatch = np.zeros((n, m))

    for j, f in enumerate(features):
        keep = rng.random(n) < 0.5
        keep[0] = True
        if f.is_numeric and cfg.discretize:
            st = stats.numeric[j]
            row_bin = int(stats.bin_index(j, codes[j : j + 1])[0])
            drawn = rng.choice(st.n_bins, size=n, p=st.bin_freq)
            u = rng.random(n)
            lo = np.array([st.bin_bounds(b)[0] for b in range(st.n_bins)])
            hi = np.array([st.bin_bounds(b)[1] for b in range(st.n_bins)])
            values = lo[drawn] + u * (hi[drawn] - lo[drawn])
            match = keep | (drawn == row_bin)
            raw[:, j] = np.where(keep, codes[j], values)
            interp[:, j] = match.astype(float)
            mismatch[:, j] = 1.0 - interp[:, j]
        elif f.is_numeric:
            st = stats.numeric[j]
            noise = rng.normal(0.0, 1.0, size=n)
            values = codes[j] + st.std * noise
            values[0] = codes[j]
            raw[:, j] = values
            interp[:, j] = (values - st.mean) / st.std
            mismatch[:, j] = (values - codes[j]) / st.std
        else:
            st = stats.categorical[j]
            drawn = rng.choice(len(st.freq), size=n, p=np.asarray(st.freq))
            match = keep | (drawn == int(codes[j]))
            raw[:, j] = np.where(keep, codes[j], drawn.astype(float))
            interp[:, j] = match.astype(float)
            mismatch[:, j] = 1.0 - interp[:, j]

    d = np.sqrt((mismatch ** 2).sum(axis=1)) / math.sqrt(m)
    width = cfg.resolved_width(m)
    weights = np.exp(-(d ** 2) / (width ** 2))
    return Neighbourhood(interp, raw, weights)


def _row_codes(row, features) -> np.ndarray:
    class _Shim:
        pass

    shim = _Shim()
    shim.features = features
    return as_code_matrix(shim, row)[0]


@dataclass
class LimeExplanation:
    feature_names: tuple[str, ...]     # the K selected features, |weight| desc
    weights: tuple[float, ...]
    intercept: float
    local_fit_r2: float
    class_probs: tuple[float, float]
    explained_class: str
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "weights": list(self.weights),
            "intercept": self.intercept,
            "local_fit_r2": self.local_fit_r2,
            "class_probs": list(self.class_probs),
            "explained_class": self.explained_class,
            "degenerate": self.degenerate,
        }


def lime_explain(model: PredictiveModel, row, stats: TrainingStats,
                 cfg: LimeConfig = LimeConfig()) -> LimeExplanation:
    """Fit the proximity-weighted sparse linear surrogate for one row.

    K features are chosen by forward selection on weighted squared loss for
    K <= 6, otherwise by largest |weight| of a full ridge fit; the reported
    weights come from a final ridge fit on the selected columns against the
    positive-class probability.
    """
    m = len(stats.features)
    k = min(cfg.top_k, m)
    if cfg.n_samples < 10 * k:
        raise ValueError("n_samples must be >= 10 * top_k")
    nb = sample_neighbourhood(row, stats, cfg)
    y = model.predict_proba(nb.raw)[:, 1]
    probs = model.predict_proba(as_code_matrix(model, row))[0]

    if float(np.ptp(y)) < 1e-12:
        names = tuple(f.display_name for f in stats.features[:k])
        return LimeExplanation(names, (0.0,) * k, float(y[0]), 0.0,
                               (float(probs[0]), float(probs[1])),
                               model.class_labels[1], degenerate=True)

    Z, w = nb.interpretable, nb.weights
    if k >= m:
        selected = list(range(m))
    elif k <= 6:
        selected = _forward_select(Z, y, w, k, cfg.ridge)
    else:
        full = _ridge_fit(Z, y, w, cfg.ridge)[0]
        selected = list(np.argsort(-np.abs(full), kind="stable")[:k])

    coef, intercept = _ridge_fit(Z[:, selected], y, w, cfg.ridge)
    pred = Z[:, selected] @ coef + intercept
    r2 = _weighted_r2(y, pred, w)

    order = np.argsort(-np.abs(coef), kind="stable")
    names = tuple(stats.features[selected[i]].display_name for i in order)
    weights = tuple(float(coef[i]) for i in order)
    return LimeExplanation(names, weights, float(intercept), float(r2),
                           (float(probs[0]), float(probs[1])), model.class_labels[1])


def _ridge_fit(Z, y, w, lam) -> tuple[np.ndarray, float]:
    """Weighted ridge with an unpenalized intercept."""
    sw = w.sum()
    z_mean = (Z * w[:, None]).sum(axis=0) / sw
    y_mean = float((y * w).sum() / sw)
    Zc = Z - z_mean
    yc = y - y_mean
    lhs = (Zc * w[:, None]).T @ Zc
    lhs[np.diag_indices_from(lhs)] += lam + 1e-12
    rhs = (Zc * w[:, None]).T @ yc
    coef = np.linalg.solve(lhs, rhs)
    intercept = y_mean - float(z_mean @ coef)
    return coef, intercept


def _forward_select(Z, y, w, k, lam) -> list[int]:
    selected: list[int] = []
    remaining = list(range(Z.shape[1]))
    for _ in range(k):
        best_j, best_sse = None, np.inf
        for j in remaining:
            cols = selected + [j]
            coef, intercept = _ridge_fit(Z[:, cols], y, w, lam)
            resid = y - (Z[:, cols] @ coef + intercept)
            sse = float((w * resid ** 2).sum())
            if sse < best_sse - 1e-15:
                best_sse, best_j = sse, j
        selected.append(best_j)
        remaining.remove(best_j)
    return selected


def _weighted_r2(y, pred, w) -> float:
    sw = w.sum()
    y_mean = (y * w).sum() / sw
    ss_res = float((w * (y - pred) ** 2).sum())
    ss_tot = float((w * (y - y_mean) ** 2).sum())
    if ss_tot <= 0:
        return 0.0
    return 1.0 - ss_res / ss_tot
