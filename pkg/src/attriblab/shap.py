"""Shapley additive attributions: exact enumeration and the kernel estimator.

The coalition game is interventional: v(S) is the background-averaged model
output with the explained row's values spliced in on S. exact_shap walks all
2^M coalitions and applies the permutation weights directly; kernel_shap
fits a weighted least-squares surrogate over coalition indicators using the
Shapley kernel, with g(empty) = v(empty) and g(full) = f(x) eliminated
analytically so the efficiency identity holds by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset
from .models import PredictiveModel, as_code_matrix

PROBABILITY = "probability"
LOG_ODDS = "log_odds"


class SingularKernelSystem(np.linalg.LinAlgError):
    """The coalition regression is rank-deficient and ridge is zero."""


@dataclass(frozen=True)
class Coalition:
    """Fixed-width inclusion mask over the original features."""

    mask: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.mask):
            raise ValueError("mask entries must be 0 or 1")

    @property
    def width(self) -> int:
        return len(self.mask)

    @classmethod
    def from_indices(cls, width: int, indices: Sequence[int]) -> "Coalition":
        mask = [0] * width
        for i in indices:
            mask[i] = 1
        return cls(tuple(mask))


@dataclass(frozen=True)
class ShapConfig:
    background_size: int = 100
    n_coalitions: Optional[int] = None   # None -> 2M + 2048
    ridge: Optional[float] = None        # None -> 0 enumerating, 1e-6 sampling
    seed: int = 0
    units: str = PROBABILITY
    sampling: str = "auto"               # auto | always | never

    def __post_init__(self):
        if self.background_size < 1:
            raise ValueError("background_size must be >= 1")
        if self.units not in (PROBABILITY, LOG_ODDS):
            raise ValueError(f"unknown units {self.units!r}")
        if self.sampling not in ("auto", "always", "never"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")

    def resolved_coalitions(self, m: int) -> int:
        return self.n_coalitions if self.n_coalitions is not None else 2 * m + 2048


@dataclass
class Attribution:
    """Base value plus one signed contribution per original feature."""

    feature_names: tuple[str, ...]
    base_value: float
    values: np.ndarray
    fx: float
    explained_class: str
    units: str = PROBABILITY

    def as_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "base_value": self.base_value,
            "values": [float(v) for v in self.values],
            "fx": self.fx,
            "explained_class": self.explained_class,
            "units": self.units,
        }


def _output_fn(model: PredictiveModel, units: str):
    if units == PROBABILITY:
        return lambda X: model.predict_proba(X)[:, 1]

    def log_odds(X):
        p = np.clip(model.predict_proba(X)[:, 1], 1e-12, 1 - 1e-12)
        return np.log(p / (1 - p))

    return log_odds


def _composites(row: np.ndarray, background: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Splice the row onto each background draw per coalition: (C*B, M)."""
    c, m = masks.shape
    b = background.shape[0]
    sel = masks.astype(bool)[:, None, :]
    out = np.where(sel, row[None, None, :], background[None, :, :])
    return out.reshape(c * b, m)


def coalition_values(model: PredictiveModel, row, background, masks: np.ndarray,
                     units: str = PROBABILITY, chunk: int = 512) -> np.ndarray:
    """v(S) for each coalition mask row: background-mean model output."""
    f = _output_fn(model, units)
    row = as_code_matrix(model, row)[0]
    background = np.atleast_2d(np.asarray(background, dtype=float))
    masks = np.atleast_2d(np.asarray(masks, dtype=np.int8))
    b = background.shape[0]
    vals = np.empty(masks.shape[0])
    for start in range(0, masks.shape[0], chunk):
        block = masks[start : start + chunk]
        comp = _composites(row, background, block)
        vals[start : start + chunk] = f(comp).reshape(len(block), b).mean(axis=1)
    return vals


def value_function(model: PredictiveModel, row, background, s: Coalition,
                   units: str = PROBABILITY) -> float:
    """Single-coalition convenience wrapper around coalition_values."""
    if len(np.atleast_2d(np.asarray(background)).reshape(-1)) == 0:
        raise ValueError("background must be non-empty")
    return float(coalition_values(model, row, background, np.array([s.mask]), units)[0])


# ---------------------------------------------------------------------------
# Exact enumeration


def exact_shap(model: PredictiveModel, row, background, limit: int = 20,
               units: str = PROBABILITY) -> Attribution:
    """Exact Shapley values by full coalition enumeration (cost 2^M).

    phi_j = sum over S not containing j of
            |S|! (M - |S| - 1)! / M! * (v(S + j) - v(S)).
    """
    row = as_code_matrix(model, row)[0]
    m = len(row)
    if m > limit:
        raise ValueError(f"exact enumeration needs M <= {limit}, got {m}")
    n_masks = 1 << m
    all_masks = np.arange(n_masks, dtype=np.uint32)
    bits = ((all_masks[:, None] >> np.arange(m)) & 1).astype(np.int8)
    v = coalition_values(model, row, background, bits, units)

    sizes = bits.sum(axis=1)
    fact = np.array([math.factorial(i) for i in range(m + 1)], dtype=float)
    weight_by_size = fact[np.arange(m)] * fact[m - np.arange(m) - 1] / fact[m]

    phi = np.zeros(m)
    for j in range(m):
        without = (all_masks >> j) & 1 == 0
        s = all_masks[without]
        w = weight_by_size[sizes[without]]
        phi[j] = float(np.sum(w * (v[s | (1 << j)] - v[s])))

    base = float(v[0])
    fx = float(v[-1])
    return Attribution(_names(model), base, phi, fx, model.class_labels[1], units)


def _names(model: PredictiveModel) -> tuple[str, ...]:
    return tuple(f.display_name for f in model.features)


# ---------------------------------------------------------------------------
# Kernel estimator


def _kernel_size_mass(m: int) -> np.ndarray:
    """Total Shapley-kernel weight per coalition size 1..M-1."""
    sizes = np.arange(1, m)
    return (m - 1) / (sizes * (m - sizes))


def kernel_shap(model: PredictiveModel, row, background, cfg: ShapConfig = ShapConfig()) -> Attribution:
    """Weighted least-squares Shapley estimate with exact efficiency.

    All coalitions are enumerated when 2^M fits the budget; otherwise sizes
    1 and M-1 enter deterministically and the interior is sampled in
    complement pairs proportionally to the kernel mass per size.
    Deterministic per cfg.seed.
    """
    row = as_code_matrix(model, row)[0]
    background = np.atleast_2d(np.asarray(background, dtype=float))
    if background.shape[0] == 0:
        raise ValueError("background must be non-empty")
    m = len(row)
    if m < 1:
        raise ValueError("need at least one feature")

    f = _output_fn(model, cfg.units)
    base = float(f(background).mean())
    fx = float(f(row[None, :])[0])
    delta = fx - base
    names = _names(model)

    if m == 1:
        return Attribution(names, base, np.array([delta]), fx, model.class_labels[1], cfg.units)

    budget = cfg.resolved_coalitions(m)
    enumerate_all = (cfg.sampling == "never") or (cfg.sampling == "auto" and (1 << m) <= budget)

    if enumerate_all:
        masks, weights = _enumerated_coalitions(m)
        ridge = cfg.ridge if cfg.ridge is not None else 0.0
    else:
        if budget < m + 2:
            raise ValueError("n_coalitions must be >= M + 2 when sampling")
        masks, weights = _sampled_coalitions(m, budget, cfg.seed)
        ridge = cfg.ridge if cfg.ridge is not None else 1e-6

    v = coalition_values(model, row, background, masks, cfg.units)
    phi = _solve_constrained_wls(masks, v - base, weights, delta, ridge)
    return Attribution(names, base, phi, fx, model.class_labels[1], cfg.units)


def _enumerated_coalitions(m: int) -> tuple[np.ndarray, np.ndarray]:
    all_masks = np.arange(1 << m, dtype=np.uint32)
    bits = ((all_masks[:, None] >> np.arange(m)) & 1).astype(np.int8)
    sizes = bits.sum(axis=1)
    keep = (sizes > 0) & (sizes < m)
    bits = bits[keep]
    sizes = sizes[keep]
    comb = np.array([math.comb(m, s) for s in range(m + 1)], dtype=float)
    weights = (m - 1) / (comb[sizes] * sizes * (m - sizes))
    return bits, weights


def _sampled_coalitions(m: int, budget: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    mass = _kernel_size_mass(m)

    rows = []
    weights = []
    # Deterministic block: all coalitions of sizes 1 and M-1, exact weights.
    for j in range(m):
        single = np.zeros(m, dtype=np.int8)
        single[j] = 1
        rows.append(single)
        weights.append(mass[0] / m)
    for j in range(m):
        almost = np.ones(m, dtype=np.int8)
        almost[j] = 0
        rows.append(almost)
        weights.append(mass[m - 2] / m)

    n_random = budget - len(rows)
    interior = np.arange(2, m - 1)
    if n_random > 0 and len(interior) > 0:
        p = mass[interior - 1]
        remaining_mass = float(p.sum())
        p = p / p.sum()
        counts: dict[bytes, int] = {}
        n_pairs = (n_random + 1) // 2
        sizes = rng.choice(interior, size=n_pairs, p=p)
        for s in sizes:
            members = rng.choice(m, size=int(s), replace=False)
            mask = np.zeros(m, dtype=np.int8)
            mask[members] = 1
            for z in (mask, 1 - mask):
                counts[z.tobytes()] = counts.get(z.tobytes(), 0) + 1
        total_draws = 2 * n_pairs
        for key, cnt in sorted(counts.items()):
            rows.append(np.frombuffer(key, dtype=np.int8).copy())
            weights.append(remaining_mass * cnt / total_draws)

    return np.array(rows, dtype=np.int8), np.array(weights)


def _solve_constrained_wls(masks, y, weights, delta, ridge) -> np.ndarray:
    """Solve the kernel regression with the efficiency constraint eliminated.

    Substituting phi_M = delta - sum(phi_1..M-1) reduces the system to M-1
    unknowns; the constraints g(empty) = v(empty) and g(full) = f(x) are then
    exact regardless of the sampled coalitions.
    """
    m = masks.shape[1]
    z = masks.astype(float)
    a = z[:, : m - 1] - z[:, m - 1 : m]
    b = y - z[:, m - 1] * delta
    wa = a * weights[:, None]
    lhs = wa.T @ a
    if ridge:
        lhs[np.diag_indices_from(lhs)] += ridge
    rhs = wa.T @ b
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        raise SingularKernelSystem(
            "coalition regression is singular; add coalitions or set ridge > 0"
        ) from None
    if not np.all(np.isfinite(sol)):
        raise SingularKernelSystem("coalition regression produced non-finite values")
    phi = np.empty(m)
    phi[: m - 1] = sol
    phi[m - 1] = delta - sol.sum()
    return phi


# ---------------------------------------------------------------------------
# Dataset-level summaries


@dataclass
class ShapSummary:
    """Per-instance phi matrix with beeswarm ordering metadata."""

    feature_names: tuple[str, ...]   # schema order
    order: tuple[int, ...]           # column indices sorted by mean |phi| desc
    phi: np.ndarray                  # (n, M), schema order
    feature_values: np.ndarray       # (n, M) raw codes
    base_values: np.ndarray
    fx: np.ndarray

    @property
    def ranked_names(self) -> tuple[str, ...]:
        return tuple(self.feature_names[j] for j in self.order)


def shap_global_summary(model: PredictiveModel, data: Dataset, background,
                        cfg: ShapConfig = ShapConfig()) -> ShapSummary:
    """kernel_shap over every row of `data`, columns ordered by mean |phi|.

    Each instance draws from an independent stream spawned from (seed, row
    index), so chunked/parallel evaluation matches the serial result.
    """
    if data.n_rows == 0:
        raise ValueError("empty dataset")
    m = len(data.features)
    phi = np.empty((data.n_rows, m))
    base = np.empty(data.n_rows)
    fx = np.empty(data.n_rows)
    for i in range(data.n_rows):
        a = kernel_shap(model, data.X[i], background, replace(cfg, seed=instance_seed(cfg.seed, i)))
        phi[i] = a.values
        base[i] = a.base_value
        fx[i] = a.fx
    mean_abs = np.abs(phi).mean(axis=0)
    order = tuple(int(j) for j in np.argsort(-mean_abs, kind="stable"))
    return ShapSummary(
        feature_names=tuple(f.display_name for f in data.features),
        order=order,
        phi=phi,
        feature_values=data.X.copy(),
        base_values=base,
        fx=fx,
    )


def instance_seed(seed: int, index: int) -> int:
    """Stable per-instance seed derivation shared by all explainers."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Force layout


@dataclass
class ForceSegment:
    feature: str
    label: str
    width: float


@dataclass
class ForceLayout:
    base_value: float
    fx: float
    positive: list[ForceSegment]
    negative: list[ForceSegment]

    def as_dict(self) -> dict:
        return {
            "base_value": self.base_value,
            "fx": self.fx,
            "positive": [[s.feature, s.label, s.width] for s in self.positive],
            "negative": [[s.feature, s.label, s.width] for s in self.negative],
        }


def force_plot_data(a: Attribution, labels: Optional[dict] = None) -> ForceLayout:
    """Signed segments anchored at the base value and ending at fx.

    Segment widths are |phi_j| split by sign and ordered widest first;
    zero contributions are dropped.
    """
    labels = labels or {}
    pos, neg = [], []
    for name, value in zip(a.feature_names, a.values):
        if value == 0.0:
            continue
        seg = ForceSegment(name, str(labels.get(name, "")), abs(float(value)))
        (pos if value > 0 else neg).append(seg)
    pos.sort(key=lambda s: -s.width)
    neg.sort(key=lambda s: -s.width)
    return ForceLayout(a.base_value, a.fx, pos, neg)
