"""Explainable boosting machine: a cyclic-boosted generalized additive model.

The model is an intercept plus one piecewise-constant shape function per
input feature, trained by round-robin boosting: every round visits each
feature once and applies a learning-rate-scaled two-leaf Newton step fitted
to the current logistic-loss gradients, aggregated over that feature's bins.
Additivity is exact, which makes the local explanation a lookup rather than
an estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset, FeatureMeta
from .models import sigmoid

_LAMBDA = 1e-3  # stabilizer for near-empty bins in the Newton step


@dataclass
class ShapeFunction:
    """Per-feature additive score table in log-odds units.

    Numeric features carry ascending interior cut points (len(scores) - 1 of
    them); a value lands in bin searchsorted(cuts, v, 'right'), so anything
    outside the observed range clamps to a terminal bin. Categorical features
    have one bin per vocabulary entry.
    """

    feature: str
    kind: str
    cuts: np.ndarray          # interior edges (numeric) or empty (categorical)
    scores: np.ndarray

    def bin_index(self, values: np.ndarray) -> np.ndarray:
        if self.kind == "numeric":
            return np.searchsorted(self.cuts, values, side="right")
        idx = values.astype(int)
        return np.clip(idx, 0, len(self.scores) - 1)

    def lookup(self, values: np.ndarray) -> np.ndarray:
        return self.scores[self.bin_index(np.asarray(values, dtype=float))]


@dataclass
class EBMModel:
    features: list[FeatureMeta]
    class_labels: tuple[str, str]
    intercept: float
    shapes: list[ShapeFunction]
    hyper: dict = field(default_factory=dict)
    loss_curve: tuple[float, ...] = ()

    def raw_score(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(X.shape[0], self.intercept)
        for j, shape in enumerate(self.shapes):
            out += shape.lookup(X[:, j])
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p = sigmoid(self.raw_score(X))
        return np.column_stack([1.0 - p, p])


def _make_bins(meta: FeatureMeta, col: np.ndarray, max_bins: int) -> np.ndarray:
    """Interior cut points for equal-frequency numeric bins."""
    if not meta.is_numeric:
        return np.array([])
    qs = np.linspace(0, 1, max_bins + 1)[1:-1]
    cuts = np.unique(np.quantile(col, qs))
    return cuts


def train_ebm(train: Dataset, hyper: Optional[dict] = None) -> EBMModel:
    """Cyclic boosting of per-feature shape functions.

    The intercept starts at the log-odds of the base rate. After every full
    round each shape function is recentred to data-weighted mean zero with
    the total shift folded into the intercept, so shape magnitudes are
    comparable across features and global importance reads directly off the
    tables. Deterministic per seed.
    """
    h = {"rounds": 300, "learning_rate": 0.1, "max_bins": 64, "min_leaf": 50, "seed": 0}
    h.update(hyper or {})
    if h["max_bins"] < 2:
        raise ValueError("max_bins must be >= 2")
    if train.n_rows == 0:
        raise ValueError("empty training set")
    y = train.y.astype(float)
    if y.min() == y.max():
        raise ValueError("training set must contain both classes")

    X = train.X
    n, m = X.shape
    prior = float(np.clip(y.mean(), 1e-9, 1 - 1e-9))
    intercept = float(np.log(prior / (1 - prior)))

    shapes: list[ShapeFunction] = []
    bin_idx = np.empty((n, m), dtype=np.int32)
    for j, meta in enumerate(train.features):
        cuts = _make_bins(meta, X[:, j], int(h["max_bins"]))
        k = (len(cuts) + 1) if meta.is_numeric else len(meta.categories)
        shape = ShapeFunction(meta.display_name, meta.kind, cuts, np.zeros(k))
        shapes.append(shape)
        bin_idx[:, j] = shape.bin_index(X[:, j])

    lr = float(h["learning_rate"])
    min_leaf = int(h["min_leaf"])
    scores = np.full(n, intercept)
    losses = [_loss(y, scores)]

    for _ in range(int(h["rounds"])):
        for j, shape in enumerate(shapes):
            k = len(shape.scores)
            if k < 2:
                continue
            p = sigmoid(scores)
            g = y - p
            hess = np.clip(p * (1 - p), 1e-12, None)
            b = bin_idx[:, j]
            Gb = np.bincount(b, weights=g, minlength=k)
            Hb = np.bincount(b, weights=hess, minlength=k)
            Cb = np.bincount(b, minlength=k)
            step = _stump_step(Gb, Hb, Cb, min_leaf)
            if step is None:
                continue
            shape.scores += lr * step
            scores += lr * step[b]
        # Recentre: raw scores are unchanged, magnitudes become comparable.
        for j, shape in enumerate(shapes):
            mean_j = float(shape.scores[bin_idx[:, j]].mean())
            shape.scores -= mean_j
            intercept += mean_j
        losses.append(_loss(y, scores))

    return EBMModel(train.features, _labels(train), intercept, shapes,
                    dict(h), tuple(losses))


def _loss(y, scores) -> float:
    p = np.clip(sigmoid(scores), 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _stump_step(G: np.ndarray, H: np.ndarray, C: np.ndarray, min_leaf: int):
    """Best two-leaf Newton update over ordered bins; None when no valid cut."""
    k = len(G)
    GL = np.cumsum(G)[:-1]
    HL = np.cumsum(H)[:-1]
    CL = np.cumsum(C)[:-1]
    GT, HT, CT = G.sum(), H.sum(), C.sum()
    GR, HR, CR = GT - GL, HT - HL, CT - CL
    gain = GL * GL / (HL + _LAMBDA) + GR * GR / (HR + _LAMBDA) - GT * GT / (HT + _LAMBDA)
    ok = (CL >= min_leaf) & (CR >= min_leaf)
    if not ok.any():
        return None
    gain = np.where(ok, gain, -np.inf)
    cut = int(np.argmax(gain))
    if gain[cut] <= 1e-12:
        return None
    step = np.empty(k)
    step[: cut + 1] = GL[cut] / (HL[cut] + _LAMBDA)
    step[cut + 1 :] = GR[cut] / (HR[cut] + _LAMBDA)
    return step


def _labels(train: Dataset) -> tuple[str, str]:
    defaults = {"STATUS": ("Alive", "Dead"), "Reduction": ("N", "Y")}
    q = train.question
    if q.target_feature in defaults:
        neg, pos = defaults[q.target_feature]
        if q.positive_label != pos:
            neg, pos = pos, neg
        return (neg, q.positive_label)
    return (f"not {q.positive_label}", q.positive_label)


def ebm_predict(model: EBMModel, row) -> np.ndarray:
    """Probability pair for one row (record dict or code vector)."""
    from .models import as_code_matrix

    return model.predict_proba(as_code_matrix(model, row))[0]


def ebm_local_explain(model: EBMModel, row):
    """Exact additive attribution: base = intercept, one term per feature."""
    from .models import as_code_matrix
    from .shap import Attribution

    codes = as_code_matrix(model, row)[0]
    phi = np.array([shape.lookup(codes[j : j + 1])[0] for j, shape in enumerate(model.shapes)])
    fx = model.intercept + float(phi.sum())
    return Attribution(
        feature_names=tuple(f.display_name for f in model.features),
        base_value=model.intercept,
        values=phi,
        fx=fx,
        explained_class=model.class_labels[1],
        units="log_odds",
    )


def ebm_global_importance(model: EBMModel, data: Dataset) -> list[tuple[str, float]]:
    """Mean |shape score| per feature over the rows, descending.

    Ties break by schema order (the sort is stable over schema-ordered input).
    """
    if data.n_rows == 0:
        raise ValueError("empty dataset")
    pairs = []
    for j, shape in enumerate(model.shapes):
        vals = np.abs(shape.lookup(data.X[:, j]))
        pairs.append((shape.feature, float(vals.mean())))
    order = sorted(range(len(pairs)), key=lambda j: -pairs[j][1])
    return [pairs[j] for j in order]
