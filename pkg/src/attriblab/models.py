"""Baseline classifiers behind a shared raw-row probability interface.

Every model consumes rows in original feature space (float code matrices, see
dataset.py) and encodes internally, so explainers can perturb original
features and read attributions on original feature names. predict_proba is a
deterministic pure function of the row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .dataset import Dataset, FeatureMeta, ONE_HOT, ORDINAL, encode_codes


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@runtime_checkable
class PredictiveModel(Protocol):
    """Minimal surface every explainer relies on."""

    features: Sequence[FeatureMeta]
    class_labels: tuple[str, str]

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...


def as_code_matrix(model: PredictiveModel, rows) -> np.ndarray:
    """Accept a code matrix, a single code vector, or a display record."""
    if isinstance(rows, Mapping):
        codes = [
            float(rows[f.display_name]) if f.is_numeric else float(f.code_of(str(rows[f.display_name])))
            for f in model.features
        ]
        return np.array([codes], dtype=float)
    arr = np.asarray(rows, dtype=float)
    return arr[None, :] if arr.ndim == 1 else arr


def predict_row(model: PredictiveModel, row) -> np.ndarray:
    return model.predict_proba(as_code_matrix(model, row))[0]


# ---------------------------------------------------------------------------
# Logistic regression


@dataclass
class LogisticModel:
    features: list[FeatureMeta]
    class_labels: tuple[str, str]
    weights: np.ndarray          # one per one-hot encoded column
    bias: float
    l2: float
    n_iters: int = 0
    loss_curve: tuple[float, ...] = ()
    encoder: str = ONE_HOT

    def margin(self, X: np.ndarray) -> np.ndarray:
        E = encode_codes(self.features, X, ONE_HOT)
        return E @ self.weights + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p = sigmoid(self.margin(np.asarray(X, dtype=float)))
        return np.column_stack([1.0 - p, p])


def train_logistic(train: Dataset, hyper: Optional[dict] = None) -> LogisticModel:
    """Fit L2-regularized logistic regression by damped Newton iterations.

    The objective sum(log-loss) + 0.5 * l2 * |w|^2 decreases at every
    accepted step (backtracking line search); iteration stops when the
    gradient norm drops below tol or max_iters is reached. Numeric columns
    are standardized internally and the solution is mapped back so that
    predict_proba(x) = sigmoid(w . encode(x) + b) on raw encoded columns.
    """
    h = {"l2": 1.0, "max_iters": 100, "tol": 1e-6, "seed": 0}
    h.update(hyper or {})
    if train.n_rows == 0:
        raise ValueError("empty training set")
    y = train.y.astype(float)
    if y.min() == y.max():
        # Degenerate single-class target: the prior is the MLE.
        prior = float(np.clip(y.mean(), 1e-9, 1 - 1e-9))
        width = encode_codes(train.features, train.X[:1], ONE_HOT).shape[1]
        labels = _class_labels(train)
        return LogisticModel(train.features, labels, np.zeros(width),
                             float(np.log(prior / (1 - prior))), h["l2"], 0, ())

    E = encode_codes(train.features, train.X, ONE_HOT)
    scale = E.std(axis=0)
    scale[scale < 1e-12] = 1.0
    mean = E.mean(axis=0)
    Es = (E - mean) / scale

    n, d = Es.shape
    w = np.zeros(d)
    b = float(np.log(np.clip(y.mean(), 1e-9, 1 - 1e-9) / (1 - np.clip(y.mean(), 1e-9, 1 - 1e-9))))
    l2 = float(h["l2"])

    def objective(wv, bv):
        p = sigmoid(Es @ wv + bv)
        p = np.clip(p, 1e-12, 1 - 1e-12)
        nll = -np.sum(y * np.log(p) + (1 - y) * np.log(1 - p))
        return nll + 0.5 * l2 * wv @ wv

    losses = [objective(w, b)]
    n_iters = 0
    for _ in range(int(h["max_iters"])):
        p = sigmoid(Es @ w + b)
        grad_w = Es.T @ (p - y) + l2 * w
        grad_b = np.sum(p - y)
        gnorm = float(np.sqrt(grad_w @ grad_w + grad_b * grad_b))
        if gnorm < h["tol"]:
            break
        r = np.clip(p * (1 - p), 1e-10, None)
        H = (Es * r[:, None]).T @ Es
        H[np.diag_indices_from(H)] += l2 + 1e-10
        hb = float(r.sum())
        hxb = Es.T @ r
        # Full Newton system including the intercept row/column.
        Hf = np.zeros((d + 1, d + 1))
        Hf[:d, :d] = H
        Hf[:d, d] = hxb
        Hf[d, :d] = hxb
        Hf[d, d] = hb + 1e-10
        g = np.concatenate([grad_w, [grad_b]])
        step = np.linalg.solve(Hf, g)
        t = 1.0
        base = losses[-1]
        slope = -(g @ step)
        for _ls in range(40):
            cand = objective(w - t * step[:d], b - t * step[d])
            if cand <= base + 1e-4 * t * slope or cand <= base:
                break
            t *= 0.5
        w = w - t * step[:d]
        b = b - t * step[d]
        losses.append(objective(w, b))
        n_iters += 1
        if not np.isfinite(losses[-1]):
            raise FloatingPointError("logistic training diverged to a non-finite loss")

    w_raw = w / scale
    b_raw = b - float(mean @ (w / scale))
    return LogisticModel(train.features, _class_labels(train), w_raw, float(b_raw),
                         l2, n_iters, tuple(float(v) for v in losses))


def _class_labels(train: Dataset) -> tuple[str, str]:
    q = train.question
    target = q.target_feature
    # Negative label: the non-positive category of the target vocabulary.
    positive = q.positive_label
    negative = None
    # The question's target meta is not in the inputs; reconstruct labels.
    defaults = {"STATUS": ("Alive", "Dead"), "Reduction": ("N", "Y")}
    if target in defaults:
        neg, pos = defaults[target]
        negative = neg if positive == pos else pos
    return (negative or f"not {positive}", positive)


# ---------------------------------------------------------------------------
# Gradient-boosted trees


@dataclass
class Tree:
    """Flat binary tree; node 0 is the root, -1 children mark leaves."""

    feature: np.ndarray    # int, -1 for leaf
    threshold: np.ndarray  # float
    left: np.ndarray       # int node ids
    right: np.ndarray
    value: np.ndarray      # leaf score (0 for internal nodes)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                break
            rows = np.flatnonzero(active)
            f = feat[rows]
            go_left = X[rows, f] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])
        return self.value[node]

    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)


@dataclass
class GbtModel:
    features: list[FeatureMeta]
    class_labels: tuple[str, str]
    trees: list[Tree]
    learning_rate: float
    base_score: float
    hyper: dict = field(default_factory=dict)
    encoder: str = ORDINAL

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out

    def staged_margin(self, X: np.ndarray):
        """Yield the margin after 0, 1, ... len(trees) trees."""
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[0], self.base_score)
        yield out.copy()
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
            yield out.copy()

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p = sigmoid(self.margin(X))
        return np.column_stack([1.0 - p, p])


_LAMBDA = 1.0  # leaf-score L2, matching common boosted-tree defaults


class _TreeBuilder:
    def __init__(self, X, g, h, max_depth, min_leaf):
        self.X = X
        self.g = g
        self.h = h
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.order = np.argsort(X, axis=0, kind="stable")
        self.nodes = []

    def build(self, rows: np.ndarray) -> Tree:
        in_rows = np.zeros(self.X.shape[0], dtype=bool)
        in_rows[rows] = True
        self._grow(rows, in_rows, 0)
        n = len(self.nodes)
        tree = Tree(
            feature=np.array([nd[0] for nd in self.nodes], dtype=np.int32),
            threshold=np.array([nd[1] for nd in self.nodes], dtype=float),
            left=np.array([nd[2] for nd in self.nodes], dtype=np.int32),
            right=np.array([nd[3] for nd in self.nodes], dtype=np.int32),
            value=np.array([nd[4] for nd in self.nodes], dtype=float),
        )
        assert n == len(tree.feature)
        return tree

    def _leaf(self, rows) -> int:
        G = self.g[rows].sum()
        H = self.h[rows].sum()
        self.nodes.append([-1, 0.0, -1, -1, -G / (H + _LAMBDA)])
        return len(self.nodes) - 1

    def _grow(self, rows, in_rows, depth) -> int:
        if depth >= self.max_depth or len(rows) < 2 * self.min_leaf:
            return self._leaf(rows)
        best = self._best_split(rows, in_rows)
        if best is None:
            return self._leaf(rows)
        feat, thr = best
        node_id = len(self.nodes)
        self.nodes.append([feat, thr, -1, -1, 0.0])
        go_left = self.X[rows, feat] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        l_in = np.zeros_like(in_rows)
        l_in[lrows] = True
        r_in = np.zeros_like(in_rows)
        r_in[rrows] = True
        self.nodes[node_id][2] = self._grow(lrows, l_in, depth + 1)
        self.nodes[node_id][3] = self._grow(rrows, r_in, depth + 1)
        return node_id

    def _best_split(self, rows, in_rows):
        g, h, X = self.g, self.h, self.X
        G = g[rows].sum()
        H = h[rows].sum()
        parent = G * G / (H + _LAMBDA)
        best_gain = 1e-12
        best = None
        for f in range(X.shape[1]):
            srt = self.order[:, f]
            srt = srt[in_rows[srt]]
            xs = X[srt, f]
            if xs[0] == xs[-1]:
                continue
            gl = np.cumsum(g[srt])
            hl = np.cumsum(h[srt])
            counts = np.arange(1, len(srt) + 1)
            # Split between consecutive distinct values only.
            cut = np.flatnonzero(xs[:-1] < xs[1:])
            if len(cut) == 0:
                continue
            nl = counts[cut]
            nr = len(srt) - nl
            ok = (nl >= self.min_leaf) & (nr >= self.min_leaf)
            cut = cut[ok]
            if len(cut) == 0:
                continue
            GL, HL = gl[cut], hl[cut]
            GR, HR = G - GL, H - HL
            gain = 0.5 * (GL * GL / (HL + _LAMBDA) + GR * GR / (HR + _LAMBDA) - parent)
            k = int(np.argmax(gain))
            if gain[k] > best_gain:
                best_gain = float(gain[k])
                thr = 0.5 * (xs[cut[k]] + xs[cut[k] + 1])
                best = (f, float(thr))
        return best


def train_gbt(train: Dataset, hyper: Optional[dict] = None) -> GbtModel:
    """Gradient boosting with logistic loss and exact greedy splits.

    Trees are regression trees on first/second-order gradients of the
    logistic loss (gain = variance reduction of the Newton objective);
    categorical features enter through their ordinal codes. Deterministic
    for a fixed seed, including the per-tree row subsample.
    """
    h = {"n_trees": 200, "max_depth": 4, "learning_rate": 0.1,
         "min_leaf": 20, "subsample": 0.8, "seed": 0}
    h.update(hyper or {})
    if h["n_trees"] < 1:
        raise ValueError("n_trees must be >= 1")
    if h["max_depth"] < 1:
        raise ValueError("max_depth must be >= 1")
    if train.n_rows == 0:
        raise ValueError("empty training set")
    y = train.y.astype(float)
    if y.min() == y.max():
        raise ValueError("training set must contain both classes")

    X = train.X
    n = X.shape[0]
    prior = float(np.clip(y.mean(), 1e-9, 1 - 1e-9))
    base = float(np.log(prior / (1 - prior)))
    rng = np.random.default_rng(int(h["seed"]))
    margin = np.full(n, base)
    trees: list[Tree] = []
    sub = float(h["subsample"])
    for _ in range(int(h["n_trees"])):
        p = sigmoid(margin)
        g = p - y
        hess = np.clip(p * (1 - p), 1e-12, None)
        if sub < 1.0:
            rows = np.sort(rng.choice(n, size=max(1, int(round(sub * n))), replace=False))
        else:
            rows = np.arange(n)
        builder = _TreeBuilder(X, g, hess, int(h["max_depth"]), int(h["min_leaf"]))
        tree = builder.build(rows)
        trees.append(tree)
        margin += h["learning_rate"] * tree.predict(X)

    return GbtModel(train.features, _class_labels(train), trees,
                    float(h["learning_rate"]), base, dict(h))


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    accuracy: float
    averaging: str
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "accuracy": self.accuracy,
            "averaging": self.averaging,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        }


def evaluate(model: PredictiveModel, test: Dataset, threshold: float = 0.5,
             averaging: str = "weighted") -> Metrics:
    """Class-support-weighted (or macro) precision/recall plus accuracy."""
    if test.n_rows == 0:
        raise ValueError("empty test set")
    p = model.predict_proba(test.X)[:, 1]
    pred = (p >= threshold).astype(int)
    y = test.y.astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())

    def safe(a, b):
        return a / b if b > 0 else 0.0

    prec = np.array([safe(tn, tn + fn), safe(tp, tp + fp)])
    rec = np.array([safe(tn, tn + fp), safe(tp, tp + fn)])
    support = np.array([tn + fp, tp + fn], dtype=float)
    if averaging == "weighted":
        wts = support / support.sum()
    elif averaging == "macro":
        wts = np.array([0.5, 0.5])
    else:
        raise ValueError(f"unknown averaging {averaging!r}")
    return Metrics(
        precision=float(prec @ wts),
        recall=float(rec @ wts),
        accuracy=(tp + tn) / len(y),
        averaging=averaging,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )
