"""High-precision scoped rules ("anchors") for individual predictions.

find_anchor runs a beam search over conjunctions of predicates drawn from
the explained instance's own discretized feature values. Candidate precision
(the probability that perturbations satisfying the rule keep the model's
predicted class) is estimated by best-arm identification with Bernoulli-KL
confidence bounds, so a returned anchor's precision lower bound clears the
target threshold with the configured failure probability.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .lime import TrainingStats
from .models import PredictiveModel, as_code_matrix

CATEGORY_EQUALS = "category_equals"
IN_NUMERIC_BIN = "in_numeric_bin"


@dataclass(frozen=True)
class Predicate:
    feature: str
    form: str
    category: Optional[str] = None
    bin_index: Optional[int] = None
    lo: float = -math.inf
    hi: float = math.inf

    def describe(self) -> str:
        if self.form == CATEGORY_EQUALS:
            return f"{self.feature} = {self.category}"
        left = "" if self.lo == -math.inf else f"{self.lo:.4g} <= "
        right = "" if self.hi == math.inf else f" < {self.hi:.4g}"
        return f"{left}{self.feature}{right}"


@dataclass
class AnchorRule:
    predicates: tuple[Predicate, ...]
    precision_estimate: float
    precision_lower_bound: float
    coverage_estimate: float
    samples_used: int
    qualifies: bool
    predicted_class: str

    def describe(self) -> str:
        cond = " AND ".join(p.describe() for p in self.predicates) or "TRUE"
        return (
            f"IF {cond} THEN PREDICT {self.predicted_class} "
            f"(precision {self.precision_estimate:.2f}, coverage {self.coverage_estimate:.2f})"
        )

    def as_dict(self) -> dict:
        return {
            "predicates": [p.describe() for p in self.predicates],
            "features": [p.feature for p in self.predicates],
            "precision_estimate": self.precision_estimate,
            "precision_lower_bound": self.precision_lower_bound,
            "coverage_estimate": self.coverage_estimate,
            "samples_used": self.samples_used,
            "qualifies": self.qualifies,
            "predicted_class": self.predicted_class,
        }


@dataclass(frozen=True)
class AnchorConfig:
    tau: float = 0.95
    delta: float = 0.05
    beam_width: int = 10
    batch_size: int = 100
    max_len: int = 5
    coverage_samples: int = 2000
    seed: int = 0
    epsilon_stop: float = 0.10     # beam-selection slack on the KL bounds
    max_arm_samples: int = 20000   # per-candidate sampling budget

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0 or not 0.0 < self.delta < 1.0:
            raise ValueError("tau and delta must lie in (0, 1)")
        for name in ("beam_width", "batch_size", "max_len", "coverage_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# Bernoulli-KL confidence bounds


def _kl(p: float, q: float) -> float:
    p = min(max(p, 1e-12), 1 - 1e-12)
    q = min(max(q, 1e-12), 1 - 1e-12)
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def kl_upper(mean: float, level: float) -> float:
    """max q >= mean with kl(mean, q) <= level, by bisection."""
    lo, hi = mean, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _kl(mean, mid) > level:
            hi = mid
        else:
            lo = mid
    return lo


def kl_lower(mean: float, level: float) -> float:
    lo, hi = 0.0, mean
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _kl(mean, mid) > level:
            lo = mid
        else:
            hi = mid
    return hi


def _beta(n_arms: int, t: int, delta: float) -> float:
    """Exploration rate of the KL-LUCB schedule (alpha=1.1, k=405.5)."""
    alpha = 1.1
    k = 405.5
    temp = math.log(k * max(n_arms, 1) * (t ** alpha) / delta)
    return temp + math.log(max(temp, 1.0))


# ---------------------------------------------------------------------------
# Conditional sampling


def _rule_key(rule: Sequence[Predicate]) -> str:
    parts = sorted(f"{p.feature}|{p.form}|{p.category}|{p.bin_index}" for p in rule)
    return ";".join(parts)


def _derive_seed(seed: int, tag: str, rule: Sequence[Predicate]) -> int:
    digest = hashlib.sha256(f"{seed}|{tag}|{_rule_key(rule)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sample_conditional(row, rule: Sequence[Predicate], stats: TrainingStats,
                       n: int, seed: int) -> np.ndarray:
    """n marginal draws with rule-constrained features pinned to the rule.

    Unconstrained features follow the training marginals (numeric: bin by
    frequency, then uniform inside the bin); constrained numerics draw
    uniformly inside the rule's bin, constrained categoricals are fixed.
    Every returned row satisfies the rule.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    features = stats.features
    m = len(features)
    constrained = {_feature_index(stats, p.feature): p for p in rule}
    out = np.empty((n, m))
    for j, f in enumerate(features):
        pred = constrained.get(j)
        if f.is_numeric:
            st = stats.numeric[j]
            if pred is None:
                drawn = rng.choice(st.n_bins, size=n, p=st.bin_freq)
            else:
                drawn = np.full(n, pred.bin_index, dtype=int)
            lo = np.array([st.bin_bounds(b)[0] for b in range(st.n_bins)])
            hi = np.array([st.bin_bounds(b)[1] for b in range(st.n_bins)])
            out[:, j] = lo[drawn] + rng.random(n) * (hi[drawn] - lo[drawn])
        else:
            st = stats.categorical[j]
            if pred is None:
                out[:, j] = rng.choice(len(st.freq), size=n, p=np.asarray(st.freq)).astype(float)
            else:
                out[:, j] = float(f.code_of(pred.category))
    return out


def _feature_index(stats: TrainingStats, name: str) -> int:
    for j, f in enumerate(stats.features):
        if f.display_name == name:
            return j
    raise KeyError(name)


def rule_satisfied(rule: Sequence[Predicate], stats: TrainingStats, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ok = np.ones(X.shape[0], dtype=bool)
    for p in rule:
        j = _feature_index(stats, p.feature)
        if p.form == CATEGORY_EQUALS:
            ok &= X[:, j] == float(stats.features[j].code_of(p.category))
        else:
            ok &= stats.bin_index(j, X[:, j]) == p.bin_index
    return ok


def estimate_precision(model: PredictiveModel, row, rule: Sequence[Predicate],
                       stats: TrainingStats, n: int, seed: int) -> float:
    """Monte-Carlo mean of 1[f(z) = f(x)] over conditional draws."""
    if n < 1:
        raise ValueError("n must be >= 1")
    codes = as_code_matrix(model, row)
    target = int(np.argmax(model.predict_proba(codes)[0]))
    Z = sample_conditional(row, rule, stats, n, seed)
    pred = np.argmax(model.predict_proba(Z), axis=1)
    return float((pred == target).mean())


def estimate_coverage(rule: Sequence[Predicate], stats: TrainingStats,
                      n: int, seed: int) -> float:
    """Fraction of unconstrained marginal samples satisfying the rule."""
    if n < 1:
        raise ValueError("n must be >= 1")
    Z = sample_conditional(None, (), stats, n, seed)
    return float(rule_satisfied(rule, stats, Z).mean())


# ---------------------------------------------------------------------------
# Beam search with best-arm identification


class _Arm:
    """Sampling state for one candidate rule."""

    __slots__ = ("rule", "pulls", "hits", "rounds", "coverage", "rng")

    def __init__(self, rule: tuple[Predicate, ...], seed: int):
        self.rule = rule
        self.pulls = 0
        self.hits = 0
        self.rounds = 0
        self.coverage: Optional[float] = None
        self.rng = np.random.default_rng(
            np.random.SeedSequence(_derive_seed(seed, "precision", rule))
        )

    @property
    def mean(self) -> float:
        return self.hits / self.pulls if self.pulls else 0.0


def find_anchor(model: PredictiveModel, row, stats: TrainingStats,
                cfg: AnchorConfig = AnchorConfig()) -> AnchorRule:
    """Search for the shortest high-coverage rule meeting the precision bar.

    Levels grow rules one instance-satisfied predicate at a time. Per level
    a KL-LUCB loop concentrates samples on the contenders, the surviving
    beam is verified (lower bound >= tau, or upper bound < tau to discard),
    and the first level producing qualifying rules returns the one with the
    highest coverage. If nothing qualifies by max_len the best-precision
    rule is returned flagged as non-anchoring.
    """
    codes = as_code_matrix(model, row)[0]
    target = int(np.argmax(model.predict_proba(codes[None, :])[0]))
    target_label = model.class_labels[target]
    pool = _candidate_predicates(codes, stats)
    arms: dict[str, _Arm] = {}
    total_samples = 0

    def get_arm(rule: tuple[Predicate, ...]) -> _Arm:
        key = _rule_key(rule)
        if key not in arms:
            arms[key] = _Arm(rule, cfg.seed)
        return arms[key]

    def pull(arm: _Arm, batches: int = 1):
        nonlocal total_samples
        for _ in range(batches):
            if arm.pulls >= cfg.max_arm_samples:
                return
            Z = _conditional_with_rng(arm.rule, stats, cfg.batch_size, arm.rng)
            pred = np.argmax(model.predict_proba(Z), axis=1)
            arm.hits += int((pred == target).sum())
            arm.pulls += cfg.batch_size
            arm.rounds += 1
            total_samples += cfg.batch_size

    def coverage(arm: _Arm) -> float:
        if arm.coverage is None:
            arm.coverage = estimate_coverage(
                arm.rule, stats, cfg.coverage_samples,
                _derive_seed(cfg.seed, "coverage", arm.rule))
        return arm.coverage

    # The empty rule first: a constant prediction needs no conditions.
    empty = get_arm(())
    verdict = _verify(empty, pull, cfg)
    if verdict is True:
        return _result(empty, coverage(empty), total_samples, True, target_label, cfg.delta)

    beam: list[_Arm] = [empty]
    best_overall: _Arm = empty
    for length in range(1, cfg.max_len + 1):
        candidates = _extend(beam, pool, get_arm)
        if not candidates:
            break
        chosen = _lucb_top(candidates, cfg, pull)
        qualifying: list[_Arm] = []
        for arm in chosen:
            verdict = _verify(arm, pull, cfg)
            if arm.mean > best_overall.mean:
                best_overall = arm
            if verdict is True:
                qualifying.append(arm)
        if qualifying:
            winner = max(qualifying, key=lambda a: (coverage(a), a.mean))
            return _result(winner, coverage(winner), total_samples, True, target_label, cfg.delta)
        beam = chosen
    if best_overall.pulls == 0:
        pull(best_overall)
    return _result(best_overall, coverage(best_overall), total_samples, False, target_label, cfg.delta)


def _conditional_with_rng(rule, stats, n, rng) -> np.ndarray:
    """sample_conditional with a persistent per-arm generator."""
    features = stats.features
    m = len(features)
    constrained = {_feature_index(stats, p.feature): p for p in rule}
    out = np.empty((n, m))
    for j, f in enumerate(features):
        pred = constrained.get(j)
        if f.is_numeric:
            st = stats.numeric[j]
            if pred is None:
                drawn = rng.choice(st.n_bins, size=n, p=st.bin_freq)
            else:
                drawn = np.full(n, pred.bin_index, dtype=int)
            lo = np.array([st.bin_bounds(b)[0] for b in range(st.n_bins)])
            hi = np.array([st.bin_bounds(b)[1] for b in range(st.n_bins)])
            out[:, j] = lo[drawn] + rng.random(n) * (hi[drawn] - lo[drawn])
        else:
            st = stats.categorical[j]
            if pred is None:
                out[:, j] = rng.choice(len(st.freq), size=n, p=np.asarray(st.freq)).astype(float)
            else:
                out[:, j] = float(f.code_of(pred.category))
    return out


def _candidate_predicates(codes: np.ndarray, stats: TrainingStats) -> list[Predicate]:
    """One predicate per feature, each satisfied by the instance itself."""
    out = []
    for j, f in enumerate(stats.features):
        if f.is_numeric:
            st = stats.numeric[j]
            b = int(stats.bin_index(j, codes[j : j + 1])[0])
            edges = (-math.inf, *st.cuts, math.inf)
            out.append(Predicate(f.display_name, IN_NUMERIC_BIN,
                                 bin_index=b, lo=edges[b], hi=edges[b + 1]))
        else:
            out.append(Predicate(f.display_name, CATEGORY_EQUALS,
                                 category=f.categories[int(codes[j])]))
    return out


def _extend(beam: list[_Arm], pool: list[Predicate], get_arm) -> list["_Arm"]:
    seen = set()
    out = []
    for arm in beam:
        used = {p.feature for p in arm.rule}
        for pred in pool:
            if pred.feature in used:
                continue
            rule = tuple(sorted(arm.rule + (pred,), key=lambda p: p.feature))
            key = _rule_key(rule)
            if key in seen:
                continue
            seen.add(key)
            out.append(get_arm(rule))
    return out


def _lucb_top(candidates: list[_Arm], cfg: AnchorConfig, pull) -> list[_Arm]:
    """Concentrate batches on the top-beam contenders until they separate."""
    b = min(cfg.beam_width, len(candidates))
    for arm in candidates:
        if arm.pulls == 0:
            pull(arm)
    if len(candidates) <= b:
        return list(candidates)
    t = 1
    n_arms = len(candidates)
    while True:
        order = sorted(candidates, key=lambda a: -a.mean)
        top, rest = order[:b], order[b:]
        level = _beta(n_arms, t, cfg.delta)
        weakest = min(top, key=lambda a: kl_lower(a.mean, level / a.pulls))
        strongest = max(rest, key=lambda a: kl_upper(a.mean, level / a.pulls))
        lb = kl_lower(weakest.mean, level / weakest.pulls)
        ub = kl_upper(strongest.mean, level / strongest.pulls)
        if ub - lb < cfg.epsilon_stop:
            return top
        if weakest.pulls >= cfg.max_arm_samples and strongest.pulls >= cfg.max_arm_samples:
            return top
        pull(weakest)
        pull(strongest)
        t += 1


def _verify(arm: _Arm, pull, cfg: AnchorConfig):
    """Sample until the precision bound settles on a side of tau."""
    if arm.pulls == 0:
        pull(arm)
    while True:
        level = _beta(1, max(arm.rounds, 1), cfg.delta)
        lb = kl_lower(arm.mean, level / arm.pulls)
        ub = kl_upper(arm.mean, level / arm.pulls)
        if lb >= cfg.tau:
            return True
        if ub < cfg.tau:
            return False
        if arm.pulls >= cfg.max_arm_samples:
            return None
        pull(arm)


def _result(arm: _Arm, cov: float, total: int, qualifies: bool, label: str,
            delta: float = 0.05) -> AnchorRule:
    level = _beta(1, max(arm.rounds, 1), delta)
    lb = kl_lower(arm.mean, level / arm.pulls) if arm.pulls else 0.0
    return AnchorRule(
        predicates=arm.rule,
        precision_estimate=arm.mean,
        precision_lower_bound=lb,
        coverage_estimate=cov,
        samples_used=total,
        qualifies=qualifies,
        predicted_class=label,
    )
