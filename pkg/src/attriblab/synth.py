"""Synthetic master-table generator with a known logistic ground truth.

The generator draws independent feature marginals, computes per-target
logistic scores from named effects, and labels targets by thresholding the
resulting probabilities against uniform draws. Effect strengths live in the
configuration so downstream checks can compare recovered importance against
the mechanism that produced the data. Optional corruption passes inject
nulls and logically inconsistent rows for the cleaning stage to remove.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataset import (
    CATEGORICAL,
    NUMERIC,
    CleaningRules,
    CohortFilter,
    FeatureMeta,
    QuestionSpec,
    RawTable,
    validate_schema,
)


@dataclass(frozen=True)
class NumericMarginal:
    """Clipped normal marginal for one numeric feature."""

    mean: float
    std: float
    lo: float
    hi: float

    def __post_init__(self):
        if self.std <= 0 or self.hi <= self.lo:
            raise ValueError("numeric marginal needs std > 0 and hi > lo")


@dataclass(frozen=True)
class Interaction:
    """Effect coef * z(numeric) applied only where the categorical matches."""

    numeric_feature: str
    categorical_feature: str
    category: str
    coef: float


@dataclass(frozen=True)
class TargetMechanism:
    """Ground-truth logistic score for one categorical binary target.

    score(x) = bias + sum coef_j * z_j + sum q_j * (z_j^2 - 1)
             + sum category scores + interaction terms,
    with z_j the numeric value standardized by its marginal mean/std.
    P(positive) = sigmoid(score).
    """

    target: str
    positive: str
    negative: str
    bias: float = 0.0
    numeric_effects: Mapping[str, float] = field(default_factory=dict)
    quadratic_effects: Mapping[str, float] = field(default_factory=dict)
    category_effects: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    interactions: tuple[Interaction, ...] = ()


@dataclass(frozen=True)
class GeneratorConfig:
    schema: tuple[FeatureMeta, ...]
    numeric_marginals: Mapping[str, NumericMarginal]
    category_weights: Mapping[str, tuple[float, ...]]
    mechanisms: tuple[TargetMechanism, ...]
    null_rate: float = 0.0
    inconsistency_rate: float = 0.0

    def __post_init__(self):
        validate_schema(self.schema)
        if not 0.0 <= self.null_rate <= 1.0:
            raise ValueError("null_rate must lie in [0, 1]")
        if not 0.0 <= self.inconsistency_rate <= 1.0:
            raise ValueError("inconsistency_rate must lie in [0, 1]")
        targets = {m.target for m in self.mechanisms}
        for f in self.schema:
            if f.is_numeric:
                if f.display_name not in self.numeric_marginals:
                    raise ValueError(f"no marginal for numeric feature {f.display_name!r}")
            elif f.display_name not in targets:
                if f.display_name not in self.category_weights:
                    raise ValueError(f"no weights for categorical feature {f.display_name!r}")
                w = np.asarray(self.category_weights[f.display_name], dtype=float)
                if len(w) != len(f.categories):
                    raise ValueError(f"{f.display_name}: weight count != category count")
                if (w < 0).any() or not np.isclose(w.sum(), 1.0, atol=1e-9):
                    raise ValueError(f"{f.display_name}: weights must be a probability vector")

    def feature(self, display_name: str) -> FeatureMeta:
        for f in self.schema:
            if f.display_name == display_name:
                return f
        raise KeyError(display_name)

    def mechanism(self, target: str) -> TargetMechanism:
        for m in self.mechanisms:
            if m.target == target:
                return m
        raise KeyError(target)


def mechanism_score(cfg: GeneratorConfig, mech: TargetMechanism, columns: Mapping[str, np.ndarray]) -> np.ndarray:
    """Ground-truth log-odds of the positive label for each row."""
    n = len(next(iter(columns.values())))
    score = np.full(n, mech.bias)
    z = {}
    for name, coef in mech.numeric_effects.items():
        marg = cfg.numeric_marginals[name]
        z[name] = (columns[name] - marg.mean) / marg.std
        score += coef * z[name]
    for name, coef in mech.quadratic_effects.items():
        marg = cfg.numeric_marginals[name]
        zz = z.get(name, (columns[name] - marg.mean) / marg.std)
        score += coef * (zz * zz - 1.0)
    for name, table in mech.category_effects.items():
        meta = cfg.feature(name)
        lut = np.array([table.get(c, 0.0) for c in meta.categories])
        score += lut[columns[name].astype(int)]
    for inter in mech.interactions:
        marg = cfg.numeric_marginals[inter.numeric_feature]
        zz = (columns[inter.numeric_feature] - marg.mean) / marg.std
        meta = cfg.feature(inter.categorical_feature)
        hit = columns[inter.categorical_feature] == float(meta.code_of(inter.category))
        score += inter.coef * zz * hit
    return score


def generate_synthetic(cfg: GeneratorConfig, n: int, seed: int) -> RawTable:
    """Draw `n` rows from the configured marginals plus target mechanisms."""
    rng = np.random.default_rng(seed)
    targets = {m.target for m in cfg.mechanisms}
    columns: dict[str, np.ndarray] = {}

    for f in cfg.schema:
        if f.is_numeric:
            m = cfg.numeric_marginals[f.display_name]
            columns[f.display_name] = np.clip(rng.normal(m.mean, m.std, size=n), m.lo, m.hi)
        elif f.display_name not in targets:
            w = np.asarray(cfg.category_weights[f.display_name], dtype=float)
            columns[f.display_name] = rng.choice(len(w), size=n, p=w).astype(float)

    for mech in cfg.mechanisms:
        meta = cfg.feature(mech.target)
        score = mechanism_score(cfg, mech, columns)
        p = 1.0 / (1.0 + np.exp(-score))
        hit = rng.random(n) < p
        pos, neg = meta.code_of(mech.positive), meta.code_of(mech.negative)
        columns[mech.target] = np.where(hit, float(pos), float(neg))

    _inject_inconsistencies(cfg, columns, n, rng)
    _inject_nulls(cfg, columns, n, rng)
    return RawTable(cfg.schema, columns)


def _inject_inconsistencies(cfg, columns, n, rng):
    """Corrupt a row fraction with implausible heights or contradictory outcomes."""
    if cfg.inconsistency_rate <= 0 or n == 0:
        return
    hit = np.flatnonzero(rng.random(n) < cfg.inconsistency_rate)
    if len(hit) == 0:
        return
    kind = rng.integers(0, 2, size=len(hit))
    if "Height" in columns:
        rows = hit[kind == 0]
        columns["Height"][rows] = rng.uniform(5.0, 40.0, size=len(rows))
    if "STATUS" in columns and "Outcome" in columns:
        rows = hit[kind == 1]
        status = cfg.feature("STATUS")
        outcome = cfg.feature("Outcome")
        columns["STATUS"][rows] = float(status.code_of("Alive"))
        columns["Outcome"][rows] = float(outcome.code_of("Patient died"))


def _inject_nulls(cfg, columns, n, rng):
    if cfg.null_rate <= 0 or n == 0:
        return
    for f in cfg.schema:
        mask = rng.random(n) < cfg.null_rate
        if f.is_numeric:
            columns[f.display_name][mask] = np.nan
        else:
            columns[f.display_name][mask] = -1.0


# ---------------------------------------------------------------------------
# Default clinical-style configuration: 26 features, two binary targets.

YN = ("N", "Y")

_SCHEMA: tuple[FeatureMeta, ...] = (
    FeatureMeta("AGE", "Age", NUMERIC, plausible_range=(0.0, 110.0),
                description="Age of the patient at the time of instance"),
    FeatureMeta("SEX DESC y", "Sex", CATEGORICAL, ("F", "M"), description="Sex of the patient"),
    FeatureMeta("WEIGHT AT START OF REGIMEN", "Weight", NUMERIC, plausible_range=(20.0, 250.0),
                description="Weight in kg at the start of the regimen"),
    FeatureMeta("HEIGHT AT START OF REGIMEN", "Height", NUMERIC, plausible_range=(0.5, 2.5),
                description="Height in metres at the start of the regimen"),
    FeatureMeta("SITE ICD10 O2 DESC", "Site", CATEGORICAL,
                ("C34.0", "C34.1", "C34.3", "C34.9", "C50.9", "C61", "C18.9", "C25.9", "C64.9"),
                description="Primary site ICD-10 code"),
    FeatureMeta("MORPH ICD10 O2", "Morph", CATEGORICAL,
                ("8140/3", "8070/3", "8041/3", "8046/3", "8500/3"),
                description="Morphology code"),
    FeatureMeta("GRADE", "Grade", CATEGORICAL, ("G1", "G2", "G3", "G4", "GX"),
                description="Tumour grade"),
    FeatureMeta("CANCER CARE PLAN INTENT", "CANCER PLAN", CATEGORICAL,
                ("Curative", "Palliative", "Unknown"), description="Care plan intent"),
    FeatureMeta("ACTUAL DOSE PER ADMINISTRATION", "Dose Administration", NUMERIC,
                plausible_range=(0.0, 1000.0), description="Dose in mg per administration"),
    FeatureMeta("CHEMO RADIATION", "Chemo Radiation", CATEGORICAL, YN,
                description="Concurrent radiotherapy"),
    FeatureMeta("BEHAVIOUR ICD10 O2 DESC", "Behaviour", CATEGORICAL,
                ("Malignant", "Uncertain", "In situ"), description="Behaviour description"),
    FeatureMeta("REGIMEN OUTCOME SUMMARY DESC", "Outcome", CATEGORICAL,
                ("Completed as planned", "Stopped early", "Progression", "Toxicity", "Patient died"),
                description="Regimen outcome summary"),
    FeatureMeta("NEW VITAL STATUS DESC", "STATUS", CATEGORICAL, ("Alive", "Dead"),
                description="Vital status at follow-up"),
    FeatureMeta("T BEST", "T Best", CATEGORICAL, ("T1", "T2", "T3", "T4", "TX"),
                description="Size and extent of the primary tumour"),
    FeatureMeta("N BEST", "N Best", CATEGORICAL, ("N0", "N1", "N2", "N3", "NX"),
                description="Nearby lymph nodes with cancer"),
    FeatureMeta("M BEST", "M Best", CATEGORICAL, ("M0", "M1", "MX"),
                description="Distant metastasis indicator"),
    FeatureMeta("DRUG GROUP", "Drug Group", CATEGORICAL,
                ("Platinum", "Taxane", "Antimetabolite", "Immunotherapy", "Anthracycline"),
                description="Drug group name"),
    FeatureMeta("ADMINISTRATION ROUTE DESC", "Administration route", CATEGORICAL,
                ("Intravenous", "Oral", "Subcutaneous"), description="Delivery route"),
    FeatureMeta("REGIMEN MOD TIME DELAY", "Time Delay", CATEGORICAL, YN,
                description="Delay between administrations"),
    FeatureMeta("REGIMEN MOD STOPPED EARLY", "Stopped Early", CATEGORICAL, YN,
                description="Regimen stopped early"),
    FeatureMeta("MAPPED REGIMEN", "Regimen", CATEGORICAL,
                ("FOLFOX", "CARBO+PACLITAXEL", "CISPLATIN", "FEC", "GEM+CARBO", "PEMBROLIZUMAB"),
                description="Mapped regimen name"),
    FeatureMeta("CLINICAL TRIAL", "Clinical Trial", CATEGORICAL, YN,
                description="Active therapy trial participation"),
    FeatureMeta("CYCLE NUMBER", "Cycle", NUMERIC, plausible_range=(1.0, 60.0),
                description="Current cycle number"),
    FeatureMeta("CNS", "CNS", CATEGORICAL, ("Y0", "Y1", "Y2", "Y9"),
                description="Central nervous system flag"),
    FeatureMeta("REGIMEN MOD DOSE REDUCTION", "Reduction", CATEGORICAL, YN,
                description="Dose reduced during regimen"),
    FeatureMeta("ACE27", "ACE", CATEGORICAL, ("0", "1", "2", "3", "9"),
                description="Adult co-morbidity evaluation score"),
)

LUNG_SITE_CODES = ("C34.0", "C34.1", "C34.3", "C34.9")

_NUMERIC_MARGINALS = {
    "Age": NumericMarginal(62.0, 12.0, 18.0, 95.0),
    "Weight": NumericMarginal(75.0, 16.0, 35.0, 160.0),
    "Height": NumericMarginal(1.68, 0.10, 1.30, 2.10),
    "Dose Administration": NumericMarginal(120.0, 45.0, 5.0, 400.0),
    "Cycle": NumericMarginal(4.0, 2.0, 1.0, 12.0),
}

_CATEGORY_WEIGHTS = {
    "Sex": (0.52, 0.48),
    # C34.* mass ~0.44 so the lung cohort keeps every question trainable.
    "Site": (0.10, 0.14, 0.10, 0.10, 0.16, 0.12, 0.12, 0.08, 0.08),
    "Morph": (0.34, 0.22, 0.16, 0.14, 0.14),
    "Grade": (0.14, 0.26, 0.30, 0.16, 0.14),
    "CANCER PLAN": (0.42, 0.44, 0.14),
    "Chemo Radiation": (0.68, 0.32),
    "Behaviour": (0.80, 0.12, 0.08),
    # "Patient died" never drawn naturally; only the corruption pass writes it,
    # so cleaning restores the pure mechanism exactly.
    "Outcome": (0.46, 0.26, 0.16, 0.12, 0.0),
    "T Best": (0.18, 0.26, 0.26, 0.18, 0.12),
    "N Best": (0.30, 0.24, 0.20, 0.14, 0.12),
    "M Best": (0.52, 0.30, 0.18),
    "Drug Group": (0.30, 0.24, 0.20, 0.14, 0.12),
    "Administration route": (0.66, 0.24, 0.10),
    "Time Delay": (0.62, 0.38),
    "Stopped Early": (0.70, 0.30),
    "Regimen": (0.22, 0.20, 0.18, 0.16, 0.14, 0.10),
    "Clinical Trial": (0.88, 0.12),
    "CNS": (0.55, 0.20, 0.15, 0.10),
    "ACE": (0.30, 0.28, 0.20, 0.12, 0.10),
}

# Age dominates both mechanisms by design; Clinical Trial carries no effect
# anywhere and serves as the null-feature control.
_DA_MECHANISM = TargetMechanism(
    target="STATUS",
    positive="Dead",
    negative="Alive",
    bias=-0.10,
    numeric_effects={"Age": 1.50, "Weight": -0.75, "Dose Administration": 0.30},
    quadratic_effects={"Age": 0.20},
    category_effects={
        "Grade": {"G1": -0.45, "G2": -0.15, "G3": 0.15, "G4": 0.45, "GX": 0.0},
        "M Best": {"M0": -0.30, "M1": 0.40, "MX": 0.0},
        "Behaviour": {"Malignant": 0.20, "Uncertain": 0.0, "In situ": -0.35},
        "CANCER PLAN": {"Curative": -0.25, "Palliative": 0.25, "Unknown": 0.0},
        "Site": {"C34.0": 0.10, "C34.1": 0.10, "C34.3": 0.05, "C34.9": 0.10,
                 "C50.9": -0.15, "C61": -0.10, "C18.9": 0.0, "C25.9": 0.15, "C64.9": 0.0},
    },
    interactions=(Interaction("Dose Administration", "Chemo Radiation", "Y", 0.25),),
)

_MD_MECHANISM = TargetMechanism(
    target="Reduction",
    positive="Y",
    negative="N",
    bias=-0.20,
    numeric_effects={"Age": 1.40, "Weight": -0.70, "Cycle": 0.35},
    quadratic_effects={"Dose Administration": 0.20},
    category_effects={
        "Time Delay": {"N": -0.20, "Y": 0.30},
        "T Best": {"T1": -0.25, "T2": -0.05, "T3": 0.10, "T4": 0.30, "TX": 0.0},
        "ACE": {"0": -0.30, "1": -0.10, "2": 0.10, "3": 0.35, "9": 0.0},
        "Stopped Early": {"N": -0.10, "Y": 0.25},
    },
    interactions=(Interaction("Age", "Chemo Radiation", "Y", 0.20),),
)


def default_generator_config(null_rate: float = 0.002, inconsistency_rate: float = 0.004) -> GeneratorConfig:
    return GeneratorConfig(
        schema=_SCHEMA,
        numeric_marginals=dict(_NUMERIC_MARGINALS),
        category_weights=dict(_CATEGORY_WEIGHTS),
        mechanisms=(_DA_MECHANISM, _MD_MECHANISM),
        null_rate=null_rate,
        inconsistency_rate=inconsistency_rate,
    )


def default_cleaning_rules(schema: Sequence[FeatureMeta]) -> CleaningRules:
    return CleaningRules(
        require_present=tuple(f.display_name for f in schema),
        enforce_ranges=True,
        forbidden_combos=({"STATUS": "Alive", "Outcome": "Patient died"},),
    )


def question_spec(question_id: str, lung_codes: Sequence[str] = LUNG_SITE_CODES) -> QuestionSpec:
    """The four supported binary questions over the master table."""
    excluded = frozenset({"STATUS", "Reduction"})
    lung = CohortFilter("Site", tuple(lung_codes))
    specs = {
        "DA": QuestionSpec("DA", "STATUS", "Dead", excluded),
        "LC-DA": QuestionSpec("LC-DA", "STATUS", "Dead", excluded, cohort_filter=lung),
        "MD": QuestionSpec("MD", "Reduction", "Y", excluded),
        "LC-MD": QuestionSpec("LC-MD", "Reduction", "Y", excluded, cohort_filter=lung),
    }
    if question_id not in specs:
        raise ValueError(f"unknown question {question_id!r}")
    return specs[question_id]


ALL_QUESTIONS = ("DA", "LC-DA", "MD", "LC-MD")
