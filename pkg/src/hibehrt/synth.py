"""Synthetic longitudinal cohorts with a planted long-range label rule.

Patients whose history exceeds ``boundary`` events may carry an early
trigger (placed where suffix truncation at ``boundary`` removes it) and/or a
late modifier (placed inside the retained suffix). The label is drawn with
probability ``p_hi`` when both are present and ``p_lo`` otherwise, so a model
that only sees the suffix cannot tell "late only" decoys from true cases.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .data import STATUS_CODES, Modality, PatientRecord, RawEvent, Visit, save_dataset
from .errors import ConfigInvalid

BACKGROUND_MODALITIES = (
    Modality.DIAG, Modality.MED, Modality.PROC, Modality.TEST,
    Modality.SBP, Modality.DBP, Modality.BMI, Modality.SMOKE, Modality.ALCOHOL,
)


@dataclass
class LabelRule:
    trigger_code: str = "TRIG_EARLY"
    modifier_code: str = "TRIG_LATE"
    boundary: int = 256
    horizon: int = 1220  # early triggers stay within the latest `horizon` events
    p_hi: float = 0.9
    p_lo: float = 0.1
    prevalence: float = 0.1  # fraction of patients carrying both tokens
    late_only_rate: float = 0.3
    early_only_rate: float = 0.1
    trigger_copies: int = 10  # placements of the trigger, all inside the truncated prefix
    modifier_copies: int = 3


@dataclass
class GeneratorConfig:
    n_patients: int = 10000
    seed: int = 0
    long_fraction: float = 0.6  # P(events > boundary)
    length_sigma: float = 0.7  # log-normal shape of the event count
    events_per_visit: float = 4.4
    mean_gap_days: float = 60.0
    n_diag: int = 300
    n_med: int = 150
    n_proc: int = 60
    n_test: int = 120
    modality_weights: tuple[float, ...] = (0.22, 0.33, 0.03, 0.22, 0.07, 0.07, 0.02, 0.03, 0.01)
    rule: LabelRule = dataclasses.field(default_factory=LabelRule)

    def validate(self) -> "GeneratorConfig":
        r = self.rule
        if self.n_patients < 0:
            raise ConfigInvalid("n_patients must be >= 0")
        if not 0 < self.long_fraction < 1 or self.length_sigma <= 0:
            raise ConfigInvalid("long_fraction must lie in (0, 1) and length_sigma > 0")
        if min(r.prevalence, r.late_only_rate, r.early_only_rate) < 0:
            raise ConfigInvalid("condition rates must be non-negative")
        if r.prevalence + r.late_only_rate + r.early_only_rate > self.long_fraction + 1e-12:
            raise ConfigInvalid("condition rates exceed the long-history fraction")
        if not 0 <= r.p_lo <= r.p_hi <= 1:
            raise ConfigInvalid("need 0 <= p_lo <= p_hi <= 1")
        if not 1 <= r.boundary < r.horizon:
            raise ConfigInvalid("need 1 <= boundary < horizon")
        if r.trigger_copies < 1 or r.modifier_copies < 1:
            raise ConfigInvalid("trigger_copies and modifier_copies must be >= 1")
        if len(self.modality_weights) != len(BACKGROUND_MODALITIES) or min(self.modality_weights) < 0:
            raise ConfigInvalid("modality_weights needs one non-negative weight per modality")
        if self.events_per_visit < 1:
            raise ConfigInvalid("events_per_visit must be >= 1")
        return self

    @property
    def log_mu(self) -> float:
        # P(ceil(X) > B) = P(X > B) = long_fraction for X ~ LogNormal(mu, sigma)
        return math.log(self.rule.boundary) + self.length_sigma * float(norm.ppf(self.long_fraction))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_text(self) -> str:
        flat = {}
        for k, v in self.to_dict().items():
            if isinstance(v, dict):
                flat.update({f"rule.{kk}": vv for kk, vv in v.items()})
            else:
                flat[k] = v
        return "".join(f"{k}={_fmt(flat[k])}\n" for k in sorted(flat))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _zipf(n: int, s: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


class _Sampler:
    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        self.cum = {
            Modality.DIAG: np.cumsum(_zipf(cfg.n_diag)),
            Modality.MED: np.cumsum(_zipf(cfg.n_med)),
            Modality.PROC: np.cumsum(_zipf(cfg.n_proc)),
            Modality.TEST: np.cumsum(_zipf(cfg.n_test)),
        }
        self.prefix = {Modality.DIAG: "D", Modality.MED: "M", Modality.PROC: "P", Modality.TEST: "T"}
        w = np.asarray(cfg.modality_weights, dtype=float)
        self.mod_p = w / w.sum()

    def events(self, rng: np.random.Generator, n: int) -> list[RawEvent]:
        mods = rng.choice(len(BACKGROUND_MODALITIES), size=n, p=self.mod_p)
        u = rng.random(n)
        z = rng.standard_normal(n)
        # per-modality lookups of the same uniforms, vectorised
        idx = {m: np.minimum(np.searchsorted(c, u, side="right"), len(c) - 1) for m, c in self.cum.items()}
        status = np.searchsorted(STATUS_CUM, u, side="right")
        out = []
        for i, m in enumerate(mods.tolist()):
            mod = BACKGROUND_MODALITIES[m]
            if mod in idx:
                out.append(RawEvent(mod, code=f"{self.prefix[mod]}{idx[mod][i]:04d}"))
            elif mod in VALUE_DIST:
                mean, sd, lo, hi = VALUE_DIST[mod]
                out.append(RawEvent(mod, value=round(min(max(mean + sd * float(z[i]), lo), hi), 1)))
            else:
                out.append(RawEvent(mod, code=STATUS_CODES[status[i]]))
        return out


VALUE_DIST = {
    Modality.SBP: (130.0, 18.0, 80.0, 200.0),
    Modality.DBP: (80.0, 10.0, 50.0, 140.0),
    Modality.BMI: (27.0, 5.0, 16.0, 50.0),
}
STATUS_CUM = np.cumsum([0.2, 0.3])


CONDITIONS = ("both", "late_only", "early_only", "neither")


def sample_length(cfg: GeneratorConfig, rng: np.random.Generator) -> int:
    return max(1, int(math.ceil(rng.lognormal(cfg.log_mu, cfg.length_sigma))))


def _plant(events: list[RawEvent], rng: np.random.Generator, lo: int, hi: int, copies: int, code: str) -> None:
    for pos in rng.choice(np.arange(lo, hi), size=min(copies, hi - lo), replace=False):
        events[int(pos)] = RawEvent(Modality.DIAG, code=code)


def generate_patient(cfg: GeneratorConfig, index: int, sampler: _Sampler | None = None) -> tuple[PatientRecord, str]:
    """One patient from its own RNG stream keyed by (seed, index); returns (record, condition)."""
    sampler = sampler or _Sampler(cfg)
    rule = cfg.rule
    rng = np.random.default_rng([cfg.seed, index])
    n = sample_length(cfg, rng)

    condition = "neither"
    if n > rule.boundary:
        f = cfg.long_fraction
        probs = [rule.prevalence / f, rule.late_only_rate / f, rule.early_only_rate / f]
        probs.append(max(0.0, 1.0 - sum(probs)))
        condition = CONDITIONS[rng.choice(4, p=np.asarray(probs) / sum(probs))]

    events = sampler.events(rng, n)
    if condition in ("both", "early_only"):
        _plant(events, rng, max(0, n - rule.horizon), n - rule.boundary, rule.trigger_copies, rule.trigger_code)
    if condition in ("both", "late_only"):
        _plant(events, rng, n - rule.boundary, n, rule.modifier_copies, rule.modifier_code)

    p = rule.p_hi if condition == "both" else rule.p_lo
    label = int(rng.random() < p)

    visits = []
    age0 = int(rng.integers(16, 71))
    day = 0
    i = 0
    lam = cfg.events_per_visit - 1.0
    while i < n:
        size = 1 + int(rng.poisson(lam))
        age = min(age0 + day // 365, 120)
        visits.append(Visit(age, day, events[i : i + size]))
        i += size
        day += 1 + int(rng.exponential(cfg.mean_gap_days))
    return PatientRecord(f"P{index:06d}", label, visits), condition


def generate_cohort(cfg: GeneratorConfig) -> tuple[list[PatientRecord], list[str]]:
    cfg.validate()
    sampler = _Sampler(cfg)
    pairs = [generate_patient(cfg, i, sampler) for i in range(cfg.n_patients)]
    return [p for p, _ in pairs], [c for _, c in pairs]


def _group_auroc(groups: list[tuple[float, float, float]]) -> float:
    """AUROC of a score that is constant within groups of (mass, score, P(label=1))."""
    pos = [(m * p, s) for m, s, p in groups]
    neg = [(m * (1 - p), s) for m, s, p in groups]
    tp, tn = sum(a for a, _ in pos), sum(b for b, _ in neg)
    if tp <= 0 or tn <= 0:
        return 0.5
    total = 0.0
    for a, s in pos:
        for b, t in neg:
            total += a * b * (1.0 if s > t else 0.5 if s == t else 0.0)
    return total / (tp * tn)


def bayes_optimal_auroc(cfg: GeneratorConfig) -> dict[str, float]:
    """AUROC ceilings: an oracle seeing the full history, and one seeing only the suffix.

    The suffix oracle observes only whether the late modifier is present,
    which leaves true cases indistinguishable from late-only decoys.
    """
    r = cfg.rule
    full = _group_auroc([(r.prevalence, r.p_hi, r.p_hi), (1 - r.prevalence, r.p_lo, r.p_lo)])
    carriers = r.prevalence + r.late_only_rate
    if carriers > 0:
        s = (r.prevalence * r.p_hi + r.late_only_rate * r.p_lo) / carriers
        truncated = _group_auroc([(carriers, s, s), (1 - carriers, r.p_lo, r.p_lo)])
    else:
        truncated = 0.5
    return {"full": full, "truncated": truncated}


def write_cohort(cfg: GeneratorConfig, path: str | Path) -> dict:
    """Write the dataset file plus ``<path>.manifest.json``; returns the manifest."""
    records, conditions = generate_cohort(cfg)
    save_dataset(records, path)
    labels = [r.label for r in records]
    manifest = {
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.canonical_text(),
        "n_patients": len(records),
        "positives": int(sum(labels)),
        "long_patients": int(sum(r.n_events > cfg.rule.boundary for r in records)),
        "conditions": {c: conditions.count(c) for c in CONDITIONS},
        "oracle_auroc": bayes_optimal_auroc(cfg),
    }
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
