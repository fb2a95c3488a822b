"""Synthetic encounter records with known visit -> dx -> treatment -> lab structure.

Code frequencies follow normalized Pareto draws; stop/continue decisions are
per-code Bernoulli probabilities drawn from clipped normals.

Sampling one encounter:

* outer loop: draw a diagnosis from p(D), then keep drawing co-occurring
  diagnoses from p(D | most recent dx) while ``u < a(first dx)``; another
  outer pass follows with probability ``outer_continue_prob``;
* per diagnosis d: draw a treatment m from p(M | d), then labs from
  p(R | m, d) while ``u < c(m, d)``; another treatment follows while
  ``u < b(d)`` (at least one treatment per diagnosis).

Encounters outside [min_codes, max_codes] are rejected and resampled from
the same per-index stream, so the dataset is order-stable by index.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .records import Encounter
from .rng import stream

_BELOW_ONE = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class SyntheticConfig:
    n_dx: int = 1000
    n_treat: int = 1000
    n_lab: int = 1000
    alpha_prior: float = 2.0
    alpha_cond: float = 1.5
    a_mean: float = 0.5
    a_std: float = 0.1
    b_mean: float = 0.5
    b_std: float = 0.25
    c_mean: float = 0.5
    c_std: float = 0.25
    outer_continue_prob: float = 0.5
    n_encounters: int = 5000
    min_codes: int = 5
    max_codes: int = 50
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_dx, self.n_treat, self.n_lab) < 1:
            raise ConfigError("vocabulary sizes must be >= 1")
        if self.alpha_prior <= 0 or self.alpha_cond <= 0:
            raise ConfigError("Pareto shapes must be positive")
        if min(self.a_std, self.b_std, self.c_std) < 0:
            raise ConfigError("standard deviations must be non-negative")
        if not 0.0 <= self.outer_continue_prob < 1.0:
            raise ConfigError("outer_continue_prob must lie in [0, 1)")
        if self.min_codes > self.max_codes:
            raise ConfigError("min_codes must not exceed max_codes")
        if self.n_encounters < 0 or self.seed < 0:
            raise ConfigError("n_encounters and seed must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> "SyntheticConfig":
        """Small-vocabulary preset used for laptop-scale experiments."""
        base = dict(n_dx=100, n_treat=100, n_lab=100, n_encounters=5000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DxTreatmentLabelSpec:
    d1: int = 0
    d2: int = 1
    m1: int = 0
    p_d1: float = 0.33
    a_d1: float = 0.8
    p_d2_given_d1: float = 0.33
    b_d1: float = 0.5
    b_d2: float = 0.5
    p_m1_given_d1: float = 0.2
    p_m1_given_d2: float = 0.8

    def validate(self, n_dx: int, n_treat: int) -> None:
        if not (0 <= self.d1 < n_dx and 0 <= self.d2 < n_dx and 0 <= self.m1 < n_treat):
            raise ConfigError("label target codes must lie inside the vocabulary")
        if self.d1 == self.d2:
            raise ConfigError("d1 and d2 must differ")
        probs = (self.p_d1, self.a_d1, self.p_d2_given_d1, self.b_d1, self.b_d2,
                 self.p_m1_given_d1, self.p_m1_given_d2)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("label probabilities must lie in [0, 1]")

    def analytic_prevalence(self) -> tuple[float, float]:
        """Probability of a d1-m1 and of a d2-m1 connection under the planted chain."""
        first = self.p_d1 * self.b_d1 * self.p_m1_given_d1
        second = self.p_d1 * self.a_d1 * self.p_d2_given_d1 * self.b_d2 * self.p_m1_given_d2
        return first, second


def pareto_row(rng: np.random.Generator, alpha: float, size: int) -> np.ndarray:
    """permute(normalize(pareto draws)); draws are 1/U**(1/alpha) - 1."""
    x = rng.pareto(alpha, size)
    total = x.sum()
    if total <= 0:
        x = np.ones(size)
        total = float(size)
    return rng.permutation(x / total)


def _clipped_normal(rng, mean, std, size) -> np.ndarray:
    return np.clip(rng.normal(mean, std, size), 0.0, _BELOW_ONE)


def _draw(rng: np.random.Generator, cdf: np.ndarray) -> int:
    return min(int(np.searchsorted(cdf, rng.random(), side="right")), cdf.shape[0] - 1)


@dataclass
class GroundTruthTables:
    config: SyntheticConfig
    p_dx: np.ndarray
    p_dx_given_dx: np.ndarray
    p_treat_given_dx: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    lab_overrides: dict = field(default_factory=dict)
    label_spec: DxTreatmentLabelSpec | None = None

    def __post_init__(self):
        self._lab_row = lru_cache(maxsize=8192)(self._compute_lab_row)
        self._lab_cdf = lru_cache(maxsize=8192)(lambda m, d: np.cumsum(self._lab_row(m, d)))
        self._refresh_cdfs()

    def _refresh_cdfs(self) -> None:
        self.cdf_dx = np.cumsum(self.p_dx)
        self.cdf_dx_given_dx = np.cumsum(self.p_dx_given_dx, axis=1)
        self.cdf_treat_given_dx = np.cumsum(self.p_treat_given_dx, axis=1)
        spec = self.label_spec
        if spec is None:
            self.base_cdf_dx = self.cdf_dx
            self.base_cdf_dx_given_dx = self.cdf_dx_given_dx
            return
        # Label targets enter encounters only through the planted chain.
        base = self.p_dx.copy()
        base[[spec.d1, spec.d2]] = 0.0
        self.base_cdf_dx = np.cumsum(_renormalized(base))
        cond = self.p_dx_given_dx.copy()
        cond[:, [spec.d1, spec.d2]] = 0.0
        self.base_cdf_dx_given_dx = np.cumsum(
            np.apply_along_axis(_renormalized, 1, cond), axis=1
        )

    def _compute_lab_row(self, m: int, d: int) -> np.ndarray:
        override = self.lab_overrides.get((m, d))
        if override is not None:
            return override
        rng = stream(self.config.seed, "p_lab_given_treat_dx", m, d)
        return pareto_row(rng, self.config.alpha_cond, self.config.n_lab)

    def p_lab_given(self, m: int, d: int) -> np.ndarray:
        """p(R | m, d), generated on demand from its keyed stream."""
        return self._lab_row(int(m), int(d))

    def lab_cdf(self, m: int, d: int) -> np.ndarray:
        return self._lab_cdf(int(m), int(d))


def _renormalized(row: np.ndarray) -> np.ndarray:
    total = row.sum()
    if total <= 0:
        return np.full_like(row, 1.0 / row.shape[0])
    return row / total


def build_tables(config: SyntheticConfig) -> GroundTruthTables:
    config.validate()
    seed, alpha = config.seed, config.alpha_cond
    p_dx = pareto_row(stream(seed, "p_dx"), config.alpha_prior, config.n_dx)
    p_dx_given_dx = np.stack(
        [pareto_row(stream(seed, "p_dx_given_dx", i), alpha, config.n_dx) for i in range(config.n_dx)]
    )
    p_treat_given_dx = np.stack(
        [pareto_row(stream(seed, "p_treat_given_dx", i), alpha, config.n_treat) for i in range(config.n_dx)]
    )
    a = _clipped_normal(stream(seed, "a"), config.a_mean, config.a_std, config.n_dx)
    b = _clipped_normal(stream(seed, "b"), config.b_mean, config.b_std, config.n_dx)
    c = _clipped_normal(stream(seed, "c"), config.c_mean, config.c_std, (config.n_treat, config.n_dx))
    return GroundTruthTables(config, p_dx, p_dx_given_dx, p_treat_given_dx, a, b, c)


def override_entry(row: np.ndarray, index: int, value: float) -> np.ndarray:
    """Set ``row[index] = value`` and rescale the rest so the row sums to 1."""
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"override probability {value} outside [0, 1]")
    row = np.array(row, dtype=np.float64)
    if row[index] == value:
        return row
    rest = row.sum() - row[index]
    if value < 1.0 and rest <= 0.0:
        raise ConfigError("cannot renormalize: no remaining mass outside the overridden entry")
    row *= (1.0 - value) / rest if rest > 0 else 0.0
    row[index] = value
    return row


def inject_dx_treatment_labels(tables: GroundTruthTables, spec: DxTreatmentLabelSpec) -> GroundTruthTables:
    """Tables with the dx-treatment label overrides applied (input left untouched)."""
    cfg = tables.config
    spec.validate(cfg.n_dx, cfg.n_treat)
    p_dx = override_entry(tables.p_dx, spec.d1, spec.p_d1)
    p_dx_given_dx = tables.p_dx_given_dx.copy()
    p_dx_given_dx[spec.d1] = override_entry(p_dx_given_dx[spec.d1], spec.d2, spec.p_d2_given_d1)
    p_treat = tables.p_treat_given_dx.copy()
    p_treat[spec.d1] = override_entry(p_treat[spec.d1], spec.m1, spec.p_m1_given_d1)
    p_treat[spec.d2] = override_entry(p_treat[spec.d2], spec.m1, spec.p_m1_given_d2)
    a = tables.a.copy()
    a[spec.d1] = spec.a_d1
    b = tables.b.copy()
    b[spec.d1] = spec.b_d1
    b[spec.d2] = spec.b_d2
    return GroundTruthTables(
        cfg, p_dx, p_dx_given_dx, p_treat, a, b, tables.c.copy(),
        dict(tables.lab_overrides), label_spec=spec,
    )


class _Builder:
    """Accumulates one encounter; stops once any code type passes ``cap``."""

    def __init__(self, cap: int):
        self.cap = cap
        self.dx: list[int] = []
        self.treat: list[int] = []
        self.lab: list[int] = []
        self.edges: list[tuple[str, str]] = []

    @property
    def full(self) -> bool:
        return max(len(self.dx), len(self.treat), len(self.lab)) > self.cap

    def add_dx(self, code: int) -> int:
        self.dx.append(code)
        pos = len(self.dx) - 1
        self.edges.append(("v:0", f"d:{pos}"))
        return pos

    def add_treat(self, code: int, dx_pos: int) -> int:
        self.treat.append(code)
        pos = len(self.treat) - 1
        self.edges.append((f"d:{dx_pos}", f"m:{pos}"))
        return pos

    def add_lab(self, code: int, treat_pos: int) -> None:
        self.lab.append(code)
        self.edges.append((f"m:{treat_pos}", f"r:{len(self.lab) - 1}"))


def _sample_labs(t: GroundTruthTables, rng, enc: _Builder, m: int, d: int, m_pos: int) -> None:
    cdf = t.lab_cdf(m, d)
    while not enc.full and rng.random() < t.c[m, d]:
        enc.add_lab(_draw(rng, cdf), m_pos)


def plan_labelled_chain(tables: GroundTruthTables, rng: np.random.Generator) -> list[tuple[int, int | None]]:
    """Decide the planted d1 (-> co-occurring dx) chain of one encounter.

    Returns ``(dx code, treatment code or None)`` pairs: d1 is planted with
    probability p(d1); a second diagnosis follows from p(D | d1) with
    probability a(d1); each planted diagnosis d receives one treatment from
    p(M | d) with probability b(d). With the default overrides this gives
    P(d1-m1) = p(d1) b(d1) p(m1|d1) and P(d2-m1) = p(d1) a(d1) p(d2|d1) b(d2) p(m1|d2).
    """
    spec = tables.label_spec
    if spec is None or not rng.random() < tables.p_dx[spec.d1]:
        return []
    chain = [spec.d1]
    if rng.random() < tables.a[spec.d1]:
        chain.append(_draw(rng, tables.cdf_dx_given_dx[spec.d1]))
    plan = []
    for d in chain:
        m = _draw(rng, tables.cdf_treat_given_dx[d]) if rng.random() < tables.b[d] else None
        plan.append((d, m))
    return plan


def sample_encounter(tables: GroundTruthTables, config: SyntheticConfig,
                     rng: np.random.Generator, encounter_id=0, plan=None) -> Encounter:
    """One raw encounter. May exceed ``config.max_codes`` (the filter rejects it);
    sampling stops early once that is certain.

    With label-injected tables the planted chain comes from ``plan`` (drawn
    from ``rng`` when omitted); :func:`generate` fixes it per encounter index
    so that filter rejections do not bias label prevalence.
    """
    t = tables
    enc = _Builder(config.max_codes)
    outer_stop = 1.0 - config.outer_continue_prob
    while True:
        first = _draw(rng, t.base_cdf_dx)
        enc.add_dx(first)
        recent = first
        while not enc.full and rng.random() < t.a[first]:
            recent = _draw(rng, t.base_cdf_dx_given_dx[recent])
            enc.add_dx(recent)
        if enc.full or rng.random() < outer_stop:
            break
    n_base = len(enc.dx)

    spec = t.label_spec
    if spec is not None and plan is None:
        plan = plan_labelled_chain(t, rng)
    planted: list[tuple[int, int | None]] = []
    for d, m in plan or ():
        if enc.full:
            break
        planted.append((enc.add_dx(d), m))

    for pos in range(n_base):
        d = enc.dx[pos]
        while not enc.full:
            m = _draw(rng, t.cdf_treat_given_dx[d])
            m_pos = enc.add_treat(m, pos)
            _sample_labs(t, rng, enc, m, d, m_pos)
            if enc.full or not rng.random() < t.b[d]:
                break
    for pos, m in planted:
        if enc.full:
            break
        if m is not None:
            m_pos = enc.add_treat(m, pos)
            _sample_labs(t, rng, enc, m, enc.dx[pos], m_pos)

    encounter = Encounter(encounter_id, enc.dx, enc.treat, enc.lab, enc.edges, {})
    if spec is not None:
        encounter.labels["dx_treatment"] = sorted(assign_labels(encounter, spec))
    return encounter


def passes_filter(enc: Encounter, config: SyntheticConfig) -> bool:
    lo, hi = config.min_codes, config.max_codes
    return (
        len(enc.dx) >= lo and len(enc.treat) >= lo
        and len(enc.dx) <= hi and len(enc.treat) <= hi and len(enc.lab) <= hi
    )


def filter_encounters(encounters, config: SyntheticConfig) -> list[Encounter]:
    """Keep encounters with >= min dx and treatments and <= max of every type."""
    return [e for e in encounters if passes_filter(e, config)]


def assign_labels(encounter: Encounter, spec: DxTreatmentLabelSpec) -> set[int]:
    """{1} for a d1->m1 edge, {2} for a d2->m1 edge (both possible)."""
    labels: set[int] = set()
    for parent, child in encounter.edges or ():
        if not (parent.startswith("d:") and child.startswith("m:")):
            continue
        d = encounter.dx[int(parent[2:])]
        m = encounter.treat[int(child[2:])]
        if m != spec.m1:
            continue
        if d == spec.d1:
            labels.add(1)
        if d == spec.d2:
            labels.add(2)
    return labels


PLAN_RETRY_LIMIT = 200


def generate(config: SyntheticConfig, label_spec: DxTreatmentLabelSpec | None = None,
             tables: GroundTruthTables | None = None) -> list[Encounter]:
    """``config.n_encounters`` filtered encounters; index i draws from its own stream."""
    config.validate()
    if tables is None:
        tables = build_tables(config)
        if label_spec is not None:
            tables = inject_dx_treatment_labels(tables, label_spec)
    out = []
    for i in range(config.n_encounters):
        rng = stream(config.seed, "encounter", i)
        plan_rng = stream(config.seed, "label_plan", i)
        plan = plan_labelled_chain(tables, plan_rng)
        attempts = 0
        while True:
            enc = sample_encounter(tables, config, rng, encounter_id=i, plan=plan)
            if passes_filter(enc, config):
                out.append(enc)
                break
            attempts += 1
            if attempts % PLAN_RETRY_LIMIT == 0:
                # A planted treatment with c(m, d) near 1 can make the filter
                # practically unsatisfiable; draw a fresh plan instead.
                plan = plan_labelled_chain(tables, plan_rng)
    return out


def with_seed(config: SyntheticConfig, seed: int) -> SyntheticConfig:
    return replace(config, seed=seed)
