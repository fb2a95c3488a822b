"""Per-encounter matrices: true adjacency, attention mask and conditional prior.

Node order inside an encounter is fixed: the visit placeholder first, then
the diagnosis block, the treatment block and the lab block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, StructureError
from .numerics import MASKED
from .records import Encounter, parse_ref

VISIT, DX, TREAT, LAB = 0, 1, 2, 3
_KIND_OF_REF = {"v": VISIT, "d": DX, "m": TREAT, "r": LAB}


@dataclass(frozen=True)
class NodeIndexing:
    n_dx: int
    n_treat: int
    n_lab: int

    @classmethod
    def of(cls, encounter: Encounter) -> "NodeIndexing":
        return cls(len(encounter.dx), len(encounter.treat), len(encounter.lab))

    @property
    def size(self) -> int:
        return 1 + self.n_dx + self.n_treat + self.n_lab

    @property
    def dx(self) -> slice:
        return slice(1, 1 + self.n_dx)

    @property
    def treat(self) -> slice:
        return slice(1 + self.n_dx, 1 + self.n_dx + self.n_treat)

    @property
    def lab(self) -> slice:
        return slice(1 + self.n_dx + self.n_treat, self.size)

    def kinds(self) -> np.ndarray:
        return np.repeat(
            np.array([VISIT, DX, TREAT, LAB]), [1, self.n_dx, self.n_treat, self.n_lab]
        )

    def index(self, kind: str, pos: int) -> int:
        k = _KIND_OF_REF[kind]
        limit = (1, self.n_dx, self.n_treat, self.n_lab)[k]
        if not 0 <= pos < limit:
            raise StructureError(f"node {kind}:{pos} outside encounter")
        return (0, 1, 1 + self.n_dx, 1 + self.n_dx + self.n_treat)[k] + pos

    def ref_index(self, ref: str) -> int:
        return self.index(*parse_ref(ref))


def node_labels(encounter: Encounter) -> list[str]:
    """Display names: ``Visit``, ``D_<code>``, ``T_<code>``, ``L_<code>``."""
    return (
        ["Visit"]
        + [f"D_{c}" for c in encounter.dx]
        + [f"T_{c}" for c in encounter.treat]
        + [f"L_{c}" for c in encounter.lab]
    )


@dataclass
class CondProbTables:
    """Encounter-level co-occurrence counts, finalized to conditional probabilities."""

    n_encounters: int
    count_dx: np.ndarray
    count_treat: np.ndarray
    count_lab: np.ndarray
    co_dx_treat: np.ndarray
    co_treat_lab: np.ndarray

    def __post_init__(self):
        self.p_treat_given_dx = _ratio(self.co_dx_treat, self.count_dx[:, None])
        self.p_dx_given_treat = _ratio(self.co_dx_treat.T, self.count_treat[:, None])
        self.p_lab_given_treat = _ratio(self.co_treat_lab, self.count_treat[:, None])
        self.p_treat_given_lab = _ratio(self.co_treat_lab.T, self.count_lab[:, None])

    @property
    def vocab(self) -> tuple[int, int, int]:
        return len(self.count_dx), len(self.count_treat), len(self.count_lab)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def vocab_sizes(encounters) -> tuple[int, int, int]:
    sizes = [0, 0, 0]
    for e in encounters:
        for i, codes in enumerate((e.dx, e.treat, e.lab)):
            if codes:
                sizes[i] = max(sizes[i], max(codes) + 1)
    return tuple(max(s, 1) for s in sizes)


def estimate_cond_probs(encounters, vocab: tuple[int, int, int] | None = None) -> CondProbTables:
    """p(m|d) = #encounters with both / #encounters with d, and likewise for
    p(d|m), p(r|m), p(m|r). Unseen pairs get 0."""
    encounters = list(encounters)
    if not encounters:
        raise ValueError("cannot estimate conditional probabilities from no encounters")
    n_dx, n_treat, n_lab = vocab or vocab_sizes(encounters)
    count_dx = np.zeros(n_dx, dtype=np.int64)
    count_treat = np.zeros(n_treat, dtype=np.int64)
    count_lab = np.zeros(n_lab, dtype=np.int64)
    co_dm = np.zeros((n_dx, n_treat), dtype=np.int64)
    co_mr = np.zeros((n_treat, n_lab), dtype=np.int64)
    for e in encounters:
        ud = np.unique(np.asarray(e.dx, dtype=np.intp))
        um = np.unique(np.asarray(e.treat, dtype=np.intp))
        ur = np.unique(np.asarray(e.lab, dtype=np.intp))
        count_dx[ud] += 1
        count_treat[um] += 1
        count_lab[ur] += 1
        co_dm[np.ix_(ud, um)] += 1
        co_mr[np.ix_(um, ur)] += 1
    return CondProbTables(len(encounters), count_dx, count_treat, count_lab, co_dm, co_mr)


def allowed_pattern(indexing: NodeIndexing) -> np.ndarray:
    """Boolean N x N: diagonal, visit<->all, dx<->treatment, treatment<->lab."""
    kinds = indexing.kinds()
    row, col = kinds[:, None], kinds[None, :]
    allowed = (row == VISIT) | (col == VISIT)
    allowed |= ((row == DX) & (col == TREAT)) | ((row == TREAT) & (col == DX))
    allowed |= ((row == TREAT) & (col == LAB)) | ((row == LAB) & (col == TREAT))
    np.fill_diagonal(allowed, True)
    return allowed


def build_mask(encounter: Encounter) -> np.ndarray:
    """Additive attention mask: 0 where allowed, -inf sentinel elsewhere."""
    return np.where(allowed_pattern(NodeIndexing.of(encounter)), 0.0, MASKED)


def _lookup(table: np.ndarray, rows, cols) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = np.zeros((len(rows), len(cols)))
    r_ok = rows < table.shape[0]
    c_ok = cols < table.shape[1]
    out[np.ix_(r_ok, c_ok)] = table[np.ix_(rows[r_ok], cols[c_ok])]
    return out


def build_prior(encounter: Encounter, tables: CondProbTables, green_value: float = 1.0) -> np.ndarray:
    """Row-stochastic prior P over the encounter's nodes.

    Self and visit connections get ``green_value``; an allowed cross-kind cell
    (row code a, column code b) gets p(b | a) from ``tables``; everything else
    is 0. Rows are then normalized.
    """
    if green_value <= 0:
        raise ContractError("green_value must be positive")
    ix = NodeIndexing.of(encounter)
    n = ix.size
    raw = np.zeros((n, n))
    raw[0, :] = green_value
    raw[:, 0] = green_value
    np.fill_diagonal(raw, green_value)
    raw[ix.dx, ix.treat] = _lookup(tables.p_treat_given_dx, encounter.dx, encounter.treat)
    raw[ix.treat, ix.dx] = _lookup(tables.p_dx_given_treat, encounter.treat, encounter.dx)
    raw[ix.treat, ix.lab] = _lookup(tables.p_lab_given_treat, encounter.treat, encounter.lab)
    raw[ix.lab, ix.treat] = _lookup(tables.p_treat_given_lab, encounter.lab, encounter.treat)
    sums = raw.sum(axis=1, keepdims=True)
    assert np.all(sums > 0), "diagonal is always green"
    return raw / sums


def adjacency_matrix(encounter: Encounter) -> np.ndarray:
    """Symmetric 0/1 adjacency from the encounter's edges plus visit<->dx."""
    if encounter.edges is None:
        raise StructureError(f"encounter {encounter.id!r} carries no structure")
    ix = NodeIndexing.of(encounter)
    a = np.zeros((ix.size, ix.size))
    for parent, child in encounter.edges:
        i, j = ix.ref_index(parent), ix.ref_index(child)
        if i != j:
            a[i, j] = a[j, i] = 1.0
    a[0, ix.dx] = a[ix.dx, 0] = 1.0
    return a


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """D~^-1 (A + I)."""
    a_tilde = a + np.eye(a.shape[0])
    return a_tilde / a_tilde.sum(axis=1, keepdims=True)


def build_true_adjacency(encounter: Encounter) -> np.ndarray:
    return normalize_adjacency(adjacency_matrix(encounter))


def random_adjacency(n: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Uniform(0, 1) entries, rows normalized to sum to 1."""
    m = rng.uniform(0.0, 1.0, size=(n, n))
    return m / m.sum(axis=1, keepdims=True)


def mask_diagnosis_in_prior(prior: np.ndarray, dx_index: int, indexing: NodeIndexing) -> np.ndarray:
    """Zero the row and column of one diagnosis node and renormalize.

    The masked row becomes one-hot on itself so P stays row-stochastic.
    """
    if not indexing.dx.start <= dx_index < indexing.dx.stop:
        raise ContractError(f"node {dx_index} is not a diagnosis node")
    p = np.array(prior, dtype=np.float64)
    p[dx_index, :] = 0.0
    p[:, dx_index] = 0.0
    p /= np.where(p.sum(axis=1, keepdims=True) > 0, p.sum(axis=1, keepdims=True), 1.0)
    p[dx_index, dx_index] = 1.0
    return p
