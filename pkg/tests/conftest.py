import numpy as np
import pytest

from gct import synthgen
from gct.models import Vocab
from gct.records import Encounter


def tiny_encounter(enc_id=0, dx=(0, 1), treat=(2,), lab=(3,), edges=None, labels=None) -> Encounter:
    """A hand-built encounter. Default structure: d0 -> m0 -> r0, d1 leaf."""
    if edges is None:
        edges = [("v:0", f"d:{i}") for i in range(len(dx))]
        if treat:
            edges += [("d:0", f"m:{i}") for i in range(len(treat))]
        if lab:
            edges += [("m:0", f"r:{i}") for i in range(len(lab))]
    return Encounter(enc_id, list(dx), list(treat), list(lab), edges, dict(labels or {}))


def random_tree_encounter(rng: np.random.Generator, enc_id: int, max_nodes: int = 6,
                          vocab: int = 5) -> Encounter:
    """Random visit -> dx -> treatment -> lab tree with at most ``max_nodes`` nodes."""
    while True:
        n_dx = int(rng.integers(1, 3))
        n_treat = int(rng.integers(1, 3))
        n_lab = int(rng.integers(0, 3))
        if 1 + n_dx + n_treat + n_lab <= max_nodes:
            break
    edges = [("v:0", f"d:{i}") for i in range(n_dx)]
    edges += [(f"d:{int(rng.integers(n_dx))}", f"m:{i}") for i in range(n_treat)]
    edges += [(f"m:{int(rng.integers(n_treat))}", f"r:{i}") for i in range(n_lab)]
    labels = {"dx_treatment": sorted({1, 2} & set(rng.integers(0, 3, size=2).tolist()))}
    return Encounter(enc_id, rng.integers(vocab, size=n_dx).tolist(), rng.integers(vocab, size=n_treat).tolist(),
                     rng.integers(vocab, size=n_lab).tolist(), edges, labels)


@pytest.fixture(scope="session")
def small_dataset():
    """200 labelled encounters from the small-vocabulary generator."""
    config = synthgen.SyntheticConfig.desk(n_encounters=200, min_codes=1, max_codes=6, seed=11)
    return synthgen.generate(config, synthgen.DxTreatmentLabelSpec())


@pytest.fixture(scope="session")
def desk_vocab():
    return Vocab(100, 100, 100)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
