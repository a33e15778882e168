import numpy as np
import pytest

from visitflow.forecast import BiTransGCNConfig, FlowTensor, iso_weeks
from visitflow.graph import Node, build_knn_graph


def make_nodes(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Node(f"u{i:02d}", float(35 + rng.uniform(0, 3)), float(-100 + rng.uniform(0, 3))) for i in range(n)]


def make_tensor(values, nodes):
    values = np.asarray(values, dtype=np.float64)
    n, _, t = values.shape
    coords = np.array([[nd.latitude, nd.longitude] for nd in nodes])
    return FlowTensor(values, [nd.id for nd in nodes], ["visits"], iso_weeks("2022-W01", t), coords)


def toy_config(**overrides):
    base = dict(hidden=8, n_heads=2, ff_hidden=8, history_window=4, dropout=0.0, seed=0)
    base.update(overrides)
    return BiTransGCNConfig(**base)


@pytest.fixture
def nodes4():
    return make_nodes(4)


@pytest.fixture
def graph4(nodes4):
    return build_knn_graph(nodes4, 2)


QUICK_SETTINGS = ["epochs=3", "hidden=16", "ff_hidden=16", "permutations=99"]
PIPELINE = ["train", "predict", "evaluate", "cluster", "moran", "attribute", "report"]


def run_pipeline(run_dir, seed=7, units=12, weeks=60, settings=QUICK_SETTINGS):
    """Drive every CLI step on a fresh synthetic run directory; returns exit codes."""
    from visitflow.cli import main

    codes = [main(["synth", "--run", str(run_dir), "--seed", str(seed),
                   "--units", str(units), "--weeks", str(weeks)])]
    extra = [a for s in settings for a in ("--set", s)]
    for step in PIPELINE:
        codes.append(main([step, "--run", str(run_dir), *extra]))
    return codes


# one (criterion, passed, detail) entry per acceptance check, shown after the run
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
