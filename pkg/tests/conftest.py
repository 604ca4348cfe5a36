from __future__ import annotations

import numpy as np
import pytest

from mobgam.gam.design import fit_gam, panel_spec
from mobgam.synth import SynthConfig, generate_panel


@pytest.fixture(scope="session")
def synthetic():
    """Default synthetic panel and its ground truth."""
    return generate_panel(SynthConfig())


@pytest.fixture(scope="session")
def model_tpp(synthetic):
    panel, _ = synthetic
    return fit_gam(panel_spec("tpp"), panel)


@pytest.fixture(scope="session")
def model_pmt(synthetic):
    panel, _ = synthetic
    return fit_gam(panel_spec("pmt"), panel)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


PIPELINE = (
    ("simulate", []),
    ("metrics", ["--input", "{out}/trips.csv", "--orders", "{out}/orders.csv",
                 "--covariates", "{out}/covariates.csv", "--out", "{out}/metrics"]),
    ("vif", ["--input", "{out}/panel.csv", "--format", "json"]),
    ("fit", ["--input", "{out}/panel.csv"]),
    ("pdp", ["--input", "{out}/panel.csv", "--model", "{out}"]),
    ("anchor", ["--input", "{out}/panel.csv", "--orders", "{out}/orders.csv"]),
    ("report", ["--input", "{out}", "--out", "{out}/report"]),
)


def run_pipeline(out):
    """Run every CLI stage into ``out``; returns the exit codes in stage order."""
    from mobgam.cli import main

    codes = []
    for command, args in PIPELINE:
        argv = [command, *(a.format(out=out) for a in args)]
        if "--out" not in argv:
            argv += ["--out", str(out)]
        codes.append(main(argv))
    return codes


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Two independent runs of the default pipeline: (dir, exit codes) each."""
    runs = []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        runs.append((out, run_pipeline(out)))
    return runs


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split(".")[0].split()[-1])):
            terminalreporter.write_line(line)
