from __future__ import annotations

import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from mobgam import panel as pn
from mobgam.cli import main

from test_summary import GOLDEN, mask_numbers


def files_under(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestPipeline:
    def test_every_stage_succeeds(self, pipeline_runs):
        for _, codes in pipeline_runs:
            assert codes == [0] * 7

    def test_artifacts(self, pipeline_runs):
        out, _ = pipeline_runs[0]
        names = set(files_under(out))
        assert {"panel.csv", "trips.csv", "orders.csv", "covariates.csv", "truth.json", "vif.json",
                "model_tpp.json", "model_pmt.json", "summary_tpp.txt", "summary_pmt.json",
                "effects.csv", "series_tpp.csv", "series_pmt.csv", "national.json", "anchor.csv",
                "metrics/panel.csv", "metrics/benchmark.csv", "report/report.json",
                "report/curve_time_tpp.csv", "report/curve_week_pmt.csv"} <= names
        assert not any(n.startswith(".mobgam-") or "/.mobgam-" in n for n in names)
        effects = pd.read_csv(out / "effects.csv")
        assert len(effects) == 43
        assert list(effects.columns) == ["state", "effect_tpp", "effect_pmt", "rank_tpp", "rank_pmt"]
        series = pd.read_csv(out / "series_tpp.csv")
        assert list(series.columns) == ["state", "date", "with_order", "without_order"]
        assert len(series) == 43 * 71

    def test_byte_identical_reruns(self, pipeline_runs):
        (a, _), (b, _) = pipeline_runs
        fa, fb = files_under(a), files_under(b)
        assert fa.keys() == fb.keys()
        differing = [k for k in fa if fa[k] != fb[k]]
        assert differing == []

    def test_metrics_stage_recovers_panel(self, pipeline_runs):
        out, _ = pipeline_runs[0]
        simulated = pn.read_panel(out / "panel.csv")
        rebuilt = pn.read_panel(out / "metrics" / "panel.csv")
        for c in ("tpp", "pmt", "rel_tpp", "rel_pmt"):
            np.testing.assert_allclose(rebuilt[c], simulated[c], rtol=0, atol=1e-9)
        for c in ("order_level", "new_cases", "adj_new_cases", "national_new_cases", "approval_rate", "week"):
            np.testing.assert_allclose(rebuilt[c], simulated[c], rtol=0, atol=1e-12)

    def test_summary_layout(self, pipeline_runs):
        out, _ = pipeline_runs[0]
        for r in ("tpp", "pmt"):
            text = (out / f"summary_{r}.txt").read_text()
            assert mask_numbers(text) == (GOLDEN / f"summary_{r}_structure.txt").read_text()

    def test_national_and_report(self, pipeline_runs, capsys):
        out, _ = pipeline_runs[0]
        nat = json.loads((out / "national.json").read_text())
        assert nat["weighted"] is True
        assert nat["text"].startswith("(") and " trips, " in nat["text"] and " miles, " in nat["text"]
        report = json.loads((out / "report" / "report.json").read_text())
        assert {"summary_tpp", "summary_pmt", "national", "vif", "effects", "anchor"} <= set(report)
        curve = pd.read_csv(out / "report" / "curve_week_tpp.csv")
        assert len(curve) == 7

    def test_anchor_layout(self, pipeline_runs):
        out, _ = pipeline_runs[0]
        lines = (out / "anchor.csv").read_text().splitlines()
        assert lines[0] == (GOLDEN / "anchor_header.csv").read_text().strip()
        assert len(lines) == 44


class TestInputErrors:
    def test_fit_on_empty_panel(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text(",".join(pn.PANEL_COLUMNS) + "\n")
        out = tmp_path / "out"
        assert main(["fit", "--input", str(empty), "--out", str(out)]) == 2
        assert not out.exists() or list(out.iterdir()) == []
        assert "no rows" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["fit", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2

    def test_missing_required_flag(self, tmp_path, capsys):
        assert main(["anchor", "--input", "x.csv", "--out", str(tmp_path)]) == 2
        assert "--orders" in capsys.readouterr().err

    def test_bad_panel_value(self, tmp_path, synthetic):
        panel, _ = synthetic
        bad = panel.head(200).copy()
        bad.loc[5, "tpp"] = np.nan
        path = tmp_path / "bad.csv"
        pn.write_csv(bad, path)
        assert main(["fit", "--input", str(path), "--out", str(tmp_path / "o")]) == 2
        assert not (tmp_path / "o").exists()


def test_vif_flags_duplicated_demo_column(tmp_path, capsys):
    demo = resources.files("mobgam") / "data" / "demo_panel.csv"
    assert main(["vif", "--input", str(demo), "--out", str(tmp_path), "--format", "json"]) == 0
    report = json.loads((tmp_path / "vif.json").read_text())
    assert "new_cases_copy" in report["infinite"]
    assert "new_cases_copy" in report["flagged"]
    assert "new_cases_copy: VIF inf" in capsys.readouterr().out
    assert main(["vif", "--input", str(demo), "--out", str(tmp_path)]) == 0
    table = pd.read_csv(tmp_path / "vif.csv")
    assert table.loc[table.covariate == "new_cases_copy", "infinite"].item() == 1


def test_convergence_failure_exit_code(tmp_path):
    demo = resources.files("mobgam") / "data" / "demo_panel.csv"
    panel = pn.read_panel(demo, strict=False)[pn.PANEL_COLUMNS]
    path = tmp_path / "panel.csv"
    pn.write_csv(panel, path)
    out = tmp_path / "out"
    proc = subprocess.run([sys.executable, "-m", "mobgam.cli", "fit", "--input", str(path),
                           "--out", str(out), "--max-iter", "1"], capture_output=True, text=True)
    assert proc.returncode == 3
    state = json.loads(proc.stderr.split("\n", 1)[1])
    assert state["response"] == "tpp" and "log_lambda" in state
    assert not out.exists()
