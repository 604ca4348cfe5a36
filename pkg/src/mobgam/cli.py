"""Command-line pipeline: simulate, metrics, vif, fit, pdp, anchor, report.

Exit codes: 0 success, 2 bad input (schema, data or configuration),
3 smoothing-parameter optimisation did not converge. Outputs are staged in
a temporary directory and moved into ``--out`` only when a command
succeeds, so a failed run leaves nothing behind.

Set ``MOBGAM_LOG`` (e.g. ``INFO`` or ``DEBUG``) for log output on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from . import panel as pn
from . import policy, synth
from .errors import ConvergenceError, DataError, MobgamError
from .gam import serialize
from .gam.design import ModelSpec, fit_gam, model_column, panel_spec
from .gam.summary import summarize

logger = logging.getLogger("mobgam")

RESPONSES = ("tpp", "pmt")
VIF_COVARIATES = ["order_1", "order_2", "order_3", "new_cases", "adj_new_cases",
                  "national_new_cases", "approval_rate", "is_weekend"]


class Staging:
    """Collect output files in a scratch directory; publish them all on success."""

    def __init__(self, out: Path) -> None:
        self.out = out
        self.tmp: Path | None = None
        self.names: list[str] = []

    def __enter__(self) -> "Staging":
        parent = self.out if self.out.exists() else self.out.parent
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".mobgam-", dir=parent))
        return self

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self.tmp / name

    def __exit__(self, exc_type, exc, tb) -> bool:
        try:
            if exc_type is None:
                self.out.mkdir(parents=True, exist_ok=True)
                for name in self.names:
                    os.replace(self.tmp / name, self.out / name)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", newline="\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "isoformat"):
        return o.isoformat()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _require(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise DataError(f"{args.command} requires {', '.join(missing)}")


def _populations(args) -> dict[str, float]:
    return pn.load_populations(args.populations)


def _adjacency(args) -> dict[str, list[str]]:
    return pn.load_adjacency(args.adjacency)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> None:
    config = synth.SynthConfig(seed=args.seed)
    panel, truth = synth.generate_panel(config)
    targets = synth.metric_targets(panel, truth)
    trips = synth.generate_trips(config, targets, truth.populations,
                                 min_trip_miles=args.min_trip_meters / pn.METERS_PER_MILE)
    with Staging(args.out) as st:
        pn.write_csv(panel, st.path("panel.csv"))
        pn.write_csv(trips, st.path("trips.csv"))
        pn.write_csv(truth.orders_frame(), st.path("orders.csv"))
        pn.write_csv(synth.covariates_frame(panel), st.path("covariates.csv"))
        st.path("truth.json").write_text(truth.to_json() + "\n", newline="\n")


def cmd_metrics(args) -> None:
    _require(args, "input", "orders")
    trips = pn.read_trips(args.input)
    orders = pn.read_orders(args.orders)
    covariates = pn.read_covariates(args.covariates) if args.covariates else None
    dates = sorted(set(trips["date"]))
    daily = pn.compute_daily_metrics(trips, _populations(args),
                                     args.min_trip_meters / pn.METERS_PER_MILE, dates)
    bench = pn.build_benchmark(daily)
    panel = pn.assemble_panel(daily, bench, orders, covariates, _adjacency(args))
    with Staging(args.out) as st:
        pn.write_csv(panel, st.path("panel.csv"))
        pn.write_csv(bench.to_frame(), st.path("benchmark.csv"))


def _vif_frame(data: pd.DataFrame) -> pd.DataFrame:
    cols = {name: pd.Series(model_column(data, name)) for name in VIF_COVARIATES}
    extra = [c for c in data.columns if c not in pn.PANEL_COLUMNS and pd.api.types.is_numeric_dtype(data[c])]
    for c in extra:
        cols[c] = data[c].astype(float).reset_index(drop=True)
    return pd.DataFrame(cols)


def cmd_vif(args) -> None:
    _require(args, "input")
    data = pn.read_panel(args.input, strict=False)
    frame = _vif_frame(data)
    result = pn.compute_vif(frame)
    kept, history = pn.screen_vif(frame)
    with Staging(args.out) as st:
        if args.format == "json":
            _dump_json({
                "threshold": result.threshold,
                "vif": {n: (None if np.isinf(v) else float(v)) for n, v in zip(result.names, result.vif)},
                "infinite": [n for n, v in zip(result.names, result.vif) if np.isinf(v)],
                "flagged": result.flagged,
                "retained": kept,
                "rounds": len(history),
            }, st.path("vif.json"))
        else:
            pn.write_csv(result.to_frame(), st.path("vif.csv"))
    for name in result.flagged:
        v = result.vif[result.names.index(name)]
        print(f"{name}: VIF {'inf' if np.isinf(v) else f'{v:.3f}'} > {result.threshold}")


def _load_spec(args, response: str) -> ModelSpec:
    if args.spec is None:
        return panel_spec(response)
    d = json.loads(Path(args.spec).read_text())
    d = dict(d, response=response)
    return ModelSpec.from_dict(d)


def cmd_fit(args) -> None:
    _require(args, "input")
    data = pn.read_panel(args.input)
    models = {}
    for r in RESPONSES:
        try:
            models[r] = fit_gam(_load_spec(args, r), data, max_iter=args.max_iter)
        except ConvergenceError as exc:
            exc.best_state = dict(exc.best_state, response=r)
            raise
    with Staging(args.out) as st:
        for r, model in models.items():
            serialize.save_model(model, st.path(f"model_{r}.json"))
            table = summarize(model.fit, r)
            st.path(f"summary_{r}.txt").write_text(table.to_text(), newline="\n")
            _dump_json(table.to_dict(), st.path(f"summary_{r}.json"))


def cmd_pdp(args) -> None:
    _require(args, "input", "model")
    data = pn.read_panel(args.input)
    models = {r: serialize.load_model(Path(args.model) / f"model_{r}.json") for r in RESPONSES}
    effects, series = policy.state_effects(models["tpp"], models["pmt"], data)
    pops = _populations(args)
    base = policy.national_baselines(data, pops, args.weighted_national)
    nat = policy.national_aggregate(effects, pops, base, args.weighted_national)
    with Staging(args.out) as st:
        policy.write_effects(effects, st.path("effects.csv"))
        for r in RESPONSES:
            policy.write_series(series[r], st.path(f"series_{r}.csv"))
        _dump_json({
            "weighted": args.weighted_national,
            "baseline_tpp": base[0], "baseline_pmt": base[1],
            "abs_tpp": nat.abs_tpp, "pct_tpp": nat.pct_tpp,
            "abs_pmt": nat.abs_pmt, "pct_pmt": nat.pct_pmt,
            "text": nat.format(),
        }, st.path("national.json"))
    print(nat.format())


def cmd_anchor(args) -> None:
    _require(args, "input", "orders")
    data = pn.read_panel(args.input)
    orders = pn.read_orders(args.orders)
    table = pn.anchor_analysis(data, orders)
    with Staging(args.out) as st:
        if args.format == "json":
            _dump_json(table.to_dict(), st.path("anchor.json"))
        else:
            pn.write_csv(table.to_frame(), st.path("anchor.csv"))


def _read_json(path: Path):
    return json.loads(path.read_text()) if path.exists() else None


def cmd_report(args) -> None:
    _require(args, "input")
    src = Path(args.input)
    report = {}
    for r in RESPONSES:
        report[f"summary_{r}"] = _read_json(src / f"summary_{r}.json")
    report["national"] = _read_json(src / "national.json")
    report["vif"] = _read_json(src / "vif.json")
    for name in ("effects.csv", "anchor.csv", "vif.csv"):
        p = src / name
        if p.exists():
            report[name[:-4] if name != "vif.csv" else "vif_table"] = pd.read_csv(p, dtype=str).to_dict(orient="records")
    curves = {}
    for r in RESPONSES:
        p = src / f"model_{r}.json"
        if p.exists():
            curves[r] = serialize.load_model(p)
    if not any(v is not None for v in report.values()) and not curves:
        raise DataError(f"{src}: no pipeline artifacts found")
    with Staging(args.out) as st:
        for r, model in curves.items():
            for term, grid in (("s(time_index)", np.arange(0.0, 71.0)), ("s(week,bs='cc')", np.arange(0.0, 7.0))):
                if term in model.fit.term_index:
                    f = pd.DataFrame({"x": grid, "fit": model.smooth_curve(term, grid)})
                    stem = "time" if "time" in term else "week"
                    pn.write_csv(f, st.path(f"curve_{stem}_{r}.csv"))
        _dump_json({k: v for k, v in report.items() if v is not None}, st.path("report.json"))


COMMANDS = {
    "simulate": cmd_simulate,
    "metrics": cmd_metrics,
    "vif": cmd_vif,
    "fit": cmd_fit,
    "pdp": cmd_pdp,
    "anchor": cmd_anchor,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobgam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--input", help="input CSV, or artifact directory for report")
        p.add_argument("--orders", help="order dates CSV (state,effective_date,enforcement_level)")
        p.add_argument("--covariates", help="covariates CSV (state,date,new_cases,approval_rate)")
        p.add_argument("--adjacency", help="adjacency CSV (state,neighbor); bundled default")
        p.add_argument("--populations", help="population CSV (state,population); bundled default")
        p.add_argument("--spec", help="model spec JSON; default is the full panel model")
        p.add_argument("--model", help="directory holding model_tpp.json and model_pmt.json")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, default=synth.SynthConfig.seed)
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--min-trip-meters", type=float, default=pn.MIN_TRIP_METERS)
        p.add_argument("--max-iter", type=int, default=200, help="REML optimiser iteration limit")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--weighted-national", dest="weighted_national", action="store_true", default=True)
        g.add_argument("--unweighted-national", dest="weighted_national", action="store_false")
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("MOBGAM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.best_state, indent=2, sort_keys=True, default=_json_default), file=sys.stderr)
        return 3
    except (MobgamError, FileNotFoundError, pd.errors.ParserError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
