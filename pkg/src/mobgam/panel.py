"""State-day panel: mobility metrics, January benchmarks, covariates, VIF and anchoring."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import BenchmarkCoverageError, ConfigError, DataError

logger = logging.getLogger(__name__)

METERS_PER_MILE = 1609.344
MIN_TRIP_METERS = 300.0
MIN_TRIP_MILES = MIN_TRIP_METERS / METERS_PER_MILE

STUDY_START = dt.date(2020, 2, 1)
STUDY_END = dt.date(2020, 4, 11)
JANUARY = (dt.date(2020, 1, 1), dt.date(2020, 1, 31))
JANUARY_EXCLUDED = (dt.date(2020, 1, 1), dt.date(2020, 1, 20))

TRIP_COLUMNS = ["state", "date", "distance_miles", "weight"]
PANEL_COLUMNS = [
    "state", "date", "tpp", "pmt", "rel_tpp", "rel_pmt", "order_level", "new_cases",
    "adj_new_cases", "national_new_cases", "approval_rate", "time_index", "week", "is_weekend",
]
ORDER_COLUMNS = ["state", "effective_date", "enforcement_level"]
COVARIATE_COLUMNS = ["state", "date", "new_cases", "approval_rate"]

VIF_THRESHOLD = 5.0

# window name -> (first offset, last offset) in days relative to the effective date
ANCHOR_WINDOWS = {
    "three_weeks_before": (-21, -15),
    "two_weeks_before": (-14, -8),
    "one_week_before": (-7, -1),
    "one_week_after": (0, 6),
}
ANCHOR_HEADER = ["State"] + [
    f"{w}_{m}" for w in ANCHOR_WINDOWS for m in ("trips", "pmt")
] + ["effective_date", "partial"]


@dataclass(frozen=True)
class TripRecord:
    state: str
    date: dt.date
    distance: float
    device_weight: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.distance) or self.distance < 0:
            raise DataError(f"trip distance must be finite and >= 0, got {self.distance}")
        if not self.device_weight > 0:
            raise DataError(f"trip weight must be > 0, got {self.device_weight}")


@dataclass(frozen=True)
class PanelRow:
    state: str
    date: dt.date
    tpp: float
    pmt: float
    rel_tpp: float
    rel_pmt: float
    order_level: int
    new_cases: float
    adj_new_cases: float
    national_new_cases: float
    approval_rate: float
    time_index: int
    week: int
    is_weekend: int

    def __post_init__(self) -> None:
        if self.order_level not in (0, 1, 2, 3):
            raise DataError(f"order_level must be in 0..3, got {self.order_level}")
        if self.is_weekend != int(self.week in (5, 6)):
            raise DataError(f"is_weekend={self.is_weekend} inconsistent with week={self.week}")
        if self.week != self.date.weekday() or self.time_index != (self.date - STUDY_START).days:
            raise DataError(f"calendar fields inconsistent with date {self.date}")

    def to_dict(self) -> dict:
        return asdict(self)


def calendar_fields(dates: Iterable[dt.date], start: dt.date = STUDY_START) -> pd.DataFrame:
    dates = [pd.Timestamp(d).date() for d in dates]
    week = [d.weekday() for d in dates]
    return pd.DataFrame({
        "time_index": [(d - start).days for d in dates],
        "week": week,
        "is_weekend": [int(w >= 5) for w in week],
    })


# ---------------------------------------------------------------------------
# bundled configuration data


def _data_path(name: str):
    return resources.files("mobgam") / "data" / name


def load_populations(path: str | Path | None = None) -> dict[str, float]:
    """State populations (2019 estimates bundled by default)."""
    src = _data_path("state_populations.csv") if path is None else Path(path)
    with src.open() as fh:
        df = _read_csv(fh)
    if list(df.columns[:2]) != ["state", "population"]:
        raise DataError(f"{src}: expected header 'state,population'")
    pops = dict(zip(df["state"], df["population"].astype(float)))
    for s, v in pops.items():
        if not v > 0:
            raise ConfigError(f"population for {s} must be positive, got {v}")
    return pops


def load_adjacency(path: str | Path | None = None) -> dict[str, list[str]]:
    """Symmetric land-border adjacency as ``state -> sorted neighbours``."""
    src = _data_path("state_adjacency.csv") if path is None else Path(path)
    with src.open() as fh:
        df = pd.read_csv(fh, dtype=str)
    if list(df.columns[:2]) != ["state", "neighbor"]:
        raise DataError(f"{src}: expected header 'state,neighbor'")
    adj: dict[str, set[str]] = {}
    for a, b in zip(df["state"], df["neighbor"]):
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    return {k: sorted(v) for k, v in sorted(adj.items())}


# ---------------------------------------------------------------------------
# CSV I/O


def _read_csv(src) -> pd.DataFrame:
    # round_trip: 17-digit output reads back bit-identical
    return pd.read_csv(src, dtype={"state": str}, float_precision="round_trip")


def _check_header(df: pd.DataFrame, expected: Sequence[str], what: str, exact: bool = True) -> None:
    cols = list(df.columns)
    if exact and cols != list(expected):
        raise DataError(f"{what}: header must be exactly {','.join(expected)}; got {','.join(cols)}")
    missing = [c for c in expected if c not in cols]
    if missing:
        raise DataError(f"{what}: missing columns {missing}")


def _parse_dates(series: pd.Series, what: str) -> pd.Series:
    try:
        return pd.to_datetime(series, format="%Y-%m-%d").dt.date
    except (ValueError, TypeError) as exc:
        raise DataError(f"{what}: bad ISO-8601 date ({exc})") from None


def _check_finite(df: pd.DataFrame, columns: Sequence[str], what: str) -> None:
    for c in columns:
        vals = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise DataError(f"{what}: row {int(bad[0]) + 1}, field {c!r} is missing or not numeric")


def read_trips(path: str | Path) -> pd.DataFrame:
    df = _read_csv(path)
    _check_header(df, TRIP_COLUMNS, str(path))
    if df.empty:
        raise DataError(f"{path}: no trip rows")
    _check_finite(df, ["distance_miles", "weight"], str(path))
    df["date"] = _parse_dates(df["date"], str(path))
    return df


def read_panel(path: str | Path, strict: bool = True) -> pd.DataFrame:
    """Read a panel CSV; ``strict`` requires the exact header."""
    try:
        df = _read_csv(path)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: file is empty") from None
    _check_header(df, PANEL_COLUMNS, str(path), exact=strict)
    if df.empty:
        raise DataError(f"{path}: panel has no rows")
    _check_finite(df, [c for c in PANEL_COLUMNS if c not in ("state", "date")], str(path))
    df["date"] = _parse_dates(df["date"], str(path))
    for c in ("order_level", "time_index", "week", "is_weekend"):
        df[c] = df[c].astype(int)
    if not df["order_level"].isin([0, 1, 2, 3]).all():
        raise DataError(f"{path}: order_level outside 0..3")
    return df


def read_orders(path: str | Path) -> pd.DataFrame:
    df = _read_csv(path)
    _check_header(df, ORDER_COLUMNS, str(path))
    df["effective_date"] = _parse_dates(df["effective_date"], str(path))
    if not df["enforcement_level"].isin([1, 2, 3]).all():
        raise DataError(f"{path}: enforcement_level must be 1, 2 or 3")
    if df["state"].duplicated().any():
        raise DataError(f"{path}: duplicate state rows")
    return df


def read_covariates(path: str | Path) -> pd.DataFrame:
    df = _read_csv(path)
    _check_header(df, COVARIATE_COLUMNS, str(path))
    _check_finite(df, ["new_cases", "approval_rate"], str(path))
    df["date"] = _parse_dates(df["date"], str(path))
    return df


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(df: pd.DataFrame, path: str | Path) -> None:
    """Write with 17 significant digits, ISO dates and LF line endings."""
    out = df.copy()
    for c in out.columns:
        if pd.api.types.is_float_dtype(out[c]):
            out[c] = out[c].map(format_float)
        elif len(out) and isinstance(out[c].iloc[0], (dt.date, pd.Timestamp)):
            out[c] = out[c].map(lambda d: pd.Timestamp(d).date().isoformat())
    out.to_csv(path, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# metrics


def _trip_frame(trips) -> pd.DataFrame:
    if isinstance(trips, pd.DataFrame):
        return trips
    rows = [(t.state, t.date, t.distance, t.device_weight) for t in trips]
    return pd.DataFrame(rows, columns=TRIP_COLUMNS)


def compute_daily_metrics(
    trips,
    population: Mapping[str, float],
    min_trip_miles: float = MIN_TRIP_MILES,
    dates: Sequence[dt.date] | None = None,
) -> pd.DataFrame:
    """Trips per person and person-miles per person for every state-day.

    ``tpp`` counts the weight of trips strictly longer than
    ``min_trip_miles``; ``pmt`` sums weight times distance over all trips.
    When ``dates`` is given, state-days without trips appear with zeros.
    """
    df = _trip_frame(trips)
    for s, v in population.items():
        if not v > 0:
            raise ConfigError(f"population for {s} must be positive, got {v}")
    unknown = sorted(set(df["state"]) - set(population))
    if unknown:
        raise DataError(f"trips reference unknown states: {unknown}")
    w = df["weight"].to_numpy(dtype=float)
    d = df["distance_miles"].to_numpy(dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise DataError("trip distances must be finite and non-negative")
    if np.any(~(w > 0)):
        raise DataError("trip weights must be positive")
    work = pd.DataFrame({
        "state": df["state"].to_numpy(),
        "date": df["date"].to_numpy(),
        "trips": np.where(d > min_trip_miles, w, 0.0),
        "miles": w * d,
    })
    out = work.groupby(["state", "date"], sort=True)[["trips", "miles"]].sum()
    if dates is not None:
        states = sorted(set(df["state"]))
        full = pd.MultiIndex.from_product([states, sorted(dates)], names=["state", "date"])
        out = out.reindex(full, fill_value=0.0)
    out = out.reset_index()
    pop = out["state"].map(population).to_numpy(dtype=float)
    out["tpp"] = out.pop("trips").to_numpy() / pop
    out["pmt"] = out.pop("miles").to_numpy() / pop
    return out


@dataclass
class BenchmarkTable:
    """Mean January value of each metric per (state, weekday)."""

    values: pd.DataFrame  # index (state, weekday); columns tpp, pmt
    excluded_dates: list[dt.date] = field(default_factory=list)

    def lookup(self, state: str, weekday: int, metric: str) -> float:
        try:
            return float(self.values.loc[(state, weekday), metric])
        except KeyError:
            raise BenchmarkCoverageError(
                f"no January benchmark for state {state} weekday {weekday}") from None

    def for_rows(self, states: Sequence[str], weekdays: Sequence[int], metric: str) -> np.ndarray:
        idx = pd.MultiIndex.from_arrays([list(states), list(weekdays)])
        vals = self.values[metric].reindex(idx).to_numpy(dtype=float)
        bad = np.flatnonzero(np.isnan(vals))
        if bad.size:
            i = int(bad[0])
            raise BenchmarkCoverageError(
                f"no January benchmark for state {states[i]} weekday {weekdays[i]}")
        return vals

    def to_frame(self) -> pd.DataFrame:
        return self.values.reset_index()


def build_benchmark(
    daily: pd.DataFrame,
    january: tuple[dt.date, dt.date] = JANUARY,
    excluded: Sequence[dt.date] = JANUARY_EXCLUDED,
) -> BenchmarkTable:
    """Per-state, per-weekday January means (holidays excluded)."""
    dates = pd.Series([pd.Timestamp(d).date() for d in daily["date"]], index=daily.index)
    excluded = [pd.Timestamp(d).date() for d in excluded]
    mask = (dates >= january[0]) & (dates <= january[1]) & ~dates.isin(excluded)
    jan = daily.loc[mask].copy()
    jan["weekday"] = [d.weekday() for d in dates[mask]]
    values = jan.groupby(["state", "weekday"], sort=True)[["tpp", "pmt"]].mean()
    for state in sorted(set(daily["state"])):
        for wd in range(7):
            if (state, wd) not in values.index:
                raise BenchmarkCoverageError(
                    f"no January observations for state {state} weekday {wd}")
    return BenchmarkTable(values, list(excluded))


def relativize(value, benchmark):
    """Difference from the same-weekday January benchmark."""
    return np.subtract(value, benchmark)


def add_relative_metrics(daily: pd.DataFrame, benchmark: BenchmarkTable) -> pd.DataFrame:
    out = daily.copy()
    weekdays = [pd.Timestamp(d).weekday() for d in out["date"]]
    states = list(out["state"])
    for m in ("tpp", "pmt"):
        out[f"rel_{m}"] = relativize(out[m].to_numpy(dtype=float),
                                     benchmark.for_rows(states, weekdays, m))
    return out


# ---------------------------------------------------------------------------
# covariates


def order_levels(states: Sequence[str], dates: Sequence[dt.date], orders: pd.DataFrame) -> np.ndarray:
    """Enforcement level in force on each state-day (0 before the effective date)."""
    eff = dict(zip(orders["state"], orders["effective_date"]))
    lev = dict(zip(orders["state"], orders["enforcement_level"]))
    out = np.zeros(len(states), dtype=int)
    for i, (s, d) in enumerate(zip(states, dates)):
        if s in eff and pd.Timestamp(d).date() >= eff[s]:
            out[i] = int(lev[s])
    return out


def adjacent_cases(cases: pd.DataFrame, adjacency: Mapping[str, Sequence[str]]) -> pd.DataFrame:
    """Mean daily new cases over each state's neighbours present in the data.

    States with no neighbour in the data (AK, HI) get 0.
    """
    wide = cases.pivot(index="date", columns="state", values="new_cases")
    adj = pd.DataFrame(0.0, index=wide.index, columns=wide.columns)
    for s in wide.columns:
        nb = [n for n in adjacency.get(s, []) if n in wide.columns]
        if nb:
            adj[s] = wide[nb].mean(axis=1)
    return adj.stack().rename("adj_new_cases").reset_index()


def assemble_panel(
    daily: pd.DataFrame,
    benchmark: BenchmarkTable,
    orders: pd.DataFrame,
    covariates: pd.DataFrame | None,
    adjacency: Mapping[str, Sequence[str]],
    start: dt.date = STUDY_START,
    end: dt.date = STUDY_END,
) -> pd.DataFrame:
    """Join metrics, benchmark-relative metrics and covariates into panel rows."""
    dates = pd.Series([pd.Timestamp(d).date() for d in daily["date"]], index=daily.index)
    win = daily.loc[(dates >= start) & (dates <= end)].copy()
    win["date"] = dates[win.index]
    if win.empty:
        raise DataError(f"no metric rows between {start} and {end}")
    win = add_relative_metrics(win, benchmark)
    if covariates is None:
        logger.warning("no covariates supplied; case counts and approval set to 0")
        cov = win[["state", "date"]].assign(new_cases=0.0, approval_rate=0.0)
    else:
        cov = covariates.copy()
        cov["date"] = [pd.Timestamp(d).date() for d in cov["date"]]
    merged = win.merge(cov, on=["state", "date"], how="left", validate="one_to_one")
    missing = merged["new_cases"].isna() | merged["approval_rate"].isna()
    if missing.any():
        r = merged.loc[missing].iloc[0]
        raise DataError(f"no covariates for state {r['state']} on {r['date']}")
    national = merged.groupby("date")["new_cases"].sum().rename("national_new_cases")
    adj = adjacent_cases(merged[["state", "date", "new_cases"]], adjacency)
    merged = merged.merge(national, left_on="date", right_index=True, how="left")
    merged = merged.merge(adj, on=["state", "date"], how="left")
    merged["order_level"] = order_levels(list(merged["state"]), list(merged["date"]), orders)
    cal = calendar_fields(merged["date"], start)
    for c in cal.columns:
        merged[c] = cal[c].to_numpy()
    out = merged[PANEL_COLUMNS].sort_values(["state", "date"], kind="mergesort").reset_index(drop=True)
    return out


# ---------------------------------------------------------------------------
# variance inflation factors


@dataclass
class VifResult:
    names: list[str]
    vif: np.ndarray
    threshold: float = VIF_THRESHOLD

    @property
    def flagged(self) -> list[str]:
        return [n for n, v in zip(self.names, self.vif) if v > self.threshold]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "covariate": self.names,
            "vif": self.vif,
            "infinite": np.isinf(self.vif).astype(int),
            "flagged": (self.vif > self.threshold).astype(int),
        })


def compute_vif(covariates, names: Sequence[str] | None = None,
                threshold: float = VIF_THRESHOLD, collinear_tol: float = 1e-10) -> VifResult:
    """``1 / (1 - R^2_j)`` from regressing each column on the others plus an intercept.

    A column whose residual sum of squares is below ``collinear_tol`` times
    its centred total sum of squares is perfectly collinear and gets
    ``inf``.
    """
    if isinstance(covariates, pd.DataFrame):
        names = list(covariates.columns) if names is None else list(names)
        M = covariates[names].to_numpy(dtype=float)
    else:
        M = np.asarray(covariates, dtype=float)
        names = [f"x{j}" for j in range(M.shape[1])] if names is None else list(names)
    n, m = M.shape
    if m < 2:
        raise DataError("VIF needs at least two covariates")
    if n <= m:
        raise DataError(f"VIF needs more rows ({n}) than covariates ({m})")
    if not np.all(np.isfinite(M)):
        raise DataError("covariate matrix contains non-finite values")
    out = np.empty(m)
    for j in range(m):
        target = M[:, j]
        others = np.column_stack([np.ones(n), np.delete(M, j, axis=1)])
        coef, *_ = np.linalg.lstsq(others, target, rcond=None)
        resid = target - others @ coef
        rss = float(resid @ resid)
        tss = float(np.sum((target - target.mean()) ** 2))
        if tss == 0 or rss <= collinear_tol * tss:
            out[j] = np.inf
        else:
            out[j] = tss / rss
    return VifResult(names, out, threshold)


def screen_vif(covariates: pd.DataFrame, names: Sequence[str] | None = None,
               threshold: float = VIF_THRESHOLD) -> tuple[list[str], list[VifResult]]:
    """Drop the worst covariate while any VIF exceeds ``threshold``.

    Returns the retained names and the VIF table of every round.
    """
    keep = list(covariates.columns if names is None else names)
    history = []
    while len(keep) >= 2:
        res = compute_vif(covariates, keep, threshold)
        history.append(res)
        if not res.flagged:
            break
        worst = int(np.argmax(res.vif))
        logger.info("excluding %s (VIF %.3g)", keep[worst], res.vif[worst])
        keep.pop(worst)
    return keep, history


# ---------------------------------------------------------------------------
# anchoring around order effective dates


@dataclass
class AnchorRow:
    state: str
    effective_date: dt.date
    rel_tpp: dict[str, float]
    rel_pmt: dict[str, float]
    pct_tpp: dict[str, float]
    pct_pmt: dict[str, float]
    n_days: dict[str, int]

    @property
    def partial(self) -> bool:
        return any(v < 7 for v in self.n_days.values())


@dataclass
class AnchorTable:
    rows: list[AnchorRow]
    excluded_states: list[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        """Table-style layout: percent change per window for trips and PMT."""
        records = []
        for r in self.rows:
            rec = {"State": r.state}
            for w in ANCHOR_WINDOWS:
                rec[f"{w}_trips"] = format_percent(r.pct_tpp[w])
                rec[f"{w}_pmt"] = format_percent(r.pct_pmt[w])
            rec["effective_date"] = r.effective_date.isoformat()
            rec["partial"] = int(r.partial)
            records.append(rec)
        return pd.DataFrame(records, columns=ANCHOR_HEADER)

    def to_dict(self) -> dict:
        return {
            "rows": [{
                "state": r.state,
                "effective_date": r.effective_date.isoformat(),
                "rel_tpp": r.rel_tpp, "rel_pmt": r.rel_pmt,
                "pct_tpp": r.pct_tpp, "pct_pmt": r.pct_pmt,
                "n_days": r.n_days, "partial": r.partial,
            } for r in self.rows],
            "excluded_states": self.excluded_states,
        }


def format_percent(x: float) -> str:
    if not np.isfinite(x):
        return "NA"
    s = f"{100.0 * x:.1f}%"
    return "0.0%" if s == "-0.0%" else s


def window_offsets() -> list[tuple[str, int]]:
    return [(w, off) for w, (a, b) in ANCHOR_WINDOWS.items() for off in range(a, b + 1)]


def anchor_analysis(panel: pd.DataFrame, order_dates: Mapping[str, dt.date] | pd.DataFrame) -> AnchorTable:
    """Window means of benchmark-relative mobility around each order date.

    Windows: three weeks before = days -21..-15, two weeks before
    -14..-8, one week before -7..-1, one week after 0..+6. Percentages
    divide the window's summed difference by its summed January benchmark
    (``tpp - rel_tpp`` on the same rows).
    """
    if isinstance(order_dates, pd.DataFrame):
        order_dates = dict(zip(order_dates["state"], order_dates["effective_date"]))
    order_dates = {s: pd.Timestamp(d).date() for s, d in order_dates.items()}
    df = panel.copy()
    df["date"] = [pd.Timestamp(d).date() for d in df["date"]]
    rows, excluded = [], []
    for state in sorted(set(df["state"])):
        if state not in order_dates:
            excluded.append(state)
            continue
        eff = order_dates[state]
        sub = df[df["state"] == state]
        offset = np.array([(d - eff).days for d in sub["date"]])
        rel, pct, counts = {"tpp": {}, "pmt": {}}, {"tpp": {}, "pmt": {}}, {}
        for w, (a, b) in ANCHOR_WINDOWS.items():
            sel = (offset >= a) & (offset <= b)
            counts[w] = int(sel.sum())
            for m in ("tpp", "pmt"):
                r = sub[f"rel_{m}"].to_numpy(dtype=float)[sel]
                bench = sub[m].to_numpy(dtype=float)[sel] - r
                rel[m][w] = float(r.mean()) if r.size else float("nan")
                pct[m][w] = float(r.sum() / bench.sum()) if r.size and bench.sum() != 0 else float("nan")
        rows.append(AnchorRow(state, eff, rel["tpp"], rel["pmt"], pct["tpp"], pct["pmt"], counts))
    if excluded:
        logger.info("anchor analysis: no order date for %s", ", ".join(excluded))
    return AnchorTable(rows, excluded)
