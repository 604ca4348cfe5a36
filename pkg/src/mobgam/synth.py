"""Synthetic state-day panels and trip records with known generative truth.

Every response is built as

    intercept + sum_k beta_k x_k + trend(t) + weekly(week) + b_state
        + state_curve(t) + policy_state * 1[t >= order date] + noise

so each fitted quantity of the additive model has a truth to compare with.

Random streams are keyed by ``SeedSequence(seed, spawn_key=(stream, state))``,
so a state's draws do not depend on how many other states are generated or
in what order.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import ConfigError, FeasibilityError
from .panel import (
    JANUARY,
    JANUARY_EXCLUDED,
    MIN_TRIP_MILES,
    PANEL_COLUMNS,
    STUDY_START,
    calendar_fields,
    load_adjacency,
    load_populations,
)

# the 43 order states of the descriptive tables, then the states without an order
ORDER_STATES = (
    "AL", "AK", "AZ", "CA", "CO", "CT", "DE", "DC", "FL", "GA", "HI", "ID", "IL", "IN", "KS",
    "KY", "LA", "ME", "MD", "MA", "MI", "MN", "MS", "MO", "MT", "NV", "NH", "NJ", "NM", "NY",
    "NC", "OH", "OR", "PA", "RI", "SC", "TN", "TX", "VT", "VA", "WA", "WV", "WI",
)
NO_ORDER_STATES = ("AR", "IA", "NE", "ND", "OK", "SD", "UT", "WY")

TPP_EFFECTS = {
    "(Intercept)": 0.025, "order_1": -0.122, "order_2": -0.125, "order_3": -0.167,
    "new_cases": -0.031, "adj_new_cases": -0.013, "national_new_cases": -0.028,
    "approval_rate": -0.001, "is_weekend": 0.140,
}
PMT_EFFECTS = {
    "(Intercept)": -2.690, "order_1": -1.503, "order_2": -0.883, "order_3": -1.311,
    "new_cases": 0.304, "adj_new_cases": 0.063, "national_new_cases": -0.282,
    "approval_rate": -0.021, "is_weekend": 1.823,
}

# stream identifiers for SeedSequence spawn keys
_S_STATE, _S_NOISE_TPP, _S_NOISE_PMT, _S_JAN, _S_TRIPS, _S_NATION = range(6)


@dataclass
class SynthConfig:
    n_states: int = 43
    n_days: int = 71
    seed: int = 20200201
    noise_sd: float = 0.15
    noise_sd_pmt: float = 2.56
    true_fixed_effects: dict[str, float] = field(default_factory=lambda: dict(TPP_EFFECTS))
    true_fixed_effects_pmt: dict[str, float] = field(default_factory=lambda: dict(PMT_EFFECTS))
    # state -> {level -> effect}; drawn around the fixed level effects when None
    true_policy_effects: dict[str, dict[int, float]] | None = None
    policy_sd: float = 0.08
    random_effect_sd: float = 0.1
    state_curve_sd: float = 0.06
    time_trend: str | tuple = "logistic-drop"
    weekly_amplitude: float = 0.06
    pmt_ratio: float = 14.0
    target_moments: tuple[float, float] | None = (-0.171, 0.439)
    target_moments_pmt: tuple[float, float] | None = (-4.367, 8.900)
    n_no_order: int = 0
    first_order_day: int = 45
    last_order_day: int = 63
    start_date: dt.date = STUDY_START

    def __post_init__(self) -> None:
        if self.n_days < 28:
            raise ConfigError(f"n_days must be >= 28, got {self.n_days}")
        if not self.noise_sd > 0 or not self.noise_sd_pmt > 0:
            raise ConfigError("noise standard deviations must be positive")
        if not 1 <= self.n_states <= len(ORDER_STATES) + len(NO_ORDER_STATES):
            raise ConfigError(f"n_states must be in 1..51, got {self.n_states}")
        if not 0 <= self.n_no_order <= min(self.n_states, len(NO_ORDER_STATES)):
            raise ConfigError("n_no_order out of range")
        if not 0 <= self.first_order_day <= self.last_order_day < self.n_days:
            raise ConfigError("order day window must lie inside the study window")
        if isinstance(self.time_trend, str) and self.time_trend not in ("logistic-drop", "flat"):
            raise ConfigError(f"unknown time trend {self.time_trend!r}")

    @property
    def states(self) -> list[str]:
        n_order = self.n_states - self.n_no_order
        return list(ORDER_STATES[:n_order]) + list(NO_ORDER_STATES[: self.n_no_order])

    @property
    def dates(self) -> list[dt.date]:
        return [self.start_date + dt.timedelta(days=i) for i in range(self.n_days)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_date"] = self.start_date.isoformat()
        if isinstance(self.time_trend, tuple):
            d["time_trend"] = [list(p) for p in self.time_trend]
        return d


def _rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream, index))))


def trend_shape(t: np.ndarray, spec) -> np.ndarray:
    """Unit time trend: flat, then a sharp mid-March drop to a partial plateau."""
    t = np.asarray(t, dtype=float)
    if isinstance(spec, str):
        if spec == "flat":
            return np.zeros_like(t)
        drop = -1.0 / (1.0 + np.exp(-(t - 44.0) / 3.5))
        rebound = 0.12 / (1.0 + np.exp(-(t - 62.0) / 4.0))
        panic = 0.04 * np.exp(-0.5 * ((t - 35.0) / 2.5) ** 2)
        return drop + rebound + panic
    knots = np.asarray(spec, dtype=float)
    return np.interp(t, knots[:, 0], knots[:, 1])


@dataclass
class GroundTruth:
    """Every additive component used to generate a panel."""

    config: dict
    states: list[str]
    dates: list[dt.date]
    order_dates: dict[str, dt.date]
    order_levels: dict[str, int]
    intercept: dict[str, float]
    fixed_effects: dict[str, dict[str, float]]
    trend_scale: dict[str, float]
    trend: dict[str, list[float]]
    weekly: dict[str, list[float]]
    state_effects: dict[str, dict[str, float]]
    state_curves: dict[str, dict[str, list[float]]]
    policy_effects: dict[str, dict[str, float]]
    noise_sd: dict[str, float]
    benchmark: dict[str, dict[str, list[float]]]  # metric -> state -> 7 weekday means
    january: pd.DataFrame = field(repr=False, default=None)
    populations: dict[str, float] = field(default_factory=dict)

    def orders_frame(self) -> pd.DataFrame:
        rows = [(s, self.order_dates[s], self.order_levels[s]) for s in self.states if s in self.order_dates]
        return pd.DataFrame(rows, columns=["state", "effective_date", "enforcement_level"])

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "states": self.states,
            "dates": [d.isoformat() for d in self.dates],
            "order_dates": {s: d.isoformat() for s, d in self.order_dates.items()},
            "order_levels": self.order_levels,
            "intercept": self.intercept,
            "fixed_effects": self.fixed_effects,
            "trend_scale": self.trend_scale,
            "trend": self.trend,
            "weekly": self.weekly,
            "state_effects": self.state_effects,
            "state_curves": self.state_curves,
            "policy_effects": self.policy_effects,
            "noise_sd": self.noise_sd,
            "benchmark": self.benchmark,
            "populations": self.populations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _case_curves(config: SynthConfig, states: list[str], pops: Mapping[str, float]) -> np.ndarray:
    """Daily new cases (thousands): logistic growth to a plateau with reporting noise."""
    t = np.arange(config.n_days, dtype=float)
    out = np.zeros((len(states), config.n_days))
    for i, s in enumerate(states):
        rng = _rng(config.seed, _S_STATE, 1000 + i)
        onset = rng.uniform(26.0, 50.0)
        rate = rng.uniform(0.18, 0.35)
        plateau = (pops.get(s, 5e6) / 5e6) * rng.lognormal(np.log(0.12), 0.8)
        curve = plateau / (1.0 + np.exp(-rate * (t - onset - 8.0)))
        curve[t < onset - 12.0] = 0.0
        noisy = curve * rng.lognormal(0.0, 0.35, size=t.size)
        out[i] = np.round(noisy * 1000.0) / 1000.0
    return out


def _approval(config: SynthConfig, n_states: int) -> np.ndarray:
    """Governor approval: a state level drifting week to week, plus daily poll noise."""
    weeks = np.arange(config.n_days) // 7
    out = np.zeros((n_states, config.n_days))
    for i in range(n_states):
        rng = _rng(config.seed, _S_STATE, 2000 + i)
        base = rng.uniform(0.34, 0.75)
        steps = np.cumsum(rng.normal(0.0, 0.03, size=weeks.max() + 1))
        daily = rng.normal(0.0, 0.04, size=config.n_days)
        out[i] = np.round(base + steps[weeks] + daily, 3)
    return out


def _calibrate(base: np.ndarray, shape: np.ndarray, target: tuple[float, float] | None,
               default_intercept: float, scale_default: float) -> tuple[float, float]:
    """Trend scale and intercept giving the requested sample mean and st.d.

    Solves ``var(base + a * shape) = sd^2`` for ``a > 0`` (a quadratic in a),
    then sets the intercept so the mean matches.
    """
    if target is None or not np.any(shape):
        return scale_default, default_intercept
    mean, sd = target
    bc = np.ravel(base - base.mean())
    sc = np.ravel(shape - shape.mean())
    qa, qb, qc = sc @ sc, 2.0 * (bc @ sc), bc @ bc - sd ** 2 * base.size
    disc = qb ** 2 - 4 * qa * qc
    if disc < 0:
        raise ConfigError("cannot reach the target standard deviation with this trend shape")
    a = (-qb + np.sqrt(disc)) / (2 * qa)
    if a <= 0:
        raise ConfigError("target standard deviation is below the non-trend variability")
    intercept = mean - float(np.mean(base + a * shape))
    return float(a), float(intercept)


def _policy_effects(config: SynthConfig, states: list[str], levels: Mapping[str, int],
                    beta: Mapping[str, float], ratio: float, slot: int) -> dict[str, float]:
    """Per-state order effects around the level effects.

    Drawn deviations are centered within each enforcement level, so the level
    coefficient is exactly the mean effect of the states at that level.
    """
    given = config.true_policy_effects or {}
    dev = {}
    for i, s in enumerate(states):
        if s in levels and s not in given:
            dev[s] = config.policy_sd * ratio * _rng(config.seed, _S_STATE, i).standard_normal(8)[slot]
    for lev in (1, 2, 3):
        group = [s for s in dev if levels[s] == lev]
        if group:
            m = float(np.mean([dev[s] for s in group]))
            for s in group:
                dev[s] -= m
    out = {}
    for s in states:
        if s in given:
            out[s] = float(given[s][levels[s]])
        elif s in dev:
            out[s] = float(beta.get(f"order_{levels[s]}", 0.0) + dev[s])
    return out


def generate_panel(config: SynthConfig | None = None) -> tuple[pd.DataFrame, GroundTruth]:
    """Synthetic panel rows (sorted by state then date) and their ground truth."""
    config = config or SynthConfig()
    states = config.states
    dates = config.dates
    S, T = len(states), config.n_days
    pops_all = load_populations()
    pops = {s: pops_all[s] for s in states}
    adjacency = load_adjacency()
    t = np.arange(T, dtype=float)
    cal = calendar_fields(dates, STUDY_START)
    week = cal["week"].to_numpy()
    is_weekend = cal["is_weekend"].to_numpy()
    time_index = cal["time_index"].to_numpy()

    cases = _case_curves(config, states, pops)
    national = cases.sum(axis=0)
    idx = {s: i for i, s in enumerate(states)}
    adj = np.zeros_like(cases)
    for s in states:
        nb = [idx[n] for n in adjacency.get(s, []) if n in idx]
        if nb:
            adj[idx[s]] = cases[nb].mean(axis=0)
    approval = _approval(config, S)

    order_dates: dict[str, dt.date] = {}
    order_levels: dict[str, int] = {}
    level = np.zeros((S, T), dtype=int)
    n_order = S - config.n_no_order
    for i, s in enumerate(states[:n_order]):
        rng = _rng(config.seed, _S_STATE, 3000 + i)
        day = int(rng.integers(config.first_order_day, config.last_order_day + 1))
        lev = int(rng.choice([1, 2, 3], p=[14 / 43, 14 / 43, 15 / 43]))
        order_dates[s] = dates[day]
        order_levels[s] = lev
        level[i, day:] = lev

    weekly_unit = np.sin(2 * np.pi * (np.arange(7) - 1.5) / 7.0)
    shape = trend_shape(t, config.time_trend)
    responses = {
        "tpp": (config.true_fixed_effects, config.noise_sd, 1.0, config.target_moments, _S_NOISE_TPP),
        "pmt": (config.true_fixed_effects_pmt, config.noise_sd_pmt, config.pmt_ratio,
                config.target_moments_pmt, _S_NOISE_PMT),
    }
    rel: dict[str, np.ndarray] = {}
    truth_parts: dict[str, dict] = {k: {} for k in (
        "intercept", "fixed", "trend_scale", "trend", "weekly", "re", "curves", "policy", "noise")}
    for metric, (beta, noise_sd, ratio, target, stream) in responses.items():
        comp = np.zeros((S, T))
        covs = {
            "new_cases": cases, "adj_new_cases": adj, "national_new_cases": np.broadcast_to(national, (S, T)),
            "approval_rate": approval, "is_weekend": np.broadcast_to(is_weekend, (S, T)),
        }
        for name, x in covs.items():
            comp += beta.get(name, 0.0) * x
        weekly = config.weekly_amplitude * ratio * weekly_unit
        comp += weekly[week][None, :]
        re = {}
        curves = {}
        policy = _policy_effects(config, states, order_levels, beta, ratio, 3 if metric == "tpp" else 7)
        for i, s in enumerate(states):
            rng = _rng(config.seed, _S_STATE, i)
            # one draw per quantity per state, identical layout for both responses
            draws = rng.standard_normal(8)
            off = 0 if metric == "tpp" else 4
            b = config.random_effect_sd * ratio * draws[off]
            amp = config.state_curve_sd * ratio * draws[off + 1]
            slope = config.state_curve_sd * ratio * draws[off + 2]
            phase = 2 * np.pi * _rng(config.seed, _S_STATE, 4000 + i).uniform()
            curve = amp * np.sin(2 * np.pi * t / T + phase) + slope * (t - t.mean()) / T
            re[s] = float(b)
            curves[s] = curve
            comp[i] += b + curve
            if s in policy:
                comp[i] += policy[s] * (level[i] > 0)
        noise = _rng(config.seed, stream).normal(0.0, noise_sd, size=(S, T))
        a, b0 = _calibrate(comp + noise, np.broadcast_to(shape, (S, T)), target,
                           beta.get("(Intercept)", 0.0), ratio)
        rel[metric] = b0 + comp + a * shape[None, :] + noise
        truth_parts["intercept"][metric] = b0
        truth_parts["fixed"][metric] = {k: float(v) for k, v in beta.items() if k != "(Intercept)"}
        truth_parts["trend_scale"][metric] = a
        truth_parts["trend"][metric] = (a * shape).tolist()
        truth_parts["weekly"][metric] = weekly.tolist()
        truth_parts["re"][metric] = re
        truth_parts["curves"][metric] = {s: c.tolist() for s, c in curves.items()}
        truth_parts["policy"][metric] = policy
        truth_parts["noise"][metric] = noise_sd

    # January benchmark levels per weekday and the January daily series
    bench = {"tpp": {}, "pmt": {}}
    weekday_tpp = np.array([0.0, 0.02, 0.03, 0.05, 0.15, 0.05, -0.35])
    weekday_pmt = np.array([0.0, 0.3, 0.4, 0.6, 2.0, 1.5, -3.0])
    jan_dates = [JANUARY[0] + dt.timedelta(days=i) for i in range((JANUARY[1] - JANUARY[0]).days + 1)]
    jan_rows = []
    for i, s in enumerate(states):
        rng = _rng(config.seed, _S_JAN, i)
        base_tpp = rng.uniform(3.0, 3.8)
        base_pmt = rng.uniform(40.0, 50.0)
        bench["tpp"][s] = (base_tpp + weekday_tpp).tolist()
        bench["pmt"][s] = (base_pmt + weekday_pmt).tolist()
        raw_t = rng.normal(0.0, 0.1, size=len(jan_dates))
        raw_p = rng.normal(0.0, 1.5, size=len(jan_dates))
        wd = np.array([d.weekday() for d in jan_dates])
        usable = np.array([d not in JANUARY_EXCLUDED for d in jan_dates])
        for k in range(7):
            cell = (wd == k) & usable
            raw_t[cell] -= raw_t[cell].mean()
            raw_p[cell] -= raw_p[cell].mean()
        for d, k, et, ep, ok in zip(jan_dates, wd, raw_t, raw_p, usable):
            bt, bp = bench["tpp"][s][k], bench["pmt"][s][k]
            if ok:
                jan_rows.append((s, d, bt + et, bp + ep))
            else:
                jan_rows.append((s, d, 0.8 * bt, 0.7 * bp))
    january = pd.DataFrame(jan_rows, columns=["state", "date", "tpp", "pmt"])

    rows = []
    for i, s in enumerate(states):
        bt = np.asarray(bench["tpp"][s])[week]
        bp = np.asarray(bench["pmt"][s])[week]
        for j, d in enumerate(dates):
            rows.append((
                s, d, bt[j] + rel["tpp"][i, j], bp[j] + rel["pmt"][i, j],
                rel["tpp"][i, j], rel["pmt"][i, j], int(level[i, j]),
                cases[i, j], adj[i, j], national[j], approval[i, j],
                int(time_index[j]), int(week[j]), int(is_weekend[j]),
            ))
    panel = pd.DataFrame(rows, columns=PANEL_COLUMNS)
    panel = panel.sort_values(["state", "date"], kind="mergesort").reset_index(drop=True)
    truth = GroundTruth(
        config=config.to_dict(),
        states=states,
        dates=dates,
        order_dates=order_dates,
        order_levels=order_levels,
        intercept=truth_parts["intercept"],
        fixed_effects=truth_parts["fixed"],
        trend_scale=truth_parts["trend_scale"],
        trend=truth_parts["trend"],
        weekly=truth_parts["weekly"],
        state_effects=truth_parts["re"],
        state_curves=truth_parts["curves"],
        policy_effects=truth_parts["policy"],
        noise_sd=truth_parts["noise"],
        benchmark=bench,
        january=january,
        populations=pops,
    )
    return panel, truth


def covariates_frame(panel: pd.DataFrame) -> pd.DataFrame:
    return panel[["state", "date", "new_cases", "approval_rate"]].copy()


def metric_targets(panel: pd.DataFrame, truth: GroundTruth) -> pd.DataFrame:
    """Absolute daily metrics for January plus the study window."""
    both = pd.concat([truth.january, panel[["state", "date", "tpp", "pmt"]]], ignore_index=True)
    return both.sort_values(["state", "date"], kind="mergesort").reset_index(drop=True)


def _day_key(d) -> int:
    return pd.Timestamp(d).date().toordinal()


def generate_trips(
    config: SynthConfig,
    targets: pd.DataFrame,
    populations: Mapping[str, float],
    min_trip_miles: float = MIN_TRIP_MILES,
    trips_per_day: int = 4,
) -> pd.DataFrame:
    """Weighted trips whose daily metrics reproduce ``targets``.

    Per state-day: ``trips_per_day`` qualifying trips carry the trip-count
    weight and one short trip (at most ``min_trip_miles``) carries a small
    share of the miles. Qualifying distances are ``min_trip_miles`` plus a
    positive excess scaled so the weighted miles match exactly.
    """
    state_index = {s: i for i, s in enumerate(sorted(populations))}
    out_state, out_date, out_dist, out_w = [], [], [], []
    short = 0.5 * min_trip_miles
    for s, d, tpp, pmt in targets[["state", "date", "tpp", "pmt"]].itertuples(index=False):
        if s not in populations:
            raise ConfigError(f"no population for state {s}")
        P = float(populations[s])
        W, M = float(tpp) * P, float(pmt) * P
        if W < 0 or M < 0:
            raise FeasibilityError(f"negative target metrics for {s} on {d}")
        if W == 0 and M == 0:
            continue
        rng = _rng(config.seed, _S_TRIPS, state_index[s] * 1_000_000 + _day_key(d))
        if W == 0:
            out_state.append(s); out_date.append(d); out_dist.append(short); out_w.append(M / short)
            continue
        slack = M - W * min_trip_miles
        if not slack > 0:
            raise FeasibilityError(
                f"{s} {d}: pmt={pmt} cannot be reached with tpp={tpp} trips longer than {min_trip_miles} miles")
        m_short = 0.05 * slack
        share = rng.dirichlet(np.ones(trips_per_day))
        weights = W * share
        excess = rng.uniform(0.5, 1.5, size=trips_per_day)
        excess *= (slack - m_short) / float(weights @ excess)
        for w, e in zip(weights, excess):
            out_state.append(s); out_date.append(d); out_dist.append(min_trip_miles + e); out_w.append(w)
        out_state.append(s); out_date.append(d); out_dist.append(short); out_w.append(m_short / short)
    return pd.DataFrame({"state": out_state, "date": out_date,
                         "distance_miles": out_dist, "weight": out_w})
