"""Partial-dependence effects of stay-at-home orders.

Effects are reported as reductions: ``without_order - with_order``
averaged over the post-order days, positive when an order lowered
mobility.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConfigError, EmptyWindowError, UnknownLevelError
from .gam.design import GamModel, as_frame, predict
from .panel import write_csv

EFFECT_COLUMNS = ["state", "effect_tpp", "effect_pmt", "rank_tpp", "rank_pmt"]
SERIES_COLUMNS = ["state", "date", "with_order", "without_order"]


@dataclass(frozen=True)
class CounterfactualSeries:
    state: str
    dates: tuple[dt.date, ...]
    predicted_with_order: np.ndarray
    predicted_without_order: np.ndarray
    effective_date: dt.date | None
    order_level: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return self.predicted_without_order - self.predicted_with_order

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "state": self.state,
            "date": list(self.dates),
            "with_order": self.predicted_with_order,
            "without_order": self.predicted_without_order,
        })


@dataclass(frozen=True)
class PolicyEffect:
    state: str
    effect_tpp: float
    effect_pmt: float
    rank_tpp: int = 0
    rank_pmt: int = 0


def without_orders(rows: pd.DataFrame) -> pd.DataFrame:
    """Copy of ``rows`` with every order input set to the no-order level."""
    out = rows.copy()
    out["order_level"] = 0
    for c in out.columns:
        if c.startswith("order_") and c != "order_level":
            out[c] = 0
    return out


def _model_states(model: GamModel) -> set[str] | None:
    for tb in model.bases:
        levels = getattr(tb.evaluator, "levels", None)
        if tb.term.factor == "state" and levels is not None:
            levels = getattr(levels, "levels", levels)
            return set(levels)
    return None


def counterfactual(model: GamModel, panel, state: str) -> CounterfactualSeries:
    data = as_frame(panel)
    known = _model_states(model)
    if known is not None and state not in known:
        raise UnknownLevelError(f"state {state!r} was not in the training data")
    rows = data.loc[data["state"].astype(str) == state].sort_values("date", kind="mergesort")
    if rows.empty:
        raise UnknownLevelError(f"no panel rows for state {state!r}")
    rows = rows.reset_index(drop=True)
    with_order = predict(model, rows)
    without = predict(model, without_orders(rows))
    level = rows["order_level"].to_numpy(dtype=int)
    active = np.flatnonzero(level > 0)
    dates = tuple(pd.Timestamp(d).date() for d in rows["date"])
    eff = dates[active[0]] if active.size else None
    return CounterfactualSeries(state, dates, with_order, without, eff, level)


def policy_effect(series: CounterfactualSeries, start: dt.date | None = None,
                  end: dt.date | None = None) -> float:
    """Mean reduction from ``start`` (default: the effective date) to ``end``."""
    start = start or series.effective_date
    if start is None:
        raise EmptyWindowError(f"state {series.state} has no order in the panel")
    d = np.array(series.dates)
    mask = d >= start
    if end is not None:
        mask &= d <= end
    if not mask.any():
        raise EmptyWindowError(f"state {series.state} has no dates on or after {start}")
    return float(np.mean(series.gap[mask]))


def ordinal_ranks(values: Sequence[float], labels: Sequence[str] | None = None) -> np.ndarray:
    """Ranks 1..n, 1 = smallest value; ties broken by label then position."""
    values = np.asarray(values, dtype=float)
    keys = list(labels) if labels is not None else [""] * values.size
    order = sorted(range(values.size), key=lambda i: (values[i], keys[i], i))
    ranks = np.empty(values.size, dtype=int)
    ranks[order] = np.arange(1, values.size + 1)
    return ranks


def rank_effects(effects: Sequence[PolicyEffect]) -> list[PolicyEffect]:
    states = [e.state for e in effects]
    rt = ordinal_ranks([e.effect_tpp for e in effects], states)
    rp = ordinal_ranks([e.effect_pmt for e in effects], states)
    out = [PolicyEffect(e.state, e.effect_tpp, e.effect_pmt, int(a), int(b))
           for e, a, b in zip(effects, rt, rp)]
    return sorted(out, key=lambda e: e.state)


def state_effects(model_tpp: GamModel, model_pmt: GamModel, panel
                  ) -> tuple[list[PolicyEffect], dict[str, list[CounterfactualSeries]]]:
    """Ranked effects for every state with an order, plus the series per metric."""
    data = as_frame(panel)
    effects = []
    series: dict[str, list[CounterfactualSeries]] = {"tpp": [], "pmt": []}
    for state in sorted(set(data["state"].astype(str))):
        st = counterfactual(model_tpp, data, state)
        sp = counterfactual(model_pmt, data, state)
        series["tpp"].append(st)
        series["pmt"].append(sp)
        if st.effective_date is None:
            continue
        effects.append(PolicyEffect(state, policy_effect(st), policy_effect(sp)))
    return rank_effects(effects), series


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    return float(stats.spearmanr(a, b).statistic)


@dataclass(frozen=True)
class NationalEffect:
    abs_tpp: float
    pct_tpp: float
    abs_pmt: float
    pct_pmt: float

    def format(self) -> str:
        return (f"({self.abs_tpp:.3f} trips, {100 * self.pct_tpp:.1f}%) / "
                f"({self.abs_pmt:.3f} miles, {100 * self.pct_pmt:.1f}%)")


def _weights(states: Sequence[str], populations: Mapping[str, float], weighted: bool) -> np.ndarray:
    if not weighted:
        return np.ones(len(states))
    missing = [s for s in states if s not in populations]
    if missing:
        raise ConfigError(f"no population for {missing}")
    return np.array([float(populations[s]) for s in states])


def national_aggregate(effects: Sequence[PolicyEffect], populations: Mapping[str, float],
                       baselines: tuple[float, float], weighted: bool = True) -> NationalEffect:
    """Population-weighted (or plain) mean of state effects and its share of the baseline."""
    if not effects:
        raise EmptyWindowError("no state effects to aggregate")
    w = _weights([e.state for e in effects], populations, weighted)
    tpp = float(np.average([e.effect_tpp for e in effects], weights=w))
    pmt = float(np.average([e.effect_pmt for e in effects], weights=w))
    return NationalEffect(tpp, tpp / baselines[0], pmt, pmt / baselines[1])


def national_baselines(panel, populations: Mapping[str, float], weighted: bool = True) -> tuple[float, float]:
    """National January level of each metric, recovered as ``metric - rel_metric``."""
    data = as_frame(panel)
    bench = data.assign(b_tpp=data["tpp"] - data["rel_tpp"], b_pmt=data["pmt"] - data["rel_pmt"])
    per_state = bench.groupby("state", sort=True)[["b_tpp", "b_pmt"]].mean()
    w = _weights(list(per_state.index), populations, weighted)
    return (float(np.average(per_state["b_tpp"], weights=w)),
            float(np.average(per_state["b_pmt"], weights=w)))


def effects_frame(effects: Sequence[PolicyEffect]) -> pd.DataFrame:
    return pd.DataFrame([(e.state, e.effect_tpp, e.effect_pmt, e.rank_tpp, e.rank_pmt) for e in effects],
                        columns=EFFECT_COLUMNS)


def write_effects(effects: Sequence[PolicyEffect], path) -> None:
    write_csv(effects_frame(effects), path)


def write_series(series: Sequence[CounterfactualSeries], path) -> None:
    frame = pd.concat([s.to_frame() for s in series], ignore_index=True)
    write_csv(frame.sort_values(["state", "date"], kind="mergesort")[SERIES_COLUMNS], path)
