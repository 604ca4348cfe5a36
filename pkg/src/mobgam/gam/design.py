"""Model specification, design assembly and prediction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from ..basis import (
    BasisKind,
    BasisSpec,
    build_cyclic,
    build_factor_smooth,
    build_random_effect,
    build_thin_plate,
)
from ..errors import ConfigError, DataError
from .fitting import FittedGam, optimize_reml

RESPONSE_COLUMNS = {"tpp": "rel_tpp", "pmt": "rel_pmt"}

ORDER_DUMMIES = ("order_1", "order_2", "order_3")
PANEL_FIXED_TERMS = ORDER_DUMMIES + (
    "new_cases", "adj_new_cases", "national_new_cases", "approval_rate", "is_weekend")

TERM_LABELS = {
    "(Intercept)": "(Intercept)",
    "order_1": "Stay-at-home order issued without penalty or without specifying enforcement",
    "order_2": "Stay-at-home order issued and enforced with warning, and possible fine for repeated offense",
    "order_3": "Stay-at-home order issued and enforced with fine and possible jail time",
    "new_cases": "Daily number of newly confirmed coronavirus cases in the states (1,000)",
    "adj_new_cases": "Daily number of newly confirmed coronavirus cases in the adjacent states (1,000)",
    "national_new_cases": "Daily number of newly confirmed coronavirus cases in the U.S. (1,000)",
    "approval_rate": "State governor approval rate",
    "is_weekend": "Weekend",
}


def model_column(data: pd.DataFrame, name: str) -> np.ndarray:
    """Numeric covariate by name, including the derived order indicators.

    ``order_<k>`` is the indicator of ``order_level == k`` and
    ``order_active`` the indicator of ``order_level > 0``.
    """
    if name in data.columns:
        values = data[name].to_numpy()
    elif name.startswith("order_") and "order_level" in data.columns:
        level = data["order_level"].to_numpy()
        suffix = name[len("order_"):]
        if suffix == "active":
            values = level > 0
        elif suffix.isdigit():
            values = level == int(suffix)
        else:
            raise DataError(f"unknown derived covariate {name!r}")
    else:
        raise DataError(f"covariate {name!r} is missing from the data")
    try:
        values = np.asarray(values, dtype=float)
    except (TypeError, ValueError):
        raise DataError(f"covariate {name!r} is not numeric") from None
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DataError(f"row {int(bad[0])}: field {name!r} is missing or not finite")
    return values


def factor_column(data: pd.DataFrame, name: str) -> np.ndarray:
    if name not in data.columns:
        raise DataError(f"factor {name!r} is missing from the data")
    col = data[name]
    missing = np.flatnonzero(col.isna().to_numpy())
    if missing.size:
        raise DataError(f"row {int(missing[0])}: field {name!r} is missing")
    return col.astype(str).to_numpy(dtype=object)


@dataclass(frozen=True)
class SmoothTerm:
    """A basis bound to covariates.

    ``by`` multiplies every column by a numeric covariate; with a
    random-effect basis over states and ``by='order_active'`` this gives a
    per-state order effect.
    """

    basis: BasisSpec
    covariate: str | None = None
    factor: str | None = None
    by: str | None = None
    label: str | None = None

    @property
    def kind(self) -> BasisKind:
        return self.basis.kind

    @property
    def centered(self) -> bool:
        return self.kind in (BasisKind.THIN_PLATE, BasisKind.CYCLIC)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind is BasisKind.RANDOM_EFFECT:
            inner = f"{self.by},{self.factor}" if self.by else self.factor
            return f"s({inner},bs='re')"
        if self.kind is BasisKind.FACTOR_SMOOTH:
            return f"s({self.covariate},{self.factor},bs='fs')"
        if self.kind is BasisKind.CYCLIC:
            return f"s({self.covariate},bs='cc')"
        return f"s({self.covariate})"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "basis_dim": self.basis.basis_dim,
            "period": self.basis.period,
            "factor_levels": list(self.basis.factor_levels) if self.basis.factor_levels else None,
            "covariate": self.covariate,
            "factor": self.factor,
            "by": self.by,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothTerm":
        levels = d.get("factor_levels")
        spec = BasisSpec(BasisKind(d["kind"]), d.get("basis_dim"), d.get("period"),
                         tuple(levels) if levels else None)
        return cls(spec, d.get("covariate"), d.get("factor"), d.get("by"), d.get("label"))


@dataclass(frozen=True)
class ModelSpec:
    response: str
    fixed_terms: tuple[str, ...] = ()
    smooth_terms: tuple[SmoothTerm, ...] = ()
    include_intercept: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "fixed_terms", tuple(self.fixed_terms))
        object.__setattr__(self, "smooth_terms", tuple(self.smooth_terms))
        names = list(self.fixed_terms) + [t.name for t in self.smooth_terms]
        if len(set(names)) != len(names):
            raise ConfigError(f"term names are not unique: {names}")
        for t in self.smooth_terms:
            if t.kind is BasisKind.RANDOM_EFFECT and t.factor in self.fixed_terms:
                raise ConfigError(f"{t.factor!r} is both a fixed term and a random effect")
            if t.kind is BasisKind.RANDOM_EFFECT and t.factor is None:
                raise ConfigError("random-effect term needs a factor")
            if t.kind is not BasisKind.RANDOM_EFFECT and t.covariate is None:
                raise ConfigError(f"{t.kind.value} term needs a covariate")
            if t.kind is BasisKind.FACTOR_SMOOTH and t.factor is None:
                raise ConfigError("factor-smooth term needs a factor")

    @property
    def response_column(self) -> str:
        return RESPONSE_COLUMNS.get(self.response, self.response)

    def to_dict(self) -> dict:
        return {
            "response": self.response,
            "fixed_terms": list(self.fixed_terms),
            "smooth_terms": [t.to_dict() for t in self.smooth_terms],
            "include_intercept": self.include_intercept,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["response"], tuple(d.get("fixed_terms", ())),
                   tuple(SmoothTerm.from_dict(t) for t in d.get("smooth_terms", ())),
                   bool(d.get("include_intercept", True)))


def panel_spec(response: str = "tpp", k_time: int = 10, k_week: int = 6,
               k_fs: int = 10) -> ModelSpec:
    """The panel model: order dummies, case counts, approval, weekend, plus
    time, weekly, state, time-by-state and order-by-state smooths."""
    return ModelSpec(
        response=response,
        fixed_terms=PANEL_FIXED_TERMS,
        smooth_terms=(
            SmoothTerm(BasisSpec(BasisKind.THIN_PLATE, k_time), covariate="time_index"),
            SmoothTerm(BasisSpec(BasisKind.CYCLIC, k_week, period=7.0), covariate="week"),
            SmoothTerm(BasisSpec(BasisKind.RANDOM_EFFECT), factor="state"),
            SmoothTerm(BasisSpec(BasisKind.FACTOR_SMOOTH, k_fs), covariate="time_index", factor="state"),
            SmoothTerm(BasisSpec(BasisKind.RANDOM_EFFECT), factor="state", by="order_active"),
        ),
    )


# ---------------------------------------------------------------------------


@dataclass
class TermBasis:
    """Training-time parameters needed to rebuild one smooth's columns."""

    term: SmoothTerm
    evaluator: object
    constraint: np.ndarray | None  # k x (k-1) sum-to-zero absorption
    penalty_scale: list[float]

    def raw_columns(self, data: pd.DataFrame) -> np.ndarray:
        t = self.term
        if t.kind is BasisKind.RANDOM_EFFECT:
            cols = self.evaluator.design(factor_column(data, t.factor))
        elif t.kind is BasisKind.FACTOR_SMOOTH:
            cols = self.evaluator.design(model_column(data, t.covariate), factor_column(data, t.factor))
        else:
            cols = self.evaluator.design(model_column(data, t.covariate))
        if t.by:
            cols = cols * model_column(data, t.by)[:, None]
        return cols

    def columns(self, data: pd.DataFrame) -> np.ndarray:
        cols = self.raw_columns(data)
        return cols if self.constraint is None else cols @ self.constraint


def _sum_to_zero(X: np.ndarray) -> np.ndarray:
    C = X.sum(axis=0)[:, None]
    Q, _ = np.linalg.qr(C, mode="complete")
    return Q[:, 1:]


def _build_term(term: SmoothTerm, data: pd.DataFrame) -> tuple[TermBasis, np.ndarray, list[np.ndarray]]:
    spec = term.basis
    levels = list(spec.factor_levels) if spec.factor_levels else None
    if term.kind is BasisKind.THIN_PLATE:
        block = build_thin_plate(model_column(data, term.covariate), spec.basis_dim)
    elif term.kind is BasisKind.CYCLIC:
        block = build_cyclic(model_column(data, term.covariate), spec.basis_dim, spec.period)
    elif term.kind is BasisKind.RANDOM_EFFECT:
        block = build_random_effect(factor_column(data, term.factor), levels)
    else:
        block = build_factor_smooth(model_column(data, term.covariate), factor_column(data, term.factor),
                                    levels, spec.basis_dim)
    X = block.columns
    if term.by:
        X = X * model_column(data, term.by)[:, None]
    Z = None
    penalties = block.penalties
    if term.centered:
        Z = _sum_to_zero(X)
        X = X @ Z
        penalties = [Z.T @ S @ Z for S in penalties]
    xnorm = np.linalg.norm(X, ord=np.inf) ** 2
    scales = []
    scaled = []
    for S in penalties:
        S = (S + S.T) / 2
        snorm = np.linalg.norm(S, ord=np.inf)
        c = xnorm / snorm if snorm > 0 and xnorm > 0 else 1.0
        scales.append(float(c))
        scaled.append(S * c)
    return TermBasis(term, block.basis, Z, scales), X, scaled


@dataclass
class Design:
    X: np.ndarray
    penalties: list[np.ndarray]
    y: np.ndarray
    term_index: dict[str, tuple[int, int]]
    penalty_owner: list[str]
    bases: list[TermBasis] = field(default_factory=list)
    fixed_names: list[str] = field(default_factory=list)

    def __iter__(self) -> Iterator:
        return iter((self.X, self.penalties, self.y))

    @property
    def n_columns(self) -> int:
        return self.X.shape[1]


def _fixed_columns(spec: ModelSpec, data: pd.DataFrame) -> tuple[list[str], list[np.ndarray]]:
    names, cols = [], []
    if spec.include_intercept:
        names.append("(Intercept)")
        cols.append(np.ones(len(data)))
    for name in spec.fixed_terms:
        names.append(name)
        cols.append(model_column(data, name))
    return names, cols


def assemble_design(spec: ModelSpec, panel: pd.DataFrame | Sequence) -> Design:
    """Stack intercept, fixed covariates and smooth blocks into one system.

    Thin-plate and cyclic smooths are centred (sum-to-zero over the
    training rows) so the intercept stays identified; each penalty is
    zero-padded to ``p x p`` and rescaled to the magnitude of its block's
    columns.
    """
    data = as_frame(panel)
    if len(data) == 0:
        raise DataError("panel is empty")
    y = model_column(data, spec.response_column)
    names, cols = _fixed_columns(spec, data)
    term_index = {name: (i, i + 1) for i, name in enumerate(names)}
    blocks = list(cols)
    offset = len(names)
    bases, raw_pens, owner = [], [], []
    for term in spec.smooth_terms:
        tb, X, pens = _build_term(term, data)
        width = X.shape[1]
        term_index[term.name] = (offset, offset + width)
        blocks.append(X)
        for S in pens:
            raw_pens.append((offset, S))
            owner.append(term.name)
        bases.append(tb)
        offset += width
    X = np.column_stack(blocks) if blocks else np.zeros((len(data), 0))
    p = X.shape[1]
    penalties = []
    for start, S in raw_pens:
        full = np.zeros((p, p))
        full[start:start + S.shape[0], start:start + S.shape[0]] = S
        penalties.append(full)
    return Design(X, penalties, y, term_index, owner, bases, names)


def design_matrix(spec: ModelSpec, bases: Sequence[TermBasis], data: pd.DataFrame) -> np.ndarray:
    _, cols = _fixed_columns(spec, data)
    blocks = list(cols) + [tb.columns(data) for tb in bases]
    return np.column_stack(blocks)


def as_frame(panel) -> pd.DataFrame:
    if isinstance(panel, pd.DataFrame):
        return panel.reset_index(drop=True)
    rows = list(panel)
    if rows and hasattr(rows[0], "to_dict"):
        return pd.DataFrame([r.to_dict() for r in rows])
    return pd.DataFrame(rows)


@dataclass
class GamModel:
    """A fitted model together with the bases needed to predict."""

    spec: ModelSpec
    bases: list[TermBasis]
    fit: FittedGam

    def design_matrix(self, data) -> np.ndarray:
        return design_matrix(self.spec, self.bases, as_frame(data))

    def term_contribution(self, data, term: str) -> np.ndarray:
        a, b = self.fit.term_index[term]
        X = self.design_matrix(data)
        return X[:, a:b] @ self.fit.coefficients[a:b]

    def smooth_curve(self, term: str, grid: Sequence[float]) -> np.ndarray:
        """Fitted curve of a one-covariate smooth (no factor, no ``by``) on ``grid``."""
        for tb in self.bases:
            if tb.term.name == term:
                break
        else:
            raise ConfigError(f"no smooth term named {term!r}")
        if tb.term.factor or tb.term.by:
            raise ConfigError(f"{term} is not a plain one-covariate smooth")
        a, b = self.fit.term_index[term]
        frame = pd.DataFrame({tb.term.covariate: np.asarray(grid, dtype=float)})
        return tb.columns(frame) @ self.fit.coefficients[a:b]


def fit_gam(spec: ModelSpec, panel, init_log_lambda: Sequence[float] | None = None,
            max_iter: int = 200) -> GamModel:
    design = assemble_design(spec, panel)
    fit = optimize_reml(design.X, design.penalties, design.y, init_log_lambda,
                        term_index=design.term_index, penalty_owner=design.penalty_owner,
                        max_iter=max_iter)
    return GamModel(spec, design.bases, fit)


def predict(model: GamModel, newdata) -> np.ndarray:
    """Linear predictor for new rows using training-time bases and constraints."""
    return model.design_matrix(newdata) @ model.fit.coefficients
