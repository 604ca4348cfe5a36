"""Design-matrix columns and quadratic penalties for the smooth-term families.

Four families are provided:

* ``ThinPlate1D`` -- rank-k eigen-truncated thin plate regression spline
  in one dimension (second-derivative penalty, null space {1, x}).
* ``CyclicCubic`` -- cubic regression spline whose value, slope and
  curvature match across the wrap point of a period.
* ``RandomEffect`` -- one-hot indicators with an identity (ridge) penalty.
* ``FactorSmooth`` -- one thin-plate copy per factor level with a shared
  wiggliness penalty plus a ridge on every level's null space.

Builders return a :class:`BasisBlock` holding the training-data columns,
the penalties and an evaluator object that rebuilds columns for new data
using the parameters fixed at construction time.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import (
    ConfigError,
    DegenerateCovariateError,
    DimensionError,
    UnknownLevelError,
)

MAX_KNOTS = 2000
NULL_TOL = 1e-10


class BasisKind(str, enum.Enum):
    THIN_PLATE = "tp"
    CYCLIC = "cc"
    RANDOM_EFFECT = "re"
    FACTOR_SMOOTH = "fs"


@dataclass(frozen=True)
class BasisSpec:
    """Declarative description of one smooth basis."""

    kind: BasisKind
    basis_dim: int | None = None
    period: float | None = None
    factor_levels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        kind = BasisKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.factor_levels is not None:
            object.__setattr__(self, "factor_levels", tuple(str(v) for v in self.factor_levels))
        if kind in (BasisKind.THIN_PLATE, BasisKind.CYCLIC, BasisKind.FACTOR_SMOOTH):
            if self.basis_dim is None or self.basis_dim < 3:
                raise DimensionError(f"{kind.value} basis needs basis_dim >= 3, got {self.basis_dim}")
        if kind is BasisKind.CYCLIC and (self.period is None or not self.period > 0):
            raise ConfigError(f"cyclic basis needs period > 0, got {self.period}")
        if kind is BasisKind.RANDOM_EFFECT and self.factor_levels is not None:
            if self.basis_dim is not None and self.basis_dim != len(self.factor_levels):
                raise DimensionError("random-effect basis_dim must equal the number of levels")


@dataclass
class BasisBlock:
    columns: np.ndarray
    penalties: list[np.ndarray]
    null_space_dim: list[int]
    basis: object = field(repr=False, default=None)

    @property
    def basis_dim(self) -> int:
        return self.columns.shape[1]


def null_space_dimension(S: np.ndarray, tol: float = NULL_TOL) -> int:
    """Count eigenvalues of ``S`` below ``tol`` times its largest eigenvalue."""
    ev = np.linalg.eigvalsh((S + S.T) / 2)
    top = ev.max() if ev.size else 0.0
    if top <= 0:
        return S.shape[0]
    return int(np.sum(ev < tol * top))


def _symmetrize(S: np.ndarray) -> np.ndarray:
    return (S + S.T) / 2


# ---------------------------------------------------------------------------
# thin plate regression spline


def tps_radial(r: np.ndarray) -> np.ndarray:
    """Thin-plate radial function for one dimension and second-order penalty."""
    return np.abs(r) ** 3 / 12.0


def _select_knots(x: np.ndarray, max_knots: int = MAX_KNOTS) -> np.ndarray:
    ux = np.unique(x)
    if ux.size <= max_knots:
        return ux
    idx = np.round(np.linspace(0, ux.size - 1, max_knots)).astype(int)
    return ux[idx]


@dataclass(frozen=True)
class ThinPlateBasis:
    """Evaluator for a 1-D thin plate regression spline.

    Columns are ordered ``[range-space (k-2) | 1 | x]``; only the first
    ``k - 2`` coefficients are penalized.
    """

    knots: np.ndarray
    shift: float
    scale: float
    transform: np.ndarray
    k: int

    def scaled(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def design(self, x: np.ndarray) -> np.ndarray:
        xs = self.scaled(x).ravel()
        E = tps_radial(xs[:, None] - self.knots[None, :])
        return np.column_stack([E @ self.transform, np.ones_like(xs), xs])

    def to_dict(self) -> dict:
        return {"knots": self.knots, "shift": self.shift, "scale": self.scale,
                "transform": self.transform, "k": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> "ThinPlateBasis":
        return cls(np.asarray(d["knots"]), float(d["shift"]), float(d["scale"]),
                   np.asarray(d["transform"]), int(d["k"]))


def _thin_plate_setup(x: np.ndarray, k: int) -> tuple[ThinPlateBasis, np.ndarray]:
    knots = _select_knots(x)
    shift = float(knots.mean())
    scale = float(knots.max() - knots.min())
    ks = (knots - shift) / scale
    E = tps_radial(ks[:, None] - ks[None, :])
    T = np.column_stack([np.ones_like(ks), ks])
    evals, evecs = linalg.eigh(E)
    order = np.argsort(-np.abs(evals), kind="stable")[:k]
    Dk = evals[order]
    Uk = evecs[:, order]
    # absorb T' U_k d = 0 by taking the orthogonal complement of U_k' T
    Q, _ = np.linalg.qr(Uk.T @ T, mode="complete")
    Z = Q[:, 2:]
    transform = Uk @ Z
    S_range = _symmetrize(Z.T @ (Dk[:, None] * Z))
    S = np.zeros((k, k))
    S[: k - 2, : k - 2] = S_range
    return ThinPlateBasis(ks, shift, scale, transform, k), S


def build_thin_plate(x: Sequence[float], k: int = 10) -> BasisBlock:
    """Rank-``k`` thin plate regression spline basis for a 1-D covariate.

    The full thin-plate problem over the unique covariate values (or a
    quantile subsample of at most 2000 of them) is eigen-truncated to its
    ``k - 2`` dominant radial directions, constrained orthogonal to the
    polynomial null space, and augmented with the constant and linear
    columns.

    Parameters
    ----------
    x : array_like
        Covariate values, length n.
    k : int
        Basis dimension, ``3 <= k <= n``.

    Returns
    -------
    BasisBlock
        ``n x k`` columns, a single penalty with a 2-dimensional null space.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if k < 3:
        raise DimensionError(f"thin plate basis needs k >= 3, got {k}")
    if k > n:
        raise DimensionError(f"basis dimension k={k} exceeds number of observations n={n}")
    if not np.all(np.isfinite(x)):
        raise DegenerateCovariateError("covariate contains non-finite values")
    if np.unique(x).size < k:
        raise DegenerateCovariateError(
            f"covariate has {np.unique(x).size} distinct values, fewer than k={k}")
    basis, S = _thin_plate_setup(x, k)
    return BasisBlock(basis.design(x), [S], [null_space_dimension(S)], basis)


# ---------------------------------------------------------------------------
# cyclic cubic regression spline


@dataclass(frozen=True)
class CyclicBasis:
    knots: np.ndarray
    period: float
    origin: float
    F: np.ndarray  # maps knot values to knot second derivatives

    @property
    def k(self) -> int:
        return self.knots.size

    def reduce(self, x: np.ndarray) -> np.ndarray:
        return np.mod(np.asarray(x, dtype=float) - self.origin, self.period) + self.origin

    def design(self, x: np.ndarray) -> np.ndarray:
        xr = self.reduce(np.asarray(x, dtype=float).ravel())
        k = self.k
        ext = np.append(self.knots, self.knots[0] + self.period)
        j = np.clip(np.searchsorted(ext, xr, side="right") - 1, 0, k - 1)
        h = ext[j + 1] - ext[j]
        right = ext[j + 1] - xr
        left = xr - ext[j]
        a_lo = right / h
        a_hi = left / h
        c_lo = (right ** 3 / h - h * right) / 6.0
        c_hi = (left ** 3 / h - h * left) / 6.0
        jn = (j + 1) % k
        out = c_lo[:, None] * self.F[j] + c_hi[:, None] * self.F[jn]
        rows = np.arange(xr.size)
        out[rows, j] += a_lo
        out[rows, jn] += a_hi
        return out

    def to_dict(self) -> dict:
        return {"knots": self.knots, "period": self.period, "origin": self.origin, "F": self.F}

    @classmethod
    def from_dict(cls, d: dict) -> "CyclicBasis":
        return cls(np.asarray(d["knots"]), float(d["period"]), float(d["origin"]), np.asarray(d["F"]))


def _cyclic_matrices(knots: np.ndarray, period: float) -> tuple[np.ndarray, np.ndarray]:
    k = knots.size
    h = np.diff(np.append(knots, knots[0] + period))
    B = np.zeros((k, k))
    D = np.zeros((k, k))
    for i in range(k):
        im, ip = (i - 1) % k, (i + 1) % k
        B[i, i] = (h[im] + h[i]) / 3.0
        B[i, ip] += h[i] / 6.0
        B[i, im] += h[im] / 6.0
        D[i, i] = -1.0 / h[im] - 1.0 / h[i]
        D[i, ip] += 1.0 / h[i]
        D[i, im] += 1.0 / h[im]
    return B, D


def build_cyclic(x: Sequence[float], k: int, period: float, origin: float = 0.0) -> BasisBlock:
    """Cyclic cubic regression spline with ``k`` knots spread evenly over one period.

    Coefficients are the function values at the knots. Every basis
    function and its first two derivatives agree at ``origin`` and
    ``origin + period``; the penalty is the integrated squared second
    derivative and annihilates constants only.
    """
    if not period > 0:
        raise ConfigError(f"period must be positive, got {period}")
    if k < 3:
        raise DimensionError(f"cyclic basis needs k >= 3, got {k}")
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise DegenerateCovariateError("covariate contains non-finite values")
    knots = origin + period * np.arange(k) / k
    B, D = _cyclic_matrices(knots, period)
    F = linalg.solve(B, D, assume_a="sym")
    S = _symmetrize(D @ F)
    basis = CyclicBasis(knots, float(period), float(origin), F)
    return BasisBlock(basis.design(x), [S], [null_space_dimension(S)], basis)


# ---------------------------------------------------------------------------
# random effects and factor-smooth interactions


def _as_labels(factor: Sequence) -> np.ndarray:
    return np.asarray([str(v) for v in factor], dtype=object)


@dataclass(frozen=True)
class RandomEffectBasis:
    levels: tuple[str, ...]

    def codes(self, factor: Sequence) -> np.ndarray:
        lookup = {lev: i for i, lev in enumerate(self.levels)}
        labels = _as_labels(factor)
        try:
            return np.fromiter((lookup[v] for v in labels), dtype=int, count=labels.size)
        except KeyError as exc:
            raise UnknownLevelError(f"unknown factor level {exc.args[0]!r}") from None

    def design(self, factor: Sequence) -> np.ndarray:
        codes = self.codes(factor)
        out = np.zeros((codes.size, len(self.levels)))
        out[np.arange(codes.size), codes] = 1.0
        return out

    def to_dict(self) -> dict:
        return {"levels": list(self.levels)}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomEffectBasis":
        return cls(tuple(d["levels"]))


def build_random_effect(factor: Sequence, levels: Sequence | None = None) -> BasisBlock:
    """One-hot indicator columns over ``levels`` with an identity penalty."""
    if levels is None:
        levels = sorted(set(_as_labels(factor)))
    basis = RandomEffectBasis(tuple(str(v) for v in levels))
    cols = basis.design(factor)
    return BasisBlock(cols, [np.eye(len(basis.levels))], [0], basis)


@dataclass(frozen=True)
class FactorSmoothBasis:
    """Per-level copies of a shared thin-plate basis, level-major column order."""

    smooth: ThinPlateBasis
    levels: RandomEffectBasis

    @property
    def k(self) -> int:
        return self.smooth.k

    def design(self, x: Sequence[float], factor: Sequence) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        codes = self.levels.codes(factor)
        base = self.smooth.design(x)
        k = self.k
        out = np.zeros((x.size, k * len(self.levels.levels)))
        rows = np.arange(x.size)
        for j in range(k):
            out[rows, codes * k + j] = base[:, j]
        return out

    def to_dict(self) -> dict:
        return {"smooth": self.smooth.to_dict(), "levels": self.levels.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FactorSmoothBasis":
        return cls(ThinPlateBasis.from_dict(d["smooth"]), RandomEffectBasis.from_dict(d["levels"]))


def build_factor_smooth(
    x: Sequence[float], factor: Sequence, levels: Sequence | None = None, k: int = 10
) -> BasisBlock:
    """Factor-smooth interaction: one thin-plate curve per level.

    Two penalties, each shared by every level: the thin-plate wiggliness
    penalty replicated block-diagonally, and a ridge on each level's
    constant and linear coefficients. Together they penalize every
    coefficient direction.
    """
    x = np.asarray(x, dtype=float).ravel()
    labels = _as_labels(factor)
    if labels.size != x.size:
        raise DimensionError("covariate and factor lengths differ")
    if levels is None:
        levels = sorted(set(labels))
    re = RandomEffectBasis(tuple(str(v) for v in levels))
    codes = re.codes(labels)
    for i, lev in enumerate(re.levels):
        n_distinct = np.unique(x[codes == i]).size
        if n_distinct < k:
            raise DegenerateCovariateError(
                f"level {lev!r} has {n_distinct} distinct covariate values, fewer than k={k}")
    if k < 3:
        raise DimensionError(f"factor smooth needs k >= 3, got {k}")
    smooth, S = _thin_plate_setup(x, k)
    basis = FactorSmoothBasis(smooth, re)
    n_lev = len(re.levels)
    null_ridge = np.zeros((k, k))
    null_ridge[k - 2:, k - 2:] = np.eye(2)
    S_wiggle = np.kron(np.eye(n_lev), S)
    S_null = np.kron(np.eye(n_lev), null_ridge)
    return BasisBlock(
        basis.design(x, labels),
        [S_wiggle, S_null],
        [null_space_dimension(S_wiggle), null_space_dimension(S_null)],
        basis,
    )


def basis_from_dict(kind: str, d: dict):
    cls = {
        BasisKind.THIN_PLATE: ThinPlateBasis,
        BasisKind.CYCLIC: CyclicBasis,
        BasisKind.RANDOM_EFFECT: RandomEffectBasis,
        BasisKind.FACTOR_SMOOTH: FactorSmoothBasis,
    }[BasisKind(kind)]
    return cls.from_dict(d)
