"""Penalized least squares and REML smoothing-parameter selection.

All solves go through a pivoted QR factorisation of the stacked system
``[X; E]`` where ``E'E = sum_j lambda_j S_j``; normal equations are never
formed. The REML criterion profiles out the scale parameter:

    V(rho) = 0.5 * [ (n - Mp) * (1 + log(2 pi Dp / (n - Mp)))
                     + log|X'X + S| - log|S|_+ ]

with ``Dp = ||y - X b||^2 + b'S b``, ``S = sum_j exp(rho_j) S_j`` and
``Mp`` the dimension of the null space of ``S``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from ..errors import ConvergenceError, IdentifiabilityError, NumericRangeError

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
LOG_LAMBDA_BOUND = 30.0
MAX_STEP = 5.0


def _support(S: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.any(S != 0, axis=0) | np.any(S != 0, axis=1))


@dataclass
class _Cluster:
    cols: np.ndarray
    members: list[int]
    U: np.ndarray  # orthonormal basis of the joint range, len(cols) x r
    M: list[np.ndarray]  # U' S_j U for each member

    @property
    def rank(self) -> int:
        return self.U.shape[1]


class PenaltySet:
    """Penalties grouped into clusters of overlapping column support.

    Within a cluster the penalties are projected onto the joint range
    space, where their weighted sum is positive definite for any positive
    weights; this makes ``log|S|_+`` a Cholesky log-determinant.
    """

    def __init__(self, penalties: Sequence[np.ndarray], p: int) -> None:
        self.p = p
        self.penalties = [np.asarray(S, dtype=float) for S in penalties]
        for S in self.penalties:
            if S.shape != (p, p):
                raise ValueError(f"penalty has shape {S.shape}, expected {(p, p)}")
        supports = [_support(S) for S in self.penalties]
        self.supports = supports
        # union-find over shared columns
        parent = list(range(len(supports)))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        owner: dict[int, int] = {}
        for j, cols in enumerate(supports):
            for c in cols:
                if c in owner:
                    a, b = find(owner[c]), find(j)
                    if a != b:
                        parent[max(a, b)] = min(a, b)
                else:
                    owner[c] = j
        groups: dict[int, list[int]] = {}
        for j in range(len(supports)):
            groups.setdefault(find(j), []).append(j)
        self.clusters: list[_Cluster] = []
        for members in groups.values():
            cols = np.unique(np.concatenate([supports[j] for j in members])) if members else np.array([], int)
            if cols.size == 0:
                self.clusters.append(_Cluster(cols, members, np.zeros((0, 0)), [np.zeros((0, 0))] * len(members)))
                continue
            blocks = [self.penalties[j][np.ix_(cols, cols)] for j in members]
            total = sum(B / np.linalg.norm(B) for B in blocks)
            ev, vec = np.linalg.eigh((total + total.T) / 2)
            keep = ev > RANK_TOL * ev.max()
            U = vec[:, keep]
            M = [(U.T @ B @ U + (U.T @ B @ U).T) / 2 for B in blocks]
            self.clusters.append(_Cluster(cols, members, U, M))
        self.rank = sum(c.rank for c in self.clusters)

    @property
    def null_dim(self) -> int:
        return self.p - self.rank

    def __len__(self) -> int:
        return len(self.penalties)

    def total(self, lam: np.ndarray) -> np.ndarray:
        S = np.zeros((self.p, self.p))
        for j, Sj in enumerate(self.penalties):
            S += lam[j] * Sj
        return S

    def factor(self, lam: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
        """Return ``E`` with ``E'E = S_lambda``, ``log|S_lambda|_+`` and its rho-gradient."""
        rows = []
        logdet = 0.0
        grad = np.zeros(len(self.penalties))
        for c in self.clusters:
            if c.rank == 0:
                continue
            A = sum(lam[j] * Mj for j, Mj in zip(c.members, c.M))
            try:
                L = linalg.cholesky(A, lower=True)
            except linalg.LinAlgError as exc:
                raise NumericRangeError(f"penalty sum lost positive definiteness: {exc}") from None
            logdet += 2.0 * np.sum(np.log(np.diag(L)))
            Linv = linalg.solve_triangular(L, np.eye(c.rank), lower=True)
            for j, Mj in zip(c.members, c.M):
                grad[j] = lam[j] * np.sum((Linv @ Mj) * Linv)
            E = np.zeros((c.rank, self.p))
            E[:, c.cols] = L.T @ c.U.T
            rows.append(E)
        E = np.vstack(rows) if rows else np.zeros((0, self.p))
        return E, logdet, grad

    def sqrt_each(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-penalty square-root factors ``(cols, R_j)`` with ``R_j'R_j = S_j[cols, cols]``."""
        out = []
        for Sj, cols in zip(self.penalties, self.supports):
            block = Sj[np.ix_(cols, cols)]
            ev, vec = np.linalg.eigh((block + block.T) / 2)
            keep = ev > RANK_TOL * max(ev.max(), 0.0) if ev.size else np.zeros(0, bool)
            out.append((cols, (vec[:, keep] * np.sqrt(ev[keep])).T))
        return out


@dataclass
class _Solve:
    beta: np.ndarray
    R: np.ndarray
    perm: np.ndarray
    logdet_A: float
    rss: float
    penalty: float


def _column_names(term_index: Mapping[str, tuple[int, int]] | None, col: int) -> str:
    if term_index:
        for name, (a, b) in term_index.items():
            if a <= col < b:
                return name
    return f"column {col}"


class PenalizedSystem:
    """Cached QR reduction of ``(X, y)`` shared by repeated penalized solves."""

    def __init__(self, X: np.ndarray, penalties: Sequence[np.ndarray], y: np.ndarray,
                 term_index: Mapping[str, tuple[int, int]] | None = None) -> None:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise NumericRangeError("design matrix or response contains non-finite values")
        self.n, self.p = X.shape
        if y.size != self.n:
            raise ValueError("X and y have different numbers of rows")
        self.X = X
        self.y = y
        self.term_index = dict(term_index) if term_index else None
        self.pen = PenaltySet(penalties, self.p)
        self._sqrt = self.pen.sqrt_each()
        if self.n > self.p:
            Q, R0 = np.linalg.qr(X, mode="reduced")
            self.R0 = R0
            self.f = Q.T @ y
            self.rss0 = float(np.sum((y - Q @ self.f) ** 2))
        else:
            self.R0 = X
            self.f = y.copy()
            self.rss0 = 0.0
        self.yy = float(y @ y)

    def solve(self, lam: np.ndarray, check_rank: bool = True) -> tuple[_Solve, float, np.ndarray]:
        lam = np.asarray(lam, dtype=float)
        if lam.size != len(self.pen):
            raise ValueError(f"expected {len(self.pen)} smoothing parameters, got {lam.size}")
        if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
            raise NumericRangeError("smoothing parameters must be finite and positive")
        E, logdet_S, dlogdet_S = self.pen.factor(lam)
        aug = np.vstack([self.R0, E])
        rhs = np.concatenate([self.f, np.zeros(E.shape[0])])
        Q, R, perm = linalg.qr(aug, mode="economic", pivoting=True)
        d = np.abs(np.diag(R))
        tiny = d <= max(aug.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0)
        if check_rank and np.any(tiny):
            bad = int(np.argmax(tiny))
            col = int(perm[bad])
            name = _column_names(self.term_index, col)
            raise IdentifiabilityError(
                f"penalized system is rank deficient: unpenalized direction involving {name}", term=name)
        with np.errstate(divide="ignore"):
            logdet_A = 2.0 * float(np.sum(np.log(d)))
        if not np.isfinite(logdet_A):
            raise NumericRangeError("log-determinant of penalized information is not finite")
        beta = np.empty(self.p)
        beta[perm] = linalg.solve_triangular(R, Q.T @ rhs)
        r = self.f - self.R0 @ beta
        rss = self.rss0 + float(r @ r)
        pen = float(np.sum((E @ beta) ** 2))
        return _Solve(beta, R, perm, logdet_A, rss, pen), logdet_S, dlogdet_S

    def covariance_unscaled(self, s: _Solve) -> np.ndarray:
        """``(X'X + S)^{-1}`` from the pivoted triangular factor."""
        Rinv = linalg.solve_triangular(s.R, np.eye(self.p))
        B = Rinv @ Rinv.T
        inv = np.empty_like(B)
        inv[np.ix_(s.perm, s.perm)] = B
        return (inv + inv.T) / 2

    def influence_diag(self, lam: np.ndarray, Ainv: np.ndarray) -> np.ndarray:
        S = self.pen.total(lam)
        return 1.0 - np.einsum("ij,ji->i", Ainv, S)

    # -- REML ------------------------------------------------------------

    def reml(self, rho: np.ndarray, gradient: bool = True) -> tuple[float, np.ndarray | None]:
        rho = np.asarray(rho, dtype=float)
        lam = np.exp(rho)
        s, logdet_S, dlogdet_S = self.solve(lam, check_rank=False)
        nm = self.n - self.pen.null_dim
        if nm <= 0:
            raise NumericRangeError("penalty null space is as large as the sample")
        Dp = s.rss + s.penalty
        if not Dp > 0:
            raise NumericRangeError("penalized deviance is not positive")
        value = 0.5 * (nm * (1.0 + math.log(2.0 * math.pi * Dp / nm)) + s.logdet_A - logdet_S)
        if not math.isfinite(value):
            raise NumericRangeError("REML score is not finite")
        if not gradient:
            return value, None
        Rinv = linalg.solve_triangular(s.R, np.eye(self.p))
        g = np.empty(len(self.pen))
        for j, (cols, Rj) in enumerate(self._sqrt):
            bj = s.beta[cols]
            bSb = float(np.sum((Rj @ bj) ** 2))
            # tr(A^{-1} S_j) = ||R_j P' R^{-1}||_F^2 restricted to the support
            pos = np.empty(self.p, dtype=int)
            pos[s.perm] = np.arange(self.p)
            W = Rj @ Rinv[pos[cols], :]
            trA = float(np.sum(W * W))
            g[j] = 0.5 * (nm * lam[j] * bSb / Dp + lam[j] * trA - dlogdet_S[j])
        return value, g


# ---------------------------------------------------------------------------
# public functional API


def fit_penalized_ls(
    X: np.ndarray,
    penalties: Sequence[np.ndarray],
    y: np.ndarray,
    lam: Sequence[float],
    blocks: Sequence[tuple[int, int]] | None = None,
    term_index: Mapping[str, tuple[int, int]] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Minimise ``||y - X b||^2 + sum_j lam_j b'S_j b``.

    Parameters
    ----------
    X, penalties, y
        Design, list of ``p x p`` penalties, response.
    lam : sequence of float
        Strictly positive smoothing parameters, one per penalty.
    blocks : sequence of (start, stop), optional
        Column ranges whose influence-matrix diagonal is summed. Defaults
        to the column support of each penalty.

    Returns
    -------
    beta : ndarray
    traces : ndarray
        Sum of ``diag[(X'X + S)^{-1} X'X]`` over each block (e.d.f.).
    """
    system = PenalizedSystem(X, penalties, y, term_index)
    lam = np.asarray(lam, dtype=float)
    s, _, _ = system.solve(lam)
    Ainv = system.covariance_unscaled(s)
    diag = system.influence_diag(lam, Ainv)
    if blocks is None:
        traces = np.array([diag[cols].sum() for cols in system.pen.supports])
    else:
        traces = np.array([diag[a:b].sum() for a, b in blocks])
    return s.beta, traces


def reml_score(X: np.ndarray, penalties: Sequence[np.ndarray], y: np.ndarray,
               log_lambda: Sequence[float]) -> float:
    """Negative restricted log-likelihood with the scale profiled out."""
    return PenalizedSystem(X, penalties, y).reml(np.asarray(log_lambda, float), gradient=False)[0]


def reml_gradient(X: np.ndarray, penalties: Sequence[np.ndarray], y: np.ndarray,
                  log_lambda: Sequence[float]) -> np.ndarray:
    """Analytic gradient of :func:`reml_score` with respect to log smoothing parameters."""
    return PenalizedSystem(X, penalties, y).reml(np.asarray(log_lambda, float))[1]


@dataclass(frozen=True)
class FittedGam:
    coefficients: np.ndarray
    smoothing_params: np.ndarray
    scale_estimate: float
    coef_covariance: np.ndarray  # Bayesian posterior covariance, already scaled
    edf_per_smooth: np.ndarray
    ref_df_per_smooth: np.ndarray
    adj_r_squared: float
    deviance_explained: float
    neg_reml: float
    term_index: dict[str, tuple[int, int]]
    smooth_names: tuple[str, ...]
    fixed_names: tuple[str, ...]
    penalty_owner: tuple[str, ...]
    edf_per_column: np.ndarray
    fitted_values: np.ndarray
    n_obs: int
    iterations: int = 0
    converged_by: str = "gradient"
    gradient: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def residual_df(self) -> float:
        return self.n_obs - float(self.edf_per_column.sum())

    @property
    def total_edf(self) -> float:
        return float(self.edf_per_column.sum())


def _default_terms(pen: PenaltySet, p: int):
    term_index: dict[str, tuple[int, int]] = {}
    owner = []
    for j, cols in enumerate(pen.supports):
        name = f"s{j}"
        term_index[name] = (int(cols.min()), int(cols.max()) + 1)
        owner.append(name)
    covered = np.zeros(p, bool)
    for cols in pen.supports:
        covered[cols] = True
    for c in np.flatnonzero(~covered):
        term_index[f"x{c}"] = (int(c), int(c) + 1)
    return term_index, owner


def _finish_fit(system: PenalizedSystem, rho: np.ndarray, value: float, grad: np.ndarray,
                term_index: dict[str, tuple[int, int]], penalty_owner: Sequence[str],
                iterations: int, how: str) -> FittedGam:
    lam = np.exp(rho)
    s, _, _ = system.solve(lam)
    Ainv = system.covariance_unscaled(s)
    edf_col = system.influence_diag(lam, Ainv)
    n = system.n
    tau = float(edf_col.sum())
    fitted = system.X @ s.beta
    resid = system.y - fitted
    rss = float(resid @ resid)
    scale = rss / (n - tau)
    smooth_names = tuple(dict.fromkeys(penalty_owner))
    fixed_names = tuple(name for name in term_index if name not in smooth_names)
    edf = np.array([edf_col[slice(*term_index[name])].sum() for name in smooth_names])
    ref_df = np.array([term_index[name][1] - term_index[name][0] for name in smooth_names], dtype=float)
    ybar = system.y.mean()
    tss = float(np.sum((system.y - ybar) ** 2))
    dev_expl = 1.0 - rss / tss if tss > 0 else 0.0
    adj = 1.0 - np.var(resid) * (n - 1) / (np.var(system.y) * (n - tau)) if tss > 0 else 0.0
    return FittedGam(
        coefficients=s.beta,
        smoothing_params=lam,
        scale_estimate=scale,
        coef_covariance=Ainv * scale,
        edf_per_smooth=edf,
        ref_df_per_smooth=ref_df,
        adj_r_squared=float(adj),
        deviance_explained=float(dev_expl),
        neg_reml=float(value),
        term_index=dict(term_index),
        smooth_names=smooth_names,
        fixed_names=fixed_names,
        penalty_owner=tuple(penalty_owner),
        edf_per_column=edf_col,
        fitted_values=fitted,
        n_obs=n,
        iterations=iterations,
        converged_by=how,
        gradient=grad,
    )


def optimize_reml(
    X: np.ndarray,
    penalties: Sequence[np.ndarray],
    y: np.ndarray,
    init_log_lambda: Sequence[float] | None = None,
    term_index: Mapping[str, tuple[int, int]] | None = None,
    penalty_owner: Sequence[str] | None = None,
    max_iter: int = 200,
    gtol: float = 1e-6,
    xtol: float = 1e-8,
) -> FittedGam:
    """Minimise the REML score over log smoothing parameters by BFGS.

    Steps are capped at 5 units of log-lambda and kept inside
    ``[-30, 30]``; a backtracking Armijo line search guarantees descent.
    Convergence is declared when the projected gradient's infinity norm
    drops below ``gtol`` or an accepted step is shorter than ``xtol``.
    """
    system = PenalizedSystem(X, penalties, y, term_index)
    m = len(system.pen)
    if term_index is None or penalty_owner is None:
        term_index, penalty_owner = _default_terms(system.pen, system.p)
    term_index = dict(term_index)
    rho = np.zeros(m) if init_log_lambda is None else np.asarray(init_log_lambda, dtype=float).copy()
    if m == 0:
        value, _ = system.reml(rho, gradient=False) if system.pen.null_dim < system.n else (0.0, None)
        return _finish_fit(system, rho, value, np.zeros(0), term_index, penalty_owner, 0, "unpenalized")
    lo, hi = -LOG_LAMBDA_BOUND, LOG_LAMBDA_BOUND
    rho = np.clip(rho, lo, hi)
    # an unpenalized null direction stays null for every lambda
    system.solve(np.exp(rho), check_rank=True)
    f, g = system.reml(rho)
    H = np.eye(m)
    first = True

    def projected(r, gr):
        pg = gr.copy()
        pg[(r <= lo) & (gr > 0)] = 0.0
        pg[(r >= hi) & (gr < 0)] = 0.0
        return pg

    for it in range(1, max_iter + 1):
        if np.max(np.abs(projected(rho, g))) < gtol:
            return _finish_fit(system, rho, f, g, term_index, penalty_owner, it - 1, "gradient")
        d = -H @ g
        if g @ d >= 0:
            H = np.eye(m)
            d = -g
        big = np.max(np.abs(d))
        if big > MAX_STEP:
            d *= MAX_STEP / big
        t = 1.0
        accepted = False
        for _ in range(60):
            trial = np.clip(rho + t * d, lo, hi)
            step = trial - rho
            try:
                f_new, g_new = system.reml(trial)
            except NumericRangeError:
                t *= 0.5
                continue
            if f_new <= f + 1e-4 * (g @ step):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if np.max(np.abs(projected(rho, g))) < 1e3 * gtol:
                return _finish_fit(system, rho, f, g, term_index, penalty_owner, it, "line-search")
            break
        yk = g_new - g
        sy = float(step @ yk)
        rho, f, g = trial, f_new, g_new
        if np.max(np.abs(step)) < xtol:
            return _finish_fit(system, rho, f, g, term_index, penalty_owner, it, "step")
        if sy > 1e-12:
            if first:
                H = np.eye(m) * sy / float(yk @ yk)
                first = False
            rho_k = 1.0 / sy
            V = np.eye(m) - rho_k * np.outer(step, yk)
            H = V @ H @ V.T + rho_k * np.outer(step, step)
    best = {"log_lambda": rho.tolist(), "neg_reml": f, "gradient": g.tolist()}
    raise ConvergenceError(
        f"REML optimisation did not converge in {max_iter} iterations "
        f"(|grad|_inf = {np.max(np.abs(g)):.3g})", best_state=best)
