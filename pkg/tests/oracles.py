"""Independent reference computations used by the test-suite.

None of these share code with the package's solvers: they work from the
normal equations in extended precision, or from the marginal Gaussian
likelihood of the equivalent mixed model on dense n x n matrices.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np

from mobgam.basis import build_cyclic, build_factor_smooth, build_random_effect, build_thin_plate


def mp_penalized_solve(X, penalties, y, lam, dps: int = 50) -> np.ndarray:
    """``(X'X + sum lam_j S_j)^{-1} X'y`` in ``dps``-digit arithmetic."""
    with mpmath.workdps(dps):
        Xm = mpmath.matrix(X.tolist())
        A = Xm.T * Xm
        for l, S in zip(lam, penalties):
            A += mpmath.mpf(float(l)) * mpmath.matrix(S.tolist())
        b = Xm.T * mpmath.matrix(y.tolist())
        sol = mpmath.lu_solve(A, b)
        return np.array([float(v) for v in sol])


def marginal_reml(X, penalties, y, rho) -> float:
    """Restricted negative log-likelihood of the mixed-model form, up to a constant.

    Splits coefficient space into the joint penalty null space ``F`` (flat
    prior) and its complement ``Z`` (Gaussian prior with precision
    ``S_lambda`` restricted), then evaluates
    ``0.5 * [(n - m)(1 + log(2 pi s2)) + log|Sigma| + log|F' Sigma^-1 F|]``
    with ``Sigma = I + Z P^{-1} Z'`` and ``s2`` the profiled scale.
    """
    n, p = X.shape
    S1 = sum(penalties)
    ev, U = np.linalg.eigh((S1 + S1.T) / 2)
    pos = ev > 1e-10 * ev.max()
    Ur, Un = U[:, pos], U[:, ~pos]
    lam = np.exp(rho)
    P = Ur.T @ sum(l * S for l, S in zip(lam, penalties)) @ Ur
    Z = X @ Ur
    Sigma = np.eye(n) + Z @ np.linalg.solve(P, Z.T)
    Si = np.linalg.inv(Sigma)
    _, logdet_sigma = np.linalg.slogdet(Sigma)
    m = Un.shape[1]
    if m:
        F = X @ Un
        G = F.T @ Si @ F
        alpha = np.linalg.solve(G, F.T @ Si @ y)
        r = y - F @ alpha
        _, logdet_g = np.linalg.slogdet(G)
    else:
        r = y
        logdet_g = 0.0
    q = float(r @ Si @ r)
    s2 = q / (n - m)
    return 0.5 * ((n - m) * (1 + math.log(2 * math.pi * s2)) + logdet_sigma + logdet_g)


def ridge_reml_closed_form(y, log_lam) -> float:
    """y_i = b + e_i with b ~ N(0, s2 / lam): marginal likelihood, s2 profiled."""
    with mpmath.workdps(40):
        n = len(y)
        lam = mpmath.e ** mpmath.mpf(log_lam)
        sy = mpmath.fsum(y)
        syy = mpmath.fsum([mpmath.mpf(v) ** 2 for v in y])
        q = syy - sy ** 2 / (n + lam)
        s2 = q / n
        val = (n * (1 + mpmath.log(2 * mpmath.pi * s2)) + mpmath.log((n + lam) / lam)) / 2
        return float(val)


def random_penalized_instance(rng: np.random.Generator):
    """Random identifiable problem: n <= 30, p <= 12, 1 to 3 PSD penalties."""
    p = int(rng.integers(2, 13))
    n = int(rng.integers(p, 31))
    X = rng.normal(size=(n, p)) * rng.uniform(0.5, 3.0, size=p)
    y = rng.normal(size=n)
    m = int(rng.integers(1, 4))
    penalties = []
    for _ in range(m):
        a = int(rng.integers(0, p))
        b = int(rng.integers(a + 1, p + 1))
        r = int(rng.integers(1, b - a + 1))
        B = rng.normal(size=(r, b - a))
        S = np.zeros((p, p))
        S[a:b, a:b] = B.T @ B
        penalties.append(S)
    lam = np.exp(rng.uniform(-4, 4, size=m))
    return X, penalties, y, lam


def family_models(seed: int = 0) -> dict[str, tuple[np.ndarray, list[np.ndarray], np.ndarray]]:
    """Small models for every smooth family and a mixture of all four."""
    rng = np.random.default_rng(seed)
    out = {}
    x = rng.uniform(0, 1, 60)
    b = build_thin_plate(x, 8)
    X = np.column_stack([b.columns])
    out["thin_plate"] = (X, b.penalties, np.sin(6 * x) + rng.normal(0, 0.2, 60))

    w = rng.uniform(0, 7, 80)
    b = build_cyclic(w, 6, 7.0)
    out["cyclic"] = (b.columns, b.penalties, np.cos(2 * np.pi * w / 7) + rng.normal(0, 0.3, 80))

    g = rng.choice(list("abcdefg"), 70)
    b = build_random_effect(g)
    eff = dict(zip("abcdefg", rng.normal(0, 1, 7)))
    y = np.array([eff[v] for v in g]) + rng.normal(0, 0.5, 70)
    out["random_effect"] = (np.column_stack([np.ones(70), b.columns]), [_pad(b.penalties[0], 1, 8)], y)

    t = np.tile(np.linspace(0, 1, 25), 4)
    lev = np.repeat(list("pqrs"), 25)
    b = build_factor_smooth(t, lev, k=6)
    y = np.sin(4 * t + np.repeat(np.arange(4), 25)) + rng.normal(0, 0.2, 100)
    out["factor_smooth"] = (b.columns, b.penalties, y)

    n = 120
    t = np.tile(np.linspace(0, 1, 30), 4)
    lev = np.repeat(list("ABCD"), 30)
    w = np.tile(np.arange(30) % 7, 4).astype(float)
    tp = build_thin_plate(t, 6)
    cc = build_cyclic(w, 5, 7.0)
    re = build_random_effect(lev)
    fs = build_factor_smooth(t, lev, k=5)
    keep = [0, 1, 2, 3, 5]  # drop the thin-plate constant column (index k - 2)
    blocks = [np.ones((n, 1)), tp.columns[:, keep], cc.columns[:, 1:], re.columns, fs.columns]
    Xm = np.column_stack(blocks)
    widths = [blk.shape[1] for blk in blocks]
    starts = np.cumsum([0] + widths[:-1])
    p = Xm.shape[1]
    pens = [
        _pad(tp.penalties[0][np.ix_(keep, keep)], starts[1], p),
        _pad(cc.penalties[0][1:, 1:], starts[2], p),
        _pad(re.penalties[0], starts[3], p),
        _pad(fs.penalties[0], starts[4], p),
        _pad(fs.penalties[1], starts[4], p),
    ]
    y = (np.sin(3 * t) + 0.3 * np.cos(2 * np.pi * w / 7) + np.repeat(rng.normal(0, 0.5, 4), 30)
         + rng.normal(0, 0.3, n))
    out["mixed"] = (Xm, pens, y)
    return out


def _pad(S: np.ndarray, start: int, p: int) -> np.ndarray:
    out = np.zeros((p, p))
    k = S.shape[0]
    out[start:start + k, start:start + k] = S
    return out


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
