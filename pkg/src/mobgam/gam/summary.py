"""Coefficient tables and fit statistics for a fitted model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .fitting import FittedGam

SIGNIF_LEGEND = "Signif. codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1"


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return ""


@dataclass(frozen=True)
class ParametricRow:
    term: str
    estimate: float
    std_error: float
    t_value: float
    p_value: float

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value)


@dataclass(frozen=True)
class SmoothRow:
    term: str
    edf: float
    ref_df: float
    f_value: float
    p_value: float

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value)


@dataclass(frozen=True)
class SummaryTable:
    response: str
    parametric: tuple[ParametricRow, ...]
    smooth: tuple[SmoothRow, ...]
    adj_r_squared: float
    deviance_explained: float
    neg_reml: float
    scale_estimate: float
    n_obs: int
    residual_df: float

    def to_dict(self) -> dict:
        return {
            "response": self.response,
            "parametric": [dict(asdict(r), stars=r.stars) for r in self.parametric],
            "smooth": [dict(asdict(r), stars=r.stars) for r in self.smooth],
            "fit": {
                "adj_r_squared": self.adj_r_squared,
                "deviance_explained": self.deviance_explained,
                "neg_reml": self.neg_reml,
                "scale_estimate": self.scale_estimate,
                "n_obs": self.n_obs,
                "residual_df": self.residual_df,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self, labels: dict[str, str] | None = None) -> str:
        """Aligned plain-text rendering with 3-decimal numbers."""
        labels = labels or {}
        name = lambda t: labels.get(t, t)  # noqa: E731
        w = max([len(name(r.term)) for r in self.parametric + self.smooth] + [12])
        out = [f"Response: {self.response}", "", "Parametric coefficients:"]
        out.append(f"{'':<{w}}  {'Estimate':>10}  {'Std. Error':>10}  {'t value':>9}  {'Pr(>|t|)':>9}")
        for r in self.parametric:
            out.append(f"{name(r.term):<{w}}  {r.estimate:>10.3f}  {r.std_error:>10.3f}  "
                       f"{r.t_value:>9.3f}  {_p(r.p_value):>9}  {r.stars}".rstrip())
        out += ["---", SIGNIF_LEGEND, "", "Approximate significance of smooth terms:"]
        out.append(f"{'':<{w}}  {'edf':>9}  {'Ref.df':>9}  {'F':>9}  {'p-value':>9}")
        for r in self.smooth:
            out.append(f"{name(r.term):<{w}}  {r.edf:>9.3f}  {r.ref_df:>9.3f}  "
                       f"{r.f_value:>9.3f}  {_p(r.p_value):>9}  {r.stars}".rstrip())
        out += ["---", SIGNIF_LEGEND, ""]
        out.append(f"R-sq.(adj) = {self.adj_r_squared:.3f}   "
                   f"Deviance explained = {100 * self.deviance_explained:.1f}%")
        out.append(f"-REML = {self.neg_reml:.3f}   Scale est. = {self.scale_estimate:.3f}   n = {self.n_obs}")
        return "\n".join(out) + "\n"


def _p(p: float) -> str:
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def smooth_f_test(beta: np.ndarray, cov: np.ndarray, edf: float, residual_df: float) -> tuple[float, float]:
    """Wald-type F statistic for ``beta = 0`` using a rank-truncated inverse.

    The rank is the e.d.f. rounded to an integer (at least 1, at most the
    block width); the reference distribution is F(rank, residual_df). This
    is an approximation: it ignores smoothing parameter uncertainty.
    """
    k = beta.size
    r = int(min(max(round(edf), 1), k))
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    order = np.argsort(vals)[::-1][:r]
    vals, vecs = vals[order], vecs[:, order]
    keep = vals > vals[0] * 1e-12 if vals.size and vals[0] > 0 else np.zeros(0, bool)
    if not np.any(keep):
        return 0.0, 1.0
    proj = vecs[:, keep].T @ beta
    stat = float(np.sum(proj ** 2 / vals[keep])) / int(keep.sum())
    p = float(stats.f.sf(stat, int(keep.sum()), max(residual_df, 1.0)))
    return stat, p


def summarize(fit: FittedGam, response: str = "") -> SummaryTable:
    V = fit.coef_covariance
    b = fit.coefficients
    df = fit.residual_df
    par = []
    for name in fit.fixed_names:
        i = fit.term_index[name][0]
        se = float(np.sqrt(V[i, i]))
        t = float(b[i] / se) if se > 0 else np.inf
        p = float(2 * stats.t.sf(abs(t), df))
        par.append(ParametricRow(name, float(b[i]), se, t, p))
    smooth = []
    for j, name in enumerate(fit.smooth_names):
        a, c = fit.term_index[name]
        F, p = smooth_f_test(b[a:c], V[a:c, a:c], float(fit.edf_per_smooth[j]), df)
        smooth.append(SmoothRow(name, float(fit.edf_per_smooth[j]), float(fit.ref_df_per_smooth[j]), F, p))
    return SummaryTable(
        response=response,
        parametric=tuple(par),
        smooth=tuple(smooth),
        adj_r_squared=fit.adj_r_squared,
        deviance_explained=fit.deviance_explained,
        neg_reml=fit.neg_reml,
        scale_estimate=fit.scale_estimate,
        n_obs=fit.n_obs,
        residual_df=df,
    )
