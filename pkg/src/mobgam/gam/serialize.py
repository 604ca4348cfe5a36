"""Versioned JSON model files with base64-embedded float64 arrays."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from ..basis import basis_from_dict
from ..errors import DataError
from .design import GamModel, ModelSpec, SmoothTerm, TermBasis
from .fitting import FittedGam

FORMAT = "mobgam-model"
VERSION = 1

_ARRAY_FIELDS = ("coefficients", "smoothing_params", "coef_covariance", "edf_per_smooth",
                 "ref_df_per_smooth", "edf_per_column", "fitted_values", "gradient")


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(float)


def _pack(obj):
    """Replace every ndarray in a nested structure by its encoded form."""
    if isinstance(obj, np.ndarray):
        return {"__array__": encode_array(obj)}
    if isinstance(obj, dict):
        return {k: _pack(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pack(v) for v in obj]
    return obj


def _unpack(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return decode_array(obj["__array__"])
        return {k: _unpack(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unpack(v) for v in obj]
    return obj


def _term_basis_dict(tb: TermBasis) -> dict:
    return {
        "term": tb.term.to_dict(),
        "basis": _pack(tb.evaluator.to_dict()),
        "constraint": None if tb.constraint is None else encode_array(tb.constraint),
        "penalty_scale": list(tb.penalty_scale),
    }


def model_to_dict(model: GamModel) -> dict:
    fit = model.fit
    fit_d = {k: encode_array(getattr(fit, k)) for k in _ARRAY_FIELDS}
    fit_d.update(
        scale_estimate=fit.scale_estimate,
        adj_r_squared=fit.adj_r_squared,
        deviance_explained=fit.deviance_explained,
        neg_reml=fit.neg_reml,
        term_index={k: list(v) for k, v in fit.term_index.items()},
        smooth_names=list(fit.smooth_names),
        fixed_names=list(fit.fixed_names),
        penalty_owner=list(fit.penalty_owner),
        n_obs=fit.n_obs,
        iterations=fit.iterations,
        converged_by=fit.converged_by,
    )
    return {
        "format": FORMAT,
        "version": VERSION,
        "spec": model.spec.to_dict(),
        "bases": [_term_basis_dict(tb) for tb in model.bases],
        "fit": fit_d,
    }


def model_from_dict(d: dict) -> GamModel:
    if d.get("format") != FORMAT:
        raise DataError(f"not a model file (format={d.get('format')!r})")
    if d.get("version") != VERSION:
        raise DataError(f"unsupported model file version {d.get('version')!r}")
    spec = ModelSpec.from_dict(d["spec"])
    bases = []
    for b in d["bases"]:
        term = SmoothTerm.from_dict(b["term"])
        Z = None if b["constraint"] is None else decode_array(b["constraint"])
        bases.append(TermBasis(term, basis_from_dict(term.kind.value, _unpack(b["basis"])), Z, list(b["penalty_scale"])))
    f = d["fit"]
    arrays = {k: decode_array(f[k]) for k in _ARRAY_FIELDS}
    fit = FittedGam(
        **arrays,
        scale_estimate=float(f["scale_estimate"]),
        adj_r_squared=float(f["adj_r_squared"]),
        deviance_explained=float(f["deviance_explained"]),
        neg_reml=float(f["neg_reml"]),
        term_index={k: (int(v[0]), int(v[1])) for k, v in f["term_index"].items()},
        smooth_names=tuple(f["smooth_names"]),
        fixed_names=tuple(f["fixed_names"]),
        penalty_owner=tuple(f["penalty_owner"]),
        n_obs=int(f["n_obs"]),
        iterations=int(f["iterations"]),
        converged_by=str(f["converged_by"]),
    )
    return GamModel(spec, bases, fit)


def dumps(model: GamModel) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def loads(text: str) -> GamModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"model file is not valid JSON: {exc}") from None
    return model_from_dict(d)


def save_model(model: GamModel, path: str | Path) -> None:
    Path(path).write_text(dumps(model), newline="\n")


def load_model(path: str | Path) -> GamModel:
    return loads(Path(path).read_text())
