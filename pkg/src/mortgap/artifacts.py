"""Plain-text serialization of fit results.

A fit file is a block of ``# key=value`` provenance lines followed by the
tidy parameter table of :func:`mortgap.design.format_params`. Floats are
written with ``repr`` so a round trip reproduces the fit exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .design import format_params, intensity_surface, pack, parse_params
from .fit import FitResult, Model
from .forecast import ForecastResult, format_forecast, parse_forecast

__all__ = ["format_fit", "parse_fit", "write_fit", "read_fit", "write_forecast", "read_forecast"]

_META_KEYS = ("model", "labels", "ages", "years", "log_lik", "n_params", "n_obs", "converged",
              "iterations", "grad_norm", "lambda3", "flags", "message")


def format_fit(fit: FitResult) -> str:
    """Render a fit as provenance lines plus a parameter table."""
    meta = {
        "model": fit.model.value,
        "labels": list(fit.labels),
        "ages": list(fit.ages),
        "years": [int(fit.years[0]), int(fit.years[-1])],
        "log_lik": repr(float(fit.log_lik)),
        "n_params": fit.n_params,
        "n_obs": fit.n_obs,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "grad_norm": repr(float(fit.grad_norm)),
        "lambda3": None if fit.lambda3 is None else repr(float(fit.lambda3)),
        "flags": list(fit.flags),
        "message": fit.message,
    }
    head = "".join(f"# {k}={json.dumps(meta[k], ensure_ascii=False)}\n" for k in _META_KEYS)
    extras = {"lambda3": fit.lambda3} if fit.model is Model.BIVARIATE_POISSON else None
    body = format_params(fit.blocks, fit.model.block_names, fit.ages, fit.years, extras)
    return head + body


def parse_fit(text: str) -> FitResult:
    """Inverse of :func:`format_fit`. Traces are not stored and come back empty."""
    meta = {}
    body = []
    for ln in text.splitlines():
        if ln.startswith("# ") and "=" in ln:
            key, value = ln[2:].split("=", 1)
            meta[key] = json.loads(value)
        else:
            body.append(ln)
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        raise ValueError(f"fit file lacks provenance keys: {missing}")
    model = Model(meta["model"])
    blocks, _, _, _ = parse_params("\n".join(body))
    ordered = [blocks[name] for name in model.block_names]
    first, last = meta["years"]
    years = tuple(range(int(first), int(last) + 1))
    ages = tuple(meta["ages"])
    la, lb = intensity_surface(ordered[0]), intensity_surface(ordered[1])
    lam3 = None if meta["lambda3"] is None else float(meta["lambda3"])
    extras = () if model is not Model.BIVARIATE_POISSON else (np.log(lam3) if lam3 > 0 else -np.inf,)
    theta = pack(ordered, extras)
    gap = la - lb
    for arr in (theta, la, lb, gap):
        arr.setflags(write=False)
    return FitResult(
        model=model,
        ages=ages,
        years=years,
        labels=tuple(meta["labels"]),
        theta=theta,
        blocks=tuple(ordered),
        lambda3=lam3,
        intensity_a=la,
        intensity_b=lb,
        fitted_gap=gap,
        log_lik=float(meta["log_lik"]),
        n_params=int(meta["n_params"]),
        n_obs=int(meta["n_obs"]),
        converged=bool(meta["converged"]),
        iterations=int(meta["iterations"]),
        grad_norm=float(meta["grad_norm"]),
        flags=tuple(meta["flags"]),
        message=meta["message"],
    )


def write_fit(fit: FitResult, path) -> Path:
    path = Path(path)
    path.write_text(format_fit(fit), encoding="utf-8")
    return path


def read_fit(path) -> FitResult:
    return parse_fit(Path(path).read_text(encoding="utf-8"))


def write_forecast(result: ForecastResult, path) -> Path:
    path = Path(path)
    path.write_text(format_forecast(result), encoding="utf-8")
    return path


def read_forecast(path) -> ForecastResult:
    return parse_forecast(Path(path).read_text(encoding="utf-8"))
