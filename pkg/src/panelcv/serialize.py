"""JSON/CSV encoders for fits, selections and simulation truth."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any

import numpy as np

from .estimation import FitResult
from .selection import SelectionResult


def _clean(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def fit_to_dict(fit: FitResult) -> dict:
    out = {
        "family": fit.family,
        "n_groups": fit.n_groups,
        "coefficients": fit.coefficients,
        "memberships": fit.assignment.memberships,
        "group_sizes": fit.assignment.sizes,
        "alphas": fit.alphas,
        "final_loss": fit.final_loss,
        "restart_losses": fit.restart_losses,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "trace": fit.trace,
        "flags": fit.flags,
    }
    if fit.stage1_coefficients is not None:
        out["stage1_coefficients"] = fit.stage1_coefficients
        out["stage1_alphas"] = fit.stage1_alphas
        out["stage2_objective"] = fit.stage2_objective
    return _clean(out)


def selection_to_dict(sel: SelectionResult, include_fits: bool = False) -> dict:
    out: dict[str, Any] = {
        "method": sel.method,
        "g_values": sel.g_values,
        "criterion": sel.criterion,
        "chosen": sel.chosen,
        "invalid": sel.invalid,
    }
    if sel.split is not None:
        out["split"] = sel.split
    if sel.decomposition is not None:
        out["decomposition"] = [
            None if d is None else {"S": d.s_term, "D": d.d_term, "R": d.r_term}
            for d in sel.decomposition
        ]
    if sel.penalty is not None:
        out["penalty"] = sel.penalty
        out["fit_term"] = sel.fit_term
    if include_fits:
        fits = {}
        for G, f in sel.fits.items():
            if isinstance(f, dict):
                fits[G] = {k: fit_to_dict(v) for k, v in f.items()}
            elif f is not None:
                fits[G] = fit_to_dict(f)
        out["fits"] = fits
    return _clean(out)


def write_json(obj: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=1))


def fmt(v: Any) -> str:
    """Full-precision text for CSV cells."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(rows: list[list[Any]], header: list[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def selection_rows(sel: SelectionResult) -> list[list[Any]]:
    """Rows ``G, criterion, S, D, R`` (decomposition blank for IC methods)."""
    rows = []
    for k, G in enumerate(sel.g_values):
        d = sel.decomposition[k] if sel.decomposition else None
        if d is None:
            rows.append([G, sel.criterion[k], "", "", ""])
        else:
            rows.append([G, sel.criterion[k], d.s_term, d.d_term, d.r_term])
    return rows
