"""Curve containers with explicit undefined markers, and their serialisation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .domain import ValidationError

SCALES = ("difference", "riskRatio")


def check_grid(grid, r: float = 1.0) -> np.ndarray:
    """Validate an ascending time grid inside ``(0, r]``."""
    if not (0 < r <= 1):
        raise ValidationError(f"horizon r must lie in (0, 1], got {r}")
    g = np.asarray(grid, dtype=float).ravel()
    if g.size == 0:
        raise ValidationError("time grid is empty")
    if np.any(~np.isfinite(g)) or np.any(g <= 0) or np.any(g > r * (1 + 1e-12)):
        raise ValidationError(f"grid points must lie in (0, {r}]")
    if np.any(np.diff(g) <= 0):
        raise ValidationError("grid must be strictly increasing")
    return g


def default_grid(n: int = 52, r: float = 1.0) -> np.ndarray:
    """``n`` equally spaced points ending at ``r``."""
    if n < 1:
        raise ValidationError("grid needs at least one point")
    return r * np.arange(1, n + 1) / n


def safe_ratio(num, den, eps: float = 0.0):
    """``num / den`` with a mask that is False where ``den <= eps``."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    ok = den > eps
    out = np.full(np.broadcast(num, den).shape, np.nan)
    np.divide(num, den, out=out, where=ok)
    return out, np.broadcast_to(ok, out.shape).copy()


def jsonable(v):
    """Recursively convert numpy values; non-finite floats become ``None``."""
    if isinstance(v, dict):
        return {str(k): jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False)


def fmt(v) -> str:
    """CSV cell text: shortest round-trip repr, ``inf`` kept, empty for undefined."""
    if v is None:
        return ""
    f = float(v)
    if math.isnan(f):
        return ""
    return repr(f)


@dataclass
class CurveSet:
    """Named curves on one grid; ``defined`` masks mark where a value exists."""

    grid: np.ndarray
    values: dict = field(default_factory=dict)
    defined: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)

    def put(self, estimand: str, scale: str, values, defined=None, se=None):
        v = np.asarray(values, dtype=float).copy()
        d = np.isfinite(v) if defined is None else np.asarray(defined, dtype=bool) & np.isfinite(v)
        v[~d] = np.nan
        self.values[(estimand, scale)] = v
        self.defined[(estimand, scale)] = d
        if se is not None:
            s = np.asarray(se, dtype=float).copy()
            s[~d] = np.nan
            self.se[(estimand, scale)] = s

    def get(self, estimand: str, scale: str = "difference") -> np.ndarray:
        return self.values[(estimand, scale)]

    def keys(self):
        return list(self.values)

    def to_dict(self) -> dict:
        out = {}
        for (est, sc), v in self.values.items():
            out.setdefault(est, {})[sc] = {
                "value": v,
                "defined": self.defined[(est, sc)],
                **({"mc_se": self.se[(est, sc)]} if (est, sc) in self.se else {}),
            }
        return {"grid": self.grid, "curves": out}

    @classmethod
    def from_dict(cls, d: dict) -> "CurveSet":
        cs = cls(np.asarray(d["grid"], dtype=float))
        for est, scales in d["curves"].items():
            for sc, c in scales.items():
                v = np.array([np.nan if x is None else x for x in c["value"]], dtype=float)
                se = c.get("mc_se")
                if se is not None:
                    se = np.array([np.nan if x is None else x for x in se], dtype=float)
                cs.put(est, sc, v, np.asarray(c["defined"], dtype=bool), se)
        return cs


def write_long_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(c) if isinstance(c, (float, np.floating)) or c is None else c for c in row])
    return buf.getvalue()
