"""Input validation helpers used at public API boundaries."""

from __future__ import annotations

import re

import numpy as np

# Stored vectors are renormalized at ingest when they drift further than this.
UNIT_NORM_TOL = 1e-6
# Looser tolerance for vectors passed into similarity/loss functions, so that
# finite-difference probes (h ~ 1e-5) remain valid inputs.
UNIT_INPUT_TOL = 1e-4

_LANG_RE = re.compile(r"^[a-z]+(-[a-z]+)*$")


def check_language_tag(code: str) -> str:
    """Validate a lowercase BCP-47-style language tag and return it."""
    if not isinstance(code, str) or not _LANG_RE.match(code):
        raise ValueError(
            f"invalid language tag {code!r}: expected lowercase ASCII letters "
            "and hyphen-separated subtags (e.g. 'en', 'ja', 'pt-br')"
        )
    return code


def as_float_matrix(x, name: str, *, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 2-d array, optionally checking column count."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    if dim is not None and m.shape[1] != dim:
        raise ValueError(f"{name} has dim {m.shape[1]}, expected {dim}")
    return m


def as_float_vector(x, name: str, *, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 1-d array, optionally checking length."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-d array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} has dim {v.shape[0]}, expected {dim}")
    return v


def check_unit_rows(m: np.ndarray, name: str, *, tol: float = UNIT_INPUT_TOL) -> np.ndarray:
    """Assert every row of ``m`` has L2 norm 1 within ``tol``."""
    norms = np.linalg.norm(m, axis=-1)
    bad = np.abs(norms - 1.0) > tol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(f"{name} row {i} has norm {norms.flat[i]:.6g}, expected 1 +/- {tol:g}")
    return m


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return value


def check_nonneg_real(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or v < 0:
        raise ValueError(f"{name} must be a finite non-negative real, got {value!r}")
    return v


def check_positive_real(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or v <= 0:
        raise ValueError(f"{name} must be a finite positive real, got {value!r}")
    return v
