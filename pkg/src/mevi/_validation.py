"""Input validation helpers shared by the estimators."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from sklearn.utils.validation import check_array

from .errors import DataError


def check_matrix(X, *, dim: int | None = None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a C-contiguous float32 matrix or raise ``DataError``."""
    arr = np.asarray(X)
    if arr.size == 0:
        raise DataError("empty input")
    if arr.ndim == 1:
        arr = arr[None, :]
    try:
        arr = check_array(arr, dtype=None, ensure_all_finite=False, ensure_2d=True)
    except ValueError as exc:
        raise DataError(f"{name}: {exc}") from exc
    if not np.issubdtype(arr.dtype, np.number):
        raise DataError(f"{name}: non-numeric input")
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite value")
    if dim is not None and arr.shape[1] != dim:
        raise DataError(f"dimension mismatch: expected {dim}, got {arr.shape[1]}")
    return np.ascontiguousarray(arr, dtype=np.float32)


def check_vector(v, dim: int) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise DataError(f"expected a 1-d vector, got shape {arr.shape}")
    if arr.shape[0] != dim:
        raise DataError(f"dimension mismatch: expected {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite value")
    return arr


def check_ids(ids: Sequence[str] | None, n: int) -> list[str]:
    if ids is None:
        return [str(i) for i in range(n)]
    ids = [str(i) for i in ids]
    if len(ids) != n:
        raise DataError(f"got {len(ids)} ids for {n} vectors")
    if len(set(ids)) != n:
        raise DataError("ids are not unique")
    for i in ids:
        if not i or any(c in i for c in "\t\n\r"):
            raise DataError(f"invalid id {i!r}")
    return ids


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise DataError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise DataError(f"{name} must be >= {minimum}, got {value}")
    return int(value)
