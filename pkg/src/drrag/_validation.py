"""Argument checks shared by the estimators and the CLI."""

from __future__ import annotations

import math
import numbers

STRATEGIES = ("bm25", "sm", "qdc", "cis", "cfs")
TWO_STAGE = ("qdc", "cis", "cfs")
CLASSIFIED = ("cis", "cfs")


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_threshold(value, name: str = "threshold") -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ValueError(f"{name} must be a real number in [0, 1], got {value!r}")
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def check_strategy(value: str) -> str:
    strategy = str(value).lower()
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {value!r}")
    return strategy


def resolve_split(k: int, k1: int | None = None, k2: int | None = None) -> tuple[int, int]:
    """Return the (first-stage, second-stage) depths for a total budget ``k``.

    ``k1`` defaults to ``ceil(k / 2)`` and ``k2`` to ``k - k1``; when the
    first stage consumes the whole budget the second-stage depth is 1 but no
    document can be added.
    """
    k = check_positive_int(k, "k")
    k1 = math.ceil(k / 2) if k1 is None else check_positive_int(k1, "k1")
    if k1 > k:
        raise ValueError(f"k1 ({k1}) must not exceed k ({k})")
    if k2 is None:
        k2 = max(k - k1, 1)
    else:
        k2 = check_positive_int(k2, "k2")
    return k1, k2
