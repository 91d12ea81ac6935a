"""The issuer rating alphabet and notch arithmetic.

Ratings are ordered best to worst; a notch is one index step. The working
scale keeps the top 14 levels (AAA through B+). B, B-, D and NR rows are
filtered out of the feature panel during preprocessing, although B, B- and
D still participate in migration comparisons since they are ordered. NR
carries no ordering at all.
"""

from __future__ import annotations

FULL_SCALE = (
    "AAA", "AA+", "AA", "AA-", "A+", "A", "A-",
    "BBB+", "BBB", "BBB-", "BB+", "BB", "BB-", "B+",
    "B", "B-", "D", "NR",
)
KEPT_SCALE = FULL_SCALE[:14]
ORDERED_SCALE = FULL_SCALE[:17]  # everything except NR compares by index

MIGRATION_LABELS = ("upgrade", "unchanged", "downgrade")
UPGRADE, UNCHANGED, DOWNGRADE = 0, 1, 2

_FULL_INDEX = {sym: i for i, sym in enumerate(FULL_SCALE)}


class ScaleError(ValueError):
    """A rating symbol or class index falls outside the scale."""


def rating_index(symbol: str) -> int:
    """Position of a symbol on the full 18-level scale (0 is best)."""
    try:
        return _FULL_INDEX[symbol]
    except KeyError:
        raise ScaleError(f"unknown rating symbol {symbol!r}") from None


def is_kept(symbol: str) -> bool:
    """True when the symbol survives the B/B-/D/NR filter."""
    return symbol in _FULL_INDEX and _FULL_INDEX[symbol] < len(KEPT_SCALE)


def notch_distance(from_symbol: str, to_symbol: str) -> int:
    """Signed index difference; positive means a move toward worse credit."""
    a, b = rating_index(from_symbol), rating_index(to_symbol)
    if a >= len(ORDERED_SCALE) or b >= len(ORDERED_SCALE):
        raise ScaleError("NR has no position in notch arithmetic")
    return b - a


def migration_between(current: str, future: str) -> int:
    """Classify the move from `current` to `future` as up/unchanged/down."""
    d = notch_distance(current, future)
    if d < 0:
        return UPGRADE
    if d == 0:
        return UNCHANGED
    return DOWNGRADE
