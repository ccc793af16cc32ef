"""Class labels and their clinical risk ordering.

Class ids are ordered by ascending risk, so "highest risk" is simply the
maximum id. Index 0 is the fallback class for images without lesions.
"""

from __future__ import annotations

CLASS_NAMES = ("normal", "be_no_dysplasia", "be_with_dysplasia", "adenocarcinoma")
NUM_CLASSES = len(CLASS_NAMES)

NORMAL, BE_NO_DYSPLASIA, BE_WITH_DYSPLASIA, ADENOCARCINOMA = range(NUM_CLASSES)

# Aggregation/priority order: most dangerous class first.
RISK_DESCENDING = (ADENOCARCINOMA, BE_WITH_DYSPLASIA, BE_NO_DYSPLASIA, NORMAL)


def class_id(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown class name: {name!r}") from None


def highest_risk(class_ids) -> int:
    """Most dangerous class among ``class_ids``; empty input means normal."""
    ids = list(class_ids)
    if not ids:
        return NORMAL
    bad = [c for c in ids if not 0 <= c < NUM_CLASSES]
    if bad:
        raise ValueError(f"class id out of range: {bad[0]}")
    return max(ids)
