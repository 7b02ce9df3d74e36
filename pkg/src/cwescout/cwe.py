"""CWE identifier normalization.

Every identifier that enters the pipeline (model output, datasets, CLI
arguments) goes through :func:`normalize_cwe_id` so that ``CWE-079``,
``cwe-79`` and ``79`` compare equal.
"""

from __future__ import annotations

import re

__all__ = ["InvalidCweId", "normalize_cwe_id", "split_cwe_ids", "cwe_number"]

# at most nine significant digits; real ids are four
_SINGLE_RE = re.compile(r"^\s*(?:cwe\s*[-_:]?\s*)?0*(\d{1,9})\s*$", re.IGNORECASE)
# "CWE-259/798", "CWE-259/CWE-798", "CWE-259, CWE-798", "CWE-259 & 798"
_COMPOUND_SPLIT_RE = re.compile(r"\s*(?:/|,|&|\band\b|\|)\s*", re.IGNORECASE)


class InvalidCweId(ValueError):
    pass


def normalize_cwe_id(value: str | int) -> str:
    """Return the canonical ``CWE-<n>`` form of a single identifier."""
    if isinstance(value, bool):
        raise InvalidCweId(f"not a CWE identifier: {value!r}")
    if isinstance(value, int):
        if value < 0:
            raise InvalidCweId(f"not a CWE identifier: {value!r}")
        return f"CWE-{value}"
    if not isinstance(value, str):
        raise InvalidCweId(f"not a CWE identifier: {value!r}")
    m = _SINGLE_RE.match(value)
    if m is None:
        raise InvalidCweId(f"not a CWE identifier: {value!r}")
    return f"CWE-{int(m.group(1))}"


def split_cwe_ids(value: str | int) -> list[str]:
    """Split a possibly compound identifier into normalized ids.

    >>> split_cwe_ids("CWE-259/798")
    ['CWE-259', 'CWE-798']
    """
    if not isinstance(value, str):
        return [normalize_cwe_id(value)]
    parts = [p for p in _COMPOUND_SPLIT_RE.split(value.strip()) if p]
    if not parts:
        raise InvalidCweId(f"not a CWE identifier: {value!r}")
    out: list[str] = []
    for part in parts:
        cid = normalize_cwe_id(part)
        if cid not in out:
            out.append(cid)
    return out


def cwe_number(cwe_id: str) -> int:
    return int(normalize_cwe_id(cwe_id)[4:])
