from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from cwescout.cwe import InvalidCweId, cwe_number, normalize_cwe_id, split_cwe_ids


@pytest.mark.parametrize("raw", ["CWE-079", "CWE-79", "cwe-79", " CWE 79 ", "79", 79, "CWE_79", "cwe:0079"])
def test_normalize_variants(raw):
    assert normalize_cwe_id(raw) == "CWE-79"


@pytest.mark.parametrize("raw", ["", "CWE-", "CWE-7a", "XSS", "-5", True, None, 1.5, -3, "CWE-1/2"])
def test_normalize_rejects(raw):
    with pytest.raises(InvalidCweId):
        normalize_cwe_id(raw)


def test_leading_zeros_and_zero_itself():
    assert normalize_cwe_id("CWE-0000") == "CWE-0"
    assert normalize_cwe_id("cwe-000120") == "CWE-120"


@pytest.mark.parametrize("raw,expected", [
    ("CWE-259/798", ["CWE-259", "CWE-798"]),
    ("CWE-259/CWE-798", ["CWE-259", "CWE-798"]),
    ("CWE-259, CWE-798", ["CWE-259", "CWE-798"]),
    ("CWE-259 & 798", ["CWE-259", "CWE-798"]),
    ("CWE-259 and CWE-798", ["CWE-259", "CWE-798"]),
    ("CWE-79/079", ["CWE-79"]),
    ("CWE-476", ["CWE-476"]),
    (120, ["CWE-120"]),
])
def test_split(raw, expected):
    assert split_cwe_ids(raw) == expected


@pytest.mark.parametrize("raw", ["/", "abc/def", "CWE-1/xyz"])
def test_split_rejects(raw):
    with pytest.raises(InvalidCweId):
        split_cwe_ids(raw)


def test_split_ignores_dangling_separator():
    assert split_cwe_ids("CWE-1/") == ["CWE-1"]


def test_cwe_number():
    assert cwe_number("cwe-0787") == 787


@given(st.integers(min_value=0, max_value=10**9 - 1))
def test_normalization_idempotent(n):
    once = normalize_cwe_id(f"cwe-{n:06d}")
    assert once == f"CWE-{n}"
    assert normalize_cwe_id(once) == once


@given(st.text(max_size=30))
def test_normalize_total(text):
    try:
        out = normalize_cwe_id(text)
    except InvalidCweId:
        return
    assert out.startswith("CWE-") and out[4:].isdigit()
