import json
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from earlyexit.harness.grading import (
    extract_answer,
    find_closing_brace,
    grade,
    is_string_fallback,
    last_boxed,
    normalize_expression,
    parse_rational,
)

LABELS = [json.loads(line) for line in (FIXTURES / "extraction_labels.jsonl").read_text().splitlines()]


def test_label_fixture_size():
    assert len(LABELS) == 50
    assert {d["task_kind"] for d in LABELS} == {"numeric", "boxed_expression", "multiple_choice", "code"}


@pytest.mark.parametrize("row", LABELS, ids=lambda d: d["text"][:30])
def test_hand_labelled_extraction(row):
    assert extract_answer(row["text"], row["task_kind"]) == row["expected"]


def test_extraction_examples():
    assert extract_answer("…is 1,234.5 meters", "numeric") == "1234.5"
    assert extract_answer("x \\boxed{\\frac{1}{2}} y", "boxed_expression") == "\\frac{1}{2}"
    with pytest.raises(ValueError):
        extract_answer("x", "essay")


def test_brace_helpers():
    assert find_closing_brace("a{b}c}d") == 5
    assert find_closing_brace("{{}") == -1
    assert last_boxed("\\boxed{a{b}} then \\boxed{c}") == "c"
    assert last_boxed("nothing") is None


@pytest.mark.parametrize(
    "text,value",
    [("3", Fraction(3)), ("0.5", Fraction(1, 2)), ("1/2", Fraction(1, 2)), ("\\frac{3}{4}", Fraction(3, 4)),
     ("-\\dfrac{1}{3}", Fraction(-1, 3)), ("1,000", Fraction(1000)), ("$12.", Fraction(12)), ("50%", Fraction(50)),
     ("1/0", None), ("x+1", None), ("", None)],
)
def test_parse_rational(text, value):
    assert parse_rational(text) == value


@pytest.mark.parametrize(
    "pred,gold,kind,ok",
    [
        ("0.5", "1/2", "numeric", True),
        ("28", "28", "numeric", True),
        ("28", "28.0000000001", "numeric", True),
        ("28", "28.01", "numeric", False),
        ("", "28", "numeric", False),
        ("\\frac{1}{2}", "0.5", "boxed_expression", True),
        ("x^{2} + 1", "x^{2}+1", "boxed_expression", True),
        ("{5}", "5", "boxed_expression", True),
        ("\\dfrac{3}{8}", "\\frac{3}{8}", "boxed_expression", True),
        ("\\text{Monday}", "Monday", "boxed_expression", True),
        ("\\sqrt{2}", "\\sqrt{3}", "boxed_expression", False),
        ("b", "B", "multiple_choice", True),
        ("(C)", "C", "multiple_choice", True),
        ("A", "B", "multiple_choice", False),
        ("print(1)", "print(1)", "code", False),
    ],
)
def test_grade(pred, gold, kind, ok):
    assert grade(pred, gold, kind) is ok


def test_normalize_expression():
    assert normalize_expression(" \\left( 1, 2 \\right) .") == "(1,2)"
    assert normalize_expression("{{7}}") == "7"
    assert normalize_expression("{a}+{b}") == "{a}+{b}"


def test_string_fallback_flag():
    assert not is_string_fallback("1/2", "0.5", "numeric")
    assert is_string_fallback("\\sqrt{2}", "\\sqrt{2}", "boxed_expression")
    assert not is_string_fallback("A", "A", "multiple_choice")


answers = st.one_of(
    st.integers(-10**6, 10**6).map(str),
    st.fractions(max_denominator=50).map(str),
    st.decimals(min_value=-1000, max_value=1000, places=3, allow_nan=False).map(str),
    st.text("0123456789./-x, ", max_size=8),
)


@given(answers, answers)
def test_numeric_grading_is_symmetric(a, b):
    assert grade(a, b, "numeric") == grade(b, a, "numeric")


@given(answers)
def test_numeric_grading_reflexive_on_rationals(a):
    if parse_rational(a) is not None:
        assert grade(a, a, "numeric")
