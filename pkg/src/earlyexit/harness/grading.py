"""Answer extraction and grading.

Normalisation is deliberately simple: numbers are compared as rationals,
boxed expressions as whitespace-insensitive strings with a numeric
fallback, multiple choice as letters. Anything a symbolic checker would be
needed for falls back to string equality.
"""

from __future__ import annotations

import re
from fractions import Fraction

NORMALIZATION_VERSION = 1
TASK_KINDS = ("numeric", "boxed_expression", "multiple_choice", "code")


def find_closing_brace(text: str, start: int = 0) -> int:
    """Index of the brace closing an already-open group, or -1."""
    depth = 0
    for i in range(start, len(text)):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            if depth == 0:
                return i
            depth -= 1
    return -1


def last_boxed(text: str) -> str | None:
    """Content of the last balanced ``\\boxed{...}`` (or ``\\fbox{...}``)."""
    best = None
    for m in re.finditer(r"\\(?:boxed|fbox)\s*\{", text):
        end = find_closing_brace(text, m.end())
        if end != -1:
            best = text[m.end():end]
    return best


_NUM = re.compile(
    r"-?\$?\s?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:\s?/\s?\d+)?|-?\.\d+"
)


def _clean_number(tok: str) -> str:
    tok = tok.replace(",", "").replace("$", "").replace(" ", "")
    return tok.rstrip(".")


def extract_answer(text: str, task_kind: str = "boxed_expression") -> str:
    """Pull the final answer out of a model response; "" when nothing is found."""
    boxed = last_boxed(text)
    if task_kind == "boxed_expression":
        return boxed.strip() if boxed is not None else ""
    if task_kind == "numeric":
        for source in ([boxed] if boxed else []) + [text]:
            nums = _NUM.findall(source)
            if nums:
                return _clean_number(nums[-1])
        return ""
    if task_kind == "multiple_choice":
        if boxed is not None:
            letters = re.findall(r"(?<![A-Za-z])([A-Ea-e])(?![A-Za-z])", boxed)
            if letters:
                return letters[-1].upper()
        letters = re.findall(r"(?<![A-Za-z])([A-E])(?![A-Za-z])", text)
        return letters[-1] if letters else ""
    if task_kind == "code":
        blocks = re.findall(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", text, re.DOTALL)
        return blocks[-1] if blocks else ""
    raise ValueError(f"unknown task kind {task_kind!r}")


_FRAC = re.compile(r"^\\[dt]?frac\{(-?\d+)\}\{(-?\d+)\}$")


def parse_rational(s: str) -> Fraction | None:
    """Parse integers, decimals, ``a/b`` and ``\\frac{a}{b}``; None otherwise."""
    s = s.strip().replace(",", "").replace("$", "").rstrip(".").strip()
    if s.endswith("%"):
        s = s[:-1]
    s = s.replace(" ", "")
    m = _FRAC.match(s)
    if m:
        num, den = int(m.group(1)), int(m.group(2))
        return Fraction(num, den) if den else None
    if s.startswith("-\\frac") or s.startswith("-\\dfrac"):
        inner = parse_rational(s[1:])
        return -inner if inner is not None else None
    if "/" in s:
        a, _, b = s.partition("/")
        fa, fb = parse_rational(a), parse_rational(b)
        if fa is None or fb is None or fb == 0:
            return None
        return fa / fb
    if not re.fullmatch(r"-?(?:\d+(?:\.\d*)?|\.\d+)", s):
        return None
    return Fraction(s)


def normalize_expression(s: str) -> str:
    s = s.strip()
    s = re.sub(r"\\text\{\s*([^{}]*)\}", r"\1", s)
    s = s.replace("\\left", "").replace("\\right", "").replace("\\!", "")
    s = s.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac")
    s = s.replace("$", "")
    s = re.sub(r"\s+", "", s)
    s = s.rstrip(".")
    while s.startswith("{") and s.endswith("}") and find_closing_brace(s, 1) == len(s) - 1:
        s = s[1:-1]
    return s


def _numeric_equal(a: str, b: str) -> bool | None:
    ra, rb = parse_rational(a), parse_rational(b)
    if ra is None or rb is None:
        return None
    return abs(ra - rb) <= Fraction(1, 10**9)


def grade(pred: str, gold: str, task_kind: str = "boxed_expression") -> bool:
    if not pred or not pred.strip() or not gold or not gold.strip():
        return False
    if task_kind == "numeric":
        eq = _numeric_equal(pred, gold)
        if eq is None:
            return normalize_expression(pred) == normalize_expression(gold)
        return eq
    if task_kind == "boxed_expression":
        if normalize_expression(pred) == normalize_expression(gold):
            return True
        return bool(_numeric_equal(normalize_expression(pred), normalize_expression(gold)))
    if task_kind == "multiple_choice":
        return pred.strip().strip("()").upper() == gold.strip().strip("()").upper()
    if task_kind == "code":
        return False
    raise ValueError(f"unknown task kind {task_kind!r}")


def is_string_fallback(pred: str, gold: str, task_kind: str) -> bool:
    """True when grading could not use the numeric path (flagged in reports)."""
    if task_kind not in ("numeric", "boxed_expression"):
        return False
    a, b = normalize_expression(pred), normalize_expression(gold)
    return parse_rational(a) is None or parse_rational(b) is None
