"""Regenerate the scripted-mock fixtures in this directory.

    python fixtures/build_fixtures.py

case.json replays a divisor-counting run: four sufficiency checks scored
75, 90, 95 and 100, with two signals in the third round skipped because
they arrive within k tokens of the previous check.
"""

from __future__ import annotations

import json
from pathlib import Path

from earlyexit.controller import ControllerConfig
from earlyexit.scripting import ScriptBuilder, tokenize

HERE = Path(__file__).resolve().parent

CASE_QUESTION = "How many positive whole-number divisors does 196 have?"

ROUND_1 = (
    "\nOkay, so I need to figure out how many positive whole-number divisors the number 196 has. "
    "Hmm, let me think. I remember that to find the number of divisors of a number, you first have "
    "to find its prime factorization. Once you have that, you can use exponents to determine the "
    "total number of divisors. Let me try to recall exactly how that works. If a number N has the "
    "prime factorization p1^a1 * p2^a2 * ... * pk^ak, then the number of divisors is the product "
    "of each exponent plus one."
)
ROUND_2 = (
    " Wait, let me make sure I am applying that correctly before I factor anything. The rule counts "
    "every way to choose an exponent for each prime, from zero up to its maximum. So first I need "
    "the prime factorization of 196. 196 is even, so divide by 2: 196 / 2 = 98. 98 is also even, "
    "so 98 / 2 = 49. And 49 is 7 * 7. So 196 = 2^2 * 7^2."
)
ROUND_3 = (
    "\n\nBut wait, is 49 really 7 squared? Yes, 7 * 7 = 49. Alternatively, I could check by "
    "multiplying back: 2^2 * 7^2 = 4 * 49 = 196. Wait, that matches. So the exponents are 2 and 2. "
    "Adding one to each exponent gives 3 and 3, and then the total number of positive divisors should be 3 * 3 = 9. "
    "But let me list them to be safe: 1, 2, 4, 7, 14, 28, 49, 98, 196."
)
ROUND_4 = (
    " That is 9 divisors, and each of them divides 196 evenly, so the count from the formula agrees "
    "with the explicit list. Pairing them also works: 1 * 196, 2 * 98, 4 * 49, 7 * 28, and 14 * 14, "
    "which gives four pairs plus the square root 14, so 4 * 2 + 1 = 9 divisors in total."
    "\n\nWait, I should double-check that I have not missed any divisor between 14 and 28."
)
TAIL = (
    " Numbers like 16, 18, 20, 21 and 24 do not divide 196, so nothing is missing. "
    "Alternatively, I could use the sum of divisors, but that is not needed here. I'm confident "
    "the answer is 9.\n</think>\n\nThe prime factorization of 196 is $2^2 \\cdot 7^2$, so it has "
    "$(2+1)(2+1) = 9$ positive divisors.\n\n\\boxed{9}"
)
CASE_CONCLUSION = (
    "The prime factorization of 196 is $2^2 \\cdot 7^2$. The number of positive divisors is "
    "$(2+1)(2+1) = 9$.\n\n\\boxed{9}"
)
CASE_SCORES = ["75", "90", "95", "100"]


def build_case(config: ControllerConfig | None = None) -> ScriptBuilder:
    b = ScriptBuilder(config)
    r = b.reasoning(CASE_QUESTION, tokenize(ROUND_1 + ROUND_2 + ROUND_3 + ROUND_4 + TAIL), name="case-main")
    points = b.detection_points(r)
    # checked points: first "Wait", "But wait", "But let me", second-to-last "Wait"
    checked = [points[0], points[1], points[4], points[5]]
    for p, s in zip(checked, CASE_SCORES):
        b.check_reply_at(r, p, " " + s)
    b.conclusion(r, tokenize(CASE_CONCLUSION))
    return b


def main() -> None:
    b = build_case()
    b.script.save(HERE / "case.json")
    print("wrote", HERE / "case.json", len(b.script.entries), "entries")


if __name__ == "__main__":
    main()
