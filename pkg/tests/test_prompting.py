import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from earlyexit.prompting import (
    DEFAULT_SYSTEM,
    ChatFormat,
    PromptError,
    PromptTemplate,
    UnparseableScore,
    dump_prompt_config,
    load_prompt_config,
    parse_confidence,
    render_first_person_prompt,
    render_reasoning_prompt,
    render_sufficiency_prompt,
)

GOLDEN = FIXTURES / "golden"
QUESTION = "How many positive whole-number divisors does 196 have?"
THOUGHT = (GOLDEN / "case_thought.txt").read_text(encoding="utf-8")


def test_sufficiency_prompt_matches_golden_bytes():
    expected = (GOLDEN / "sufficiency_prompt.txt").read_text(encoding="utf-8")
    assert render_sufficiency_prompt(QUESTION, THOUGHT) == expected


def test_first_person_prompt_matches_golden_bytes():
    expected = (GOLDEN / "first_person_prompt.txt").read_text(encoding="utf-8")
    assert render_first_person_prompt(QUESTION, THOUGHT) == expected


def test_sufficiency_layout():
    p = render_sufficiency_prompt(QUESTION, THOUGHT)
    assert "### Question\n" + QUESTION in p
    assert "### Thought\n<think>\nOkay" in p
    assert p.endswith("<|im_start|>assistant\n<think>\n\n</think>\n\nConfidence:")
    assert ChatFormat().split_roles(p) == ["user", "assistant"]


def test_first_person_keeps_reasoning_in_assistant_turn():
    p = render_first_person_prompt(QUESTION, THOUGHT)
    assert ChatFormat().split_roles(p) == ["system", "user", "assistant"]
    assert p.index("<|im_start|>assistant\n<think>\nOkay") < p.index("Assess the confidence")
    assert p.endswith("\n\nConfidence:")


def test_empty_inputs_rejected():
    with pytest.raises(PromptError):
        render_sufficiency_prompt(QUESTION, "")
    with pytest.raises(PromptError):
        render_sufficiency_prompt("", THOUGHT)
    with pytest.raises(PromptError):
        render_first_person_prompt(QUESTION, "")


@pytest.mark.parametrize("body", ["only {question}", "{question} {thought} {thought}", "nothing"])
def test_template_placeholders_exactly_once(body):
    with pytest.raises(PromptError):
        PromptTemplate(body)


def test_braces_in_thought_survive():
    p = render_sufficiency_prompt("q {x}", "so \\boxed{9} and {question}", template=PromptTemplate("{thought}|{question}"))
    assert "so \\boxed{9} and {question}|q {x}" in p


def test_custom_primer():
    p = render_sufficiency_prompt("q", "t", template=PromptTemplate("{question}{thought}", "Score:"))
    assert p.endswith("<|im_start|>assistant\nScore:")


def test_reasoning_prompt():
    p = render_reasoning_prompt(QUESTION)
    assert p == (
        "<|im_start|>system\n" + DEFAULT_SYSTEM + "<|im_end|>\n"
        "<|im_start|>user\n" + QUESTION + "<|im_end|>\n"
        "<|im_start|>assistant\n<think>"
    )
    assert render_reasoning_prompt(QUESTION, nothinking=True).endswith("<think>\n</think>")
    assert render_reasoning_prompt(QUESTION, system=None).startswith("<|im_start|>user\n")


def test_reasoning_prompt_history():
    p = render_reasoning_prompt("again?", history=[("user", "hi"), ("assistant", "hello")])
    assert ChatFormat().split_roles(p) == ["system", "user", "assistant", "user", "assistant"]
    with pytest.raises(PromptError):
        render_reasoning_prompt("q", history=[("tool", "x")])


def test_chat_format_markers_validated():
    with pytest.raises(PromptError):
        ChatFormat(think_open="<t>", think_close="<t>")
    with pytest.raises(PromptError):
        ChatFormat(think_close="")


@given(st.lists(st.sampled_from(["system", "user", "assistant"]), min_size=1, max_size=6),
       st.text(alphabet="abc \n", max_size=20))
def test_role_sequence_recovered(roles, content):
    fmt = ChatFormat()
    rendered = "".join(fmt.turn(r, content) for r in roles)
    assert fmt.split_roles(rendered) == roles


def test_prompt_config_round_trip(tmp_path):
    fmt = ChatFormat(turn_open="[", turn_close="]", user_role_name="human")
    tmpl = PromptTemplate("Q={question} T={thought}")
    path = tmp_path / "prompt.json"
    path.write_text(dump_prompt_config(fmt, tmpl))
    assert load_prompt_config(path) == (fmt, tmpl)
    path.write_text(json.dumps({"template": {"body": "no placeholders"}}))
    with pytest.raises(PromptError):
        load_prompt_config(path)


@pytest.mark.parametrize("n", range(101))
def test_confidence_round_trip(n):
    assert parse_confidence(f" {n}").value == n
    assert parse_confidence(f"Confidence: {n}").value == n


@pytest.mark.parametrize(
    "reply,value",
    [(" 150", 100.0), (" -5", 0.0), (" 87.5", 87.5), ("Confidence: 95%", 95.0),
     ("I'd say 80 out of 100", 80.0), (" 100.", 100.0), ("conFIDENCE:\t7", 7.0)],
)
def test_confidence_parsing(reply, value):
    score = parse_confidence(reply)
    assert score.value == value and score.raw == reply


@pytest.mark.parametrize("reply", ["", " high", "Confidence: very"])
def test_unparseable(reply):
    with pytest.raises(UnparseableScore):
        parse_confidence(reply)


@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6))
def test_confidence_always_clamped(x):
    v = parse_confidence(f" {x:.3f}").value
    assert 0 <= v <= 100
