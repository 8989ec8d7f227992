import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlyexit.backend import MockBackend
from earlyexit.controller import ControllerConfig, RunRecord, run
from earlyexit.harness.dataset import Sample
from earlyexit.oracle import (
    OptimalExit,
    SentenceBoundary,
    find_optimal_exit,
    gap_csv,
    gap_report,
    oracle_for_record,
    read_oracle_results,
    segment_sentences,
    token_counter,
    write_oracle_results,
)
from earlyexit.scripting import ScriptBuilder, tokenize

Q = "How many?"
SAMPLE = Sample("s", Q, "9")


def sentences(n):
    return " ".join(f"Step {i} holds." for i in range(1, n + 1))


def oracle_backend(trace, correct_at):
    """Forced conclusions for every boundary; answer 9 where ``correct_at(index)``."""
    b = ScriptBuilder()
    for bd in segment_sentences(trace):
        answer = "9" if correct_at(bd.index) else "4"
        b.forced_conclusion(Q, trace[: bd.char_offset], f"So \\boxed{{{answer}}}.")
    return MockBackend(b.script)


def test_segmentation_examples():
    assert [b.char_offset for b in segment_sentences("First. Second.")] == [6, 14]
    assert segment_sentences("value is 3.14 so") == []
    assert [b.char_offset for b in segment_sentences("no stop here\n\nnext")] == [12]
    assert segment_sentences("Why? Yes! Ok.\nDone.")[-1].index == 4


def test_segmentation_skips_abbreviations():
    text = "Use e.g. the sum. Then stop."
    assert [text[: b.char_offset] for b in segment_sentences(text)] == ["Use e.g. the sum.", text]
    assert len(segment_sentences(text, abbreviations=())) == 3


def test_paragraph_break_after_terminator_is_one_boundary():
    assert [b.char_offset for b in segment_sentences("One.\n\nTwo.")] == [4, 10]


def test_segmentation_rejects_empty():
    with pytest.raises(ValueError):
        segment_sentences("")


def test_token_counts_from_offsets():
    count = token_counter([(5, 1), (11, 3), (20, 4)])
    assert [count("", off) for off in (0, 5, 10, 11, 25)] == [0, 1, 1, 3, 4]
    assert token_counter(None)("a b c d", 5) == 3


def test_boundary_five():
    trace = sentences(8)
    opt = find_optimal_exit(SAMPLE, trace, oracle_backend(trace, lambda i: i >= 5))
    assert opt.boundary.index == 5 and opt.verified and opt.unknown == ()
    assert trace[: opt.boundary.char_offset].endswith("Step 5 holds.")


def test_never_correct():
    trace = sentences(4)
    opt = find_optimal_exit(SAMPLE, trace, oracle_backend(trace, lambda i: False))
    assert opt.boundary is None and opt.overthink_ratio == 0 and opt.optimal_tokens == opt.full_tokens


def test_non_monotone_returns_first():
    trace = sentences(6)
    mb = oracle_backend(trace, lambda i: i in (3, 5, 6))
    opt = find_optimal_exit(SAMPLE, trace, mb)
    assert opt.boundary.index == 3
    assert len(mb.calls) == 4  # boundaries 1, 2, 3 and the confirmation re-run


def test_overthink_ratio():
    trace = sentences(10)
    offsets = [(b.char_offset, 100 * b.index) for b in segment_sentences(trace)]
    opt = find_optimal_exit(SAMPLE, trace, oracle_backend(trace, lambda i: i >= 4), trace_offsets=offsets)
    assert (opt.optimal_tokens, opt.full_tokens) == (400, 1000)
    assert opt.overthink_ratio == pytest.approx(0.6)


def test_prefix_fidelity_and_settings():
    trace = "Alpha beta. Gamma?\n\nDelta epsilon! Zeta."
    mb = oracle_backend(trace, lambda i: i >= 4)
    find_optimal_exit(SAMPLE, trace, mb, ControllerConfig(conclusion_reserve=64))
    head = ScriptBuilder().reasoning(Q, []).prompt
    for req, _ in mb.calls:
        assert req.prompt.startswith(head) and req.prompt.endswith("\n</think>\n\n")
        assert trace.startswith(req.prompt[len(head): -len("\n</think>\n\n")])
        assert (req.temperature, req.max_tokens, req.stream) == (0.0, 64, False)


def test_backend_failure_marks_boundary_unknown():
    trace = sentences(5)
    b = ScriptBuilder()
    for bd in segment_sentences(trace):
        entry = b.forced_conclusion(Q, trace[: bd.char_offset], "So \\boxed{9}." if bd.index >= 2 else "\\boxed{1}")
        if bd.index == 2:
            entry.fail_after = 0
    opt = find_optimal_exit(SAMPLE, trace, MockBackend(b.script))
    assert opt.boundary.index == 3 and opt.unknown == (2,)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.data())
def test_minimality(n, data):
    p = data.draw(st.integers(1, n))
    trace = sentences(n)
    assert find_optimal_exit(SAMPLE, trace, oracle_backend(trace, lambda i: i >= p)).boundary.index == p


def test_oracle_for_recorded_run():
    trace_text = sentences(6)
    b = ScriptBuilder()
    b.reasoning(Q, tokenize(trace_text) + tokenize("\n</think>\n\nSo \\boxed{9}."))
    for bd in segment_sentences(trace_text):
        b.forced_conclusion(Q, trace_text[: bd.char_offset], "\\boxed{9}" if bd.index >= 2 else "\\boxed{0}")
    mb = MockBackend(b.script)
    rec = run(Q, "vanilla", backend=mb, question_id="s")
    assert rec.trace == trace_text + "\n"
    opt = oracle_for_record(SAMPLE, rec, mb)
    assert opt.boundary.index == 2 and opt.full_tokens == rec.tokens_think
    assert opt.optimal_tokens == len(tokenize(sentences(2)))


def rec(qid, policy, tokens):
    return RunRecord(question_id=qid, policy=policy, tokens_think=tokens)


def opt(tokens, full=1000):
    return OptimalExit(SentenceBoundary(1, 10, tokens), tokens, full, (full - tokens) / full, True)


def test_gap_report():
    optimal = {"a": opt(400), "b": opt(300), "c": OptimalExit(None, 900, 900, 0.0)}
    records = [rec("a", "dtsr", 500), rec("b", "dtsr", 250), rec("a", "exact", 400), rec("b", "exact", 300),
               rec("a", "vanilla", 1000), rec("b", "vanilla", 1000), rec("c", "vanilla", 900), rec("z", "dtsr", 1)]
    by = {g.policy: g for g in gap_report(records, optimal)}
    assert by["dtsr"].mean_gap == 25 and by["dtsr"].frac_before == 0.5 and by["dtsr"].frac_after == 0.5
    assert by["dtsr"].n_missing == 1
    assert by["exact"].mean_gap == 0 and by["exact"].frac_exact == 1
    # vanilla gap is the mean overthinking in tokens
    assert by["vanilla"].mean_gap == (600 + 700) / 2 and by["vanilla"].n_missing == 1
    assert gap_csv(list(by.values())).splitlines()[0] == "policy,n,mean_gap,frac_before,frac_exact,frac_after,n_missing"


def test_results_round_trip(tmp_path):
    results = {"a": opt(400), "b": OptimalExit(None, 5, 5, 0.0, False, (1, 2))}
    write_oracle_results(results, tmp_path / "o.jsonl")
    assert read_oracle_results(tmp_path / "o.jsonl") == results
