import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlyexit.backend import CapabilityError, MockBackend, StreamInterrupted
from earlyexit.backend.mock import Match, ScriptEntry
from earlyexit.backend.types import BackendCapabilities, TokenChunk
from earlyexit.controller import (
    ControllerConfig,
    ExitPolicy,
    PolicyError,
    RunFailed,
    RunRecord,
    force_exit,
    read_records,
    run,
    write_records,
)
from earlyexit.prompting import render_first_person_prompt
from earlyexit.scripting import ScriptBuilder, tokenize
from streams import CLOSE, build, reasoning_stream, think_chunks

Q = "What is 2+3?"


def test_defaults():
    c = ControllerConfig()
    assert (c.tau, c.k, c.max_len, c.conclusion_reserve) == (100, 64, 16384, 512)
    assert (c.check_max_tokens, c.check_temperature, c.temperature, c.top_p, c.seeds) == (16, 0, 0.6, 0.95, 3)


@pytest.mark.parametrize("kw", [{"tau": -1}, {"tau": 102}, {"k": -1}, {"max_len": 100, "conclusion_reserve": 100}])
def test_config_bounds(kw):
    with pytest.raises(ValueError):
        ControllerConfig(**kw)


def test_policy_parse_and_bounds():
    assert ExitPolicy.parse("deer1") == ExitPolicy("entropy_exit", mode="deer1")
    assert ExitPolicy.parse("answer_probe:interval=128,window=4") == ExitPolicy("answer_probe", interval=128, window=4)
    assert ExitPolicy.parse("deer2").name == "deer2"
    assert ExitPolicy.parse("nowait:banned=Wait/13/14|Hmm/2") == ExitPolicy(
        "nowait", banned_words={"Wait": (13, 14), "Hmm": (2,)})
    for bad in ("nowait:banned=Wait", "nowait:banned=Wait/x", "nowait:banned=/3"):
        with pytest.raises(PolicyError):
            ExitPolicy.parse(bad)
    with pytest.raises(PolicyError):
        ExitPolicy.parse("greedy")
    with pytest.raises(PolicyError):
        ExitPolicy("answer_probe", window=1)
    with pytest.raises(PolicyError):
        ExitPolicy("entropy_exit", conf_threshold=0)
    with pytest.raises(PolicyError):
        ExitPolicy.parse("dtsr:colour=red")


def test_vanilla_passes_through():
    _, r, mb = build(100, {30: "Wait", 80: "But let me"})
    rec = run(Q, "vanilla", backend=mb)
    assert rec.trace + rec.exit_marker + rec.conclusion == r.text
    assert rec.check_events == [] and rec.exit_kind == "natural"
    assert rec.tokens_think == 101 and rec.tokens_main == len(r.chunks)
    assert rec.answer == "5"


def test_signals_before_k_are_skipped():
    _, _, mb = build(120, {10: "Wait", 40: "Alternatively"}, scores=(100, 100))
    rec = run(Q, "dtsr", backend=mb)
    assert rec.check_events == [] and rec.skipped_signals == 2
    assert rec.exit_kind == "natural"


def test_signal_at_70_exits():
    _, r, mb = build(120, {70: "Wait"}, scores=(100,))
    rec = run(Q, "dtsr", backend=mb)
    assert [e.trace_token_position for e in rec.check_events] == [70]
    assert rec.exit_kind == "early_exit" and rec.tokens_think == 70
    assert rec.trace.endswith(" Wait,") and rec.exit_marker == CLOSE
    assert rec.conclusion == "So \\boxed{5}."
    assert rec.tokens_main == 70 + 2 and rec.tokens_check_overhead == 1


def test_insufficient_check_resets_counter():
    # 70 checks (c reset), 100 arrives with c=30 -> skipped, 140 with c=70 -> checked
    _, _, mb = build(200, {70: "Wait", 100: "Wait", 140: "Wait"}, scores=(40, 100))
    rec = run(Q, "dtsr", backend=mb)
    assert [(e.trace_token_position, e.score, e.decision) for e in rec.check_events] == [
        (70, 40.0, "continue"), (140, 100.0, "exit")
    ]
    assert rec.skipped_signals == 1


def test_tau_is_inclusive():
    _, _, mb = build(120, {70: "Wait"}, scores=(80,))
    assert run(Q, "dtsr", ControllerConfig(tau=80), mb).exit_kind == "early_exit"
    assert run(Q, "dtsr", ControllerConfig(tau=80.5), mb).exit_kind == "natural"


def test_unreachable_tau_equals_vanilla():
    _, _, mb = build(200, {70: "Wait", 150: "But wait"}, scores=(100, 100))
    dtsr = run(Q, "dtsr", ControllerConfig(tau=101), mb)
    vanilla = run(Q, "vanilla", ControllerConfig(), mb)
    assert dtsr.output == vanilla.output and len(dtsr.check_events) == 2


def test_k_beyond_max_len_equals_vanilla():
    _, _, mb = build(200, {70: "Wait", 150: "But wait"}, scores=(100, 100))
    cfg = ControllerConfig(k=1000, max_len=999)
    assert run(Q, "dtsr", cfg, mb).output == run(Q, "vanilla", cfg, mb).output


def test_budget_forcing():
    cfg = ControllerConfig(max_len=200, conclusion_reserve=50)
    _, _, mb = build(400, {70: "Wait", 150: "Wait"}, scores=(10, 10), config=cfg)
    rec = run(Q, "dtsr", cfg, mb)
    assert rec.exit_kind == "budget_forced" and rec.tokens_think == 150
    assert rec.conclusion == "So \\boxed{5}." and rec.tokens_main <= 200
    bf = run(Q, "budget_force", cfg, mb)
    assert bf.exit_kind == "budget_forced" and bf.check_events == []


def test_budget_force_truncates_conclusion_within_reserve():
    cfg = ControllerConfig(max_len=100, conclusion_reserve=3)
    b = ScriptBuilder(cfg)
    r = b.reasoning(Q, reasoning_stream(300))
    b.conclusion(r, tokenize("one two three four five"))
    rec = run(Q, "budget_force", cfg, MockBackend(b.script))
    assert rec.tokens_main == 100 and rec.truncated
    assert rec.conclusion == "one two three"


def test_vanilla_length_cap_marks_truncation():
    _, _, mb = build(300)
    rec = run(Q, "vanilla", ControllerConfig(max_len=100, conclusion_reserve=10), mb)
    assert rec.truncated and rec.tokens_main == 100 and rec.exit_kind == "natural"


def test_unparseable_score_continues():
    b = ScriptBuilder()
    r = b.reasoning(Q, reasoning_stream(200, {70: "Wait", 140: "Wait"}))
    pts = b.detection_points(r)
    b.check_reply_at(r, pts[0], " very sure")
    b.check_reply_at(r, pts[1], " 100")
    b.conclusion(r, tokenize("\\boxed{5}"))
    mb = MockBackend(b.script)
    rec = run(Q, "dtsr", backend=mb)
    first = rec.check_events[0]
    assert first.score is None and first.error == "unparseable" and first.decision == "continue"
    assert rec.exit_kind == "early_exit" and rec.tokens_think == 140


def test_check_failure_retried_then_continues():
    b = ScriptBuilder()
    r = b.reasoning(Q, reasoning_stream(150, {70: "Wait"}))
    entry = b.check_reply_at(r, b.detection_points(r)[0], " 100")
    entry.fail_after = 0
    b.conclusion(r, tokenize("\\boxed{5}"))
    mb = MockBackend(b.script)
    rec = run(Q, "dtsr", backend=mb)
    ev = rec.check_events[0]
    assert ev.decision == "continue" and ev.error.startswith("backend")
    checks = [req for req, _ in mb.calls if req.prompt.endswith("Confidence:")]
    assert len(checks) == 2  # one retry
    assert rec.exit_kind == "natural"
    assert rec.tokens_main + rec.tokens_check_overhead == mb.total_usage()


def test_check_purity_and_accounting():
    _, _, mb = build(300, {70: "Wait", 150: "But let me", 230: "Alternatively"}, scores=(20, 50, 100))
    rec = run(Q, "dtsr", backend=mb)
    assert "Confidence" not in rec.trace and "### Thought" not in rec.trace
    assert rec.tokens_main + rec.tokens_check_overhead == mb.total_usage()
    assert rec.tokens_check_overhead == 3 == sum(e.check_tokens_used for e in rec.check_events)


def test_check_request_settings():
    _, _, mb = build(120, {70: "Wait"}, scores=(100,))
    run(Q, "dtsr", backend=mb, seed=4)
    check = next(req for req, _ in mb.calls if req.prompt.endswith("Confidence:"))
    assert (check.temperature, check.max_tokens, check.stop, check.stream) == (0.0, 16, ("\n",), False)
    main = next(req for req, _ in mb.calls if req.stream)
    assert (main.temperature, main.top_p, main.seed) == (0.6, 0.95, 4)


def test_first_person_variant():
    _, _, mb = build(120, {70: "Wait"}, scores=(100,), first_person=True)
    rec = run(Q, "dtsr_first_person", backend=mb)
    assert rec.exit_kind == "early_exit" and rec.policy == "dtsr_first_person"
    check = next(req for req, _ in mb.calls if req.prompt.endswith("Confidence:"))
    assert check.prompt == render_first_person_prompt(Q, "<think>" + rec.trace)


def test_signals_after_close_never_checked():
    b = ScriptBuilder()
    r = b.reasoning(Q, reasoning_stream(100, answer="Wait, the answer is \\boxed{5}. But let me stop."))
    rec = run(Q, "dtsr", ControllerConfig(k=0), MockBackend(b.script))
    assert rec.check_events == [] and rec.exit_kind == "natural"


def test_close_marker_split_across_chunks():
    chunks = think_chunks(5) + [TokenChunk("\n</th", 1), TokenChunk("ink>\n\nok \\boxed{1}", 1)]
    b = ScriptBuilder()
    b.reasoning(Q, chunks)
    events = []
    rec = run(Q, "dtsr", backend=MockBackend(b.script), on_event=lambda k, t: events.append((k, t)))
    assert rec.exit_kind == "natural" and rec.trace == " s1 s2 s3 s4 s5\n"
    assert rec.conclusion == "\n\nok \\boxed{1}"
    assert all("</th" not in t for k, t in events if k == "think")
    assert "".join(t for _, t in events) == rec.output


def test_event_stream_reassembles_output():
    _, _, mb = build(200, {70: "Wait", 150: "Wait"}, scores=(10, 100))
    events = []
    rec = run(Q, "dtsr", backend=mb, on_event=lambda k, t: events.append((k, t)))
    assert "".join(t for _, t in events) == rec.output
    assert [k for k, _ in events if k == "marker"] == ["marker"]


def test_no_thinking():
    b = ScriptBuilder()
    b.reasoning(Q, tokenize("Direct: \\boxed{5}"), nothinking=True)
    mb = MockBackend(b.script)
    rec = run(Q, "no_thinking", backend=mb)
    assert rec.exit_kind == "no_think" and rec.trace == "" and rec.answer == "5"
    assert mb.calls[0][0].prompt.endswith("<think>\n</think>")


def test_main_stream_failure_carries_partial_record():
    b = ScriptBuilder()
    b.script.add(ScriptEntry(Match("prefix", b.reasoning(Q, reasoning_stream(50)).prompt, resume=True, seed=9),
                             think_chunks(30), fail_after=20))
    with pytest.raises(RunFailed) as info:
        run(Q, "dtsr", backend=MockBackend(b.script), seed=9)
    rec = info.value.record
    assert rec.tokens_think == 20 and rec.error.startswith("StreamInterrupted")
    assert isinstance(info.value.__cause__, StreamInterrupted)


# answer probing


def probe_script(n, answers, interval):
    cfg = ControllerConfig()
    b = ScriptBuilder(cfg)
    r = b.reasoning(Q, reasoning_stream(n))
    for i, a in enumerate(answers, start=1):
        b.probe_reply_at(r, i * interval - 1, f"{a}}} \\]")
    b.conclusion(r, tokenize("\\boxed{7}"))
    return MockBackend(b.script)


def test_probe_consistent_answers_exit():
    mb = probe_script(400, [7, 7, 7], 64)
    rec = run(Q, "answer_probe:interval=64", backend=mb)
    assert [e.answer for e in rec.check_events] == ["7", "7", "7"]
    assert rec.exit_kind == "early_exit" and rec.tokens_think == 192


def test_probe_inconsistent_answers_continue():
    mb = probe_script(250, [7, 8, 7], 64)
    rec = run(Q, "answer_probe:interval=64", backend=mb)
    assert rec.exit_kind == "natural" and len(rec.check_events) == 3


def test_probe_interval_beyond_trace_is_vanilla():
    _, _, mb = build(100)
    assert run(Q, "answer_probe:interval=500", backend=mb).output == run(Q, "vanilla", backend=mb).output


# entropy exit


def trial_script(logprobs, close, mode_caps=True):
    b = ScriptBuilder()
    r = b.reasoning(Q, reasoning_stream(100, {30: "Wait"}))
    tail = [TokenChunk("\n</think>", 1, (0.0,))] if close else [TokenChunk(" Let me", 1, (0.0,))]
    reply = [TokenChunk("5", 1, (logprobs[0],)), TokenChunk("}", 1, (logprobs[1],))] + tail
    b.trial_reply_at(r, b.detection_points(r)[0], reply)
    b.conclusion(r, tokenize("\\boxed{5}"))
    caps = BackendCapabilities(mode_caps, True, True)
    return MockBackend(b.script, capabilities=caps)


@pytest.mark.parametrize(
    "close,mode,exits",
    [(False, "deer1", True), (False, "deer", False), (False, "deer2", False),
     (True, "deer1", True), (True, "deer", True), (True, "deer2", True)],
)
def test_deer_modes_confident(close, mode, exits):
    rec = run(Q, mode, backend=trial_script((0.0, 0.0), close))
    ev = rec.check_events[0]
    assert ev.confidence in (1.0, None) and ev.answer == "5" and ev.close_followed is close
    assert (rec.exit_kind == "early_exit") is exits


def test_deer_low_confidence_with_close():
    lp = (-1.0, -1.0)
    assert run(Q, "deer1", backend=trial_script(lp, True)).exit_kind == "natural"
    assert run(Q, "deer", backend=trial_script(lp, True)).exit_kind == "natural"
    assert run(Q, "deer2", backend=trial_script(lp, True)).exit_kind == "early_exit"


def test_deer_needs_logprobs():
    with pytest.raises(RunFailed) as info:
        run(Q, "deer", backend=trial_script((0.0, 0.0), True, mode_caps=False))
    assert isinstance(info.value.__cause__, CapabilityError)
    assert run(Q, "deer2", backend=trial_script((0.0, 0.0), True, mode_caps=False)).exit_kind == "early_exit"


def test_deer_checks_every_signal():
    b = ScriptBuilder()
    r = b.reasoning(Q, reasoning_stream(60, {5: "Wait", 10: "Wait"}))
    for p in b.detection_points(r):
        b.trial_reply_at(r, p, [TokenChunk("5", 1, (-3.0,)), TokenChunk("}", 1, (0.0,))])
    rec = run(Q, "deer1", backend=MockBackend(b.script))
    assert [e.trace_token_position for e in rec.check_events] == [5, 10]


# nowait


def test_nowait_empty_map_is_vanilla():
    _, _, mb = build(100, {30: "Wait"})
    assert run(Q, ExitPolicy("nowait"), backend=mb).output == run(Q, "vanilla", backend=mb).output


def test_nowait_bias_prunes_branch():
    b = ScriptBuilder()
    b.reasoning(Q, reasoning_stream(100, {30: "Wait"}))
    b.reasoning(Q, reasoning_stream(40), require_bias=(13,))
    mb = MockBackend(b.script)
    policy = ExitPolicy("nowait", banned_words={"Wait": (13,), "wait": (14,)})
    rec = run(Q, policy, backend=mb)
    assert rec.tokens_think == 41 and "Wait" not in rec.trace
    assert mb.calls[-1][0].logit_bias == {13: -100.0, 14: -100.0}
    assert run(Q, "vanilla", backend=mb).tokens_think == 101


def test_nowait_unsupported_backend():
    b = ScriptBuilder()
    b.reasoning(Q, reasoning_stream(10))
    mb = MockBackend(b.script, capabilities=BackendCapabilities(True, False, True))
    with pytest.raises(RunFailed) as info:
        run(Q, ExitPolicy("nowait", banned_words={"Wait": (13,)}), backend=mb)
    assert isinstance(info.value.__cause__, CapabilityError)


# force_exit and records


def test_force_exit():
    assert force_exit("…answer is 28.") == "…answer is 28.\n</think>\n\n"
    assert force_exit("") == "\n</think>\n\n"
    with pytest.raises(ValueError):
        force_exit("done\n</think>")


def test_records_round_trip(tmp_path):
    _, _, mb = build(200, {70: "Wait", 150: "Wait"}, scores=(10, 100))
    recs = [run(Q, "dtsr", backend=mb, question_id="a"), run(Q, "vanilla", backend=mb, question_id="a")]
    path = tmp_path / "r.jsonl"
    write_records(recs, path)
    back = read_records(path)
    assert back == recs
    assert json.loads(path.read_text().splitlines()[0])["check_events"][0]["signal"]["literal"] == "Wait"
    assert RunRecord.from_dict({**recs[0].to_dict(), "extra": 1}) == recs[0]


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.integers(1, 299), max_size=12, unique=True),
    st.lists(st.sampled_from([0, 50, 99, 100]), max_size=12),
    st.integers(0, 96),
)
def test_interval_and_accounting_property(positions, scores, k):
    signals = {p: "Wait" for p in positions}
    cfg = ControllerConfig(k=k)
    _, _, mb = build(300, signals, scores=scores + [0] * 12, config=cfg)
    rec = run(Q, "dtsr", cfg, mb)
    pos = [e.trace_token_position for e in rec.check_events]
    assert all(p >= k for p in pos[:1])
    assert all(b - a >= k for a, b in zip(pos, pos[1:]))
    assert rec.tokens_main + rec.tokens_check_overhead == mb.total_usage()
    if rec.exit_kind == "early_exit":
        assert rec.check_events[-1].decision == "exit" and rec.check_events[-1].score >= cfg.tau
    assert len(rec.check_events) + rec.skipped_signals == len([p for p in positions if p <= rec.tokens_think])
