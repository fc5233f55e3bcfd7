"""ReAct loop: grammar parsing, tool dispatch, correction, and the cap."""

import pytest

from ragmark.agent import (
    AgentProfile,
    DEFAULT_TOOL_DESCRIPTIONS,
    format_observation,
    get_profile,
    parse_step,
    render_system_prompt,
    render_turn_prompt,
    run_agent,
)
from ragmark.modelgw import MockLLM, ScriptedLLM
from ragmark.retrieval import RetrievalResult, RetrievedChunk

STATION_TEXT = "The Meadowbrook power station generates 42 megawatts of electricity."


def fake_retriever(query: str) -> RetrievalResult:
    chunk = RetrievedChunk(
        chunk_id="station.txt::c0", score=1.0, source="vector", text=STATION_TEXT
    )
    return RetrievalResult(query=query, strategy="naive", chunks=(chunk,), timing=0.0)


def empty_retriever(query: str) -> RetrievalResult:
    return RetrievalResult(query=query, strategy="naive", chunks=(), timing=0.0)


ACTION_REPLY = "Thought: search first.\nAction: document_search\nAction Input: station megawatts"
FINAL_REPLY = "Thought: found it.\nFinal Answer: 42 megawatts"


# --------------------------------------------------------------------------
# profiles and prompt rendering
# --------------------------------------------------------------------------


def test_get_profile_names():
    base = get_profile("react_base")
    custom = get_profile("react_custom", max_iterations=5)
    assert base.confidence_required is False
    assert custom.confidence_required is True
    assert custom.max_iterations == 5
    with pytest.raises(ValueError, match="unknown profile"):
        get_profile("react_fancy")


def test_profile_validation():
    with pytest.raises(ValueError, match="max_iterations"):
        AgentProfile(name="react_base", system_prompt_template="x", max_iterations=0)
    with pytest.raises(ValueError, match="confidence"):
        AgentProfile(name="react_custom", system_prompt_template="x")


def test_custom_template_embeds_confidence_skeleton():
    custom = get_profile("react_custom")
    assert "Confidence: [current confidence score 0-1]" in custom.system_prompt_template
    base = get_profile("react_base")
    assert "Confidence: [current confidence score 0-1]" not in base.system_prompt_template


def test_render_system_prompt_fills_tools():
    profile = get_profile("react_base")
    rendered = render_system_prompt(profile, list(DEFAULT_TOOL_DESCRIPTIONS))
    assert DEFAULT_TOOL_DESCRIPTIONS[0] in rendered
    assert "{tools}" not in rendered
    with pytest.raises(ValueError, match="at least one tool"):
        render_system_prompt(profile, [])


def test_render_turn_prompt_fills_question_and_transcript():
    rendered = render_turn_prompt(
        "Q: {question}\nSo far:\n{transcript}", "What is X?", "Thought: hmm"
    )
    assert "What is X?" in rendered
    assert "Thought: hmm" in rendered
    assert "{question}" not in rendered and "{transcript}" not in rendered


# --------------------------------------------------------------------------
# parse_step grammar
# --------------------------------------------------------------------------


def test_parse_action_turn():
    turn = parse_step("Thought: need data\nAction: document_search\nAction Input: solar capacity")
    assert turn.kind == "action"
    assert turn.thought == "need data"
    assert turn.tool_name == "document_search"
    assert turn.tool_input == "solar capacity"


def test_parse_final_turn():
    turn = parse_step("Thought: done\nFinal Answer: 42 MW")
    assert turn.kind == "final"
    assert turn.final_answer == "42 MW"


def test_final_answer_takes_precedence_over_action():
    text = (
        "Thought: both\nAction: document_search\nAction Input: x\n"
        "Final Answer: the answer"
    )
    assert parse_step(text).kind == "final"


def test_bare_final_answer_label_is_not_final():
    assert parse_step("Thought: x\nFinal Answer:").kind == "invalid"
    # An empty label does not preempt a real action earlier in the reply.
    turn = parse_step("Action: document_search\nAction Input: q\nFinal Answer:")
    assert turn.kind == "action"


def test_multiline_final_answer_is_kept_whole():
    turn = parse_step("Final Answer: first line\nsecond line")
    assert turn.final_answer == "first line\nsecond line"


def test_action_without_input_is_invalid():
    assert parse_step("Action: document_search").kind == "invalid"
    assert parse_step("Action Input: dangling").kind == "invalid"
    assert parse_step("just chatting about the weather").kind == "invalid"


def test_parse_confidence_forms():
    assert parse_step("Confidence: 0.85\nFinal Answer: x").confidence == 0.85
    assert parse_step("Confidence: 85%\nFinal Answer: x").confidence == 0.85
    assert parse_step("Final Answer: x").confidence is None


def test_parse_confidence_clamped(caplog):
    with caplog.at_level("WARNING"):
        turn = parse_step("Confidence: 1.7\nFinal Answer: x")
    assert turn.confidence == 1.0
    assert any("clamped" in r.getMessage() for r in caplog.records)
    assert parse_step("Confidence: -2\nFinal Answer: x").confidence == 0.0


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------


def test_format_observation_numbers_and_doc_ids():
    result = fake_retriever("q")
    assert format_observation(result) == f"[1] (station.txt) {STATION_TEXT}"


def test_format_observation_flattens_whitespace():
    chunk = RetrievedChunk(chunk_id="d::c0", score=1.0, source="vector", text="line one\n  line two")
    result = RetrievalResult(query="q", strategy="naive", chunks=(chunk,), timing=0.0)
    assert format_observation(result) == "[1] (d) line one line two"


def test_format_observation_empty():
    assert format_observation(empty_retriever("q")) == "No passages found."


def test_format_observation_truncates_to_budget():
    out = format_observation(fake_retriever("q"), char_budget=25)
    assert out.endswith(" [truncated]")
    assert len(out) == 25 + len(" [truncated]")


# --------------------------------------------------------------------------
# run_agent
# --------------------------------------------------------------------------


def test_search_then_answer():
    llm = ScriptedLLM([ACTION_REPLY, FINAL_REPLY])
    trace = run_agent("How many megawatts?", get_profile("react_base"), fake_retriever, llm)
    assert trace.final_answer == "42 megawatts"
    assert trace.terminated_by == "final_answer"
    assert trace.iterations_used == 2
    assert trace.parse_failure is False
    assert len(trace.steps) == 2
    assert trace.steps[0].action == ("document_search", "station megawatts")
    assert trace.steps[0].observation == f"[1] (station.txt) {STATION_TEXT}"
    assert trace.steps[1].action is None
    assert len(trace.retrievals) == 1
    assert trace.retrievals[0].query == "station megawatts"
    # The second prompt carries the first reply plus its observation.
    assert ACTION_REPLY in llm.calls[1]
    assert f"Observation: [1] (station.txt) {STATION_TEXT}" in llm.calls[1]
    assert "How many megawatts?" in llm.calls[0]


def test_iteration_cap_answers_from_last_thought():
    llm = ScriptedLLM([ACTION_REPLY], repeat_last=True)
    profile = get_profile("react_base", max_iterations=3)
    trace = run_agent("q?", profile, fake_retriever, llm)
    assert trace.terminated_by == "iteration_cap"
    assert trace.iterations_used == 3
    assert len(trace.steps) == 3
    assert len(trace.retrievals) == 3
    assert trace.final_answer == "Based on partial findings: search first."
    assert len(llm.calls) == 3


def test_iteration_cap_without_thoughts():
    llm = ScriptedLLM(
        ["Action: document_search\nAction Input: anything"], repeat_last=True
    )
    profile = get_profile("react_base", max_iterations=2)
    trace = run_agent("q?", profile, fake_retriever, llm)
    assert trace.final_answer == "Based on partial findings: no conclusive findings."


def test_corrective_reprompt_recovers():
    llm = ScriptedLLM(["I would just like to chat.", FINAL_REPLY])
    trace = run_agent("q?", get_profile("react_base"), fake_retriever, llm)
    assert trace.final_answer == "42 megawatts"
    assert trace.parse_failure is False
    # The correction does not consume an iteration, only an extra generate.
    assert trace.iterations_used == 1
    assert len(llm.calls) == 2
    assert "not in the required format" in llm.calls[1]


def test_double_parse_failure_returns_raw_text():
    llm = ScriptedLLM(["garbage one", "garbage two"])
    trace = run_agent("q?", get_profile("react_base"), fake_retriever, llm)
    assert trace.parse_failure is True
    assert trace.terminated_by == "final_answer"
    assert trace.final_answer == "garbage two"
    assert trace.steps == ()
    assert trace.retrievals == ()


def test_correction_is_single_use_per_run():
    llm = ScriptedLLM([ACTION_REPLY, "chatter", "more chatter"])
    trace = run_agent("q?", get_profile("react_base"), fake_retriever, llm)
    assert trace.parse_failure is True
    assert trace.final_answer == "more chatter"
    assert trace.iterations_used == 2
    assert len(trace.retrievals) == 1


def test_unknown_tool_gets_error_observation():
    llm = ScriptedLLM(
        ["Thought: t\nAction: web_search\nAction Input: q", FINAL_REPLY]
    )
    trace = run_agent("q?", get_profile("react_base"), fake_retriever, llm)
    assert trace.steps[0].action is None
    assert trace.steps[0].observation.startswith("Error: unknown tool 'web_search'")
    assert trace.retrievals == ()
    assert trace.final_answer == "42 megawatts"
    # Steps that carry an action stay in lockstep with captured retrievals.
    assert sum(1 for s in trace.steps if s.action) == len(trace.retrievals)


def test_confidence_recorded_only_for_custom_profile():
    reply = "Thought: checking\nConfidence: 0.85\nFinal Answer: fine"
    base_trace = run_agent("q?", get_profile("react_base"), fake_retriever, ScriptedLLM([reply]))
    assert base_trace.steps[0].confidence is None
    custom_trace = run_agent(
        "q?", get_profile("react_custom"), fake_retriever, ScriptedLLM([reply])
    )
    assert custom_trace.steps[0].confidence == 0.85


def test_observation_stop_sequence_blocks_fabrication():
    fabricating = ACTION_REPLY + "\nObservation: [1] (fake.txt) invented passage"
    llm = ScriptedLLM([fabricating, FINAL_REPLY])
    trace = run_agent("q?", get_profile("react_base"), fake_retriever, llm)
    assert "invented passage" not in llm.calls[1]
    assert STATION_TEXT in llm.calls[1]
    assert trace.final_answer == "42 megawatts"


def test_observation_budget_is_honored():
    llm = ScriptedLLM([ACTION_REPLY, FINAL_REPLY])
    trace = run_agent(
        "q?", get_profile("react_base"), fake_retriever, llm, observation_char_budget=30
    )
    assert trace.steps[0].observation.endswith(" [truncated]")


def test_empty_question_rejected():
    with pytest.raises(ValueError, match="empty question"):
        run_agent("  ", get_profile("react_base"), fake_retriever, ScriptedLLM(["x"]))


def test_no_passages_observation():
    llm = ScriptedLLM([ACTION_REPLY, FINAL_REPLY])
    trace = run_agent("q?", get_profile("react_base"), empty_retriever, llm)
    assert trace.steps[0].observation == "No passages found."


# --------------------------------------------------------------------------
# end to end against the mock generator
# --------------------------------------------------------------------------


def test_mock_llm_drives_base_profile():
    trace = run_agent(
        "How many megawatts does the station generate?",
        get_profile("react_base"),
        fake_retriever,
        MockLLM(seed=0),
    )
    assert trace.terminated_by == "final_answer"
    assert trace.iterations_used == 2
    assert len(trace.retrievals) == 1
    assert trace.final_answer == STATION_TEXT
    assert trace.steps[0].confidence is None


def test_mock_llm_drives_custom_profile_with_confidence():
    trace = run_agent(
        "How many megawatts does the station generate?",
        get_profile("react_custom"),
        fake_retriever,
        MockLLM(seed=0),
    )
    assert trace.terminated_by == "final_answer"
    assert trace.final_answer == STATION_TEXT
    assert trace.steps[0].confidence == 0.85
