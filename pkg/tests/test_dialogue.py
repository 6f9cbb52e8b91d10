import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wardround.dialogue import (
    DONE,
    assemble_context,
    initial_state,
    next_question,
    record_answer,
    render_admission,
)
from wardround.errors import ProtocolViolation


def drive(bundle, answers_by_qid, include=None):
    """Walk a dialogue to completion, returning the contexts seen per question."""
    state = initial_state(bundle, include_questions=include)
    contexts = {}
    while (question := next_question(state)) is not None:
        ctx = assemble_context(state, question)
        contexts[question.question_id] = ctx
        state = record_answer(state, question, answers_by_qid.get(question.question_id, ""))
    return state, contexts


def test_question_order_and_rounds(split3):
    bundle = split3.records[0]
    state = initial_state(bundle)
    seen = []
    rounds = []
    while (question := next_question(state)) is not None:
        seen.append(question.question_id)
        rounds.append(state.current_round)
        state = record_answer(state, question, f"answer-{question.question_id}")
    assert seen == ["Q1", "Q2", "Q3", "Q4", "Q5"]
    assert rounds == ["R1", "R1", "R2", "R3", "R3"]
    assert state.current_round == DONE
    assert next_question(state) is None


def test_course_text_only_in_round_three(split3):
    bundle = split3.records[0]
    sentinel = f"[病程{bundle.record_id}]"
    _, contexts = drive(bundle, {})
    for qid in ("Q1", "Q2", "Q3"):
        assert contexts[qid].course_text == ""
    for qid in ("Q4", "Q5"):
        assert sentinel in contexts[qid].course_text


def test_history_accumulates_own_answers(split3):
    bundle = split3.records[0]
    answers = {qid: f"答案{qid}" for qid in ("Q1", "Q2", "Q3", "Q4", "Q5")}
    _, contexts = drive(bundle, answers)
    assert contexts["Q1"].history_text == ""
    assert "答案Q1" in contexts["Q2"].history_text
    assert "答案Q2" in contexts["Q3"].history_text
    for earlier in ("Q1", "Q2", "Q3", "Q4"):
        assert answers[earlier] in contexts["Q5"].history_text
    # the history shows the question surfaces too
    assert bundle.question("Q1").surface_text in contexts["Q2"].history_text


def test_admission_text_present_in_every_context(split3):
    bundle = split3.records[0]
    _, contexts = drive(bundle, {})
    rendered = render_admission(bundle.admission)
    for ctx in contexts.values():
        assert ctx.admission_text == rendered
    assert bundle.admission.chief_complaint in rendered


def test_out_of_order_assembly_is_rejected(split3):
    bundle = split3.records[0]
    state = initial_state(bundle)
    q3 = bundle.question("Q3")
    with pytest.raises(ProtocolViolation):
        assemble_context(state, q3)
    with pytest.raises(ProtocolViolation):
        record_answer(state, q3, "premature")


def test_answer_after_done_is_rejected(split3):
    bundle = split3.records[0]
    state, _ = drive(bundle, {})
    with pytest.raises(ProtocolViolation):
        record_answer(state, bundle.question("Q5"), "again")


def test_question_subset_keeps_protocol_order(split3):
    bundle = split3.records[0]
    state = initial_state(bundle, include_questions=("Q4", "Q3", "Q5"))
    assert [q.question_id for q in state.questions] == ["Q3", "Q4", "Q5"]
    assert state.current_round == "R2"
    _, contexts = drive(bundle, {}, include=("Q3", "Q4", "Q5"))
    assert contexts["Q3"].course_text == ""
    assert contexts["Q4"].course_text != ""


def test_unknown_or_empty_subsets_are_rejected(split3):
    bundle = split3.records[0]
    with pytest.raises(ProtocolViolation):
        initial_state(bundle, include_questions=("Q9",))
    with pytest.raises(ProtocolViolation):
        initial_state(bundle, include_questions=())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(min_size=0, max_size=10), min_size=5, max_size=5))
def test_history_is_prefix_stable(split3, answers):
    """After k answers the history equals exactly the first k (question, answer)
    pairs, in order — no reordering, loss, or mutation."""
    bundle = split3.records[0]
    state = initial_state(bundle)
    given_pairs = []
    for text in answers:
        question = next_question(state)
        given_pairs.append((question, text))
        state = record_answer(state, question, text)
        assert state.history == tuple(given_pairs)
