"""Three-round dialogue protocol between examiner and candidate.

Round 1 asks Q1 (primary diagnosis) and Q2 (its criteria) from the admission
record alone; round 2 asks Q3 (differential diagnosis); round 3 reveals the
hospital course and asks Q4 (final diagnosis) and Q5 (its criteria). The
dialogue history holds the candidate's own earlier answers, and each
assembled context is admission + course (round 3 only) + history + question.

DialogueState is immutable; record_answer returns a new state, so states are
safely shareable across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

from .dataset import (
    AdmissionRecord,
    HospitalCourse,
    QuestionInstance,
    RecordBundle,
)
from .errors import ProtocolViolation

DONE = "done"

_ADMISSION_RENDER = (
    ("主诉", "chief_complaint"),
    ("现病史", "present_history"),
    ("既往史", "past_history"),
    ("体格检查", "physical_exam"),
    ("实验室及辅助检查", "lab_aided_exam"),
)


@dataclass(frozen=True)
class DialogueState:
    record_id: str
    current_round: str
    history: tuple[tuple[QuestionInstance, str], ...]
    admission: AdmissionRecord
    course: HospitalCourse
    questions: tuple[QuestionInstance, ...]


@dataclass(frozen=True)
class AssembledContext:
    """Everything the candidate sees when answering one question."""

    record_id: str
    question_id: str
    admission_text: str
    course_text: str
    history_text: str
    question_text: str


def _round_at(questions: tuple[QuestionInstance, ...], n_answered: int) -> str:
    if n_answered >= len(questions):
        return DONE
    return questions[n_answered].round


def initial_state(
    bundle: RecordBundle,
    include_questions: tuple[str, ...] | None = None,
) -> DialogueState:
    """Fresh dialogue for one record.

    include_questions restricts the dialogue to a subset of question ids (in
    protocol order) for protocol ablations; None keeps all five.
    """
    questions = bundle.questions
    if include_questions is not None:
        allowed = set(include_questions)
        unknown = allowed - {q.question_id for q in questions}
        if unknown:
            raise ProtocolViolation(f"unknown question ids {sorted(unknown)}")
        questions = tuple(q for q in questions if q.question_id in allowed)
        if not questions:
            raise ProtocolViolation("dialogue needs at least one question")
    return DialogueState(
        record_id=bundle.record_id,
        current_round=_round_at(questions, 0),
        history=(),
        admission=bundle.admission,
        course=bundle.course,
        questions=questions,
    )


def next_question(state: DialogueState) -> QuestionInstance | None:
    """The pending question, or None once the dialogue is complete."""
    n = len(state.history)
    if n >= len(state.questions):
        return None
    return state.questions[n]


def render_admission(admission: AdmissionRecord) -> str:
    return "\n".join(
        f"{label}：{getattr(admission, fieldname)}" for label, fieldname in _ADMISSION_RENDER
    )


def render_history(history: tuple[tuple[QuestionInstance, str], ...]) -> str:
    lines = []
    for question, answer in history:
        lines.append(f"Q: {question.surface_text}")
        lines.append(f"A: {answer}")
    return "\n".join(lines)


def assemble_context(state: DialogueState, question: QuestionInstance) -> AssembledContext:
    """Build the candidate's view for the pending question.

    The hospital course is included only when the question belongs to round 3;
    earlier rounds never see it.
    """
    pending = next_question(state)
    if pending is None or pending != question:
        raise ProtocolViolation(
            f"{state.record_id}: question {question.question_id} is not pending "
            f"(expected {pending.question_id if pending else 'none'})")
    course_text = state.course.course_text if question.round == "R3" else ""
    return AssembledContext(
        record_id=state.record_id,
        question_id=question.question_id,
        admission_text=render_admission(state.admission),
        course_text=course_text,
        history_text=render_history(state.history),
        question_text=question.surface_text,
    )


def record_answer(state: DialogueState, question: QuestionInstance, answer: str) -> DialogueState:
    """Append the candidate's answer and advance the round when exhausted."""
    pending = next_question(state)
    if pending is None or pending != question:
        raise ProtocolViolation(
            f"{state.record_id}: cannot answer {question.question_id}, it is not pending")
    history = state.history + ((question, answer),)
    return DialogueState(
        record_id=state.record_id,
        current_round=_round_at(state.questions, len(history)),
        history=history,
        admission=state.admission,
        course=state.course,
        questions=state.questions,
    )
