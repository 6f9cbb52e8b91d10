"""Two-stage inference pipeline over the dialogue protocol.

Stage 1 walks the five-question dialogue in protocol order, answering each
question forward from the assembled context (optionally with retrieved
in-context examples). Stage 2 revisits the diagnosis answers (Q1/Q3/Q4 by
default): backward inference recalls the representative characteristics of
each diagnosed disease, reflection checks them against the record, and
refinement produces the corrected diagnosis list. When a refined Q1/Q4
diagnosis differs from the forward one, the paired criteria question (Q2/Q5)
is asked again conditioned on the refined diagnosis.

Model output must be a JSON object; parsing tries the strict loader first
and then exactly one repair pass (strip code fences, normalize full-width
punctuation to ASCII, take the largest balanced brace/bracket span, drop
trailing commas). A second failure surfaces the raw text unchanged inside
UnparseableOutput.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import (
    CRITERIA_OF_DIAGNOSIS,
    CRITERIA_QUESTIONS,
    DIAGNOSIS_QUESTIONS,
    DatasetSplit,
    KEY_POINT_CATEGORIES,
    QUESTION_IDS,
    RecordBundle,
)
from .dialogue import (
    AssembledContext,
    assemble_context,
    initial_state,
    next_question,
    record_answer,
)
from .errors import ClientError, ConfigError, MockScriptError, UnparseableOutput
from .llm_client import (
    CallKey,
    ChatRequest,
    DEFAULT_MAX_OUTPUT_TOKENS,
    DEFAULT_TOP_P,
    MockLLMClient,
    STAGE_BACKWARD,
    STAGE_FORWARD,
    STAGE_REFINEMENT,
    STAGE_REFLECTION,
    STAGE_REGEN,
)
from .retrieval import MAX_ICL_K, IclExample, IclSelector
from .textnorm import normalize_text

logger = logging.getLogger(__name__)

PROMPT_DIR = Path(__file__).parent / "prompts"

VERDICT_ACTIONS = ("keep", "revise", "delete")

_SLOT_LABELS = {
    "medical_history": "病史",
    "symptoms": "症状",
    "physical_signs": "体征",
    "exam_results": "检查结果",
}


@dataclass(frozen=True)
class RequestSettings:
    """Sampling and budget settings applied to every chat request."""

    model_name: str = "gpt-4o-mini"
    top_p: float = DEFAULT_TOP_P
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS


@dataclass(frozen=True)
class StageConfig:
    """Which pipeline stages run, and how.

    stage2_targets lists the diagnosis questions revisited by stage 2.
    Refinement needs material to work with, so it requires backward
    inference or reflection to be enabled too.
    """

    use_icl: bool = True
    icl_k: int = 1
    backward_on: bool = True
    reflection_on: bool = True
    refinement_on: bool = True
    stage2_targets: tuple[str, ...] = ("Q1", "Q3", "Q4")
    regenerate_criteria: bool = True

    def __post_init__(self):
        if not 0 <= self.icl_k <= MAX_ICL_K:
            raise ConfigError(f"icl_k must be in [0, {MAX_ICL_K}], got {self.icl_k}")
        bad = [q for q in self.stage2_targets if q not in DIAGNOSIS_QUESTIONS]
        if bad:
            raise ConfigError(f"stage2_targets must be diagnosis questions, got {bad}")
        if len(set(self.stage2_targets)) != len(self.stage2_targets):
            raise ConfigError("stage2_targets contains duplicates")
        if self.refinement_on and not (self.backward_on or self.reflection_on):
            raise ConfigError("refinement requires backward inference or reflection")
        # keep targets in protocol order regardless of input order
        object.__setattr__(
            self, "stage2_targets",
            tuple(q for q in DIAGNOSIS_QUESTIONS if q in self.stage2_targets))

    def stage2_enabled(self) -> bool:
        return self.backward_on or self.reflection_on or self.refinement_on

    def can_change_entities(self) -> bool:
        """Backward inference alone never edits the diagnosis list."""
        return self.reflection_on or self.refinement_on


# --- parsed answer shapes ----------------------------------------------------


@dataclass(frozen=True)
class DiagnosisAnswer:
    """Entity-list answer to Q1/Q3/Q4 (or a refinement output)."""

    entities: tuple[str, ...]
    rationale: str = ""
    repaired: bool = False
    raw_text: str = ""


@dataclass(frozen=True)
class CriteriaAnswer:
    criteria_text: str
    repaired: bool = False
    raw_text: str = ""


@dataclass(frozen=True)
class BackwardEvidence:
    """Recalled characteristics per diagnosis; slots are the four key-point
    categories and absent slots stay absent."""

    per_entity: dict[str, dict[str, str]]
    repaired: bool = False
    raw_text: str = ""


@dataclass(frozen=True)
class Verdict:
    action: str
    new_name: str = ""
    reason: str = ""


@dataclass(frozen=True)
class ReflectionVerdict:
    per_entity: dict[str, Verdict]
    repaired: bool = False
    raw_text: str = ""

    def deleted(self) -> tuple[str, ...]:
        return tuple(e for e, v in self.per_entity.items() if v.action == "delete")


# --- constrained JSON parsing -------------------------------------------------

_FENCE = re.compile(r"```+[\w-]*")
_TRAILING_COMMA = re.compile(r",\s*([}\]])")

_FULLWIDTH_MAP = str.maketrans({
    "“": '"', "”": '"',   # curly double quotes
    "‘": "'", "’": "'",   # curly single quotes
    "＂": '"',                   # full-width quotation mark
    "，": ",", "：": ":",   # full-width comma / colon
    "［": "[", "］": "]",   # full-width brackets
    "｛": "{", "｝": "}",   # full-width braces
    "【": "[", "】": "]",   # lenticular brackets
})

_BRACKET_PAIRS = {"{": "}", "[": "]"}
_CLOSERS = {"}": "{", "]": "["}


def _largest_balanced_span(text: str) -> str | None:
    """The longest balanced {...} or [...] region, scanning left to right.

    Quotes are not interpreted; this is a bracket counter, which is enough
    for junk-wrapped model output.
    """
    best: tuple[int, int] | None = None
    stack: list[tuple[str, int]] = []
    for i, ch in enumerate(text):
        if ch in _BRACKET_PAIRS:
            stack.append((ch, i))
        elif ch in _CLOSERS:
            if not stack or stack[-1][0] != _CLOSERS[ch]:
                stack.clear()
                continue
            _, start = stack.pop()
            if not stack:
                if best is None or (i - start) > (best[1] - best[0]):
                    best = (start, i)
    if best is None:
        return None
    return text[best[0]:best[1] + 1]


def _loads_strict(text: str):
    return json.loads(text)


def _repair_once(text: str):
    """The single repair pass. Raises ValueError when it cannot help."""
    cleaned = _FENCE.sub(" ", text).translate(_FULLWIDTH_MAP)
    span = _largest_balanced_span(cleaned)
    if span is None:
        raise ValueError("no balanced JSON span")
    return json.loads(_TRAILING_COMMA.sub(r"\1", span))


def _parse_json_payload(raw_text: str, allow_repair: bool) -> tuple[object, bool]:
    try:
        return _loads_strict(raw_text), False
    except ValueError:
        if not allow_repair:
            raise UnparseableOutput(raw_text, "strict JSON parse failed (repair disabled)")
    try:
        return _repair_once(raw_text), True
    except ValueError as exc:
        raise UnparseableOutput(raw_text, f"repair failed: {exc}") from exc


def _clean_entities(raw_list: list, raw_text: str) -> tuple[str, ...]:
    if not isinstance(raw_list, list) or any(not isinstance(e, str) for e in raw_list):
        raise UnparseableOutput(raw_text, "diagnosis must be a list of strings")
    seen: list[str] = []
    for item in raw_list:
        entity = normalize_text(item)
        if entity and entity not in seen:
            seen.append(entity)
    return tuple(seen)


def _parse_diagnosis(value: object, raw_text: str, repaired: bool) -> DiagnosisAnswer:
    if not isinstance(value, dict) or "diagnosis" not in value:
        raise UnparseableOutput(raw_text, 'expected an object with a "diagnosis" key')
    rationale = value.get("rationale", "")
    if not isinstance(rationale, str):
        raise UnparseableOutput(raw_text, "rationale must be a string")
    return DiagnosisAnswer(
        entities=_clean_entities(value["diagnosis"], raw_text),
        rationale=normalize_text(rationale),
        repaired=repaired,
        raw_text=raw_text,
    )


def _parse_criteria(value: object, raw_text: str, repaired: bool) -> CriteriaAnswer:
    if not isinstance(value, dict) or "criteria" not in value:
        raise UnparseableOutput(raw_text, 'expected an object with a "criteria" key')
    criteria = value["criteria"]
    if not isinstance(criteria, str) or not normalize_text(criteria):
        raise UnparseableOutput(raw_text, "criteria must be a nonempty string")
    return CriteriaAnswer(
        criteria_text=normalize_text(criteria), repaired=repaired, raw_text=raw_text)


def _check_entity_coverage(
    keys: list[str], expected: tuple[str, ...] | None, raw_text: str, what: str,
) -> None:
    if expected is None:
        return
    if sorted(keys) != sorted(expected):
        raise UnparseableOutput(
            raw_text,
            f"{what} must cover each diagnosis exactly once "
            f"(got {keys}, expected {list(expected)})")


def _parse_evidence(
    value: object, raw_text: str, repaired: bool, expected: tuple[str, ...] | None,
) -> BackwardEvidence:
    if not isinstance(value, dict) or not isinstance(value.get("evidence"), dict):
        raise UnparseableOutput(raw_text, 'expected an object with an "evidence" map')
    per_entity: dict[str, dict[str, str]] = {}
    for name, slots in value["evidence"].items():
        entity = normalize_text(name)
        if not entity or not isinstance(slots, dict):
            raise UnparseableOutput(raw_text, "evidence entries must map name -> slot object")
        cleaned: dict[str, str] = {}
        for slot, slot_text in slots.items():
            if slot not in KEY_POINT_CATEGORIES:
                raise UnparseableOutput(raw_text, f"unknown evidence slot {slot!r}")
            if not isinstance(slot_text, str):
                raise UnparseableOutput(raw_text, f"evidence slot {slot!r} must be a string")
            normalized = normalize_text(slot_text)
            if normalized:  # empty slots are treated as absent
                cleaned[slot] = normalized
        per_entity[entity] = cleaned
    _check_entity_coverage(list(per_entity), expected, raw_text, "evidence")
    return BackwardEvidence(per_entity=per_entity, repaired=repaired, raw_text=raw_text)


def _parse_verdict(
    value: object, raw_text: str, repaired: bool, expected: tuple[str, ...] | None,
) -> ReflectionVerdict:
    if not isinstance(value, dict) or not isinstance(value.get("verdicts"), dict):
        raise UnparseableOutput(raw_text, 'expected an object with a "verdicts" map')
    per_entity: dict[str, Verdict] = {}
    for name, body in value["verdicts"].items():
        entity = normalize_text(name)
        if not entity or not isinstance(body, dict):
            raise UnparseableOutput(raw_text, "verdicts must map name -> verdict object")
        action = body.get("action")
        if action not in VERDICT_ACTIONS:
            raise UnparseableOutput(raw_text, f"verdict action must be one of {VERDICT_ACTIONS}")
        new_name = normalize_text(body.get("new_name", "") or "")
        reason = normalize_text(body.get("reason", "") or "")
        if action == "revise" and not new_name:
            raise UnparseableOutput(raw_text, "revise verdict needs a new_name")
        if action in ("revise", "delete") and not reason:
            raise UnparseableOutput(raw_text, f"{action} verdict needs a nonempty reason")
        per_entity[entity] = Verdict(action=action, new_name=new_name, reason=reason)
    _check_entity_coverage(list(per_entity), expected, raw_text, "verdicts")
    return ReflectionVerdict(per_entity=per_entity, repaired=repaired, raw_text=raw_text)


def parse_constrained_json(
    raw_text: str,
    shape: str,
    expected_entities: tuple[str, ...] | None = None,
    allow_repair: bool = True,
):
    """Parse model output into one of the four answer shapes.

    shape is one of "diagnosis", "criteria", "evidence", "verdict". The
    evidence and verdict shapes check that the output covers exactly the
    entities under review when expected_entities is given.
    """
    value, repaired = _parse_json_payload(raw_text, allow_repair)
    if shape == "diagnosis":
        return _parse_diagnosis(value, raw_text, repaired)
    if shape == "criteria":
        return _parse_criteria(value, raw_text, repaired)
    if shape == "evidence":
        return _parse_evidence(value, raw_text, repaired, expected_entities)
    if shape == "verdict":
        return _parse_verdict(value, raw_text, repaired, expected_entities)
    raise ValueError(f"unknown answer shape {shape!r}")


# --- prompt rendering ---------------------------------------------------------


class PromptLibrary:
    """Loads the prompt templates and renders stage prompts.

    Templates are plain text assets with named placeholders. An override
    directory may shadow individual files; anything it does not provide
    falls back to the bundled templates.
    """

    TEMPLATE_NAMES = (
        "forward_diagnosis.system",
        "forward_criteria.system",
        "forward.user",
        "backward.system",
        "backward.user",
        "reflect.system",
        "reflect.user",
        "refine.system",
        "refine.user",
    )

    def __init__(self, override_dir: str | Path | None = None):
        self.templates: dict[str, str] = {}
        override = Path(override_dir) if override_dir else None
        for name in self.TEMPLATE_NAMES:
            candidate = override / f"{name}.txt" if override else None
            if candidate is not None and candidate.exists():
                self.templates[name] = candidate.read_text(encoding="utf-8")
            else:
                self.templates[name] = (PROMPT_DIR / f"{name}.txt").read_text(encoding="utf-8")

    @staticmethod
    def _icl_block(examples: list[IclExample]) -> str:
        if not examples:
            return ""
        return "\n\n".join(ex.rendered_text for ex in examples) + "\n\n"

    @staticmethod
    def _course_block(ctx: AssembledContext) -> str:
        return f"住院经过：{ctx.course_text}\n" if ctx.course_text else ""

    @staticmethod
    def _history_block(ctx: AssembledContext) -> str:
        return f"对话历史：\n{ctx.history_text}\n" if ctx.history_text else ""

    @staticmethod
    def _evidence_block(evidence: BackwardEvidence | None) -> str:
        if evidence is None or not evidence.per_entity:
            return ""
        lines = ["诊断特征回顾："]
        for entity, slots in evidence.per_entity.items():
            lines.append(f"- {entity}")
            for slot in KEY_POINT_CATEGORIES:
                if slot in slots:
                    lines.append(f"  {_SLOT_LABELS[slot]}：{slots[slot]}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def _verdict_block(verdict: ReflectionVerdict | None) -> str:
        if verdict is None or not verdict.per_entity:
            return ""
        lines = ["审查结论："]
        for entity, v in verdict.per_entity.items():
            if v.action == "keep":
                lines.append(f"- {entity}：保留")
            elif v.action == "delete":
                lines.append(f"- {entity}：删除（{v.reason}）")
            else:
                lines.append(f"- {entity}：修改为{v.new_name}（{v.reason}）")
        return "\n".join(lines) + "\n"

    def render_forward(
        self, ctx: AssembledContext, examples: list[IclExample],
    ) -> tuple[str, str]:
        if ctx.question_id in CRITERIA_QUESTIONS:
            system = self.templates["forward_criteria.system"]
        else:
            system = self.templates["forward_diagnosis.system"]
        user = self.templates["forward.user"].format(
            icl_block=self._icl_block(examples),
            admission=ctx.admission_text,
            course_block=self._course_block(ctx),
            history_block=self._history_block(ctx),
            question=ctx.question_text,
        )
        return system, user

    def render_backward(
        self, ctx: AssembledContext, entities: tuple[str, ...],
    ) -> tuple[str, str]:
        user = self.templates["backward.user"].format(
            admission=ctx.admission_text,
            course_block=self._course_block(ctx),
            history_block=self._history_block(ctx),
            question=ctx.question_text,
            entities="、".join(entities),
        )
        return self.templates["backward.system"], user

    def render_reflect(
        self, ctx: AssembledContext, entities: tuple[str, ...],
        evidence: BackwardEvidence | None,
    ) -> tuple[str, str]:
        user = self.templates["reflect.user"].format(
            admission=ctx.admission_text,
            course_block=self._course_block(ctx),
            history_block=self._history_block(ctx),
            question=ctx.question_text,
            entities="、".join(entities),
            evidence_block=self._evidence_block(evidence),
        )
        return self.templates["reflect.system"], user

    def render_refine(
        self, ctx: AssembledContext, entities: tuple[str, ...],
        evidence: BackwardEvidence | None, verdict: ReflectionVerdict | None,
    ) -> tuple[str, str]:
        user = self.templates["refine.user"].format(
            admission=ctx.admission_text,
            course_block=self._course_block(ctx),
            history_block=self._history_block(ctx),
            question=ctx.question_text,
            entities="、".join(entities),
            evidence_block=self._evidence_block(evidence),
            verdict_block=self._verdict_block(verdict),
        )
        return self.templates["refine.system"], user


_default_prompts: PromptLibrary | None = None


def default_prompts() -> PromptLibrary:
    global _default_prompts
    if _default_prompts is None:
        _default_prompts = PromptLibrary()
    return _default_prompts


# --- stage operations ---------------------------------------------------------


def _with_location(exc: UnparseableOutput, ctx: AssembledContext) -> UnparseableOutput:
    return UnparseableOutput(
        exc.raw_text, exc.detail, record_id=ctx.record_id, question_id=ctx.question_id)


def forward_answer(
    ctx: AssembledContext,
    icl: list[IclExample],
    client,
    cfg: StageConfig,
    settings: RequestSettings = RequestSettings(),
    prompts: PromptLibrary | None = None,
    allow_repair: bool = True,
    stage: str = STAGE_FORWARD,
):
    """Answer one question forward; diagnosis questions parse to entity lists,
    criteria questions to criteria text. Regeneration reuses this op with the
    regen stage tag."""
    prompts = prompts or default_prompts()
    system, user = prompts.render_forward(ctx, icl)
    key = CallKey(ctx.record_id, stage, ctx.question_id)
    request = ChatRequest(
        system_text=system, user_text=user,
        model_name=settings.model_name, top_p=settings.top_p,
        max_output_tokens=settings.max_output_tokens)
    raw = client.complete(request, key).raw_text
    shape = "criteria" if ctx.question_id in CRITERIA_QUESTIONS else "diagnosis"
    try:
        return parse_constrained_json(raw, shape, allow_repair=allow_repair)
    except UnparseableOutput as exc:
        raise _with_location(exc, ctx) from exc


def backward_infer(
    answer: DiagnosisAnswer,
    ctx: AssembledContext,
    client,
    settings: RequestSettings = RequestSettings(),
    prompts: PromptLibrary | None = None,
    allow_repair: bool = True,
) -> BackwardEvidence:
    """Recall the representative characteristics of each diagnosed disease.
    The output must cover exactly the entities of the answer under review."""
    if not answer.entities:
        raise ValueError("backward inference needs at least one entity")
    prompts = prompts or default_prompts()
    system, user = prompts.render_backward(ctx, answer.entities)
    key = CallKey(ctx.record_id, STAGE_BACKWARD, ctx.question_id)
    request = ChatRequest(
        system_text=system, user_text=user,
        model_name=settings.model_name, top_p=settings.top_p,
        max_output_tokens=settings.max_output_tokens)
    raw = client.complete(request, key).raw_text
    try:
        return parse_constrained_json(
            raw, "evidence", expected_entities=answer.entities, allow_repair=allow_repair)
    except UnparseableOutput as exc:
        raise _with_location(exc, ctx) from exc


def reflect(
    answer: DiagnosisAnswer,
    evidence: BackwardEvidence | None,
    ctx: AssembledContext,
    client,
    settings: RequestSettings = RequestSettings(),
    prompts: PromptLibrary | None = None,
    allow_repair: bool = True,
) -> ReflectionVerdict:
    """Check each diagnosis against the record; one verdict per entity."""
    prompts = prompts or default_prompts()
    system, user = prompts.render_reflect(ctx, answer.entities, evidence)
    key = CallKey(ctx.record_id, STAGE_REFLECTION, ctx.question_id)
    request = ChatRequest(
        system_text=system, user_text=user,
        model_name=settings.model_name, top_p=settings.top_p,
        max_output_tokens=settings.max_output_tokens)
    raw = client.complete(request, key).raw_text
    try:
        return parse_constrained_json(
            raw, "verdict", expected_entities=answer.entities, allow_repair=allow_repair)
    except UnparseableOutput as exc:
        raise _with_location(exc, ctx) from exc


def refine(
    answer: DiagnosisAnswer,
    evidence: BackwardEvidence | None,
    verdict: ReflectionVerdict | None,
    ctx: AssembledContext,
    client,
    settings: RequestSettings = RequestSettings(),
    prompts: PromptLibrary | None = None,
    allow_repair: bool = True,
) -> DiagnosisAnswer:
    """Produce the optimized diagnosis list.

    Entities the verdict deleted must not reappear; any that do are dropped
    from the parsed output and logged.
    """
    prompts = prompts or default_prompts()
    system, user = prompts.render_refine(ctx, answer.entities, evidence, verdict)
    key = CallKey(ctx.record_id, STAGE_REFINEMENT, ctx.question_id)
    request = ChatRequest(
        system_text=system, user_text=user,
        model_name=settings.model_name, top_p=settings.top_p,
        max_output_tokens=settings.max_output_tokens)
    raw = client.complete(request, key).raw_text
    try:
        refined = parse_constrained_json(raw, "diagnosis", allow_repair=allow_repair)
    except UnparseableOutput as exc:
        raise _with_location(exc, ctx) from exc
    if verdict is not None:
        deleted = set(verdict.deleted())
        reappeared = [e for e in refined.entities if e in deleted]
        if reappeared:
            logger.warning(
                "%s/%s: refinement reintroduced deleted entities %s; dropping them",
                ctx.record_id, ctx.question_id, reappeared)
            refined = DiagnosisAnswer(
                entities=tuple(e for e in refined.entities if e not in deleted),
                rationale=refined.rationale,
                repaired=refined.repaired,
                raw_text=refined.raw_text,
            )
    return refined


def apply_verdict(answer: DiagnosisAnswer, verdict: ReflectionVerdict) -> DiagnosisAnswer:
    """Mechanical application of reflection verdicts, used when refinement is
    disabled: deletions drop the entity, revisions rename it in place."""
    entities: list[str] = []
    for entity in answer.entities:
        v = verdict.per_entity.get(entity, Verdict(action="keep"))
        if v.action == "delete":
            continue
        name = v.new_name if v.action == "revise" else entity
        if name and name not in entities:
            entities.append(name)
    return DiagnosisAnswer(entities=tuple(entities), rationale=answer.rationale)


# --- per-record run -----------------------------------------------------------


@dataclass
class Prediction:
    record_id: str
    question_id: str
    entities: tuple[str, ...] = ()
    criteria_text: str = ""
    stage: str = STAGE_FORWARD
    failed: bool = False
    raw_texts: dict[str, str] = field(default_factory=dict)


@dataclass
class RecordResult:
    record_id: str
    predictions: dict[str, Prediction]
    trace: list[CallKey]
    failures: list[dict]
    flags: list[dict]
    repaired_parses: int = 0

    @property
    def record_failed(self) -> bool:
        return bool(self.predictions) and all(p.failed for p in self.predictions.values())


def answer_text(answer) -> str:
    """Serialization of an answer as it appears in the dialogue history."""
    if isinstance(answer, DiagnosisAnswer):
        return "、".join(answer.entities)
    return answer.criteria_text


def _failed_record(
    bundle: RecordBundle, question_ids, failures, trace, flags, raw_texts,
) -> RecordResult:
    predictions = {
        qid: Prediction(bundle.record_id, qid, failed=True, raw_texts=raw_texts.get(qid, {}))
        for qid in question_ids
    }
    return RecordResult(
        record_id=bundle.record_id, predictions=predictions,
        trace=trace, failures=failures, flags=flags)


def run_record(
    bundle: RecordBundle,
    client,
    cfg: StageConfig,
    selector: IclSelector | None = None,
    question_ids: tuple[str, ...] | None = None,
    settings: RequestSettings = RequestSettings(),
    prompts: PromptLibrary | None = None,
    allow_repair: bool = True,
    include_raw: bool = False,
) -> RecordResult:
    """Run the full two-stage pipeline on one record.

    Per-question failures are recorded and the dialogue continues with an
    empty answer in the history; only a failure on the dialogue's first
    question (Q1 in the full protocol) fails the whole record, because every
    later question depends on the history.
    """
    prompts = prompts or default_prompts()
    qids = tuple(question_ids) if question_ids is not None else QUESTION_IDS
    state = initial_state(bundle, include_questions=qids)
    qids = tuple(q.question_id for q in state.questions)

    icl: list[IclExample] = []
    if cfg.use_icl and cfg.icl_k > 0 and selector is not None:
        icl = selector.select(bundle.admission, cfg.icl_k)

    trace: list[CallKey] = []
    failures: list[dict] = []
    flags: list[dict] = []
    repaired = 0
    contexts: dict[str, AssembledContext] = {}
    forward: dict[str, object] = {}
    final: dict[str, object] = {}
    stage_of: dict[str, str] = {}
    failed_qids: set[str] = set()
    raw_texts: dict[str, dict[str, str]] = {qid: {} for qid in qids}

    def call_and_track(fn, stage: str, qid: str):
        nonlocal repaired
        result = fn()
        trace.append(CallKey(bundle.record_id, stage, qid))
        if getattr(result, "repaired", False):
            repaired += 1
        return result

    # Stage 1: the dialogue, forward only.
    while True:
        question = next_question(state)
        if question is None:
            break
        qid = question.question_id
        ctx = assemble_context(state, question)
        contexts[qid] = ctx
        try:
            answer = call_and_track(
                lambda ctx=ctx: forward_answer(
                    ctx, icl, client, cfg, settings=settings, prompts=prompts,
                    allow_repair=allow_repair),
                STAGE_FORWARD, qid)
        except (UnparseableOutput, ClientError) as exc:
            failures.append({
                "record_id": bundle.record_id, "question_id": qid,
                "stage": STAGE_FORWARD, "error": type(exc).__name__,
                "detail": str(exc),
            })
            if include_raw and isinstance(exc, UnparseableOutput):
                raw_texts[qid][STAGE_FORWARD] = exc.raw_text
            if qid == qids[0]:
                return _failed_record(bundle, qids, failures, trace, flags, raw_texts)
            failed_qids.add(qid)
            state = record_answer(state, question, "")
            continue
        if include_raw:
            raw_texts[qid][STAGE_FORWARD] = answer.raw_text
        forward[qid] = answer
        final[qid] = answer
        stage_of[qid] = STAGE_FORWARD
        state = record_answer(state, question, answer_text(answer))

    # Stage 2: backward inference, reflection, refinement on the targets.
    stage2_targets = cfg.stage2_targets if cfg.stage2_enabled() else ()
    for target in stage2_targets:
        if target not in qids or target in failed_qids:
            continue
        current: DiagnosisAnswer = forward[target]
        if not current.entities:
            flags.append({"record_id": bundle.record_id, "question_id": target,
                          "flag": "stage2_skipped_empty_forward"})
            continue
        ctx = contexts[target]
        evidence = verdict = None
        try:
            if cfg.backward_on:
                evidence = call_and_track(
                    lambda: backward_infer(
                        current, ctx, client, settings=settings, prompts=prompts,
                        allow_repair=allow_repair),
                    STAGE_BACKWARD, target)
                if include_raw:
                    raw_texts[target][STAGE_BACKWARD] = evidence.raw_text
            if cfg.reflection_on:
                verdict = call_and_track(
                    lambda: reflect(
                        current, evidence, ctx, client, settings=settings,
                        prompts=prompts, allow_repair=allow_repair),
                    STAGE_REFLECTION, target)
                if include_raw:
                    raw_texts[target][STAGE_REFLECTION] = verdict.raw_text
            if cfg.refinement_on:
                refined = call_and_track(
                    lambda: refine(
                        current, evidence, verdict, ctx, client, settings=settings,
                        prompts=prompts, allow_repair=allow_repair),
                    STAGE_REFINEMENT, target)
                if include_raw:
                    raw_texts[target][STAGE_REFINEMENT] = refined.raw_text
                final[target] = refined
                stage_of[target] = "refined"
            elif cfg.reflection_on:
                final[target] = apply_verdict(current, verdict)
                stage_of[target] = "reflected"
        except (UnparseableOutput, ClientError) as exc:
            failures.append({
                "record_id": bundle.record_id, "question_id": target,
                "stage": _stage_of_exception(exc, cfg, evidence, verdict),
                "error": type(exc).__name__, "detail": str(exc),
            })
            final[target] = current
            stage_of[target] = STAGE_FORWARD
            continue
        if forward[target].entities and not final[target].entities:
            flags.append({"record_id": bundle.record_id, "question_id": target,
                          "flag": "all_entities_deleted"})

    # Criteria regeneration when the paired diagnosis changed.
    final_text: dict[str, str] = {
        qid: answer_text(final[qid]) if qid not in failed_qids else ""
        for qid in qids
    }
    for diag, crit in CRITERIA_OF_DIAGNOSIS.items():
        if not (cfg.regenerate_criteria and cfg.can_change_entities()):
            continue
        if diag not in cfg.stage2_targets or diag not in qids or crit not in qids:
            continue
        if diag in failed_qids:
            continue
        changed = set(final[diag].entities) != set(forward[diag].entities)
        if not changed:
            continue
        rebuilt = initial_state(bundle, include_questions=qids)
        for q in rebuilt.questions:
            if q.question_id == crit:
                break
            rebuilt = record_answer(rebuilt, q, final_text[q.question_id])
        crit_question = next_question(rebuilt)
        ctx = assemble_context(rebuilt, crit_question)
        try:
            regenerated = call_and_track(
                lambda: forward_answer(
                    ctx, icl, client, cfg, settings=settings, prompts=prompts,
                    allow_repair=allow_repair, stage=STAGE_REGEN),
                STAGE_REGEN, crit)
        except (UnparseableOutput, ClientError) as exc:
            failures.append({
                "record_id": bundle.record_id, "question_id": crit,
                "stage": STAGE_REGEN, "error": type(exc).__name__, "detail": str(exc),
            })
            continue
        if include_raw:
            raw_texts[crit][STAGE_REGEN] = regenerated.raw_text
        final[crit] = regenerated
        stage_of[crit] = STAGE_REGEN
        final_text[crit] = answer_text(regenerated)
        failed_qids.discard(crit)

    predictions: dict[str, Prediction] = {}
    for qid in qids:
        if qid in failed_qids or qid not in final:
            predictions[qid] = Prediction(
                bundle.record_id, qid, failed=True, raw_texts=raw_texts[qid])
            continue
        answer = final[qid]
        if isinstance(answer, DiagnosisAnswer):
            predictions[qid] = Prediction(
                bundle.record_id, qid, entities=answer.entities,
                stage=stage_of[qid], raw_texts=raw_texts[qid])
        else:
            predictions[qid] = Prediction(
                bundle.record_id, qid, criteria_text=answer.criteria_text,
                stage=stage_of[qid], raw_texts=raw_texts[qid])
    return RecordResult(
        record_id=bundle.record_id, predictions=predictions, trace=trace,
        failures=failures, flags=flags, repaired_parses=repaired)


def _stage_of_exception(exc, cfg, evidence, verdict) -> str:
    # reconstruct which stage-2 step was in flight when the failure happened
    if cfg.backward_on and evidence is None:
        return STAGE_BACKWARD
    if cfg.reflection_on and verdict is None:
        return STAGE_REFLECTION
    return STAGE_REFINEMENT


# --- call planning --------------------------------------------------------------


def planned_calls(
    cfg: StageConfig,
    question_ids: tuple[str, ...] = QUESTION_IDS,
    changed: dict[str, bool] | None = None,
) -> list[tuple[str, str]]:
    """The exact (stage, question_id) sequence a clean record produces.

    ``changed`` says whether the final Q1/Q4 diagnosis differs from the
    forward one; None assumes every possible change happens, which is the
    upper bound used for script coverage checks.
    """
    calls = [(STAGE_FORWARD, qid) for qid in question_ids]
    for target in cfg.stage2_targets:
        if target not in question_ids:
            continue
        if cfg.backward_on:
            calls.append((STAGE_BACKWARD, target))
        if cfg.reflection_on:
            calls.append((STAGE_REFLECTION, target))
        if cfg.refinement_on:
            calls.append((STAGE_REFINEMENT, target))
    if cfg.regenerate_criteria and cfg.can_change_entities():
        for diag, crit in CRITERIA_OF_DIAGNOSIS.items():
            if diag not in cfg.stage2_targets or diag not in question_ids:
                continue
            if crit not in question_ids:
                continue
            if changed is None or changed.get(diag, False):
                calls.append((STAGE_REGEN, crit))
    return calls


def planned_keys(
    cfg: StageConfig,
    record_id: str,
    question_ids: tuple[str, ...] = QUESTION_IDS,
    changed: dict[str, bool] | None = None,
) -> list[CallKey]:
    return [
        CallKey(record_id, stage, qid)
        for stage, qid in planned_calls(cfg, question_ids, changed)
    ]


def check_script_coverage(
    split: DatasetSplit,
    client: MockLLMClient,
    cfg: StageConfig,
    question_ids: tuple[str, ...] = QUESTION_IDS,
) -> None:
    """Fail fast when a scripted mock is missing keys the run may request.

    Regeneration keys are required whenever regeneration is possible, even
    though a particular script may leave the diagnosis unchanged.
    """
    if client.script.mode != "scripted":
        return
    missing = []
    for bundle in split.records:
        for key in planned_keys(cfg, bundle.record_id, question_ids):
            if key not in client.script.entries:
                missing.append(key.as_string())
    if missing:
        preview = ", ".join(missing[:5])
        raise MockScriptError(
            f"scripted mock is missing {len(missing)} entries (first: {preview})")


# --- split-level run -------------------------------------------------------------


@dataclass
class RunResult:
    split_name: str
    cfg: StageConfig
    question_ids: tuple[str, ...]
    results: list[RecordResult]

    def predictions(self) -> list[Prediction]:
        rows = []
        for result in self.results:
            for qid in self.question_ids:
                if qid in result.predictions:
                    rows.append(result.predictions[qid])
        return rows

    def call_trace(self) -> list[CallKey]:
        """Canonical trace: per-record call order, records in dataset order."""
        keys = []
        for result in self.results:
            keys.extend(result.trace)
        return keys

    def run_log(self) -> dict:
        failures = [f for r in self.results for f in r.failures]
        flags = [f for r in self.results for f in r.flags]
        return {
            "split": self.split_name,
            "question_ids": list(self.question_ids),
            "records": len(self.results),
            "failed_records": [r.record_id for r in self.results if r.record_failed],
            "question_failures": failures,
            "flags": flags,
            "repaired_parses": sum(r.repaired_parses for r in self.results),
            "trace_length": len(self.call_trace()),
        }


def run_split(
    split: DatasetSplit,
    client,
    cfg: StageConfig,
    pool: DatasetSplit | None = None,
    provider=None,
    question_ids: tuple[str, ...] | None = None,
    settings: RequestSettings = RequestSettings(),
    prompts: PromptLibrary | None = None,
    allow_repair: bool = True,
    include_raw: bool = False,
    concurrency: int = 1,
) -> RunResult:
    """Run every record of a split. Records are independent; concurrency > 1
    fans them out across a thread pool. Results always come back in dataset
    order, so mock-mode outputs are identical at any concurrency."""
    if concurrency < 1:
        raise ConfigError("concurrency must be >= 1")
    qids = tuple(question_ids) if question_ids is not None else QUESTION_IDS
    selector = None
    if cfg.use_icl and cfg.icl_k > 0:
        if pool is None or provider is None:
            raise ConfigError("use_icl needs an example pool and an embedding provider")
        selector = IclSelector(pool, provider)
    if isinstance(client, MockLLMClient):
        check_script_coverage(split, client, cfg, qids)
    prompts = prompts or default_prompts()

    def one(bundle: RecordBundle) -> RecordResult:
        return run_record(
            bundle, client, cfg, selector=selector, question_ids=qids,
            settings=settings, prompts=prompts, allow_repair=allow_repair,
            include_raw=include_raw)

    if concurrency == 1:
        results = [one(bundle) for bundle in split.records]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool_exec:
            results = list(pool_exec.map(one, split.records))
    return RunResult(split_name=split.name, cfg=cfg, question_ids=qids, results=results)


# --- artifact writers -------------------------------------------------------------


def write_predictions(run: RunResult, path: str | Path, include_raw: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for pred in run.predictions():
            obj = {
                "record_id": pred.record_id,
                "question_id": pred.question_id,
                "entities": list(pred.entities),
                "criteria_text": pred.criteria_text,
                "stage": pred.stage,
                "failed": pred.failed,
            }
            if include_raw and pred.raw_texts:
                obj["raw_texts"] = dict(pred.raw_texts)
            fh.write(json.dumps(obj, ensure_ascii=False))
            fh.write("\n")


def write_trace(run: RunResult, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for key in run.call_trace():
            fh.write(json.dumps({
                "record_id": key.record_id,
                "stage": key.stage,
                "question_id": key.question_id,
            }, ensure_ascii=False))
            fh.write("\n")


def write_run_log(run: RunResult, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run.run_log(), fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
