"""Dataset types, JSONL loading/saving, validation, and synthetic fixtures.

A dataset file holds one JSON object per line, one per clinical record.
Field-by-field schema documentation lives in docs/formats.md at the repo
root. All free text is normalized at load time: surrounding whitespace is
trimmed, internal whitespace runs collapse to a single space, and ASCII
letters are lowercased (CJK text is never case-folded).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import (
    DuplicateRecordId,
    MalformedLine,
    MissingField,
    QuestionSetIncomplete,
)
from .textnorm import normalize_text

QUESTION_IDS = ("Q1", "Q2", "Q3", "Q4", "Q5")

# Fixed protocol mapping: rounds 1..3 reveal the questions in this order and
# the hospital course becomes visible only in round 3.
ROUND_OF_QUESTION = {"Q1": "R1", "Q2": "R1", "Q3": "R2", "Q4": "R3", "Q5": "R3"}
ROUNDS = ("R1", "R2", "R3")

# Q1 asks for the primary diagnosis, Q3 the differential list, Q4 the final
# diagnosis; Q2/Q5 ask for the criteria supporting Q1/Q4 respectively.
DIAGNOSIS_QUESTIONS = ("Q1", "Q3", "Q4")
CRITERIA_QUESTIONS = ("Q2", "Q5")
CRITERIA_OF_DIAGNOSIS = {"Q1": "Q2", "Q4": "Q5"}

KEY_POINT_CATEGORIES = ("medical_history", "symptoms", "physical_signs", "exam_results")

SPLIT_NAMES = ("train", "dev", "test")

BUNDLED_ICD_PATH = Path(__file__).parent / "data" / "icd_fixture.tsv"

# The five admission text fields, in schema order. Retrieval embeds their
# concatenation and prompts render them in this order.
ADMISSION_TEXT_FIELDS = (
    "chief_complaint",
    "present_history",
    "past_history",
    "physical_exam",
    "lab_aided_exam",
)


@dataclass(frozen=True)
class AdmissionRecord:
    """Structured admission note; the examiner's round-1 disclosure."""

    record_id: str
    department: str
    chief_complaint: str
    present_history: str
    past_history: str
    physical_exam: str
    lab_aided_exam: str


@dataclass(frozen=True)
class HospitalCourse:
    """In-hospital course text, revealed to the candidate only in round 3."""

    record_id: str
    course_text: str


@dataclass(frozen=True)
class QuestionInstance:
    question_id: str
    surface_text: str

    @property
    def round(self) -> str:
        return ROUND_OF_QUESTION[self.question_id]


@dataclass(frozen=True)
class KeyPointSet:
    """Annotated key points backing a criteria answer, by category."""

    medical_history: tuple[str, ...] = ()
    symptoms: tuple[str, ...] = ()
    physical_signs: tuple[str, ...] = ()
    exam_results: tuple[str, ...] = ()

    def by_category(self) -> dict[str, tuple[str, ...]]:
        return {name: getattr(self, name) for name in KEY_POINT_CATEGORIES}

    def total_points(self) -> int:
        return sum(len(v) for v in self.by_category().values())


@dataclass(frozen=True)
class ReferenceAnswer:
    """Gold answer for one question of one record.

    Diagnosis questions (Q1/Q3/Q4) carry entities and no criteria text;
    criteria questions (Q2/Q5) carry criteria text plus key points and no
    entities.
    """

    record_id: str
    question_id: str
    entities: tuple[str, ...] = ()
    criteria_text: str = ""
    key_points: KeyPointSet | None = None


@dataclass(frozen=True)
class RecordBundle:
    admission: AdmissionRecord
    course: HospitalCourse
    questions: tuple[QuestionInstance, ...]
    answers: tuple[ReferenceAnswer, ...]

    @property
    def record_id(self) -> str:
        return self.admission.record_id

    def question(self, question_id: str) -> QuestionInstance:
        for q in self.questions:
            if q.question_id == question_id:
                return q
        raise KeyError(question_id)

    def answer(self, question_id: str) -> ReferenceAnswer:
        for a in self.answers:
            if a.question_id == question_id:
                return a
        raise KeyError(question_id)


@dataclass(frozen=True)
class Violation:
    """One invariant breach found by validate_split."""

    record_id: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.record_id}: {self.field}: {self.message}"


@dataclass
class DatasetSplit:
    name: str
    records: list[RecordBundle] = field(default_factory=list)

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ValueError(f"split name must be one of {SPLIT_NAMES}, got {self.name!r}")

    def record_ids(self) -> list[str]:
        return [r.record_id for r in self.records]

    def by_id(self, record_id: str) -> RecordBundle:
        for r in self.records:
            if r.record_id == record_id:
                return r
        raise KeyError(record_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return self.name == other.name and self.records == other.records


# --- loading ----------------------------------------------------------------


def _require(obj: dict, key: str, record_id: str) -> object:
    if key not in obj:
        raise MissingField(record_id, key)
    return obj[key]


def _require_text(obj: dict, key: str, record_id: str, allow_empty: bool = False) -> str:
    value = _require(obj, key, record_id)
    if not isinstance(value, str):
        raise MissingField(record_id, key)
    normalized = normalize_text(value)
    if not normalized and not allow_empty:
        raise MissingField(record_id, key)
    return normalized


def _parse_key_points(obj: dict, record_id: str) -> KeyPointSet:
    cats = {}
    for name in KEY_POINT_CATEGORIES:
        raw = obj.get(name, [])
        if not isinstance(raw, list) or any(not isinstance(s, str) for s in raw):
            raise MissingField(record_id, f"key_points.{name}")
        spans = tuple(normalize_text(s) for s in raw)
        if any(not s for s in spans):
            raise MissingField(record_id, f"key_points.{name}")
        cats[name] = spans
    unknown = set(obj) - set(KEY_POINT_CATEGORIES)
    if unknown:
        raise MissingField(record_id, f"key_points.{sorted(unknown)[0]}")
    return KeyPointSet(**cats)


def _parse_record(obj: dict, line_no: int) -> RecordBundle:
    if not isinstance(obj, dict):
        raise MalformedLine(line_no, "record is not a JSON object")
    record_id = obj.get("record_id")
    if not isinstance(record_id, str) or not record_id.strip():
        raise MalformedLine(line_no, "missing or empty record_id")
    record_id = normalize_text(record_id)

    admission = AdmissionRecord(
        record_id=record_id,
        department=_require_text(obj, "department", record_id, allow_empty=True),
        chief_complaint=_require_text(obj, "chief_complaint", record_id),
        present_history=_require_text(obj, "present_history", record_id),
        past_history=_require_text(obj, "past_history", record_id, allow_empty=True),
        physical_exam=_require_text(obj, "physical_exam", record_id),
        lab_aided_exam=_require_text(obj, "lab_aided_exam", record_id, allow_empty=True),
    )
    course = HospitalCourse(
        record_id=record_id,
        course_text=_require_text(obj, "hospital_course", record_id),
    )

    raw_questions = _require(obj, "questions", record_id)
    if not isinstance(raw_questions, list):
        raise MissingField(record_id, "questions")
    questions = []
    for q in raw_questions:
        if not isinstance(q, dict) or "question_id" not in q:
            raise QuestionSetIncomplete(record_id, "question entry without question_id")
        qid = q["question_id"]
        if qid not in QUESTION_IDS:
            raise QuestionSetIncomplete(record_id, f"unknown question_id {qid!r}")
        if "round" in q and q["round"] != ROUND_OF_QUESTION[qid]:
            raise MalformedLine(line_no, f"{record_id}: {qid} assigned to round {q['round']!r}")
        questions.append(QuestionInstance(
            question_id=qid,
            surface_text=_require_text(q, "surface_text", record_id),
        ))
    if [q.question_id for q in questions] != list(QUESTION_IDS):
        raise QuestionSetIncomplete(
            record_id, f"questions must be exactly {QUESTION_IDS} in order")

    raw_answers = _require(obj, "answers", record_id)
    if not isinstance(raw_answers, list):
        raise MissingField(record_id, "answers")
    answers = []
    for a in raw_answers:
        if not isinstance(a, dict) or "question_id" not in a:
            raise QuestionSetIncomplete(record_id, "answer entry without question_id")
        qid = a["question_id"]
        if qid not in QUESTION_IDS:
            raise QuestionSetIncomplete(record_id, f"unknown answer question_id {qid!r}")
        raw_entities = a.get("entities", [])
        if not isinstance(raw_entities, list) or any(not isinstance(e, str) for e in raw_entities):
            raise MissingField(record_id, f"answers.{qid}.entities")
        entities = tuple(normalize_text(e) for e in raw_entities)
        criteria_text = normalize_text(a.get("criteria_text", "") or "")
        key_points = None
        if a.get("key_points") is not None:
            if not isinstance(a["key_points"], dict):
                raise MissingField(record_id, f"answers.{qid}.key_points")
            key_points = _parse_key_points(a["key_points"], record_id)
        answers.append(ReferenceAnswer(
            record_id=record_id,
            question_id=qid,
            entities=entities,
            criteria_text=criteria_text,
            key_points=key_points,
        ))
    if [a.question_id for a in answers] != list(QUESTION_IDS):
        raise QuestionSetIncomplete(
            record_id, f"answers must cover exactly {QUESTION_IDS} in order")

    bundle = RecordBundle(
        admission=admission,
        course=course,
        questions=tuple(questions),
        answers=tuple(answers),
    )
    _check_answer_shapes(bundle, line_no)
    return bundle


def _check_answer_shapes(bundle: RecordBundle, line_no: int) -> None:
    rid = bundle.record_id
    for ans in bundle.answers:
        qid = ans.question_id
        if qid in DIAGNOSIS_QUESTIONS:
            if not ans.entities or any(not e for e in ans.entities):
                raise MissingField(rid, f"answers.{qid}.entities")
            if ans.criteria_text:
                raise MalformedLine(line_no, f"{rid}: {qid} answer carries criteria_text")
            if ans.key_points is not None:
                raise MalformedLine(line_no, f"{rid}: {qid} answer carries key_points")
        else:
            if ans.entities:
                raise MalformedLine(line_no, f"{rid}: {qid} answer carries entities")
            if not ans.criteria_text:
                raise MissingField(rid, f"answers.{qid}.criteria_text")
            if ans.key_points is None:
                raise MissingField(rid, f"answers.{qid}.key_points")


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (line_no, parsed object) for each non-blank line of a JSONL file."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, f"invalid JSON: {exc.msg}") from exc


def load_split(path: str | Path, name: str) -> DatasetSplit:
    """Load and strictly check one dataset file.

    Raises MalformedLine / MissingField / DuplicateRecordId /
    QuestionSetIncomplete on the first violation found.
    """
    records: list[RecordBundle] = []
    seen: set[str] = set()
    for line_no, obj in iter_jsonl(path):
        bundle = _parse_record(obj, line_no)
        if bundle.record_id in seen:
            raise DuplicateRecordId(bundle.record_id)
        seen.add(bundle.record_id)
        records.append(bundle)
    return DatasetSplit(name=name, records=records)


# --- validation -------------------------------------------------------------


def validate_split(split: DatasetSplit) -> list[Violation]:
    """Check every schema invariant on an in-memory split.

    Returns an empty list iff the split is clean; otherwise one Violation per
    breach, naming the record and field.
    """
    violations: list[Violation] = []
    seen: set[str] = set()

    def bad(rid: str, fieldname: str, message: str) -> None:
        violations.append(Violation(rid, fieldname, message))

    for bundle in split.records:
        rid = bundle.record_id
        if not rid:
            bad("?", "record_id", "empty record_id")
            continue
        if rid in seen:
            bad(rid, "record_id", "duplicate record_id")
        seen.add(rid)

        adm = bundle.admission
        for fieldname in ("chief_complaint", "present_history", "physical_exam"):
            if not getattr(adm, fieldname).strip():
                bad(rid, fieldname, "required admission field is empty")
        if bundle.course.record_id != rid:
            bad(rid, "hospital_course", "course attached to a different record")
        if not bundle.course.course_text.strip():
            bad(rid, "hospital_course", "course text is empty")

        qids = [q.question_id for q in bundle.questions]
        if qids != list(QUESTION_IDS):
            bad(rid, "questions", f"expected exactly {QUESTION_IDS}, got {qids}")
        for q in bundle.questions:
            if not q.surface_text.strip():
                bad(rid, f"questions.{q.question_id}", "empty surface_text")

        aids = [a.question_id for a in bundle.answers]
        if aids != list(QUESTION_IDS):
            bad(rid, "answers", f"expected answers for exactly {QUESTION_IDS}, got {aids}")
            continue
        for ans in bundle.answers:
            qid = ans.question_id
            if ans.record_id != rid:
                bad(rid, f"answers.{qid}", "answer attached to a different record")
            if qid in DIAGNOSIS_QUESTIONS:
                if not ans.entities:
                    bad(rid, f"answers.{qid}.entities", "diagnosis answer needs >= 1 entity")
                if any(not e.strip() for e in ans.entities):
                    bad(rid, f"answers.{qid}.entities", "empty entity string")
                if ans.criteria_text:
                    bad(rid, f"answers.{qid}.criteria_text",
                        "diagnosis answer must not carry criteria text")
                if ans.key_points is not None:
                    bad(rid, f"answers.{qid}.key_points",
                        "key points belong to criteria questions only")
            else:
                if ans.entities:
                    bad(rid, f"answers.{qid}.entities",
                        "criteria answer must not carry entities")
                if not ans.criteria_text.strip():
                    bad(rid, f"answers.{qid}.criteria_text", "criteria answer needs text")
                if ans.key_points is None:
                    bad(rid, f"answers.{qid}.key_points", "criteria answer needs key points")
                else:
                    for cat, spans in ans.key_points.by_category().items():
                        if any(not s.strip() or s != s.strip() for s in spans):
                            bad(rid, f"answers.{qid}.key_points.{cat}",
                                "key point spans must be nonempty trimmed strings")
    return violations


# --- saving -----------------------------------------------------------------


def record_to_obj(bundle: RecordBundle) -> dict:
    adm = bundle.admission
    obj: dict = {
        "record_id": adm.record_id,
        "department": adm.department,
        "chief_complaint": adm.chief_complaint,
        "present_history": adm.present_history,
        "past_history": adm.past_history,
        "physical_exam": adm.physical_exam,
        "lab_aided_exam": adm.lab_aided_exam,
        "hospital_course": bundle.course.course_text,
        "questions": [
            {"question_id": q.question_id, "surface_text": q.surface_text}
            for q in bundle.questions
        ],
        "answers": [],
    }
    for ans in bundle.answers:
        entry: dict = {"question_id": ans.question_id}
        if ans.question_id in DIAGNOSIS_QUESTIONS:
            entry["entities"] = list(ans.entities)
        else:
            entry["criteria_text"] = ans.criteria_text
            entry["key_points"] = {
                cat: list(spans) for cat, spans in ans.key_points.by_category().items()
            }
        obj["answers"].append(entry)
    return obj


def write_split(split: DatasetSplit, path: str | Path) -> None:
    """Serialize a split to JSONL. Output bytes are a pure function of the split."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for bundle in split.records:
            fh.write(json.dumps(record_to_obj(bundle), ensure_ascii=False))
            fh.write("\n")


# --- synthetic fixtures -----------------------------------------------------

_DEPARTMENTS = (
    "呼吸内科", "消化内科", "心血管内科", "普外科", "神经内科",
    "内分泌科", "泌尿外科", "骨科", "皮肤科", "急诊科",
)

_SYMPTOM_SPANS = (
    "发热伴咳嗽咳痰", "反复腹痛伴恶心", "头晕乏力", "胸闷气短",
    "腰部酸痛", "尿频尿急尿痛", "皮肤瘙痒伴风团", "咽痛流涕",
    "反酸嗳气", "心悸不适", "右耳疼痛伴听力下降", "搏动性头痛",
)

_HISTORY_SPANS = (
    "既往体健", "高血压病史5年", "2型糖尿病病史3年", "有吸烟史10年",
    "阑尾切除术后2年", "慢性胃炎病史", "否认肝炎结核病史", "青霉素过敏史",
)

_SIGN_SPANS = (
    "体温38.2摄氏度", "右下腹压痛反跳痛", "双肺呼吸音粗可闻及湿啰音",
    "心律不齐第一心音强弱不等", "咽部充血扁桃体肿大", "腹软无明显压痛",
    "双下肢无水肿", "腰椎旁压痛", "皮肤可见散在风团", "甲状腺2度肿大",
)

_EXAM_SPANS = (
    "白细胞计数升高", "血红蛋白降低", "腹部b超示胆囊结石", "心电图示窦性心律不齐",
    "胸部x线示斑片状阴影", "尿常规示白细胞阳性", "头颅ct示低密度灶",
    "空腹血糖升高", "甲状腺功能示t3t4升高", "泌尿系b超示肾结石",
)

_Q_SURFACES = {
    "Q1": (
        "患者的初步诊断是什么？",
        "请给出该患者的初步诊断。",
        "根据入院记录，患者最可能的初步诊断是什么？",
    ),
    "Q2": (
        "初步诊断的诊断依据是什么？",
        "请说明做出初步诊断的依据。",
    ),
    "Q3": (
        "患者的鉴别诊断有哪些？",
        "该患者需要与哪些疾病进行鉴别？",
    ),
    "Q4": (
        "患者的最终诊断是什么？",
        "结合住院经过，患者的最终诊断是什么？",
    ),
    "Q5": (
        "最终诊断的诊断依据是什么？",
        "请说明做出最终诊断的依据。",
    ),
}


def bundled_icd_terms() -> list[str]:
    """Disease names from the bundled ICD fixture table, in file order."""
    terms = []
    for line in BUNDLED_ICD_PATH.read_text(encoding="utf-8").splitlines():
        if line.strip():
            _, term = line.split("\t", 1)
            terms.append(normalize_text(term))
    return terms


def _sample_key_points(rng: random.Random, symptom: str) -> KeyPointSet:
    # The symptom complaint always contributes a point; other categories may
    # be empty so the empty-category exclusion rule gets exercised.
    return KeyPointSet(
        medical_history=(rng.choice(_HISTORY_SPANS),) if rng.random() < 0.8 else (),
        symptoms=(symptom,),
        physical_signs=tuple(rng.sample(_SIGN_SPANS, rng.randint(1, 2))),
        exam_results=tuple(rng.sample(_EXAM_SPANS, rng.randint(0, 2))),
    )


def _criteria_from_points(points: KeyPointSet, diseases: tuple[str, ...]) -> str:
    spans = [s for cat in KEY_POINT_CATEGORIES for s in getattr(points, cat)]
    return "患者" + "，".join(spans) + "，符合" + "、".join(diseases) + "的诊断。"


def generate_fixtures(seed: int, n: int, name: str = "test") -> DatasetSplit:
    """Build a deterministic synthetic split of n records.

    Entities are drawn from the bundled ICD fixture table so standardization
    maps them to known codes. About half the records change diagnosis between
    admission and discharge (final differs from primary). The hospital course
    of each record embeds the marker "[病程<record_id>]" so tests can check
    where course text leaks into prompts.
    """
    rng = random.Random(seed)
    diseases = bundled_icd_terms()
    records = []
    for i in range(n):
        rid = f"syn-{seed}-{i:04d}"
        primary = tuple(rng.sample(diseases, rng.randint(1, 2)))
        rest = [d for d in diseases if d not in primary]
        differential = tuple(rng.sample(rest, rng.randint(2, 3)))

        if rng.random() < 0.5:
            final = primary
        else:
            pool = [d for d in rest if d not in differential]
            kind = rng.choice(("add", "replace")) if len(primary) == 1 else \
                rng.choice(("add", "replace", "remove"))
            if kind == "add":
                final = primary + (rng.choice(pool),)
            elif kind == "replace":
                final = tuple(list(primary[:-1]) + [rng.choice(pool)])
            else:
                final = primary[:-1]

        symptom = rng.choice(_SYMPTOM_SPANS)
        duration = rng.randint(1, 14)
        chief = f"{symptom}{duration}天"
        admission = AdmissionRecord(
            record_id=rid,
            department=rng.choice(_DEPARTMENTS),
            chief_complaint=chief,
            present_history=(
                f"患者{duration}天前无明显诱因出现{symptom}，症状逐渐加重，"
                f"于门诊就诊后收入院。"
            ),
            past_history=rng.choice(_HISTORY_SPANS) + "。",
            physical_exam="，".join(rng.sample(_SIGN_SPANS, 2)) + "。",
            lab_aided_exam="，".join(rng.sample(_EXAM_SPANS, 2)) + "。",
        )
        course = HospitalCourse(
            record_id=rid,
            course_text=(
                f"[病程{rid}]入院后完善相关检查，予对症支持治疗，"
                f"患者症状好转，复查指标改善后出院。"
            ),
        )
        questions = tuple(
            QuestionInstance(qid, rng.choice(_Q_SURFACES[qid])) for qid in QUESTION_IDS
        )
        kp2 = _sample_key_points(rng, symptom)
        kp5 = _sample_key_points(rng, symptom)
        answers = (
            ReferenceAnswer(rid, "Q1", entities=primary),
            ReferenceAnswer(rid, "Q2", criteria_text=_criteria_from_points(kp2, primary),
                            key_points=kp2),
            ReferenceAnswer(rid, "Q3", entities=differential),
            ReferenceAnswer(rid, "Q4", entities=final),
            ReferenceAnswer(rid, "Q5", criteria_text=_criteria_from_points(kp5, final),
                            key_points=kp5),
        )
        records.append(RecordBundle(admission, course, questions, answers))
    return DatasetSplit(name=name, records=records)
