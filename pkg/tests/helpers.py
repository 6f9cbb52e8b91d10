"""Shared builders for the test suite: fake HTTP sessions, scripted mock
scripts that force diagnosis changes, and the malformed-output corpus."""

import json

from wardround.dataset import CRITERIA_OF_DIAGNOSIS, QUESTION_IDS, DatasetSplit
from wardround.llm_client import (
    STAGE_BACKWARD,
    STAGE_FORWARD,
    STAGE_REFINEMENT,
    STAGE_REFLECTION,
    STAGE_REGEN,
    CallKey,
    MockScript,
    render_criteria_json,
    render_diagnosis_json,
    render_evidence_json,
    render_verdict_json,
)
from wardround.pipeline import StageConfig

# --- fake HTTP layer ---------------------------------------------------------


def chat_payload(text: str) -> dict:
    return {"choices": [{"message": {"content": text}}]}


class FakeResponse:
    def __init__(self, status_code: int, payload=None, text: str = ""):
        self.status_code = status_code
        self._payload = payload
        self.text = text or (json.dumps(payload, ensure_ascii=False) if payload else "")

    def json(self):
        if self._payload is None:
            raise ValueError("response body is not JSON")
        return self._payload


class FakeSession:
    """Scripted stand-in for requests.Session; records every post call."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({
            "url": url, "json": json, "headers": headers, "timeout": timeout,
        })
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


class RecordingSleep:
    def __init__(self):
        self.naps = []

    def __call__(self, seconds):
        self.naps.append(seconds)


# --- scripted mocks ------------------------------------------------------------


def change_script(
    split: DatasetSplit,
    cfg: StageConfig = StageConfig(),
    question_ids: tuple = QUESTION_IDS,
) -> MockScript:
    """A scripted mock where reflection deletes each record's first entity and
    refinement echoes the reduced list, so every stage-2 target changes and
    the Q2/Q5 regenerations fire."""
    entries: dict[CallKey, str] = {}
    for bundle in split.records:
        rid = bundle.record_id
        for qid in question_ids:
            answer = bundle.answer(qid)
            if qid in ("Q2", "Q5"):
                entries[CallKey(rid, STAGE_FORWARD, qid)] = render_criteria_json(
                    answer.criteria_text)
            else:
                entries[CallKey(rid, STAGE_FORWARD, qid)] = render_diagnosis_json(
                    answer.entities)
        for target in cfg.stage2_targets:
            if target not in question_ids:
                continue
            entities = bundle.answer(target).entities
            entries[CallKey(rid, STAGE_BACKWARD, target)] = render_evidence_json(
                {e: {"symptoms": "见病历"} for e in entities})
            verdicts = {e: {"action": "keep"} for e in entities}
            verdicts[entities[0]] = {"action": "delete", "reason": "与病历不符"}
            entries[CallKey(rid, STAGE_REFLECTION, target)] = render_verdict_json(verdicts)
            entries[CallKey(rid, STAGE_REFINEMENT, target)] = render_diagnosis_json(
                entities[1:])
        for diag, crit in CRITERIA_OF_DIAGNOSIS.items():
            if diag in cfg.stage2_targets and diag in question_ids and crit in question_ids:
                entries[CallKey(rid, STAGE_REGEN, crit)] = render_criteria_json(
                    "修订依据：" + bundle.answer(crit).criteria_text)
    return MockScript(mode="scripted", entries=entries)


def script_to_file(script: MockScript, path) -> None:
    obj = {
        "mode": script.mode,
        "entries": {k.as_string(): v for k, v in script.entries.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=1)


# --- malformed-output corpus -----------------------------------------------------
# Each recoverable item: (name, raw_text, shape, expected_entities).
# Each must fail a strict json.loads-based parse but succeed after one repair
# pass. Unrecoverable items must raise UnparseableOutput even with repair.

_DIAG = '{"diagnosis": ["肺炎", "高血压"]}'
_CRIT = '{"criteria": "患者咳嗽咳痰伴发热"}'
_EVID = '{"evidence": {"肺炎": {"symptoms": "咳嗽咳痰"}}}'
_VERD = '{"verdicts": {"肺炎": {"action": "keep"}}}'

RECOVERABLE = [
    ("json_fence", f"```json\n{_DIAG}\n```", "diagnosis", None),
    ("plain_fence", f"```\n{_DIAG}\n```", "diagnosis", None),
    ("upper_fence_tag", f"```JSON\n{_DIAG}\n```", "diagnosis", None),
    ("chinese_prose_prefix", f"好的，诊断结果如下：{_DIAG}", "diagnosis", None),
    ("english_prose_both_sides", f"Sure, here you go:\n{_DIAG}\nHope this helps.",
     "diagnosis", None),
    ("trailing_comma_array", '{"diagnosis": ["肺炎", "高血压",]}', "diagnosis", None),
    ("trailing_comma_object", '{"criteria": "患者咳嗽咳痰伴发热",}', "criteria", None),
    ("fullwidth_comma", '{"diagnosis": ["肺炎"，"高血压"]}', "diagnosis", None),
    ("fullwidth_colon", '{"diagnosis"：["肺炎", "高血压"]}', "diagnosis", None),
    ("curly_quoted_key", '{“diagnosis”: ["肺炎", "高血压"]}', "diagnosis", None),
    ("fullwidth_braces", '｛"diagnosis": ["肺炎", "高血压"]｝', "diagnosis", None),
    ("sentence_wrapped", f'结论：{_DIAG}。请结合临床。', "diagnosis", None),
    ("two_objects_largest_wins", f'{{"note": 1}} {_DIAG}', "diagnosis", None),
    ("fence_plus_trailing_comma",
     '```json\n{"diagnosis": ["肺炎", "高血压",]}\n```', "diagnosis", None),
    ("prose_plus_fullwidth_comma",
     '诊断如下：{"diagnosis": ["肺炎"，"高血压"]}', "diagnosis", None),
    ("bom_prefix", f"﻿{_DIAG}", "diagnosis", None),
    ("evidence_prose", f"特征回顾：{_EVID}", "evidence", ("肺炎",)),
    ("verdict_trailing_comma",
     '{"verdicts": {"肺炎": {"action": "keep",}}}', "verdict", ("肺炎",)),
    ("criteria_fenced", f"```json\n{_CRIT}\n```", "criteria", None),
]

UNRECOVERABLE = [
    ("pure_prose", "患者考虑肺炎可能性大，建议完善检查。", "diagnosis", None),
    ("wrong_value_type", '{"diagnosis": "肺炎"}', "diagnosis", None),
    ("missing_key", '{"diseases": ["肺炎"]}', "diagnosis", None),
    ("truncated", '{"diagnosis": ["肺炎"', "diagnosis", None),
    ("non_string_entities", '{"diagnosis": [1, 2]}', "diagnosis", None),
    ("empty_text", "", "diagnosis", None),
    ("evidence_coverage_gap", _EVID, "evidence", ("肺炎", "高血压")),
    ("verdict_unknown_action",
     '{"verdicts": {"肺炎": {"action": "maybe"}}}', "verdict", ("肺炎",)),
]
