"""Metric suite: ICD-standardized entity F1, key-point macro-recall, ROUGE-L,
BLEU-1, and an embedding-based similarity score.

Scoring conventions (shared by every metric here):
- all text is normalized the same way the dataset loader normalizes it;
- set metrics return 1.0 when both sides are empty and 0.0 when exactly one
  side is empty;
- any precision/recall combination with a zero denominator scores 0.0.
The conventions and the two matching thresholds (ICD tau, key-point window
tau) are echoed into every report header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import (
    BUNDLED_ICD_PATH,
    CRITERIA_QUESTIONS,
    DIAGNOSIS_QUESTIONS,
    DatasetSplit,
    KEY_POINT_CATEGORIES,
    KeyPointSet,
    QUESTION_IDS,
)
from .errors import EmptyTable, MalformedLine, UnknownRecord
from .textnorm import is_cjk, normalize_text

RAW_LABEL_PREFIX = "RAW:"

DEFAULT_ICD_TAU = 0.5
DEFAULT_KEYPOINT_TAU = 0.2

# aggregate names: question group x metric
QUESTION_GROUPS = {"Q1": "pre", "Q3": "dd", "Q4": "fin", "Q2": "pre", "Q5": "fin"}


# --- edit distance ------------------------------------------------------------


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs over normalized character
    sequences."""
    s = normalize_text(a)
    t = normalize_text(b)
    if s == t:
        return 0
    if not s:
        return len(t)
    if not t:
        return len(s)
    previous = list(range(len(t) + 1))
    for i, cs in enumerate(s, start=1):
        current = [i]
        for j, ct in enumerate(t, start=1):
            cost = 0 if cs == ct else 1
            current.append(min(
                previous[j] + 1,        # deletion
                current[j - 1] + 1,     # insertion
                previous[j - 1] + cost, # substitution
            ))
        previous = current
    return previous[-1]


def normalized_edit_distance(a: str, b: str) -> float:
    s = normalize_text(a)
    t = normalize_text(b)
    if not s and not t:
        return 0.0
    return edit_distance(s, t) / max(len(s), len(t))


# --- ICD table and standardization ---------------------------------------------


@dataclass(frozen=True)
class IcdTable:
    """Code/term pairs; codes are unique, terms nonempty."""

    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        codes = [code for code, _ in self.entries]
        if len(set(codes)) != len(codes):
            dupes = sorted({c for c in codes if codes.count(c) > 1})
            raise ValueError(f"duplicate ICD codes {dupes}")
        if any(not code.strip() or not term.strip() for code, term in self.entries):
            raise ValueError("ICD entries must have nonempty code and term")

    def codes_by_normalized(self) -> dict[str, str]:
        return {normalize_text(code): code for code, _ in self.entries}

    def __len__(self) -> int:
        return len(self.entries)


def load_icd_table(path: str | Path = BUNDLED_ICD_PATH) -> IcdTable:
    """Read a tab-separated code<TAB>term table, UTF-8, no header."""
    entries = []
    for line_no, line in enumerate(
            Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedLine(line_no, "expected exactly one tab per line")
        code, term = parts[0].strip(), normalize_text(parts[1])
        if not code or not term:
            raise MalformedLine(line_no, "empty code or term")
        entries.append((code, term))
    return IcdTable(entries=tuple(entries))


@dataclass(frozen=True)
class StandardizedSet:
    labels: frozenset[str]

    def __len__(self) -> int:
        return len(self.labels)


def standardize(
    entities: tuple[str, ...] | list[str],
    table: IcdTable,
    tau: float = DEFAULT_ICD_TAU,
) -> StandardizedSet:
    """Map entity surface forms to ICD codes by nearest normalized edit
    distance.

    An entity maps to the code of the closest term when the normalized
    distance is within tau; distance ties break by ascending code. Entities
    nothing comes close to become "RAW:<normalized form>" labels. Labels the
    function itself produced pass through unchanged (RAW labels verbatim,
    exact code matches to their code), so standardization is idempotent on
    its own output.
    """
    labels: set[str] = set()
    pending = [e for e in entities if normalize_text(e)]
    if pending and not table.entries:
        raise EmptyTable("cannot standardize entities against an empty ICD table")
    code_index = table.codes_by_normalized()
    for entity in pending:
        normalized = normalize_text(entity)
        if normalized.startswith(RAW_LABEL_PREFIX.lower()):
            # passthrough for labels this function produced earlier, so
            # standardizing its own output is a no-op
            labels.add(RAW_LABEL_PREFIX + normalized[len(RAW_LABEL_PREFIX):])
            continue
        exact_code = code_index.get(normalized)
        if exact_code is not None:
            labels.add(exact_code)
            continue
        best_code = None
        best_distance = math.inf
        for code, term in table.entries:
            d = edit_distance(normalized, term) / max(len(normalized), len(term))
            if d < best_distance or (d == best_distance and
                                     best_code is not None and code < best_code):
                best_distance = d
                best_code = code
        if best_distance <= tau:
            labels.add(best_code)
        else:
            labels.add(RAW_LABEL_PREFIX + normalized)
    return StandardizedSet(labels=frozenset(labels))


def entity_f1(pred: StandardizedSet, ref: StandardizedSet) -> float:
    """Set F1 over standardized labels.

    Both sides empty scores 1.0; exactly one side empty scores 0.0; a zero
    precision+recall sum scores 0.0.
    """
    if not pred.labels and not ref.labels:
        return 1.0
    if not pred.labels or not ref.labels:
        return 0.0
    overlap = len(pred.labels & ref.labels)
    precision = overlap / len(pred.labels)
    recall = overlap / len(ref.labels)
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# --- key-point macro recall -----------------------------------------------------


def _window_match(span: str, text: str, tau: float) -> bool:
    """True when some contiguous window of text is within normalized edit
    distance tau of the span."""
    L = len(span)
    if L == 0 or not text:
        return False
    lo = max(1, math.ceil(L * (1.0 - tau)))
    hi = min(len(text), math.floor(L / (1.0 - tau))) if tau < 1.0 else len(text)
    for width in range(lo, hi + 1):
        for start in range(0, len(text) - width + 1):
            window = text[start:start + width]
            if edit_distance(window, span) / max(width, L) <= tau:
                return True
    return False


def key_point_matched(span: str, criteria_text: str, tau: float = DEFAULT_KEYPOINT_TAU) -> bool:
    """A key point counts as covered when its normalized form is a substring
    of the normalized criteria text, or some window of the text is within
    normalized edit distance tau of it."""
    span_n = normalize_text(span)
    text_n = normalize_text(criteria_text)
    if not span_n:
        return False
    if span_n in text_n:
        return True
    return _window_match(span_n, text_n, tau)


def macro_recall(
    pred_criteria: str,
    ref_points: KeyPointSet,
    tau: float = DEFAULT_KEYPOINT_TAU,
) -> float:
    """Mean per-category recall of annotated key points.

    Categories with no annotated points are excluded from the mean; when all
    four are empty there is nothing to recall and the score is 1.0.
    """
    recalls = []
    for category in KEY_POINT_CATEGORIES:
        points = getattr(ref_points, category)
        if not points:
            continue
        matched = sum(1 for p in points if key_point_matched(p, pred_criteria, tau))
        recalls.append(matched / len(points))
    if not recalls:
        return 1.0
    return sum(recalls) / len(recalls)


# --- tokenization and n-gram metrics ---------------------------------------------


def tokenize(text: str) -> tuple[str, ...]:
    """CJK-aware tokens: each CJK codepoint is one token, maximal ASCII
    alphanumeric runs are one token, everything else is dropped."""
    tokens: list[str] = []
    run: list[str] = []
    for ch in text:
        if ch.isascii() and ch.isalnum():
            run.append(ch)
            continue
        if run:
            tokens.append("".join(run))
            run = []
        if is_cjk(ch):
            tokens.append(ch)
    if run:
        tokens.append("".join(run))
    return tuple(tokens)


def _lcs_length(a: tuple[str, ...], b: tuple[str, ...]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(pred: tuple[str, ...], ref: tuple[str, ...]) -> float:
    """LCS F-measure over token sequences, with the empty-side conventions."""
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    lcs = _lcs_length(pred, ref)
    precision = lcs / len(pred)
    recall = lcs / len(ref)
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def bleu_1(pred: tuple[str, ...], ref: tuple[str, ...]) -> float:
    """Clipped unigram precision with brevity penalty
    min(1, exp(1 - |ref|/|pred|)); an empty prediction scores 0.0."""
    if not pred:
        return 0.0
    ref_counts: dict[str, int] = {}
    for token in ref:
        ref_counts[token] = ref_counts.get(token, 0) + 1
    pred_counts: dict[str, int] = {}
    for token in pred:
        pred_counts[token] = pred_counts.get(token, 0) + 1
    clipped = sum(min(count, ref_counts.get(token, 0))
                  for token, count in pred_counts.items())
    precision = clipped / len(pred)
    brevity = min(1.0, math.exp(1.0 - len(ref) / len(pred)))
    return precision * brevity


# --- embedding score --------------------------------------------------------------


def embed_score(pred_text: str, ref_text: str, provider) -> float:
    """Greedy token-level cosine matching in both directions, F-combined.

    Each prediction token matches its most similar reference token (their
    mean is the precision side), each reference token its most similar
    prediction token (recall side). Empty-side conventions as elsewhere.
    """
    from .retrieval import cosine  # local import to keep module deps one-way

    pred_tokens = tokenize(pred_text)
    ref_tokens = tokenize(ref_text)
    if not pred_tokens and not ref_tokens:
        return 1.0
    if not pred_tokens or not ref_tokens:
        return 0.0
    pred_vecs = [provider.embed(t) for t in pred_tokens]
    ref_vecs = [provider.embed(t) for t in ref_tokens]
    precision = sum(max(cosine(p, r) for r in ref_vecs) for p in pred_vecs) / len(pred_vecs)
    recall = sum(max(cosine(r, p) for p in pred_vecs) for r in ref_vecs) / len(ref_vecs)
    if precision + recall <= 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# --- evaluation over a predictions file ---------------------------------------------


@dataclass(frozen=True)
class MetricsConfig:
    icd_tau: float = DEFAULT_ICD_TAU
    keypoint_tau: float = DEFAULT_KEYPOINT_TAU
    embed_provider: object | None = None
    embed_provider_name: str = "none"


@dataclass(frozen=True)
class PredictionRow:
    record_id: str
    question_id: str
    entities: tuple[str, ...]
    criteria_text: str
    stage: str
    failed: bool


@dataclass
class MetricReport:
    params: dict
    per_record: dict[tuple[str, str], dict[str, float]]
    aggregates: dict[str, float]
    counts: dict[str, int]

    def to_json_obj(self) -> dict:
        nested: dict[str, dict[str, dict[str, float]]] = {}
        for (record_id, question_id), scores in self.per_record.items():
            nested.setdefault(record_id, {})[question_id] = scores
        return {
            "params": self.params,
            "aggregates": self.aggregates,
            "counts": self.counts,
            "per_record": nested,
        }


def load_predictions(path: str | Path) -> list[PredictionRow]:
    rows: list[PredictionRow] = []
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise MalformedLine(line_no, "prediction line is not an object")
            try:
                record_id = normalize_text(obj["record_id"])
                question_id = obj["question_id"]
                entities = tuple(normalize_text(e) for e in obj.get("entities", []))
                criteria_text = normalize_text(obj.get("criteria_text", "") or "")
                stage = obj.get("stage", "forward")
                failed = bool(obj.get("failed", False))
            except (KeyError, TypeError, AttributeError) as exc:
                raise MalformedLine(line_no, f"bad prediction fields: {exc}") from exc
            if question_id not in QUESTION_IDS:
                raise MalformedLine(line_no, f"unknown question_id {question_id!r}")
            if (record_id, question_id) in seen:
                raise MalformedLine(
                    line_no, f"duplicate prediction for {record_id}/{question_id}")
            seen.add((record_id, question_id))
            rows.append(PredictionRow(
                record_id=record_id, question_id=question_id, entities=entities,
                criteria_text=criteria_text, stage=stage, failed=failed))
    return rows


def _zero_scores(question_id: str, cfg: MetricsConfig) -> dict[str, float]:
    if question_id in DIAGNOSIS_QUESTIONS:
        return {"entity_f1": 0.0}
    scores = {"macro_recall": 0.0, "rouge_l": 0.0, "bleu_1": 0.0}
    if cfg.embed_provider is not None:
        scores["embed_score"] = 0.0
    return scores


def evaluate(
    predictions_path: str | Path,
    references: DatasetSplit,
    table: IcdTable,
    cfg: MetricsConfig = MetricsConfig(),
    question_ids: tuple[str, ...] = QUESTION_IDS,
) -> MetricReport:
    """Score a predictions file against a reference split.

    Diagnosis questions get ICD-standardized entity F1; criteria questions
    get key-point macro-recall, ROUGE-L, BLEU-1, and (when a provider is
    configured) the embedding score. Missing and failed predictions score
    zero and are counted. A prediction for an unknown (record, question)
    pair — including a question outside ``question_ids`` — raises
    UnknownRecord.
    """
    qids = tuple(q for q in QUESTION_IDS if q in question_ids)
    if not qids:
        raise ValueError("question_ids selects nothing to evaluate")
    rows = load_predictions(predictions_path)
    by_key = {(row.record_id, row.question_id): row for row in rows}
    known = {
        (bundle.record_id, qid)
        for bundle in references.records for qid in qids
    }
    for key in by_key:
        if key not in known:
            raise UnknownRecord(*key)

    per_record: dict[tuple[str, str], dict[str, float]] = {}
    missing = 0
    failed = 0
    for bundle in references.records:
        for qid in qids:
            key = (bundle.record_id, qid)
            ref_answer = bundle.answer(qid)
            row = by_key.get(key)
            if row is None:
                missing += 1
                per_record[key] = _zero_scores(qid, cfg)
                continue
            if row.failed:
                failed += 1
                per_record[key] = _zero_scores(qid, cfg)
                continue
            if qid in DIAGNOSIS_QUESTIONS:
                pred_set = standardize(row.entities, table, cfg.icd_tau)
                ref_set = standardize(ref_answer.entities, table, cfg.icd_tau)
                per_record[key] = {"entity_f1": entity_f1(pred_set, ref_set)}
            else:
                pred_tokens = tokenize(row.criteria_text)
                ref_tokens = tokenize(ref_answer.criteria_text)
                scores = {
                    "macro_recall": macro_recall(
                        row.criteria_text, ref_answer.key_points, cfg.keypoint_tau),
                    "rouge_l": rouge_l(pred_tokens, ref_tokens),
                    "bleu_1": bleu_1(pred_tokens, ref_tokens),
                }
                if cfg.embed_provider is not None:
                    scores["embed_score"] = embed_score(
                        row.criteria_text, ref_answer.criteria_text, cfg.embed_provider)
                per_record[key] = scores

    aggregates: dict[str, float] = {}
    sums: dict[str, list[float]] = {}
    for (record_id, qid), scores in per_record.items():
        group = QUESTION_GROUPS[qid]
        for metric, value in scores.items():
            sums.setdefault(f"{group}_{metric}", []).append(value)
    for name in sorted(sums):
        values = sums[name]
        aggregates[name] = sum(values) / len(values)

    return MetricReport(
        params={
            "question_ids": list(qids),
            "icd_tau": cfg.icd_tau,
            "keypoint_tau": cfg.keypoint_tau,
            "keypoint_match_rule": "substring or window within normalized edit distance",
            "embed_provider": cfg.embed_provider_name,
            "zero_denominator_rule": "empty both sides 1.0; one side empty 0.0; P+R=0 0.0",
        },
        per_record=per_record,
        aggregates=aggregates,
        counts={
            "records": len(references.records),
            "reference_questions": len(per_record),
            "predictions": len(rows),
            "missing_predictions": missing,
            "failed_predictions": failed,
        },
    )


def write_report(report: MetricReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_obj(), fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
