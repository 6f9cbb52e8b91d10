import json
import random
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wardround.dataset import KeyPointSet
from wardround.errors import EmptyTable, MalformedLine, UnknownRecord
from wardround.metrics import (
    IcdTable,
    MetricsConfig,
    StandardizedSet,
    bleu_1,
    edit_distance,
    entity_f1,
    evaluate,
    key_point_matched,
    load_icd_table,
    load_predictions,
    macro_recall,
    rouge_l,
    standardize,
    tokenize,
    embed_score,
    write_report,
)
from wardround.retrieval import HashingEmbedder

# --- independent oracles (kept deliberately naive) ------------------------------


def edit_distance_oracle(s: str, t: str) -> int:
    """Full-matrix DP, no normalization (inputs must already be normalized)."""
    m, n = len(s), len(t)
    d = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        d[i][0] = i
    for j in range(n + 1):
        d[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            cost = 0 if s[i - 1] == t[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
    return d[m][n]


def lcs_oracle(a: tuple, b: tuple) -> int:
    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_oracle(pred: tuple, ref: tuple) -> float:
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    lcs = lcs_oracle(pred, ref)
    p, r = lcs / len(pred), lcs / len(ref)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


ALPHABET = "ab蓝肺炎x1"


# --- frozen spot checks -----------------------------------------------------------


def test_edit_distance_frozen():
    assert edit_distance("kitten", "sitting") == 3


def test_bleu_frozen_values():
    assert bleu_1(("a", "a", "b"), ("a", "b", "c")) == pytest.approx(0.666667, abs=1e-6)
    assert bleu_1(("a",), ("a", "b", "c", "d")) == pytest.approx(0.049787, abs=1e-6)


def test_rouge_frozen_value():
    assert rouge_l(("a", "c", "d"), ("a", "b", "c", "d")) == pytest.approx(0.857143, abs=1e-6)


def test_macro_recall_frozen_value():
    # category recalls 1.0, 0.5, 0.0, 0.5 -> mean 0.5
    points = KeyPointSet(
        medical_history=("高血压病史",),
        symptoms=("咳嗽", "胸痛"),
        physical_signs=("啰音",),
        exam_results=("白细胞升高", "ct示阴影"),
    )
    text = "高血压病史，咳嗽，白细胞升高"
    assert macro_recall(text, points, tau=0.0) == 0.5


# --- oracle equivalence -------------------------------------------------------------


def test_edit_distance_matches_oracle():
    rng = random.Random(101)
    for _ in range(1000):
        s = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 10)))
        t = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 10)))
        assert edit_distance(s, t) == edit_distance_oracle(s, t), (s, t)


def test_rouge_matches_recursive_oracle():
    rng = random.Random(202)
    vocab = ["咳", "嗽", "热", "a", "b", "c", "12"]
    for _ in range(1000):
        pred = tuple(rng.choice(vocab) for _ in range(rng.randint(0, 12)))
        ref = tuple(rng.choice(vocab) for _ in range(rng.randint(0, 12)))
        assert rouge_l(pred, ref) == pytest.approx(rouge_oracle(pred, ref), abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(
    st.text(alphabet=ALPHABET, max_size=12),
    st.text(alphabet=ALPHABET, max_size=12),
    st.text(alphabet=ALPHABET, max_size=12),
)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, a) == 0
    assert edit_distance(a, b) == edit_distance(b, a)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert edit_distance(a, b) <= max(len(a), len(b))


def test_edit_distance_normalizes_first():
    assert edit_distance("  AB  C ", "ab c") == 0


# --- tokenization --------------------------------------------------------------------


def test_tokenize_mixed_text():
    # CJK chars split singly, ASCII alnum runs stay whole, punctuation drops
    assert tokenize("咳嗽3天，CT阴性 abc12") == (
        "咳", "嗽", "3", "天", "CT", "阴", "性", "abc12")


def test_tokenize_cases():
    assert tokenize("咳嗽") == ("咳", "嗽")
    assert tokenize("ct") == ("ct",)
    assert tokenize("白细胞12x10") == ("白", "细", "胞", "12x10")
    assert tokenize("，。！？") == ()
    assert tokenize("") == ()
    assert tokenize("b超提示：胆结石") == ("b", "超", "提", "示", "胆", "结", "石")


def test_tokenize_keeps_ascii_case():
    # tokenization itself does not fold case; inputs are normalized upstream
    assert tokenize("CT") == ("CT",)


# --- n-gram metric conventions -----------------------------------------------------


def test_rouge_and_bleu_empty_conventions():
    assert rouge_l((), ()) == 1.0
    assert rouge_l(("a",), ()) == 0.0
    assert rouge_l((), ("a",)) == 0.0
    assert bleu_1((), ("a",)) == 0.0
    assert bleu_1((), ()) == 0.0  # empty prediction scores zero even against empty ref


def test_bleu_clipping():
    # "a" appears once in ref, so the second "a" in pred earns nothing
    assert bleu_1(("a", "a"), ("a", "b")) == pytest.approx(0.5)


def test_bleu_brevity_penalty_id():
    # identical sequences: precision 1, BP 1
    assert bleu_1(("咳", "嗽"), ("咳", "嗽")) == 1.0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.sampled_from(["a", "b", "咳"]), max_size=10),
    st.lists(st.sampled_from(["a", "b", "咳"]), max_size=10),
)
def test_scores_stay_in_unit_interval(pred, ref):
    assert 0.0 <= rouge_l(tuple(pred), tuple(ref)) <= 1.0
    assert 0.0 <= bleu_1(tuple(pred), tuple(ref)) <= 1.0


# --- ICD table and standardization ----------------------------------------------------


def test_bundled_table_loads():
    table = load_icd_table()
    assert len(table) >= 20
    codes = [code for code, _ in table.entries]
    assert len(set(codes)) == len(codes)


def test_icd_table_rejects_bad_rows(tmp_path):
    p = tmp_path / "icd.tsv"
    p.write_text("A00\t霍乱\nB00 无制表符\n", encoding="utf-8")
    with pytest.raises(MalformedLine) as exc:
        load_icd_table(p)
    assert exc.value.line_no == 2
    p.write_text("A00\t霍乱\nA00\t重复\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_icd_table(p)


def test_standardize_exact_and_fuzzy_and_raw():
    table = load_icd_table()
    terms = dict((term, code) for code, term in table.entries)
    assert "肺炎" in terms
    exact = standardize(("肺炎",), table)
    assert exact.labels == {terms["肺炎"]}
    # one-character typo on a longer term still lands on its code
    fuzzy = standardize(("急性阑尾炎x",), table)
    assert fuzzy.labels == {terms["急性阑尾炎"]}
    far = standardize(("qqqqqqqqqq",), table)
    assert far.labels == {"RAW:qqqqqqqqqq"}


def test_standardize_is_idempotent():
    table = load_icd_table()
    first = standardize(("肺炎", "不存在的怪病异常串", "高血压"), table)
    again = standardize(tuple(sorted(first.labels)), table)
    assert again.labels == first.labels


def test_standardize_tie_breaks_by_ascending_code():
    table = IcdTable(entries=(("B02", "甲乙"), ("B01", "甲丙")))
    # "甲丁" is distance 1 from both terms -> tie -> smaller code wins
    out = standardize(("甲丁",), table)
    assert out.labels == {"B01"}


def test_standardize_empty_inputs():
    table = load_icd_table()
    assert standardize((), table).labels == frozenset()
    assert standardize(("", "  "), table).labels == frozenset()
    empty = IcdTable(entries=())
    assert standardize((), empty).labels == frozenset()
    with pytest.raises(EmptyTable):
        standardize(("肺炎",), empty)


def test_standardize_dedups_via_codes():
    table = load_icd_table()
    # same disease written twice with tiny variation collapses to one code
    out = standardize(("肺炎", "肺炎 "), table)
    assert len(out.labels) == 1


# --- entity F1 --------------------------------------------------------------------------


def s(*labels):
    return StandardizedSet(labels=frozenset(labels))


def test_entity_f1_conventions():
    assert entity_f1(s(), s()) == 1.0
    assert entity_f1(s("A"), s()) == 0.0
    assert entity_f1(s(), s("A")) == 0.0
    assert entity_f1(s("A"), s("B")) == 0.0
    assert entity_f1(s("A", "B"), s("A", "B")) == 1.0
    assert entity_f1(s("A", "B"), s("A", "C")) == pytest.approx(0.5)
    # P=1/1, R=1/2 -> F1 = 2/3
    assert entity_f1(s("A"), s("A", "B")) == pytest.approx(2 / 3)


# --- key points ---------------------------------------------------------------------------


def test_key_point_substring_match():
    assert key_point_matched("咳嗽咳痰", "患者咳嗽咳痰三天", tau=0.2)
    assert not key_point_matched("咯血", "患者咳嗽咳痰三天", tau=0.2)


def test_key_point_fuzzy_window_match():
    # one substitution inside a five-character span: 1/5 = 0.2 <= tau
    assert key_point_matched("双肺呼吸音粗", "查体见双肺呼鸣音粗明显", tau=0.2)
    assert not key_point_matched("双肺呼吸音粗", "查体见双肺呼鸣音粗明显", tau=0.0)


def test_macro_recall_skips_empty_categories():
    points = KeyPointSet((), ("咳嗽",), (), ())
    assert macro_recall("咳嗽", points) == 1.0
    assert macro_recall("无关文本", points) == 0.0


def test_macro_recall_all_empty_is_one():
    assert macro_recall("任意文本", KeyPointSet((), (), (), ())) == 1.0


# --- embedding score -------------------------------------------------------------------------


def test_embed_score_conventions(provider):
    assert embed_score("", "", provider) == 1.0
    assert embed_score("咳嗽", "", provider) == 0.0
    assert embed_score("", "咳嗽", provider) == 0.0
    assert embed_score("咳嗽发热", "咳嗽发热", provider) == pytest.approx(1.0)


def test_embed_score_orders_similarity(provider):
    near = embed_score("咳嗽发热三天", "咳嗽发热两天", provider)
    far = embed_score("咳嗽发热三天", "骨折修复手术", provider)
    assert near > far


# --- evaluate over files ----------------------------------------------------------------------


def write_predictions_file(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def gold_rows(split):
    rows = []
    for bundle in split.records:
        for qid in ("Q1", "Q2", "Q3", "Q4", "Q5"):
            answer = bundle.answer(qid)
            rows.append({
                "record_id": bundle.record_id,
                "question_id": qid,
                "entities": list(answer.entities),
                "criteria_text": answer.criteria_text,
                "stage": "forward",
                "failed": False,
            })
    return rows


def test_evaluate_gold_predictions_score_one(tmp_path, split3):
    path = tmp_path / "gold.jsonl"
    write_predictions_file(path, gold_rows(split3))
    report = evaluate(path, split3, load_icd_table(),
                      MetricsConfig(embed_provider=HashingEmbedder(),
                                    embed_provider_name="hashing-64"))
    for name, value in report.aggregates.items():
        assert value == pytest.approx(1.0), name
    assert report.counts["missing_predictions"] == 0
    assert set(report.params) >= {"icd_tau", "keypoint_tau", "embed_provider"}


def test_evaluate_missing_and_failed_score_zero(tmp_path, split3):
    rows = gold_rows(split3)
    dropped = rows[1:]          # one missing prediction
    dropped[0]["failed"] = True  # and one failed one
    path = tmp_path / "partial.jsonl"
    write_predictions_file(path, dropped)
    report = evaluate(path, split3, load_icd_table())
    assert report.counts["missing_predictions"] == 1
    assert report.counts["failed_predictions"] == 1
    key_missing = (split3.records[0].record_id, "Q1")
    assert report.per_record[key_missing] == {"entity_f1": 0.0}


def test_evaluate_rejects_unknown_records(tmp_path, split3):
    rows = gold_rows(split3)
    rows[0]["record_id"] = "ghost-999"
    path = tmp_path / "ghost.jsonl"
    write_predictions_file(path, rows)
    with pytest.raises(UnknownRecord):
        evaluate(path, split3, load_icd_table())


def test_evaluate_question_subset(tmp_path, split3):
    rows = [r for r in gold_rows(split3) if r["question_id"] in ("Q3",)]
    path = tmp_path / "subset.jsonl"
    write_predictions_file(path, rows)
    report = evaluate(path, split3, load_icd_table(), question_ids=("Q3",))
    assert set(report.aggregates) == {"dd_entity_f1"}
    # the same file against all questions counts the others as missing
    full = evaluate(path, split3, load_icd_table())
    assert full.counts["missing_predictions"] == 4 * len(split3.records)


def test_load_predictions_rejects_duplicates(tmp_path, split3):
    rows = gold_rows(split3)
    rows.append(rows[0])
    path = tmp_path / "dup.jsonl"
    write_predictions_file(path, rows)
    with pytest.raises(MalformedLine):
        load_predictions(path)


def test_load_predictions_rejects_unknown_question(tmp_path):
    path = tmp_path / "q9.jsonl"
    write_predictions_file(path, [{
        "record_id": "r", "question_id": "Q9", "entities": [], "criteria_text": "",
        "stage": "forward", "failed": False,
    }])
    with pytest.raises(MalformedLine):
        load_predictions(path)


def test_load_predictions_rejects_bad_json(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"record_id": broken\n', encoding="utf-8")
    with pytest.raises(MalformedLine) as exc:
        load_predictions(path)
    assert exc.value.line_no == 1


def test_report_bytes_are_stable(tmp_path, split3):
    path = tmp_path / "gold.jsonl"
    write_predictions_file(path, gold_rows(split3))
    report = evaluate(path, split3, load_icd_table())
    out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
    write_report(report, out1)
    write_report(evaluate(path, split3, load_icd_table()), out2)
    assert out1.read_bytes() == out2.read_bytes()
    obj = json.loads(out1.read_text(encoding="utf-8"))
    assert set(obj) == {"params", "aggregates", "counts", "per_record"}
    first_record = split3.records[0].record_id
    assert "Q1" in obj["per_record"][first_record]
