import json
import math
from pathlib import Path

import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from peftweave.data import CWCD_LABELS, NLI_LABELS, VERBALIZERS, TextToTextExample
from peftweave.evaluation import (
    EvalResult, GridSpec, accuracy, aggregate_seeds, binary_f1, classification_token_cap, evaluate, exact_match,
    improvement_heatmap, ner_span_f1, normalize_answer, read_results, relative_improvement, squad_f1, summarize,
    transfer_matrix, write_heatmap, write_results,
)
from peftweave.model import TinyTransformer
from peftweave.peft import TASK_VARIANTS, Variant, baseline
from peftweave.tokenizer import ByteTokenizer
from reference_metrics import ref_accuracy, ref_exact_match, ref_ner_f1, ref_normalize, ref_squad_f1

GOLDEN = json.loads((Path(__file__).parent / "fixtures" / "metric_golden.json").read_text())


def test_golden_suite_has_thirty_cases():
    assert sum(len(v) for v in GOLDEN.values()) == 30


@pytest.mark.parametrize("case", GOLDEN["qa"], ids=lambda c: repr(c["pred"]))
def test_qa_golden(case):
    f1 = squad_f1(case["pred"], case["golds"])
    assert f1 == float(ref_squad_f1(case["pred"], case["golds"])) == case["f1"]
    assert exact_match(case["pred"], case["golds"]) == ref_exact_match(case["pred"], case["golds"]) == case["em"]


@pytest.mark.parametrize("case", GOLDEN["accuracy"])
def test_accuracy_golden(case):
    assert accuracy(case["preds"], case["golds"]) == float(ref_accuracy(case["preds"], case["golds"])) == case["value"]


@pytest.mark.parametrize("case", GOLDEN["ner"])
def test_ner_golden(case):
    assert ner_span_f1(case["preds"], case["golds"]) == float(ref_ner_f1(case["preds"], case["golds"])) == case["value"]


def test_worked_values():
    assert squad_f1("x b", ["b c"]) == 0.5
    assert ner_span_f1("Anna <B-PER> met <O> Paris <O>", "Anna <B-PER> met <O> Paris <B-LOC>") == pytest.approx(2 / 3)
    assert normalize_answer("The  Cat!") == "cat"
    assert normalize_answer("a b the c") == "b c"


words = st.text(alphabet="abcdeth AN.,!", max_size=20)


@settings(max_examples=300, deadline=None)
@given(words, st.lists(words, min_size=1, max_size=3))
def test_qa_metrics_match_reference(pred, golds):
    assert normalize_answer(pred) == ref_normalize(pred)
    assert squad_f1(pred, golds) == pytest.approx(float(ref_squad_f1(pred, golds)), abs=1e-15)
    assert exact_match(pred, golds) == ref_exact_match(pred, golds)
    assert 0.0 <= squad_f1(pred, golds) <= 1.0


tags = st.sampled_from(["O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG"])
tagged = st.lists(st.tuples(st.sampled_from(["Eva", "Nitra", "Acme", "x"]), tags), max_size=6).map(
    lambda pairs: " ".join(f"{w} <{t}>" for w, t in pairs))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(tagged, tagged), min_size=1, max_size=3))
def test_ner_matches_reference(docs):
    preds, golds = [p for p, _ in docs], [g for _, g in docs]
    assert ner_span_f1(preds, golds) == pytest.approx(float(ref_ner_f1(preds, golds)), abs=1e-15)


def test_binary_f1_rules():
    pos, neg = CWCD_LABELS
    assert binary_f1([pos, neg], [pos, neg]) == 1.0
    assert binary_f1(["garbage"], [pos]) == 0.0
    assert binary_f1(["garbage", pos], [neg, pos]) == pytest.approx(2 / 3)
    assert binary_f1([neg], [neg]) == 1.0


def test_token_caps():
    assert classification_token_cap(NLI_LABELS) == 6
    assert classification_token_cap(CWCD_LABELS) == 16
    assert classification_token_cap(["Only"]) == 5


class _Oracle:
    """Assembly stand-in that emits fixed answers through the real decoding path."""

    def __init__(self, answers, cfg):
        self.answers = answers
        self.backbone = TinyTransformer(cfg)
        self.prompt_length = 0
        self.variant = None
        self.tok = ByteTokenizer(cfg.vocab)

    def generate(self, src, max_new_tokens):
        out = []
        for i in range(src.shape[0]):
            ids = self.tok.encode(self.answers.pop(0))
            out.append(ids[:max_new_tokens])
        return out


@pytest.mark.parametrize("task", sorted(VERBALIZERS))
def test_token_cap_never_truncates_a_verbalizer(task):
    cfg = tiny_config()
    labels = list(VERBALIZERS[task])
    data = [TextToTextExample("x", v, "en", task) for v in labels]
    res = evaluate(_Oracle(list(labels), cfg), data, task)
    assert all(v == 1.0 for v in res.metrics.values())


def test_evaluate_contract_and_determinism():
    model = TinyTransformer(tiny_config())
    data = [TextToTextExample("question: q? context: a b", "b", "lang_a", "qa") for _ in range(3)]
    a = evaluate(baseline(model), data, "qa", max_new_tokens=4)
    b = evaluate(baseline(model), data, "qa", max_new_tokens=4)
    assert a == b and set(a.metrics) == {"f1", "exact_match"}
    assert a.variant is None and a.target_language == "lang_a"
    with pytest.raises(ValueError):
        evaluate(baseline(model), [], "qa")


def _result(task, variant, src, tgt, value, seed=None):
    metrics = {"f1": value, "exact_match": value} if task == "qa" else {"accuracy": value}
    return EvalResult(task, variant, src, tgt, metrics, 10, seed)


def _grid():
    return GridSpec(["qa"], list(TASK_VARIANTS), ["lang_a", "lang_b"], ["lang_a", "lang_b"])


def _score(task, variant, src, tgt):
    return 0.1 * (1 + variant.order) / 10 + (0.3 if src == tgt else 0.0) + (0.05 if src == "lang_a" else 0.0)


def test_transfer_matrix_arithmetic_and_absent():
    grid = _grid()
    full = transfer_matrix(grid, lambda t, v, s, g: _result(t, v.value, s, g, _score(t, v, s, g)),
                           lambda t, g: _result(t, None, None, g, 0.2))
    assert len(full.cells) == 24 and len(full.baselines) == 2 and full.complete
    missing = ("qa", Variant.TASK_PROMPT.value, "lang_a", "lang_b")
    part = transfer_matrix(grid, lambda t, v, s, g: None if (t, v.value, s, g) == missing
                           else _result(t, v.value, s, g, 0.5), lambda t, g: _result(t, None, None, g, 0.2))
    assert part.absent == [missing] and not part.complete
    assert len(part.cells) + len(part.absent) == len(grid.cells())


def test_transpose_swaps_source_and_target():
    m = transfer_matrix(_grid(), lambda t, v, s, g: _result(t, v.value, s, g, _score(t, v, s, g)),
                        lambda t, g: _result(t, None, None, g, 0.2))
    tr = m.transposed()
    for (t, v, s, g), r in m.cells.items():
        assert tr.cells[(t, v, g, s)] is r
    assert tr.transposed().cells == m.cells


def test_relative_improvement():
    assert relative_improvement(0.48, 0.40) == pytest.approx(20.0)
    assert relative_improvement(0.4, 0.4) == 0.0
    assert relative_improvement(0.3, 0.0) is None


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(1e-6, 1))
def test_relative_improvement_sign(result, base):
    rel = relative_improvement(result, base)
    assert (rel > 0) == (result > base) and (rel < 0) == (result < base)


def test_summarize_mean_and_ranks():
    grid = GridSpec(["qa", "nli"], list(TASK_VARIANTS), ["lang_a"], ["lang_b"])
    vals = {"qa": 0.4, "nli": 0.6}
    m = transfer_matrix(grid, lambda t, v, s, g: _result(t, v.value, s, g, vals[t] if v.order < 2 else 0.1),
                        lambda t, g: _result(t, None, None, g, 0.2))
    rows = summarize(m)
    assert len(rows) == 6
    assert rows[0].mean == pytest.approx(0.5)
    ranks = [(r.variant, r.rank) for r in rows if r.rank]
    assert ranks == [(Variant.TASK_ADAPTER.value, "best"), (Variant.TASK_PROMPT.value, "second")]


def test_heatmap_and_files(tmp_path):
    m = transfer_matrix(_grid(), lambda t, v, s, g: _result(t, v.value, s, g, _score(t, v, s, g)),
                        lambda t, g: _result(t, None, None, g, 0.2))
    heat = improvement_heatmap(m, "qa")
    assert heat[("lang_a", "lang_a")] == pytest.approx(100 * (_score("qa", Variant.LANG_PROMPT_TASK_ADAPTER,
                                                                     "lang_a", "lang_a") - 0.2) / 0.2)
    write_heatmap(heat, ["lang_a", "lang_b"], ["lang_a", "lang_b"], tmp_path / "h.tsv")
    assert (tmp_path / "h.tsv").read_text().count("\n") == 3
    write_results(m.results(), tmp_path / "r.tsv")
    back = read_results(tmp_path / "r.tsv")
    key = lambda r: (r.task, r.variant or "", r.source_language or "", r.target_language)
    assert sorted(back, key=key) == sorted(m.results(), key=key)


def test_eval_result_validation():
    with pytest.raises(ValueError):
        EvalResult("qa", None, None, "x", {"f1": 1.2, "exact_match": 0.0}, 1)
    with pytest.raises(ValueError):
        EvalResult("qa", None, None, "x", {"f1": 0.2}, 1)


def test_aggregate_seeds_sample_std():
    rs = [_result("nli", "TaskAdapterOnly", "a", "b", v, seed) for seed, v in enumerate([0.2, 0.4, 0.6])]
    agg = aggregate_seeds(rs)[("nli", "TaskAdapterOnly", "a", "b", "accuracy")]
    assert agg.mean == pytest.approx(0.4) and agg.n == 3
    assert agg.std == pytest.approx(math.sqrt(((0.2) ** 2 + 0 + 0.2 ** 2) / 2))
