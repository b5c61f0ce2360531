"""Task metrics, the cross-lingual transfer matrix and report tables."""

from __future__ import annotations

import re
import statistics
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import torch

from .data import CWCD_LABELS, NLI_LABELS, VERBALIZERS, TextToTextExample, encode_example, parse_ner
from .peft import PeftAssembly, Variant
from .tokenizer import ByteTokenizer

REQUIRED_METRICS = {
    "qa": ("f1", "exact_match"),
    "nli": ("accuracy",),
    "ner": ("f1",),
    "cwcd": ("f1",),
}
# metric that enters per-task averages
PRIMARY_METRIC = {"qa": "f1", "nli": "accuracy", "ner": "f1", "cwcd": "f1"}
DEFAULT_MAX_NEW_TOKENS = 64

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


# -- QA -------------------------------------------------------------------------

def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _token_f1(prediction: str, gold: str) -> float:
    pred_toks = normalize_answer(prediction).split()
    gold_toks = normalize_answer(gold).split()
    if not pred_toks or not gold_toks:
        return float(pred_toks == gold_toks)
    common = Counter(pred_toks) & Counter(gold_toks)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_toks)
    recall = same / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def squad_f1(prediction: str, gold_answers: Sequence[str]) -> float:
    if not gold_answers:
        raise ValueError("gold_answers must be non-empty")
    return max(_token_f1(prediction, g) for g in gold_answers)


def exact_match(prediction: str, gold_answers: Sequence[str]) -> int:
    if not gold_answers:
        raise ValueError("gold_answers must be non-empty")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in gold_answers))


# -- classification ---------------------------------------------------------------

def accuracy(predictions: Sequence[str], golds: Sequence[str]) -> float:
    """Share of predictions equal to the gold verbalizer after normalization."""
    if len(predictions) != len(golds) or not golds:
        raise ValueError("predictions and golds must be non-empty and equally long")
    hits = sum(normalize_answer(p) == normalize_answer(g) for p, g in zip(predictions, golds))
    return hits / len(golds)


def binary_f1(predictions: Sequence[str], golds: Sequence[str], positive: str = CWCD_LABELS[0],
              labels: Sequence[str] = CWCD_LABELS) -> float:
    """F1 of the positive class.

    A prediction outside ``labels`` is scored as the label opposite to gold,
    so unusable generations always count against the model.
    """
    if len(predictions) != len(golds) or not golds:
        raise ValueError("predictions and golds must be non-empty and equally long")
    norm_labels = {normalize_answer(l): l for l in labels}
    pos = normalize_answer(positive)
    tp = fp = fn = 0
    for p, g in zip(predictions, golds):
        p, g = normalize_answer(p), normalize_answer(g)
        if p not in norm_labels:
            p = next(l for l in norm_labels if l != g)
        if p == pos and g == pos:
            tp += 1
        elif p == pos:
            fp += 1
        elif g == pos:
            fn += 1
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def classification_token_cap(verbalizers: Iterable[str], tokenizer: Optional[ByteTokenizer] = None) -> int:
    """Largest encoded verbalizer length, EOS included."""
    tokenizer = tokenizer or ByteTokenizer()
    lengths = [len(tokenizer.encode(v)) for v in verbalizers]
    if not lengths:
        raise ValueError("no verbalizers given")
    return max(lengths)


# -- NER --------------------------------------------------------------------------

def bio_spans(tokens: Sequence[str], tags: Sequence[str]) -> List[Tuple[str, str]]:
    """Decode BIO tags into ``(entity text, type)``; a stray ``I-`` opens a span."""
    spans: List[Tuple[str, str]] = []
    cur: List[str] = []
    cur_type: Optional[str] = None
    for tok, tag in zip(tokens, tags):
        prefix, _, etype = tag.partition("-")
        if prefix == "I" and cur_type == etype:
            cur.append(tok)
            continue
        if cur:
            spans.append((" ".join(cur), cur_type))
            cur, cur_type = [], None
        if prefix in ("B", "I"):
            cur, cur_type = [tok], etype
    if cur:
        spans.append((" ".join(cur), cur_type))
    return spans


def ner_counts(pred_text: str, gold_text: str) -> Tuple[int, int, int]:
    """(true positives, predicted spans, gold spans) for one example."""
    gold = Counter(bio_spans(*parse_ner(gold_text, strict=True)))
    pred = Counter(bio_spans(*parse_ner(pred_text, strict=False)))
    return sum((gold & pred).values()), sum(pred.values()), sum(gold.values())


def ner_span_f1(pred_text: str | Sequence[str], gold_text: str | Sequence[str]) -> float:
    """Micro span F1; accepts one example or parallel lists for a corpus."""
    preds = [pred_text] if isinstance(pred_text, str) else list(pred_text)
    golds = [gold_text] if isinstance(gold_text, str) else list(gold_text)
    if len(preds) != len(golds):
        raise ValueError("predictions and golds differ in length")
    tp = n_pred = n_gold = 0
    for p, g in zip(preds, golds):
        a, b, c = ner_counts(p, g)
        tp, n_pred, n_gold = tp + a, n_pred + b, n_gold + c
    if n_pred == 0 and n_gold == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_gold
    return 2 * precision * recall / (precision + recall)


# -- results ------------------------------------------------------------------------

@dataclass
class EvalResult:
    task: str
    variant: Optional[str]  # None = backbone without PEFT
    source_language: Optional[str]
    target_language: str
    metrics: Dict[str, float]
    n_examples: int
    seed: Optional[int] = None

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"metric {name}={value} outside [0, 1]")
        missing = set(REQUIRED_METRICS.get(self.task, ())) - set(self.metrics)
        if missing:
            raise ValueError(f"{self.task} result lacks metrics {sorted(missing)}")

    @property
    def primary(self) -> float:
        name = PRIMARY_METRIC.get(self.task) or ("f1" if "f1" in self.metrics else "accuracy")
        return self.metrics[name]


def score(task: str, predictions: Sequence[str], golds: Sequence[str]) -> Dict[str, float]:
    if task == "qa":
        n = len(golds)
        return {
            "f1": sum(squad_f1(p, [g]) for p, g in zip(predictions, golds)) / n,
            "exact_match": sum(exact_match(p, [g]) for p, g in zip(predictions, golds)) / n,
        }
    if task == "nli":
        return {"accuracy": accuracy(predictions, golds)}
    if task == "ner":
        return {"f1": ner_span_f1(list(predictions), list(golds))}
    if task == "cwcd":
        return {"f1": binary_f1(predictions, golds), "accuracy": accuracy(predictions, golds)}
    raise ValueError(f"no metrics defined for task {task!r}")


def generation_cap(task: str, tokenizer: ByteTokenizer, default: int = DEFAULT_MAX_NEW_TOKENS) -> int:
    if task in VERBALIZERS:
        return classification_token_cap(VERBALIZERS[task], tokenizer)
    return default


def predict(assembly: PeftAssembly, inputs: Sequence[str], max_new_tokens: int, limit: int,
            batch_size: int = 64) -> List[str]:
    tok = ByteTokenizer(assembly.backbone.cfg.vocab)
    out: List[str] = []
    for i in range(0, len(inputs), batch_size):
        ids = [encode_example(tok, t, limit) for t in inputs[i:i + batch_size]]
        width = max(len(x) for x in ids)
        src = torch.tensor([x + [tok.pad_id] * (width - len(x)) for x in ids])
        out.extend(tok.decode(g) for g in assembly.generate(src, max_new_tokens))
    return out


def evaluate(assembly: PeftAssembly, test_set: Sequence[TextToTextExample], task: str,
             source_language: Optional[str] = None, seed: Optional[int] = None,
             max_new_tokens: Optional[int] = None, variant: Optional[str] = "auto") -> EvalResult:
    if not test_set:
        raise ValueError("empty test set")
    tok = ByteTokenizer(assembly.backbone.cfg.vocab)
    cap = max_new_tokens or generation_cap(task, tok)
    limit = assembly.backbone.cfg.max_input_length - assembly.prompt_length
    preds = predict(assembly, [e.input_text for e in test_set], cap, limit)
    metrics = score(task, preds, [e.target_text for e in test_set])
    if variant == "auto":
        variant = assembly.variant.value if assembly.variant is not None else None
    return EvalResult(task, variant, source_language, test_set[0].language, metrics, len(test_set), seed)


# -- transfer matrix ---------------------------------------------------------------------

CellKey = Tuple[str, str, str, str]  # task, variant, source, target


@dataclass
class GridSpec:
    tasks: Sequence[str]
    variants: Sequence[Variant]
    sources: Sequence[str]
    targets: Sequence[str]

    def cells(self) -> List[CellKey]:
        return [(t, v.value, s, g) for t in self.tasks for v in self.variants for s in self.sources
                for g in self.targets]


@dataclass
class TransferMatrix:
    grid: GridSpec
    cells: Dict[CellKey, EvalResult] = field(default_factory=dict)
    baselines: Dict[Tuple[str, str], EvalResult] = field(default_factory=dict)
    absent: List[CellKey] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        missing_base = [(t, g) for t in self.grid.tasks for g in self.grid.targets if (t, g) not in self.baselines]
        return not self.absent and not missing_base and len(self.cells) == len(self.grid.cells())

    def transposed(self) -> "TransferMatrix":
        g = GridSpec(self.grid.tasks, self.grid.variants, self.grid.targets, self.grid.sources)
        cells = {(t, v, d, s): r for (t, v, s, d), r in self.cells.items()}
        absent = [(t, v, d, s) for (t, v, s, d) in self.absent]
        return TransferMatrix(g, cells, dict(self.baselines), absent)

    def results(self) -> List[EvalResult]:
        return list(self.baselines.values()) + list(self.cells.values())


def transfer_matrix(grid: GridSpec, evaluate_cell: Callable[[str, Variant, str, str], Optional[EvalResult]],
                    evaluate_baseline: Callable[[str, str], EvalResult]) -> TransferMatrix:
    """Fill the grid; a cell whose callback returns None is recorded as absent.

    The callbacks own artifact loading, so the matrix logic stays independent
    of where checkpoints live.
    """
    matrix = TransferMatrix(grid)
    for task in grid.tasks:
        for target in grid.targets:
            matrix.baselines[(task, target)] = evaluate_baseline(task, target)
    by_name = {v.value: v for v in grid.variants}
    for key in grid.cells():
        task, vname, source, target = key
        result = evaluate_cell(task, by_name[vname], source, target)
        if result is None:
            matrix.absent.append(key)
        else:
            matrix.cells[key] = result
    return matrix


def relative_improvement(result: float, baseline: float) -> Optional[float]:
    """Signed percentage change over ``baseline``; None when baseline is zero."""
    if baseline == 0:
        return None
    return 100.0 * (result - baseline) / baseline


@dataclass
class SummaryRow:
    source: str
    target: str
    variant: str
    mean: float
    rank: Optional[str] = None  # "best", "second" or None


def summarize(matrix: TransferMatrix) -> List[SummaryRow]:
    """Average the primary metric over tasks per (source, target, variant) and rank."""
    order = {v.value: i for i, v in enumerate(Variant)}
    grouped: Dict[Tuple[str, str, str], List[float]] = {}
    for (task, vname, source, target), r in matrix.cells.items():
        grouped.setdefault((source, target, vname), []).append(r.primary)
    rows = [SummaryRow(s, t, v, sum(vals) / len(vals)) for (s, t, v), vals in grouped.items()]
    rows.sort(key=lambda r: (r.source, r.target, order[r.variant]))
    columns: Dict[Tuple[str, str], List[SummaryRow]] = {}
    for r in rows:
        columns.setdefault((r.source, r.target), []).append(r)
    for col in columns.values():
        ranked = sorted(col, key=lambda r: (-r.mean, order[r.variant]))
        ranked[0].rank = "best"
        if len(ranked) > 1:
            ranked[1].rank = "second"
    return rows


def improvement_heatmap(matrix: TransferMatrix, task: str, variant: Variant = Variant.LANG_PROMPT_TASK_ADAPTER,
                        metric: Optional[str] = None) -> Dict[Tuple[str, str], Optional[float]]:
    """(source, target) -> relative % improvement of ``variant`` over the baseline."""
    metric = metric or PRIMARY_METRIC[task]
    out = {}
    for s in matrix.grid.sources:
        for t in matrix.grid.targets:
            cell = matrix.cells.get((task, variant.value, s, t))
            base = matrix.baselines.get((task, t))
            if cell is None or base is None:
                out[(s, t)] = None
            else:
                out[(s, t)] = relative_improvement(cell.metrics[metric], base.metrics[metric])
    return out


# -- multi-seed aggregation ------------------------------------------------------------------

@dataclass
class SeedAggregate:
    mean: float
    std: float
    n: int


def aggregate_seeds(results: Iterable[EvalResult]) -> Dict[Tuple, SeedAggregate]:
    """Mean and sample standard deviation over seeds, per (task, variant, source, target, metric)."""
    groups: Dict[Tuple, List[float]] = {}
    for r in results:
        for m, v in r.metrics.items():
            groups.setdefault((r.task, r.variant, r.source_language, r.target_language, m), []).append(v)
    return {
        k: SeedAggregate(statistics.fmean(v), statistics.stdev(v) if len(v) > 1 else 0.0, len(v))
        for k, v in groups.items()
    }


# -- files -------------------------------------------------------------------------------------

RESULT_COLUMNS = ("task", "config", "source_lang", "target_lang", "metric", "value", "n", "seed")


def write_results(results: Iterable[EvalResult], path):
    with open(path, "w") as fh:
        fh.write("\t".join(RESULT_COLUMNS) + "\n")
        for r in results:
            for m in sorted(r.metrics):
                row = (r.task, r.variant or "None", r.source_language or "-", r.target_language, m,
                       repr(r.metrics[m]), str(r.n_examples), "-" if r.seed is None else str(r.seed))
                fh.write("\t".join(row) + "\n")


def read_results(path) -> List[EvalResult]:
    rows: Dict[Tuple, EvalResult] = {}
    with open(path) as fh:
        header = next(fh).rstrip("\n").split("\t")
        if tuple(header) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for line in fh:
            task, cfg, src, tgt, metric, value, n, seed = line.rstrip("\n").split("\t")
            key = (task, cfg, src, tgt, seed)
            if key not in rows:
                rows[key] = EvalResult.__new__(EvalResult)
                rows[key].__dict__.update(task=task, variant=None if cfg == "None" else cfg,
                                          source_language=None if src == "-" else src, target_language=tgt,
                                          metrics={}, n_examples=int(n), seed=None if seed == "-" else int(seed))
            rows[key].metrics[metric] = float(value)
    for r in rows.values():
        r.__post_init__()
    return list(rows.values())


def write_heatmap(heatmap: Mapping[Tuple[str, str], Optional[float]], sources: Sequence[str],
                  targets: Sequence[str], path):
    with open(path, "w") as fh:
        fh.write("\t".join(["source\\target", *targets]) + "\n")
        for s in sources:
            vals = [heatmap.get((s, t)) for t in targets]
            fh.write("\t".join([s, *("NA" if v is None else f"{v:.4f}" for v in vals)]) + "\n")
