"""Text-to-text records, templates, synthetic corpora and dataset files."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .tokenizer import ByteTokenizer

TASKS = ("qa", "nli", "ner", "cwcd", "lm")

TEMPLATES = {
    "qa": "question: {question} context: {context}",
    "nli": '{premise} \n\n Question: Does this imply that "{hypothesis}"? Yes, no, or maybe?',
    "ner": "tag: {text}",
    "cwcd": "checkworthiness claim: {claim}",
}

LANGUAGE_INSTRUCTION = "Generate the output in {Language}:"
TASK_INSTRUCTIONS = {
    "qa": "Answer the question in {Language} language:",
    "nli": "Select Yes, No or Maybe based on the implication of the premise on the hypothesis in {Language}:",
    "ner": "Identify NER tags (ORG, PER, LOC) in the text in {Language}:",
    "cwcd": "Determine whether a given claim in {Language} is checkworthy:",
}

NLI_LABELS = ("Yes", "No", "Maybe")
CWCD_LABELS = ("Checkworthy", "Not checkworthy")
NER_TYPES = ("PER", "ORG", "LOC")
NER_TAGS = ("O",) + tuple(f"{p}-{t}" for t in NER_TYPES for p in "BI")
VERBALIZERS: Dict[str, Tuple[str, ...]] = {"nli": NLI_LABELS, "cwcd": CWCD_LABELS}

_NLI_ALIASES = {"entailment": "Yes", "contradiction": "No", "neutral": "Maybe"}


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TextToTextExample:
    input_text: str
    target_text: str
    language: str
    task: str

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task != "lm" and (not self.input_text or not self.target_text):
            raise ValueError("task examples need non-empty input and target")
        if self.task in VERBALIZERS and self.target_text not in VERBALIZERS[self.task]:
            raise ValueError(f"{self.task} target {self.target_text!r} is not a verbalizer")


def instruction_for(template: str, language: str) -> str:
    return template.replace("{Language}", language)


# -- NER serialization ------------------------------------------------------

_TAG_RE = re.compile(r"^<([A-Z]+(?:-[A-Z]+)?)>$")


def serialize_ner(tokens: Sequence[str], tags: Sequence[str]) -> str:
    if len(tokens) != len(tags):
        raise ValueError("tokens and tags differ in length")
    return " ".join(f"{tok} <{tag}>" for tok, tag in zip(tokens, tags))


def parse_ner(text: str, strict: bool = True) -> Tuple[List[str], List[str]]:
    """Inverse of :func:`serialize_ner`.

    With ``strict=False`` malformed regions are skipped instead of raising;
    a word is kept only when it is immediately followed by a known tag.
    """
    words = text.split()
    tokens: List[str] = []
    tags: List[str] = []
    i = 0
    while i < len(words):
        word = words[i]
        nxt = words[i + 1] if i + 1 < len(words) else None
        m = _TAG_RE.match(nxt) if nxt is not None else None
        if not _TAG_RE.match(word) and m and m.group(1) in NER_TAGS:
            tokens.append(word)
            tags.append(m.group(1))
            i += 2
            continue
        if strict:
            raise ValueError(f"unparseable NER text near word {i}: {word!r}")
        i += 1
    return tokens, tags


# -- templating ---------------------------------------------------------------

def _require(record: Mapping, *fields: str):
    for f in fields:
        if f not in record:
            raise KeyError(f"record is missing field {f!r}")


def render_template(record: Mapping, task: str, language: str) -> TextToTextExample:
    if task == "qa":
        _require(record, "question", "context")
        answer = record.get("answer")
        if answer is None:
            _require(record, "answers")
            answer = record["answers"][0]
        inp = TEMPLATES["qa"].format(question=record["question"], context=record["context"])
        return TextToTextExample(inp, answer, language, task)
    if task == "nli":
        _require(record, "premise", "hypothesis", "label")
        label = _NLI_ALIASES.get(str(record["label"]).lower(), record["label"])
        inp = TEMPLATES["nli"].format(premise=record["premise"], hypothesis=record["hypothesis"])
        return TextToTextExample(inp, label, language, task)
    if task == "ner":
        _require(record, "tokens", "tags")
        inp = TEMPLATES["ner"].format(text=" ".join(record["tokens"]))
        return TextToTextExample(inp, serialize_ner(record["tokens"], record["tags"]), language, task)
    if task == "cwcd":
        _require(record, "claim", "label")
        label = record["label"]
        if isinstance(label, bool):
            label = CWCD_LABELS[0] if label else CWCD_LABELS[1]
        inp = TEMPLATES["cwcd"].format(claim=record["claim"])
        return TextToTextExample(inp, label, language, task)
    raise ValueError(f"unknown task {task!r}")


def encode_example(tokenizer: ByteTokenizer, text: str, limit: int) -> List[int]:
    """Encode and cut to ``limit`` ids, keeping the trailing EOS.

    Templates put the long field (context, claim, text) last, so the cut
    drops the tail of that field.
    """
    ids = tokenizer.encode(text)
    if len(ids) > limit:
        ids = ids[: limit - 1] + [tokenizer.eos_id]
    return ids


# -- split ----------------------------------------------------------------------

def split_train_val(dataset: Sequence, fraction: float = 0.15, seed: int = 0):
    n = len(dataset)
    if n < 2:
        raise ValueError(f"need at least 2 records to split, got {n}")
    n_val = int(math.floor(fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [x for i, x in enumerate(dataset) if i not in val_idx]
    val = [x for i, x in enumerate(dataset) if i in val_idx]
    return train, val


# -- dataset files ------------------------------------------------------------------

def save_dataset(dataset: Iterable[TextToTextExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            if ex.task == "lm":
                rec = {"text": ex.input_text, "language": ex.language}
            else:
                rec = {"input": ex.input_text, "target": ex.target_text,
                       "language": ex.language, "task": ex.task}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_dataset(path) -> List[TextToTextExample]:
    out: List[TextToTextExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetFormatError(f"{path}:{lineno}: record must be an object")
            for k, v in rec.items():
                if not isinstance(v, str):
                    raise DatasetFormatError(f"{path}:{lineno}: field {k!r} must be a string")
            if "text" in rec and "task" not in rec:
                fields = ("text", "language")
            else:
                fields = ("input", "target", "language", "task")
            for f in fields:
                if f not in rec:
                    raise DatasetFormatError(f"{path}:{lineno}: missing field {f!r}")
            try:
                if fields[0] == "text":
                    out.append(TextToTextExample(rec["text"], "", rec["language"], "lm"))
                else:
                    out.append(TextToTextExample(rec["input"], rec["target"], rec["language"], rec["task"]))
            except ValueError as e:
                raise DatasetFormatError(f"{path}:{lineno}: {e}") from None
    return out


# -- synthetic languages ------------------------------------------------------------

@dataclass(frozen=True)
class LanguageProfile:
    """Generator parameters for one synthetic language.

    Letters earlier in ``letters`` are more frequent; words are drawn from a
    fixed lexicon with Zipfian frequencies.
    """

    name: str
    letters: str
    lexicon_size: int = 120
    zipf_exponent: float = 1.1
    word_length: Tuple[int, int] = (2, 6)
    sentence_length: Tuple[int, int] = (4, 10)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["word_length"] = list(self.word_length)
        d["sentence_length"] = list(self.sentence_length)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LanguageProfile":
        d = dict(d)
        for k in ("word_length", "sentence_length"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


PROFILES = {
    "lang_a": LanguageProfile("lang_a", letters="aeonrtlsid", seed=11),
    "lang_b": LanguageProfile("lang_b", letters="uykvzaxpjw", seed=23),
}


def _zipf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def build_lexicon(profile: LanguageProfile) -> List[str]:
    rng = np.random.default_rng([profile.seed, 0])
    letter_p = _zipf(len(profile.letters), 0.7)
    lo, hi = profile.word_length
    words: List[str] = []
    seen = set()
    while len(words) < profile.lexicon_size:
        n = int(rng.integers(lo, hi + 1))
        w = "".join(profile.letters[i] for i in rng.choice(len(profile.letters), size=n, p=letter_p))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def synth_corpus(profile: LanguageProfile, size: int, seed: int = 0) -> List[str]:
    """``size`` sentences of lexicon words; deterministic in ``(profile, seed)``."""
    if size <= 0:
        return []
    lexicon = build_lexicon(profile)
    word_p = _zipf(len(lexicon), profile.zipf_exponent)
    rng = np.random.default_rng([profile.seed, 1, seed])
    lo, hi = profile.sentence_length
    out = []
    for _ in range(size):
        n = int(rng.integers(lo, hi + 1))
        out.append(" ".join(lexicon[i] for i in rng.choice(len(lexicon), size=n, p=word_p)))
    return out


def unigram_distribution(texts: Iterable[str]) -> Dict[int, float]:
    counts = Counter(b for t in texts for b in t.encode("utf-8"))
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}


def total_variation(p: Mapping[int, float], q: Mapping[int, float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


COPY_QUESTION = "which word is last?"


def synth_copy_task(profile: LanguageProfile, size: int, seed: int = 0) -> List[TextToTextExample]:
    """Toy extractive QA: the answer is the last word of the context.

    The target is therefore a suffix of the templated input.
    """
    return [
        render_template({"question": COPY_QUESTION, "context": s, "answer": s.split()[-1]}, "qa", profile.name)
        for s in synth_corpus(profile, size, seed)
    ]


def corpus_examples(texts: Iterable[str], language: str) -> List[TextToTextExample]:
    return [TextToTextExample(t, "", language, "lm") for t in texts]
