"""Deliberately naive metric implementations used as test oracles."""

from fractions import Fraction
from itertools import product

PUNCTUATION = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~"
ARTICLES = ("a", "an", "the")


def ref_normalize(text):
    kept = ""
    for ch in text.lower():
        if ch not in PUNCTUATION:
            kept += ch
    words = []
    for w in kept.split():
        if w not in ARTICLES:
            words.append(w)
    return " ".join(words)


def ref_token_f1(pred, gold):
    p = ref_normalize(pred).split()
    g = ref_normalize(gold).split()
    if len(p) == 0 or len(g) == 0:
        return Fraction(int(len(p) == len(g)))
    used = [False] * len(g)
    matched = 0
    for tok in p:
        for j in range(len(g)):
            if not used[j] and g[j] == tok:
                used[j] = True
                matched += 1
                break
    if matched == 0:
        return Fraction(0)
    precision = Fraction(matched, len(p))
    recall = Fraction(matched, len(g))
    return 2 * precision * recall / (precision + recall)


def ref_squad_f1(pred, golds):
    return max(ref_token_f1(pred, g) for g in golds)


def ref_exact_match(pred, golds):
    return int(any(ref_normalize(pred) == ref_normalize(g) for g in golds))


def ref_accuracy(preds, golds):
    return Fraction(sum(1 for p, g in zip(preds, golds) if ref_normalize(p) == ref_normalize(g)), len(golds))


def _ref_parse(text):
    words = text.split()
    pairs = []
    for a, b in zip(words, words[1:]):
        if not a.startswith("<") and b.startswith("<") and b.endswith(">"):
            tag = b[1:-1]
            if tag == "O" or (tag[:2] in ("B-", "I-") and tag[2:] in ("PER", "ORG", "LOC")):
                pairs.append((a, tag))
    return pairs


def ref_spans(text):
    """Every maximal (start, end) run that BIO decoding would produce, found by enumeration."""
    pairs = _ref_parse(text)
    toks = [t for t, _ in pairs]
    tags = [g for _, g in pairs]
    found = []
    for i, j in product(range(len(tags)), repeat=2):
        if j < i or tags[i] == "O":
            continue
        etype = tags[i][2:]
        continues_previous = i > 0 and tags[i].startswith("I-") and tags[i - 1] != "O" and tags[i - 1][2:] == etype
        if continues_previous:
            continue
        if any(tags[k] != "I-" + etype for k in range(i + 1, j + 1)):
            continue
        if j + 1 < len(tags) and tags[j + 1] == "I-" + etype:
            continue
        found.append((" ".join(toks[i:j + 1]), etype))
    return found


def ref_ner_f1(preds, golds):
    tp = n_pred = n_gold = 0
    for p, g in zip(preds, golds):
        ps, gs = ref_spans(p), ref_spans(g)
        n_pred += len(ps)
        n_gold += len(gs)
        remaining = list(gs)
        for s in ps:
            if s in remaining:
                remaining.remove(s)
                tp += 1
    if n_pred == 0 and n_gold == 0:
        return Fraction(1)
    if tp == 0:
        return Fraction(0)
    return Fraction(2 * tp, n_pred + n_gold)
