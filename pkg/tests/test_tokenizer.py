import pytest
from hypothesis import given, strategies as st

from peftweave.tokenizer import ByteTokenizer, Vocab

tok = ByteTokenizer()


def test_vocab_layout():
    v = Vocab()
    assert v.sentinel_count == 100
    assert v.base_size == 259
    assert v.size == 359
    assert len({v.pad_id, v.eos_id, v.unk_id}) == 3
    assert max(v.pad_id, v.eos_id, v.unk_id) < v.base_size


def test_sentinels_sit_at_top_in_descending_order():
    v = Vocab(sentinel_count=97)
    assert v.size == 356
    assert v.sentinel_id(0) == 355
    assert v.sentinel_id(1) == 354
    ids = [v.sentinel_id(k) for k in range(v.sentinel_count)]
    assert ids == list(range(v.size - 1, v.base_size - 1, -1))
    with pytest.raises(ValueError):
        v.sentinel_id(v.sentinel_count)
    with pytest.raises(ValueError):
        v.sentinel_id(-1)


def test_encode_examples():
    assert tok.encode("") == [tok.eos_id]
    assert tok.encode("ab") == [ord("a"), ord("b"), tok.eos_id]
    assert tok.encode("é") == list("é".encode("utf-8")) + [tok.eos_id] == [0xC3, 0xA9, tok.eos_id]


def test_decode_rules():
    v = tok.vocab
    assert tok.decode([v.sentinel_id(0)]) == "<extra_id_0>"
    assert tok.decode([0xFF]) == "�"
    assert tok.decode([ord("a"), v.pad_id, v.eos_id, ord("b")]) == "ab"
    assert tok.decode([ord("x"), v.sentinel_id(3), ord("y")]) == "x<extra_id_3>y"


@given(st.text())
def test_round_trip(s):
    assert tok.decode(tok.encode(s)) == s


@given(st.text(), st.text())
def test_encode_injective(a, b):
    if a != b:
        assert tok.encode(a) != tok.encode(b)


@given(st.text())
def test_no_sentinels_in_encoding(s):
    assert not any(tok.vocab.is_sentinel(i) for i in tok.encode(s))
