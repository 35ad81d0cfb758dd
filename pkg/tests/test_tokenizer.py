from hypothesis import given, strategies as st

from modalign.encoders import GRAMMARS
from modalign.templates import CUES
from modalign.tokenizer import Tokenizer, normalize
from modalign.toylm import build_tokenizer


def test_empty_string():
    assert Tokenizer(["a"]).tokenize("") == []


@given(st.text(max_size=40))
def test_roundtrip_equals_normalize(s):
    tok = Tokenizer(["red", "cube", "a"])
    assert tok.detokenize(tok.tokenize(s)) == normalize(s)


def test_known_and_spelled_words():
    tok = Tokenizer(["red"])
    assert len(tok.tokenize("red")) == 1
    assert len(tok.tokenize("rex")) == 3
    assert tok.detokenize(tok.tokenize("Red rex, OK?")) == "red rex, ok?"


def test_unknown_char_maps_to_unk():
    tok = Tokenizer([])
    assert tok.tokenize("é") == [tok.unk_id]


def test_toy_vocabulary_covers_attributes_and_cues():
    tok = build_tokenizer()
    for g in GRAMMARS.values():
        for name, vals in g.attributes:
            assert tok.is_known(name)
            assert all(tok.is_known(v) for v in vals)
    for cue in CUES.values():
        assert all(len(tok.tokenize(w)) == 1 for w in cue.rstrip(":").split())
