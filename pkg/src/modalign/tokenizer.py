"""Word-level tokenizer with a character fallback.

Text is lower-cased and split into pieces: runs of ``[a-z0-9]``, single ASCII
punctuation marks, and any other non-space character on its own. Known words
map to a single id. Unknown alphanumeric runs are spelled with character
tokens (``▁x`` opens a piece, ``#x`` continues it). Any other character maps
to ``<unk>``, which detokenizes to U+FFFD.

``normalize`` states exactly what survives a round trip: lower case, pieces
separated by single spaces, no space before ``. , ? ! : ;``, and unsupported
characters replaced by U+FFFD.
"""
from __future__ import annotations

import re
import string
from typing import Iterable, Sequence

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
SPECIALS = (PAD, EOS, UNK)
UNK_CHAR = "�"
PUNCT = string.punctuation
_CHARS = string.ascii_lowercase + string.digits
_PIECE = re.compile(r"[a-z0-9]+|[" + re.escape(PUNCT) + r"]|\S")
_CLOSERS = set(".,?!:;")


def pieces(text: str) -> list[str]:
    return _PIECE.findall(text.lower())


def _join(parts: Sequence[str]) -> str:
    out = ""
    for p in parts:
        if out and p not in _CLOSERS:
            out += " "
        out += p
    return out


def normalize(text: str) -> str:
    parts = []
    for p in pieces(text):
        if len(p) == 1 and p not in _CHARS and p not in PUNCT:
            p = UNK_CHAR
        parts.append(p)
    return _join(parts)


class Tokenizer:
    def __init__(self, words: Iterable[str]):
        vocab = list(SPECIALS)
        seen = set(vocab)
        for w in list(words) + list(PUNCT):
            w = w.lower()
            if w in seen or not w:
                continue
            if not (re.fullmatch(r"[a-z0-9]+", w) or w in PUNCT):
                raise ValueError(f"vocabulary word {w!r} is not a single piece")
            vocab.append(w)
            seen.add(w)
        for c in _CHARS:
            vocab.append("▁" + c)
            vocab.append("#" + c)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.pad_id = self.index[PAD]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def words(self) -> list[str]:
        """Whole-word entries (no specials, punctuation or spelling tokens)."""
        return [w for w in self.vocab[len(SPECIALS):]
                if w not in PUNCT and not w.startswith(("▁", "#"))]

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for p in pieces(text):
            i = self.index.get(p)
            if i is not None:
                ids.append(i)
            elif p[0] in _CHARS:
                ids.append(self.index["▁" + p[0]])
                ids.extend(self.index["#" + c] for c in p[1:])
            else:
                ids.append(self.unk_id)
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        parts: list[str] = []
        for i in ids:
            tok = self.vocab[int(i)]
            if tok in (PAD, EOS):
                continue
            if tok == UNK:
                parts.append(UNK_CHAR)
            elif tok.startswith("▁") and len(tok) == 2:
                parts.append(tok[1])
            elif tok.startswith("#") and len(tok) == 2:
                if parts and parts[-1][-1] in _CHARS:
                    parts[-1] += tok[1]
                else:
                    parts.append(tok[1])
            else:
                parts.append(tok)
        return _join(parts)

    def is_known(self, word: str) -> bool:
        return word.lower() in self.index
