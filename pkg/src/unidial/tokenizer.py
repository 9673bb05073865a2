"""Greedy byte-pair-encoding over whitespace-split words.

Text is split on single spaces; each word becomes its characters followed by
an end-of-word symbol, so decoding can restore every space exactly.  Merges
are learned greedily by pair frequency, ties going to the lexicographically
smallest pair.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
# Reserved private-use code point marking the end of a word.
END_OF_WORD = "\ue000"
FORMAT_HEADER = "#unidial-vocab v1"


@dataclass
class Vocabulary:
    tokens: list[str]
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        # Specials are reachable by id only, never by spelling.
        self.token_to_id = {}
        for i, t in enumerate(self.tokens[len(SPECIALS):], len(SPECIALS)):
            if t in self.token_to_id:
                raise ValueError(f"duplicate token {t!r}")
            self.token_to_id[t] = i
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._segment = lru_cache(maxsize=65536)(self._segment_word)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.merges == other.merges

    def _segment_word(self, word: str) -> tuple[str, ...]:
        symbols = list(word) + [END_OF_WORD]
        ranks = self._ranks
        while len(symbols) > 1:
            best = None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best is None or r < best[0]):
                    best = (r, pair)
            if best is None:
                break
            symbols = _merge_pair(symbols, best[1])
        return tuple(symbols)

    def encode(self, text: str) -> list[int]:
        return encode(text, self)

    def decode(self, ids: Sequence[int]) -> str:
        return decode(ids, self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(FORMAT_HEADER + "\n")
            for t in self.tokens:
                fh.write(json.dumps(t, ensure_ascii=False) + "\n")
            fh.write("#merges\n")
            for a, b in self.merges:
                fh.write(json.dumps([a, b], ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if not lines or lines[0] != FORMAT_HEADER:
            raise ValueError(f"{path}: not a vocabulary file (bad header)")
        sep = lines.index("#merges")
        tokens = [json.loads(x) for x in lines[1:sep]]
        merges = [tuple(json.loads(x)) for x in lines[sep + 1:] if x]
        return cls(tokens, merges)


def _merge_pair(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_bpe(corpus: Iterable[str], target_size: int) -> Vocabulary:
    """Learn merges until ``target_size`` tokens or no pair occurs twice."""
    words: Counter = Counter()
    for line in corpus:
        if END_OF_WORD in line:
            raise ValueError("corpus contains the reserved end-of-word code point U+E000")
        words.update(line.split(" "))
    if not words or (set(words) == {""}):
        raise ValueError("empty corpus")

    alphabet = sorted({c for w in words for c in w})
    base = [END_OF_WORD] + alphabet
    if target_size <= len(base) + len(SPECIALS):
        raise ValueError(
            f"target_size {target_size} must exceed {len(base)} base symbols + {len(SPECIALS)} specials"
        )
    tokens = list(SPECIALS) + base
    known = set(base)
    merges: list[tuple[str, str]] = []

    # Sorted for a run-independent iteration order.
    segs = [[list(w) + [END_OF_WORD], f] for w, f in sorted(words.items())]
    pairs: Counter = Counter()
    for sym, f in segs:
        for p in zip(sym, sym[1:]):
            pairs[p] += f

    while len(tokens) < target_size and pairs:
        top = max(pairs.values())
        if top < 2:
            break
        best = min(p for p, c in pairs.items() if c == top)
        merges.append(best)
        new = best[0] + best[1]
        if new not in known:
            known.add(new)
            tokens.append(new)
        for entry in segs:
            sym, f = entry
            if len(sym) < 2 or best[0] not in sym:
                continue
            merged = _merge_pair(sym, best)
            if len(merged) == len(sym):
                continue
            for p in zip(sym, sym[1:]):
                pairs[p] -= f
            for p in zip(merged, merged[1:]):
                pairs[p] += f
            entry[0] = merged
        pairs = +pairs
    return Vocabulary(tokens, merges)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    if text == "":
        return []
    ids = []
    lookup = vocab.token_to_id
    for word in text.split(" "):
        for sym in vocab._segment(word):
            ids.append(lookup.get(sym, UNK))
    return ids


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    n = len(vocab.tokens)
    parts = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= n:
            raise ValueError(f"invalid id {i} for vocabulary of size {n}")
        if i < len(SPECIALS):
            continue
        parts.append(vocab.tokens[i])
    text = "".join(parts).replace(END_OF_WORD, " ")
    return text[:-1] if text.endswith(" ") else text
