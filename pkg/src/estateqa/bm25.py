"""BM25 ranking over table captions.

Standard Okapi scoring with the non-negative idf variant
idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)), k1=1.2, b=0.75.

Tokenization: lowercase, split on non-alphanumeric boundaries; runs of CJK
characters additionally emit character bigrams so retrieval stays meaningful
for Chinese captions without a segmenter.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

_WORD_RE = re.compile(r"\w+", re.UNICODE)
_CJK_RE = re.compile(r"[一-鿿㐀-䶿]+")


def tokenize(text: str) -> list[str]:
    tokens: list[str] = []
    for word in _WORD_RE.findall(text.casefold()):
        cjk_runs = _CJK_RE.findall(word)
        if not cjk_runs:
            tokens.append(word)
            continue
        # keep non-CJK remnants, expand each CJK run into chars + bigrams
        remnant = _CJK_RE.sub(" ", word).split()
        tokens.extend(remnant)
        for run in cjk_runs:
            tokens.extend(run)
            tokens.extend(run[i : i + 2] for i in range(len(run) - 1))
    return tokens


@dataclass(frozen=True)
class ScoredCaption:
    caption: str
    score: float


class Bm25Index:
    def __init__(self, captions: list[str], k1: float = 1.2, b: float = 0.75) -> None:
        if not captions:
            raise ValueError("cannot build an index over an empty caption corpus")
        self.captions = list(captions)
        self.k1 = k1
        self.b = b
        self._tf = [Counter(tokenize(c)) for c in captions]
        self._doc_len = [sum(tf.values()) for tf in self._tf]
        self.avgdl = sum(self._doc_len) / len(captions)
        df: Counter[str] = Counter()
        for tf in self._tf:
            df.update(tf.keys())
        n = len(captions)
        self._idf = {
            t: math.log(1.0 + (n - d + 0.5) / (d + 0.5)) for t, d in df.items()
        }

    def score(self, query: str, doc_index: int) -> float:
        tf = self._tf[doc_index]
        dl = self._doc_len[doc_index]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl) if self.avgdl else self.k1
        total = 0.0
        for term in tokenize(query):
            f = tf.get(term)
            if not f:
                continue
            total += self._idf[term] * f * (self.k1 + 1.0) / (f + norm)
        return total

    def rank(self, query: str, k: int = 1) -> list[ScoredCaption]:
        """Top-k captions by score; ties break by caption lexicographic order."""
        scored = [ScoredCaption(c, self.score(query, i)) for i, c in enumerate(self.captions)]
        scored.sort(key=lambda s: (-s.score, s.caption))
        return scored[: max(1, k)]
