"""ROUGE, METEOR-lite, saliency, repetition, abstractiveness and memory similarity.

ROUGE-L here is a single LCS over the full token sequences, so scores are
internally consistent but not comparable with the official toolkit.
"""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Hashable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import SPECIALS

Tokens = Sequence[Hashable]


def ngrams(tokens: Tokens, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _prf(overlap: int, n_cand: int, n_ref: int) -> tuple[float, float, float]:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0, 0.0, 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return p, r, 2 * p * r / (p + r)


def rouge_n_overlap(candidate: Tokens, reference: Tokens, n: int) -> int:
    return sum((Counter(ngrams(candidate, n)) & Counter(ngrams(reference, n))).values())


def rouge_n(candidate: Tokens, reference: Tokens, n: int) -> tuple[float, float, float]:
    """Clipped n-gram overlap; returns (precision, recall, F1)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    return _prf(rouge_n_overlap(candidate, reference, n), len(cand), len(ref))


def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference: Tokens) -> tuple[float, float, float]:
    return _prf(lcs_length(candidate, reference), len(candidate), len(reference))


_SUFFIXES = ("ing", "ed", "es", "s")


def stem(token: str) -> str:
    """Strip one of -ing, -ed, -es, -s when at least two characters remain."""
    for suf in _SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= 2:
            return token[: -len(suf)]
    return token


def _align(candidate: Sequence[str], reference: Sequence[str]) -> list[tuple[int, int]]:
    used_c, used_r = set(), set()
    pairs = []
    for key in (lambda w: w, stem):
        for i, w in enumerate(candidate):
            if i in used_c:
                continue
            kw = key(w)
            for j, r in enumerate(reference):
                if j not in used_r and key(r) == kw:
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return sorted(pairs)


def meteor_lite(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Exact-then-stem unigram alignment with the METEOR fragmentation penalty."""
    pairs = _align(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(candidate), m / len(reference)
    f_mean = 10 * p * r / (r + 9 * p)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return f_mean * (1 - 0.5 * (chunks / m) ** 3)


def saliency_keyword_score(summaries: Sequence[Sequence[str]], keywords: Sequence[Sequence[str]]) -> float:
    """Share of cloze keywords (distinct per example) found in the paired summary."""
    total = sum(len(set(k)) for k in keywords)
    if total == 0:
        raise ValueError("no cloze keywords in this corpus")
    found = sum(len(set(k) & set(s)) for s, k in zip(summaries, keywords))
    return found / total


def _repeat_fraction(units: list) -> float:
    return 1 - len(set(units)) / len(units) if units else 0.0


def split_sentences(tokens: Sequence[str], boundary: str = ".") -> list[tuple[str, ...]]:
    out, cur = [], []
    for tok in tokens:
        cur.append(tok)
        if tok == boundary:
            out.append(tuple(cur))
            cur = []
    if cur:
        out.append(tuple(cur))
    return out


def repetition_stats(summaries: Sequence[Sequence[str]], ns=(3, 4, 5)) -> dict:
    """Mean per-summary share (percent) of repeated n-grams and sentences."""
    if not summaries:
        return {"ngram": {n: 0.0 for n in ns}, "sentence": 0.0}
    ngram = {n: 100 * float(np.mean([_repeat_fraction(ngrams(s, n)) for s in summaries])) for n in ns}
    sent = 100 * float(np.mean([_repeat_fraction(split_sentences(s)) for s in summaries]))
    return {"ngram": ngram, "sentence": sent}


def novel_ngram_rate(summaries: Sequence[Sequence[str]], articles: Sequence[Sequence[str]], n: int) -> float:
    """Percent of summary n-grams absent from the paired article, averaged over summaries."""
    rates = []
    for s, a in zip(summaries, articles):
        grams = ngrams(s, n)
        if not grams:
            continue
        src = set(ngrams(a, n))
        rates.append(sum(g not in src for g in grams) / len(grams))
    return 100 * float(np.mean(rates)) if rates else 0.0


def summary_length_stats(summaries: Sequence[Sequence[str]]) -> float:
    lengths = [sum(t not in SPECIALS for t in s) for s in summaries]
    return float(np.mean(lengths)) if lengths else 0.0


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


MEMORY_STATES = ("raw", "reduced")


def final_memory(model, ids, state: str = "raw") -> np.ndarray:
    """Encoder memory after reading ``ids``.

    ``raw`` concatenates the forward and backward final LSTM cell memories.
    ``reduced`` is the memory half of the state both decoders start from;
    its tanh bridge tends to saturate at +-1 after training, which squeezes
    every cosine towards 1.
    """
    from .model import encode_source

    with T.no_record():
        enc, init = encode_source(model, ids)
    if state == "reduced":
        return init.memory.data[0]
    if state == "raw":
        return np.concatenate([enc.fwd_final.memory.data[0], enc.bwd_final.memory.data[0]])
    raise ValueError(f"unknown memory state kind {state!r}")


def memory_similarity(model, articles: Sequence[Sequence[int]], summaries: Sequence[Sequence[int]],
                      state: str = "raw", return_all: bool = False):
    """Mean cosine between final memories after reading the article vs the gold summary."""
    sims = [cosine(final_memory(model, a, state), final_memory(model, s, state))
            for a, s in zip(articles, summaries) if len(a) and len(s)]
    mean = float(np.mean(sims)) if sims else 0.0
    return (mean, sims) if return_all else mean


@dataclass
class MetricReport:
    rouge1_f: float = 0.0
    rouge2_f: float = 0.0
    rougeL_f: float = 0.0
    meteor_lite: float = 0.0
    saliency_keyword: float | None = None
    repeat_ngram_pct: dict = field(default_factory=lambda: {3: 0.0, 4: 0.0, 5: 0.0})
    repeat_sentence_pct: float = 0.0
    novel_ngram_pct: dict = field(default_factory=lambda: {2: 0.0, 3: 0.0, 4: 0.0})
    mean_length: float = 0.0
    memory_cosine: float | None = None
    n_summaries: int = 0

    NOTE = "ROUGE-L is a full-sequence LCS and METEOR is exact+stem only; not comparable to official toolkits."

    def to_dict(self) -> dict:
        d = asdict(self)
        d["repeat_ngram_pct"] = {str(k): v for k, v in self.repeat_ngram_pct.items()}
        d["novel_ngram_pct"] = {str(k): v for k, v in self.novel_ngram_pct.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        d = dict(d)
        d["repeat_ngram_pct"] = {int(k): v for k, v in d.get("repeat_ngram_pct", {}).items()}
        d["novel_ngram_pct"] = {int(k): v for k, v in d.get("novel_ngram_pct", {}).items()}
        return cls(**d)

    def table(self) -> str:
        rows = [
            ("ROUGE-1 F1", self.rouge1_f), ("ROUGE-2 F1", self.rouge2_f), ("ROUGE-L F1", self.rougeL_f),
            ("METEOR-lite", self.meteor_lite),
        ]
        if self.saliency_keyword is not None:
            rows.append(("keyword saliency", self.saliency_keyword))
        rows += [(f"repeated {n}-grams %", v) for n, v in sorted(self.repeat_ngram_pct.items())]
        rows.append(("repeated sentences %", self.repeat_sentence_pct))
        rows += [(f"novel {n}-grams %", v) for n, v in sorted(self.novel_ngram_pct.items())]
        rows.append(("mean length", self.mean_length))
        if self.memory_cosine is not None:
            rows.append(("memory cosine", self.memory_cosine))
        width = max(len(r[0]) for r in rows)
        lines = [f"# {self.NOTE}", f"# summaries: {self.n_summaries}"]
        lines += [f"{name:<{width}}  {value:8.4f}" for name, value in rows]
        return "\n".join(lines)


def evaluate_corpus(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                    articles: Sequence[Sequence[str]] | None = None,
                    keywords: Sequence[Sequence[str]] | None = None) -> MetricReport:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    mean = lambda xs: float(np.mean(xs)) if len(xs) else 0.0  # noqa: E731
    rep = repetition_stats(candidates)
    report = MetricReport(
        rouge1_f=mean([rouge_n(c, r, 1)[2] for c, r in zip(candidates, references)]),
        rouge2_f=mean([rouge_n(c, r, 2)[2] for c, r in zip(candidates, references)]),
        rougeL_f=mean([rouge_l(c, r)[2] for c, r in zip(candidates, references)]),
        meteor_lite=mean([meteor_lite(c, r) for c, r in zip(candidates, references)]),
        repeat_ngram_pct=rep["ngram"],
        repeat_sentence_pct=rep["sentence"],
        mean_length=summary_length_stats(candidates),
        n_summaries=len(candidates),
    )
    if articles is not None:
        report.novel_ngram_pct = {n: novel_ngram_rate(candidates, articles, n) for n in (2, 3, 4)}
    if keywords is not None and any(keywords):
        report.saliency_keyword = saliency_keyword_score(candidates, keywords)
    return report
