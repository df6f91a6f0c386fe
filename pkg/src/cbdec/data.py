"""Vocabulary, tokenization, extended-vocabulary encoding and batching."""

from __future__ import annotations

import json
import re
from collections import Counter
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK, START, STOP = "[PAD]", "[UNK]", "[START]", "[STOP]"
SPECIALS = (PAD, UNK, START, STOP)
PAD_ID, UNK_ID, START_ID, STOP_ID = range(4)

_PUNCT = re.compile(r"([.,!?;])")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach . , ! ? ; as separate tokens."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


class Vocabulary:
    def __init__(self, tokens: Sequence[str], counts: Sequence[int] | None = None):
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved tokens " + " ".join(SPECIALS))
        self.itos = list(tokens)
        self.counts = list(counts) if counts is not None else [0] * len(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path) -> None:
        lines = [f"{tok} {cnt}\n" for tok, cnt in zip(self.itos, self.counts)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocabulary:
        tokens, counts = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            tok, cnt = line.rsplit(" ", 1)
            tokens.append(tok)
            counts.append(int(cnt))
        return cls(tokens, counts)


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Rank tokens by frequency (ties by first occurrence), keep ``max_size - 4``."""
    if max_size < len(SPECIALS):
        raise ValueError(f"max_size must be at least {len(SPECIALS)}")
    counts: Counter[str] = Counter()
    seen = False
    for tokens in corpus:
        seen = True
        counts.update(t for t in tokens if t not in SPECIALS)
    if not seen:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    # Counter preserves insertion order, and sorted() is stable
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])[: max_size - len(SPECIALS)]
    return Vocabulary(list(SPECIALS) + [t for t, _ in ranked], [0] * 4 + [c for _, c in ranked])


@dataclass
class Example:
    article: list[str]
    summary: list[str]
    keywords: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.article:
            raise ValueError("example article is empty")

    def to_json(self) -> dict:
        out = {"article": " ".join(self.article), "summary": " ".join(self.summary)}
        if self.keywords:
            out["keywords"] = list(self.keywords)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> Example:
        kw = obj.get("keywords") or []
        if isinstance(kw, str):
            kw = kw.split()
        return cls(tokenize(obj["article"]), tokenize(obj.get("summary", "")), [k.lower() for k in kw])


def load_jsonl(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Example.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def save_jsonl(examples: Iterable[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")


@dataclass
class EncodedExample:
    enc_ids: list[int]
    enc_ext_ids: list[int]
    oov_words: list[str]
    dec_in_ids: list[int]
    dec_target_ext_ids: list[int]
    dec_target_unk_ids: list[int]
    example: Example | None = None


def encode_example(ex: Example, vocab: Vocabulary, max_enc: int = 400, max_dec: int = 100) -> EncodedExample:
    if not ex.article:
        raise ValueError("example article is empty")
    v = len(vocab)
    article = ex.article[:max_enc]
    enc_ids, enc_ext, oovs = [], [], []
    oov_index: dict[str, int] = {}
    for tok in article:
        i = vocab.id(tok)
        enc_ids.append(i)
        if i == UNK_ID and tok != UNK:
            if tok not in oov_index:
                oov_index[tok] = len(oovs)
                oovs.append(tok)
            enc_ext.append(v + oov_index[tok])
        else:
            enc_ext.append(i)
    summ_unk = [vocab.id(t) for t in ex.summary]
    summ_ext = [v + oov_index[t] if i == UNK_ID and t in oov_index else i
                for t, i in zip(ex.summary, summ_unk)]
    dec_in = [START_ID] + summ_unk
    tgt_ext = summ_ext + [STOP_ID]
    tgt_unk = summ_unk + [STOP_ID]
    if len(dec_in) > max_dec:
        dec_in, tgt_ext, tgt_unk = dec_in[:max_dec], tgt_ext[:max_dec], tgt_unk[:max_dec]
    return EncodedExample(enc_ids, enc_ext, oovs, dec_in, tgt_ext, tgt_unk, ex)


@dataclass
class Batch:
    enc_ids: np.ndarray        # [B, Te], UNK-mapped
    enc_ext_ids: np.ndarray    # [B, Te], extended
    enc_mask: np.ndarray       # [B, Te]
    dec_in_ids: np.ndarray     # [B, Td]
    dec_target_ext: np.ndarray
    dec_target_unk: np.ndarray
    dec_mask: np.ndarray       # [B, Td]
    n_oov: int
    oov_words: list[list[str]]
    examples: list[EncodedExample]

    @property
    def size(self) -> int:
        return self.enc_ids.shape[0]


def _pad(rows: Sequence[Sequence[int]], width: int) -> np.ndarray:
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for r, row in enumerate(rows):
        out[r, :len(row)] = row
    return out


def _mask(lengths: Sequence[int], width: int) -> np.ndarray:
    return (np.arange(width)[None, :] < np.asarray(lengths)[:, None]).astype(np.float32)


def make_batch(encoded: Sequence[EncodedExample]) -> Batch:
    if not encoded:
        raise ValueError("cannot batch an empty list of examples")
    te = max(len(e.enc_ids) for e in encoded)
    td = max(len(e.dec_in_ids) for e in encoded)
    return Batch(
        enc_ids=_pad([e.enc_ids for e in encoded], te),
        enc_ext_ids=_pad([e.enc_ext_ids for e in encoded], te),
        enc_mask=_mask([len(e.enc_ids) for e in encoded], te),
        dec_in_ids=_pad([e.dec_in_ids for e in encoded], td),
        dec_target_ext=_pad([e.dec_target_ext_ids for e in encoded], td),
        dec_target_unk=_pad([e.dec_target_unk_ids for e in encoded], td),
        dec_mask=_mask([len(e.dec_in_ids) for e in encoded], td),
        n_oov=max(len(e.oov_words) for e in encoded),
        oov_words=[list(e.oov_words) for e in encoded],
        examples=list(encoded),
    )


def iterate_batches(encoded: Sequence[EncodedExample], batch_size: int,
                    rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Batches in input order, or shuffled once per pass when ``rng`` is given."""
    order = np.arange(len(encoded)) if rng is None else rng.permutation(len(encoded))
    for start in range(0, len(order), batch_size):
        yield make_batch([encoded[i] for i in order[start:start + batch_size]])


# ----------------------------------------------------------------------------
# synthetic corpus
# ----------------------------------------------------------------------------

N_ENTITIES = 80
N_VERBS = 20
N_OBJECTS = 60
N_FILLER = 80
_LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyz"))


def _fresh_name(rng: np.random.Generator, used: set[str]) -> str:
    while True:
        name = "zz" + "".join(rng.choice(_LETTERS, 6))
        if name not in used:
            used.add(name)
            return name


def generate_synthetic_corpus(seed: int, n_examples: int, article_len: int = 8, n_salient: int = 2,
                              oov_fraction: float = 0.0) -> list[Example]:
    """Desk-scale summarization corpus with a known salient subset.

    Each article is ``article_len`` four-token sentences: ``n_salient``
    of the form ``entity_k verb_j object_m .`` and the rest filler sentences
    built from a disjoint word list. The summary is the salient sentences in
    article order and the cloze keywords are their entities. With
    ``oov_fraction > 0`` that share of entities are fresh one-off names that
    no vocabulary built from other examples can contain.
    """
    if n_salient > article_len / 4:
        raise ValueError("n_salient must be at most article_len / 4")
    if not 0 <= oov_fraction <= 1:
        raise ValueError("oov_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    used: set[str] = set()
    out = []
    for _ in range(n_examples):
        sentences, salient_flags, keywords = [], [], []
        for _ in range(n_salient):
            if rng.random() < oov_fraction:
                ent = _fresh_name(rng, used)
            else:
                ent = f"entity_{rng.integers(N_ENTITIES)}"
            sentences.append([ent, f"verb_{rng.integers(N_VERBS)}", f"object_{rng.integers(N_OBJECTS)}", "."])
            salient_flags.append(True)
            keywords.append(ent)
        for _ in range(article_len - n_salient):
            sentences.append([f"filler_{w}" for w in rng.integers(N_FILLER, size=3)] + ["."])
            salient_flags.append(False)
        order = rng.permutation(article_len)
        article, summary = [], []
        for k in order:
            article.extend(sentences[k])
            if salient_flags[k]:
                summary.extend(sentences[k])
        out.append(Example(article, summary, list(dict.fromkeys(keywords))))
    return out
