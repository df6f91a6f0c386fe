"""Summary generation with the pointer decoder: greedy, sampling and beam search.

The closed-book decoder is never run here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import PAD_ID, START_ID, STOP_ID, UNK_ID, SPECIALS, Batch, EncodedExample, Vocabulary, make_batch
from .model import TwoDecoderModel, attention_features
from .nn import EncoderStates, LstmState
from .tensor import Tensor

_NEVER_EMIT = (PAD_ID, START_ID)


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    beam_size: int = 4
    min_len: int = 35
    max_len: int = 100
    seed: int = 13

    def __post_init__(self):
        if self.mode not in ("greedy", "sample", "beam"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.beam_size < 1:
            raise ValueError("beam_size must be at least 1")


@dataclass
class Rollout:
    ids: list[list[int]]        # per row, emitted extended ids incl. a final [STOP] if reached
    log_probs: list             # per step: Tensor [B] when recorded, else ndarray [B]
    mask: np.ndarray            # [B, steps], 1 while the row was still generating


def unk_map(ids, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    return np.where(ids >= vocab_size, UNK_ID, ids)


def strip_stop(ids) -> list[int]:
    out = []
    for i in ids:
        if i == STOP_ID:
            break
        out.append(int(i))
    return out


def reference_ids(ex: EncodedExample) -> list[int]:
    """Gold target ids for reward computation; uncopyable [UNK] never matches."""
    return [-1 if i == UNK_ID else i for i in strip_stop(ex.dec_target_ext_ids)]


def _allowed(probs: np.ndarray, step: int, min_len: int) -> np.ndarray:
    p = probs.copy()
    p[:, list(_NEVER_EMIT)] = 0
    if step < min_len:
        p[:, STOP_ID] = 0
    return p


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One multinomial draw per row of an (unnormalized, nonnegative) matrix."""
    cdf = np.cumsum(probs.astype(np.float64), axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = np.array([np.searchsorted(cdf[r], u[r], side="right") for r in range(len(u))])
    return np.minimum(idx, probs.shape[1] - 1)


def rollout(model: TwoDecoderModel, batch: Batch, enc: EncoderStates, init: LstmState, mode: str = "greedy",
            rng: np.random.Generator | None = None, record: bool = False, min_len: int = 1,
            max_len: int | None = None) -> Rollout:
    """Free-running pointer decoder over a batch.

    ``mode`` is ``greedy`` (argmax, ties to the lowest id) or ``sample``.
    With ``record`` the per-step log-probabilities stay on the active tape.
    """
    max_len = max_len or model.config.max_dec_steps
    vocab = model.vocab_size
    size = batch.size
    features = attention_features(model.attention, enc)
    ctx, cov = model.initial_decoder_inputs(enc)
    state = init
    inputs = np.full(size, START_ID, dtype=np.int64)
    alive = np.ones(size, dtype=bool)
    ids: list[list[int]] = [[] for _ in range(size)]
    log_probs, masks = [], []
    for t in range(max_len):
        step = model.pointer_step(enc, features, state, ctx, inputs, cov, batch.enc_ext_ids, batch.n_oov)
        probs = _allowed(step.p_final.data, t, min_len)
        if mode == "greedy":
            chosen = probs.argmax(axis=-1)
        elif mode == "sample":
            chosen = sample_rows(probs, rng or np.random.default_rng())
        else:
            raise ValueError(f"unknown rollout mode {mode!r}")
        if record:
            log_probs.append(T.log(T.clamp_min(T.pick(step.p_final, chosen), 1e-10)))
        else:
            picked = np.take_along_axis(step.p_final.data, chosen[:, None], axis=-1)[:, 0]
            log_probs.append(np.log(np.maximum(picked, 1e-10)))
        masks.append(alive.astype(np.float32))
        for b in np.flatnonzero(alive):
            ids[b].append(int(chosen[b]))
        alive = alive & (chosen != STOP_ID)
        state, ctx, cov = step.state, step.context, step.next_coverage
        inputs = unk_map(chosen, vocab)
        if not alive.any():
            break
    return Rollout(ids, log_probs, np.stack(masks, axis=1))


def _encode(model: TwoDecoderModel, batch: Batch):
    return model.encode(batch.enc_ids, batch.enc_mask)


def greedy_decode_batch(model: TwoDecoderModel, examples: list[EncodedExample], cfg: DecodeConfig) -> list[list[int]]:
    batch = make_batch(examples)
    with T.no_record():
        enc, init = _encode(model, batch)
        return rollout(model, batch, enc, init, "greedy", min_len=cfg.min_len, max_len=cfg.max_len).ids


def greedy_decode(model: TwoDecoderModel, ex: EncodedExample, cfg: DecodeConfig) -> list[int]:
    """Argmax of the extended distribution each step; [STOP] blocked before ``min_len``."""
    return greedy_decode_batch(model, [ex], cfg)[0]


def sample_decode(model: TwoDecoderModel, ex: EncodedExample, cfg: DecodeConfig,
                  rng: np.random.Generator | None = None) -> tuple[list[int], list[float]]:
    """Multinomial draw each step; returns the ids and log P of each drawn id."""
    rng = rng or np.random.default_rng(cfg.seed)
    batch = make_batch([ex])
    with T.no_record():
        enc, init = _encode(model, batch)
        out = rollout(model, batch, enc, init, "sample", rng=rng, min_len=cfg.min_len, max_len=cfg.max_len)
    n = len(out.ids[0])
    return out.ids[0], [float(lp[0]) for lp in out.log_probs[:n]]


def score_sequence(model: TwoDecoderModel, ex: EncodedExample, ids: list[int]) -> tuple[float, list[float]]:
    """Teacher-forced replay of ``ids``: (sum log P / length, per-step log P)."""
    batch = make_batch([ex])
    vocab = model.vocab_size
    with T.no_record():
        enc, init = _encode(model, batch)
        features = attention_features(model.attention, enc)
        ctx, cov = model.initial_decoder_inputs(enc)
        state = init
        prev = START_ID
        steps = []
        for tok in ids:
            step = model.pointer_step(enc, features, state, ctx, np.array([prev]), cov,
                                      batch.enc_ext_ids, batch.n_oov)
            steps.append(float(np.log(max(step.p_final.data[0, tok], 1e-10))))
            state, ctx, cov = step.state, step.context, step.next_coverage
            prev = int(unk_map([tok], vocab)[0])
    return (sum(steps) / len(steps) if steps else 0.0), steps


@dataclass
class BeamHypothesis:
    ids: list[int]
    log_prob: float
    state: LstmState
    context: np.ndarray
    coverage: np.ndarray | None

    @property
    def score(self) -> float:
        return self.log_prob / max(len(self.ids), 1)


def _tile(enc: EncoderStates, k: int) -> EncoderStates:
    rep = lambda t: Tensor(np.repeat(t.data, k, axis=0))  # noqa: E731
    mask = None if enc.mask is None else np.repeat(enc.mask, k, axis=0)
    return EncoderStates(rep(enc.outputs), enc.fwd_final, enc.bwd_final, mask)


def beam_search_decode(model: TwoDecoderModel, ex: EncodedExample, cfg: DecodeConfig,
                       return_score: bool = False):
    """Length-normalized beam search (score = cumulative log P / length).

    Candidates are scanned best-first each step; [STOP] extensions retire
    into the finished pool and scanning stops once ``beam_size`` live
    hypotheses are kept. Search ends when ``beam_size`` hypotheses have
    finished or at ``max_len``.
    """
    batch = make_batch([ex])
    vocab = model.vocab_size
    k = cfg.beam_size
    with T.no_record():
        enc, init = _encode(model, batch)
        features = attention_features(model.attention, enc).data
        ctx0, cov0 = model.initial_decoder_inputs(enc)
        live = [BeamHypothesis([], 0.0, init, ctx0.data, None if cov0 is None else cov0.data)]
        finished: list[BeamHypothesis] = []
        for t in range(cfg.max_len):
            n = len(live)
            tiled = _tile(enc, n)
            state = LstmState(Tensor(np.concatenate([h.state.hidden.data for h in live])),
                              Tensor(np.concatenate([h.state.memory.data for h in live])))
            ctx = Tensor(np.concatenate([h.context for h in live]))
            cov = None if live[0].coverage is None else Tensor(np.concatenate([h.coverage for h in live]))
            inputs = unk_map([h.ids[-1] if h.ids else START_ID for h in live], vocab)
            step = model.pointer_step(tiled, Tensor(np.repeat(features, n, axis=0)), state, ctx, inputs, cov,
                                      np.repeat(batch.enc_ext_ids, n, axis=0), batch.n_oov)
            probs = step.p_final.data.astype(np.float64)
            allowed = _allowed(probs, t, cfg.min_len) > 0
            with np.errstate(divide="ignore"):
                logp = np.log(probs)
            totals = np.array([h.log_prob for h in live])[:, None] + logp
            hyp_idx, tok_idx = np.nonzero(allowed)
            cand = totals[hyp_idx, tok_idx]
            order = np.lexsort((tok_idx, hyp_idx, -cand))
            new_live: list[BeamHypothesis] = []
            for o in order:
                h, w = int(hyp_idx[o]), int(tok_idx[o])
                parent = live[h]
                hyp = BeamHypothesis(
                    parent.ids + [w], float(cand[o]),
                    LstmState(Tensor(step.state.hidden.data[h:h + 1]), Tensor(step.state.memory.data[h:h + 1])),
                    step.context.data[h:h + 1],
                    None if step.next_coverage is None else step.next_coverage.data[h:h + 1])
                if w == STOP_ID:
                    finished.append(hyp)
                else:
                    new_live.append(hyp)
                if len(new_live) == k:
                    break
            live = new_live
            if len(finished) >= k or not live:
                break
        pool = finished or live
        best = max(pool, key=lambda h: h.score)
    return (best.ids, best.score) if return_score else best.ids


def decode(model: TwoDecoderModel, ex: EncodedExample, cfg: DecodeConfig) -> list[int]:
    if cfg.mode == "greedy":
        return greedy_decode(model, ex, cfg)
    if cfg.mode == "sample":
        return sample_decode(model, ex, cfg)[0]
    return beam_search_decode(model, ex, cfg)


def detokenize(ids, vocab: Vocabulary, oov_words: list[str]) -> list[str]:
    """Map extended ids back to words; reserved tokens other than [UNK] are dropped."""
    v = len(vocab)
    out = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= v + len(oov_words):
            raise IndexError(f"id {i} outside extended vocabulary of size {v + len(oov_words)}")
        tok = vocab.token(i) if i < v else oov_words[i - v]
        if tok in SPECIALS and tok != SPECIALS[UNK_ID]:
            continue
        out.append(tok)
    return out
