"""Pointer-generator with a shared encoder and an extra closed-book decoder.

The pointer decoder attends over encoder states and can copy source tokens
through an extended vocabulary. The closed-book decoder is a plain LSTM
language model over the fixed vocabulary whose only view of the source is
the reduced encoder final state. Both decoders start from that same state
and read from the same embedding matrix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import Batch, EncodedExample, make_batch
from .nn import (EncoderStates, LstmParams, LstmState, ReduceParams, bilstm_encode, embed_lookup,
                 init_lstm, init_reduce, lstm_cell_step, reduce_states)
from .tensor import ParamStore, Tensor

ENCODER_PREFIXES = ("encoder", "reduce")
POINTER_PREFIXES = ("attention", "gate", "ptrdec")
CLOSED_BOOK_PREFIXES = ("cbdec",)


@dataclass
class ModelConfig:
    vocab_size: int = 50000
    embed_dim: int = 128
    hidden_dim: int = 256
    max_enc_steps: int = 400
    max_dec_steps: int = 100
    coverage_enabled: bool = False
    init_scale: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "max_enc_steps", "max_dec_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def attn_dim(self) -> int:
        return 2 * self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionParams:
    v: Tensor
    w_h: Tensor
    w_s: Tensor
    w_c: Tensor
    b: Tensor

    @classmethod
    def from_store(cls, s: ParamStore) -> AttentionParams:
        return cls(s["attention.v"], s["attention.w_h"], s["attention.w_s"], s["attention.w_c"], s["attention.b"])


@dataclass
class PointerGateParams:
    u_c: Tensor
    u_s: Tensor
    u_x: Tensor
    b: Tensor

    @classmethod
    def from_store(cls, s: ParamStore) -> PointerGateParams:
        return cls(s["gate.u_c"], s["gate.u_s"], s["gate.u_x"], s["gate.b"])


@dataclass
class VocabProjectionParams:
    v1: Tensor
    b1: Tensor
    v2: Tensor
    b2: Tensor

    @classmethod
    def from_store(cls, s: ParamStore, prefix: str) -> VocabProjectionParams:
        return cls(s[f"{prefix}.v1"], s[f"{prefix}.b1"], s[f"{prefix}.v2"], s[f"{prefix}.b2"])


@dataclass
class StepOutput:
    attention: Tensor      # [B, Te]
    context: Tensor        # [B, 2H]
    p_gen: Tensor          # [B, 1]
    p_vocab: Tensor        # [B, V]
    p_final: Tensor        # [B, V + n_oov]
    state: LstmState
    coverage: Tensor | None       # coverage before this step, c^t
    next_coverage: Tensor | None  # c^t + a^t


@dataclass
class CbStepOutput:
    p_cbdec: Tensor  # [B, V]
    state: LstmState


def init_params(config: ModelConfig, seed: int = 13) -> ParamStore:
    """Fresh parameters: uniform(-init_scale, init_scale) weights, zero biases."""
    rng = np.random.default_rng(seed)
    e, h, v, a = config.embed_dim, config.hidden_dim, config.vocab_size, config.attn_dim
    sc = config.init_scale
    u = lambda *shape: rng.uniform(-sc, sc, shape)  # noqa: E731
    s = ParamStore()
    s.add("embedding", u(v, e))
    init_lstm(s, "encoder.fwd", e, h, rng, sc)
    init_lstm(s, "encoder.bwd", e, h, rng, sc)
    init_reduce(s, "reduce", h, h, rng, sc)
    s.add("attention.v", u(a))
    s.add("attention.w_h", u(2 * h, a))
    s.add("attention.w_s", u(h, a))
    s.add("attention.w_c", u(1, a))
    s.add("attention.b", np.zeros(a))
    s.add("gate.u_c", u(2 * h))
    s.add("gate.u_s", u(h))
    s.add("gate.u_x", u(e))
    s.add("gate.b", np.zeros(1))
    init_lstm(s, "ptrdec.lstm", e + 2 * h, h, rng, sc)
    for prefix, in_dim in (("ptrdec.proj", 3 * h), ("cbdec.proj", h)):
        s.add(f"{prefix}.v1", u(in_dim, h))
        s.add(f"{prefix}.b1", np.zeros(h))
        s.add(f"{prefix}.v2", u(h, v))
        s.add(f"{prefix}.b2", np.zeros(v))
    init_lstm(s, "cbdec.lstm", e, h, rng, sc)
    return s


def names_in(params: ParamStore, prefixes) -> list[str]:
    return [n for p in prefixes for n in params.with_prefix(p)]


# ----------------------------------------------------------------------------
# step-level operations
# ----------------------------------------------------------------------------


def attention_features(ap: AttentionParams, enc: EncoderStates) -> Tensor:
    """W_h h_i for every encoder position; reused across decoder steps."""
    return T.matmul(enc.outputs, ap.w_h)


def attention_step(ap: AttentionParams, enc: EncoderStates, s_t: LstmState, coverage: Tensor | None = None,
                   coverage_enabled: bool = False, features: Tensor | None = None):
    """Attention distribution, context vector and updated coverage.

    Returns ``(a, c, new_coverage)``; ``new_coverage`` is None when coverage
    is disabled.
    """
    if coverage_enabled and coverage is None:
        raise ValueError("attention_step: coverage enabled but no coverage vector given")
    if features is None:
        features = attention_features(ap, enc)
    batch, steps = enc.outputs.shape[:2]
    dec = T.reshape(T.matmul(s_t.hidden, ap.w_s), (batch, 1, -1))
    pre = T.add(T.add(features, dec), ap.b)
    if coverage_enabled:
        if coverage.shape != (batch, steps):
            raise T.ShapeError(f"attention_step: coverage {coverage.shape} vs encoder {(batch, steps)}")
        pre = T.add(pre, T.matmul(T.reshape(coverage, (batch, steps, 1)), ap.w_c))
    scores = T.matmul(T.tanh(pre), ap.v)
    a = T.softmax(scores, mask=enc.mask)
    context = T.reshape(T.matmul(T.reshape(a, (batch, 1, steps)), enc.outputs), (batch, -1))
    new_cov = T.add(coverage, a) if coverage_enabled else None
    return a, context, new_cov


def vocab_distribution(vp: VocabProjectionParams, s_t: LstmState, c_t: Tensor | None = None) -> Tensor:
    """softmax(V2 (V1 [s_t, c_t] + b1) + b2); ``c_t=None`` projects from s_t alone."""
    x = s_t.hidden if c_t is None else T.concat([s_t.hidden, c_t])
    hidden = T.add(T.matmul(x, vp.v1), vp.b1)
    return T.softmax(T.add(T.matmul(hidden, vp.v2), vp.b2))


def pointer_gate(gp: PointerGateParams, c_t: Tensor, s_t: LstmState, x_t: Tensor) -> Tensor:
    """p_gen = sigmoid(U_c c_t + U_s s_t + U_x x_t + b_ptr), shape ``[B, 1]``."""
    z = T.add(T.add(T.add(T.matmul(c_t, gp.u_c), T.matmul(s_t.hidden, gp.u_s)), T.matmul(x_t, gp.u_x)), gp.b)
    return T.sigmoid(T.reshape(z, (-1, 1)))


def pointer_final_distribution(a: Tensor, p_vocab: Tensor, p_gen: Tensor, src_ext_ids, n_oov: int) -> Tensor:
    """Mix generation and copy mass over the extended vocabulary.

    P(w) = p_gen * P_vocab(w) + (1 - p_gen) * sum of a_i over positions with w_i = w.
    """
    src_ext_ids = np.asarray(src_ext_ids, dtype=np.int64)
    vocab = p_vocab.shape[-1]
    if src_ext_ids.shape != a.shape:
        raise T.ShapeError(f"pointer_final_distribution: ids {src_ext_ids.shape} vs attention {a.shape}")
    if src_ext_ids.size and (src_ext_ids.max() >= vocab + n_oov or src_ext_ids.min() < 0):
        raise IndexError(f"source id {int(src_ext_ids.max())} outside extended vocabulary of {vocab + n_oov}")
    gen = T.mul(p_gen, p_vocab)
    if n_oov:
        gen = T.concat([gen, Tensor(np.zeros((*p_vocab.shape[:-1], n_oov), dtype=p_vocab.data.dtype))])
    copy = T.mul(T.sub(1.0, p_gen), a)
    return T.scatter_add(gen, src_ext_ids, copy)


class TwoDecoderModel:
    """Parameter views plus the forward passes over both decoders."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params
        self.refresh()

    def refresh(self) -> None:
        p = self.params
        self.embedding = p["embedding"]
        self.enc_fwd = LstmParams.from_store(p, "encoder.fwd")
        self.enc_bwd = LstmParams.from_store(p, "encoder.bwd")
        self.reduce = ReduceParams.from_store(p, "reduce")
        self.attention = AttentionParams.from_store(p)
        self.gate = PointerGateParams.from_store(p)
        self.ptr_lstm = LstmParams.from_store(p, "ptrdec.lstm")
        self.ptr_proj = VocabProjectionParams.from_store(p, "ptrdec.proj")
        self.cb_lstm = LstmParams.from_store(p, "cbdec.lstm")
        self.cb_proj = VocabProjectionParams.from_store(p, "cbdec.proj")

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 13) -> TwoDecoderModel:
        return cls(config, init_params(config, seed))

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    # -- encoder ---------------------------------------------------------

    def encode(self, enc_ids, enc_mask=None) -> tuple[EncoderStates, LstmState]:
        """Shared encoder pass; the reduced state initializes both decoders."""
        enc_ids = np.asarray(enc_ids, dtype=np.int64)
        if enc_ids.ndim != 2 or enc_ids.shape[1] == 0:
            raise ValueError("encode: need a non-empty [B, T] id array")
        x = embed_lookup(self.embedding, enc_ids)
        enc = bilstm_encode(self.enc_fwd, self.enc_bwd, x, enc_mask)
        return enc, reduce_states(self.reduce, enc.fwd_final, enc.bwd_final)

    # -- decoders --------------------------------------------------------

    def pointer_step(self, enc: EncoderStates, features: Tensor, prev: LstmState, prev_context: Tensor,
                     input_ids, coverage: Tensor | None, src_ext_ids, n_oov: int) -> StepOutput:
        x = embed_lookup(self.embedding, input_ids)
        state = lstm_cell_step(self.ptr_lstm, T.concat([x, prev_context]), prev)
        cov_on = self.config.coverage_enabled
        a, ctx, new_cov = attention_step(self.attention, enc, state, coverage, cov_on, features)
        p_gen = pointer_gate(self.gate, ctx, state, x)
        p_vocab = vocab_distribution(self.ptr_proj, state, ctx)
        p_final = pointer_final_distribution(a, p_vocab, p_gen, src_ext_ids, n_oov)
        return StepOutput(a, ctx, p_gen, p_vocab, p_final, state, coverage if cov_on else None, new_cov)

    def closed_book_step(self, prev: LstmState, input_ids=None, x: Tensor | None = None) -> CbStepOutput:
        if x is None:
            x = embed_lookup(self.embedding, input_ids)
        state = lstm_cell_step(self.cb_lstm, x, prev)
        return CbStepOutput(vocab_distribution(self.cb_proj, state), state)

    def initial_decoder_inputs(self, enc: EncoderStates) -> tuple[Tensor, Tensor | None]:
        batch, steps = enc.outputs.shape[:2]
        dtype = enc.outputs.data.dtype
        ctx = Tensor(np.zeros((batch, 2 * self.config.hidden_dim), dtype=dtype))
        cov = Tensor(np.zeros((batch, steps), dtype=dtype)) if self.config.coverage_enabled else None
        return ctx, cov

    def run_pointer(self, batch: Batch, enc: EncoderStates, init: LstmState) -> list[StepOutput]:
        """Teacher-forced pointer decoder over the whole target."""
        features = attention_features(self.attention, enc)
        ctx, cov = self.initial_decoder_inputs(enc)
        state = init
        outs = []
        for t in range(batch.dec_in_ids.shape[1]):
            step = self.pointer_step(enc, features, state, ctx, batch.dec_in_ids[:, t], cov,
                                     batch.enc_ext_ids, batch.n_oov)
            outs.append(step)
            state, ctx, cov = step.state, step.context, step.next_coverage
        return outs

    def run_closed_book(self, batch: Batch, init: LstmState, cut_encoder: bool = False,
                        cut_embedding: bool = False) -> list[CbStepOutput]:
        """Teacher-forced closed-book decoder.

        ``cut_encoder`` blocks gradients from this decoder into the encoder
        (through the initial state); ``cut_embedding`` blocks them into the
        embedding matrix (through the decoder inputs).
        """
        state = init
        if cut_encoder:
            state = LstmState(T.stop_gradient(init.hidden), T.stop_gradient(init.memory))
        xs = embed_lookup(self.embedding, batch.dec_in_ids)
        if cut_embedding:
            xs = T.stop_gradient(xs)
        outs = []
        for t in range(batch.dec_in_ids.shape[1]):
            step = self.closed_book_step(state, x=T.select(xs, 1, t))
            outs.append(step)
            state = step.state
        return outs


def encode_source(model: TwoDecoderModel, src_ids) -> tuple[EncoderStates, LstmState]:
    """Encode one source sequence (truncated to ``max_enc_steps``)."""
    src = list(src_ids)[: model.config.max_enc_steps]
    if not src:
        raise ValueError("encode_source: empty source")
    return model.encode(np.asarray([src], dtype=np.int64))


def pointer_decoder_step(model: TwoDecoderModel, enc: EncoderStates, prev_state: LstmState, prev_context: Tensor,
                         input_ids, coverage: Tensor | None, src_ext_ids, n_oov: int) -> StepOutput:
    return model.pointer_step(enc, attention_features(model.attention, enc), prev_state, prev_context,
                              np.atleast_1d(input_ids), coverage, np.atleast_2d(src_ext_ids), n_oov)


def closed_book_decoder_step(model: TwoDecoderModel, prev_state: LstmState, input_ids) -> CbStepOutput:
    return model.closed_book_step(prev_state, np.atleast_1d(input_ids))


def single_batch(ex: EncodedExample) -> Batch:
    return make_batch([ex])
