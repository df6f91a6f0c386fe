"""Embedding lookup, LSTM cell, bidirectional encoder and state reduction.

All layers are batched: inputs carry a leading batch axis. Padding is
handled with 0/1 step masks; a masked step carries the previous state
through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

GATES = ("input", "forget", "cell", "output")


@dataclass
class LstmParams:
    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> LstmParams:
        return cls(store[f"{prefix}.w_x"], store[f"{prefix}.w_h"], store[f"{prefix}.b"])


@dataclass
class LstmState:
    hidden: Tensor
    memory: Tensor


@dataclass
class EncoderStates:
    outputs: Tensor  # [B, T, 2H]
    fwd_final: LstmState
    bwd_final: LstmState
    mask: np.ndarray | None = None  # [B, T]

    @property
    def length(self) -> int:
        return self.outputs.shape[1]


@dataclass
class ReduceParams:
    w_hidden: Tensor
    b_hidden: Tensor
    w_memory: Tensor
    b_memory: Tensor

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str = "reduce") -> ReduceParams:
        return cls(store[f"{prefix}.w_hidden"], store[f"{prefix}.b_hidden"],
                   store[f"{prefix}.w_memory"], store[f"{prefix}.b_memory"])


def init_lstm(store: ParamStore, prefix: str, input_dim: int, hidden: int,
              rng: np.random.Generator, scale: float = 0.02) -> LstmParams:
    """Uniform(-scale, scale) weights, zero biases except forget bias 1.0."""
    store.add(f"{prefix}.w_x", rng.uniform(-scale, scale, (input_dim, 4 * hidden)))
    store.add(f"{prefix}.w_h", rng.uniform(-scale, scale, (hidden, 4 * hidden)))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    store.add(f"{prefix}.b", b)
    return LstmParams.from_store(store, prefix)


def init_reduce(store: ParamStore, prefix: str, enc_hidden: int, dec_hidden: int,
                rng: np.random.Generator, scale: float = 0.02) -> ReduceParams:
    for part in ("hidden", "memory"):
        store.add(f"{prefix}.w_{part}", rng.uniform(-scale, scale, (2 * enc_hidden, dec_hidden)))
        store.add(f"{prefix}.b_{part}", np.zeros(dec_hidden))
    return ReduceParams.from_store(store, prefix)


def zero_state(batch: int, hidden: int) -> LstmState:
    z = np.zeros((batch, hidden), dtype=T.get_dtype())
    return LstmState(Tensor(z), Tensor(z))


def embed_lookup(emb: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = emb.shape[0]
    if ids.size and ids.max() >= vocab:
        raise IndexError(f"embedding id {int(ids.max())} >= vocab size {vocab}; map extended ids to [UNK] first")
    if ids.size and ids.min() < 0:
        raise IndexError(f"negative embedding id {int(ids.min())}")
    return T.gather_rows(emb, ids)


def _gated_update(z: Tensor, prev: LstmState, hidden: int, mask=None) -> LstmState:
    i = T.sigmoid(T.slice_last(z, 0, hidden))
    f = T.sigmoid(T.slice_last(z, hidden, 2 * hidden))
    g = T.tanh(T.slice_last(z, 2 * hidden, 3 * hidden))
    o = T.sigmoid(T.slice_last(z, 3 * hidden, 4 * hidden))
    memory = T.add(T.mul(f, prev.memory), T.mul(i, g))
    hidden_t = T.mul(o, T.tanh(memory))
    if mask is not None:
        m = Tensor(np.asarray(mask, dtype=T.get_dtype())[..., None])
        keep = Tensor(1 - m.data)
        memory = T.add(T.mul(m, memory), T.mul(keep, prev.memory))
        hidden_t = T.add(T.mul(m, hidden_t), T.mul(keep, prev.hidden))
    return LstmState(hidden_t, memory)


def lstm_cell_step(params: LstmParams, x: Tensor, prev: LstmState, mask=None) -> LstmState:
    """One LSTM step with gate order (input, forget, cell-candidate, output).

    ``x`` is ``[B, input_dim]``; ``mask`` (``[B]``, optional) freezes the
    state of rows whose mask is 0.
    """
    if x.shape[-1] != params.w_x.shape[0]:
        raise T.ShapeError(f"lstm_cell_step: input dim {x.shape[-1]} != {params.w_x.shape[0]}")
    z = T.add(T.add(T.matmul(x, params.w_x), T.matmul(prev.hidden, params.w_h)), params.b)
    return _gated_update(z, prev, params.hidden_dim, mask)


def _run_direction(params: LstmParams, x_proj: Tensor, mask, order) -> tuple[list[Tensor], LstmState]:
    batch = x_proj.shape[0]
    hidden = params.hidden_dim
    state = zero_state(batch, hidden)
    outs: list[Tensor | None] = [None] * x_proj.shape[1]
    for t in order:
        z = T.add(T.add(T.select(x_proj, 1, t), T.matmul(state.hidden, params.w_h)), params.b)
        state = _gated_update(z, state, hidden, None if mask is None else mask[:, t])
        outs[t] = state.hidden
    return outs, state


def bilstm_encode(fwd: LstmParams, bwd: LstmParams, inputs: Tensor, mask=None) -> EncoderStates:
    """Bidirectional LSTM over ``inputs`` of shape ``[B, T, E]``.

    Row ``t`` of the output is ``[h_fwd_t; h_bwd_t]``. With a mask, each
    direction's final state is the state at the row's last real token.
    """
    if inputs.data.ndim != 3:
        raise T.ShapeError(f"bilstm_encode: expected [B, T, E] input, got {inputs.shape}")
    steps = inputs.shape[1]
    if steps == 0:
        raise ValueError("bilstm_encode: empty input sequence")
    if mask is not None:
        mask = np.asarray(mask, dtype=T.get_dtype())
        if mask.shape != inputs.shape[:2]:
            raise T.ShapeError(f"bilstm_encode: mask {mask.shape} vs input {inputs.shape}")
    # input projections for every step at once
    fwd_x = T.matmul(inputs, fwd.w_x)
    bwd_x = T.matmul(inputs, bwd.w_x)
    f_outs, f_final = _run_direction(fwd, fwd_x, mask, range(steps))
    b_outs, b_final = _run_direction(bwd, bwd_x, mask, range(steps - 1, -1, -1))
    rows = [T.concat([f, b]) for f, b in zip(f_outs, b_outs)]
    outputs = T.stack(rows, axis=1)
    if mask is not None:
        outputs = T.mul(outputs, Tensor(mask[..., None]))
    return EncoderStates(outputs, f_final, b_final, mask)


def reduce_states(rp: ReduceParams, fwd_final: LstmState, bwd_final: LstmState) -> LstmState:
    """Affine map + tanh from concatenated bidirectional finals to one decoder state."""
    h = T.tanh(T.add(T.matmul(T.concat([fwd_final.hidden, bwd_final.hidden]), rp.w_hidden), rp.b_hidden))
    m = T.tanh(T.add(T.matmul(T.concat([fwd_final.memory, bwd_final.memory]), rp.w_memory), rp.b_memory))
    return LstmState(h, m)
