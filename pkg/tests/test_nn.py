import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbdec import tensor as T
from cbdec.nn import (LstmParams, LstmState, ReduceParams, bilstm_encode, embed_lookup, init_lstm, init_reduce,
                      lstm_cell_step, reduce_states, zero_state)
from cbdec.tensor import ParamStore, Tensor


def lstm_store(input_dim, hidden, seed=0, scale=0.5):
    s = ParamStore()
    init_lstm(s, "fwd", input_dim, hidden, np.random.default_rng(seed), scale)
    init_lstm(s, "bwd", input_dim, hidden, np.random.default_rng(seed + 1), scale)
    return s


def reference_lstm_step(w_x, w_h, b, x, h, m):
    """Plain numpy LSTM with gate order (input, forget, cell, output)."""
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    z = x @ w_x + h @ w_h + b
    n = h.shape[-1]
    i, f, g, o = sig(z[..., :n]), sig(z[..., n:2 * n]), np.tanh(z[..., 2 * n:3 * n]), sig(z[..., 3 * n:])
    m_new = f * m + i * g
    return o * np.tanh(m_new), m_new


class TestEmbedLookup:
    def test_repeated_id_gives_identical_rows(self):
        emb = Tensor(np.random.default_rng(0).normal(size=(6, 3)))
        out = embed_lookup(emb, [4, 4]).data
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[0], emb.data[4])

    def test_empty_ids(self):
        assert embed_lookup(Tensor(np.ones((6, 3))), np.array([], dtype=np.int64)).shape == (0, 3)

    def test_gradient_lands_on_looked_up_rows(self):
        s = ParamStore()
        s.add("emb", np.random.default_rng(0).normal(size=(6, 3)))
        with T.recording():
            g = T.backward(T.sum(embed_lookup(s["emb"], [1, 4, 4])), s)["emb"]
        expected = np.zeros((6, 3))
        expected[1] = 1
        expected[4] = 2
        np.testing.assert_array_equal(g, expected)

    def test_out_of_range_id(self):
        with pytest.raises(IndexError, match="UNK"):
            embed_lookup(Tensor(np.ones((6, 3))), [6])


class TestLstmCell:
    def test_zero_fixed_point(self):
        p = LstmParams(Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)))
        out = lstm_cell_step(p, Tensor(np.ones((1, 3))), zero_state(1, 2))
        np.testing.assert_array_equal(out.hidden.data, 0)
        np.testing.assert_array_equal(out.memory.data, 0)

    def test_matches_numpy_reference(self):
        s = lstm_store(3, 4)
        rng = np.random.default_rng(1)
        x, h, m = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        out = lstm_cell_step(LstmParams.from_store(s, "fwd"), Tensor(x), LstmState(Tensor(h), Tensor(m)))
        ref_h, ref_m = reference_lstm_step(s["fwd.w_x"].data, s["fwd.w_h"].data, s["fwd.b"].data, x, h, m)
        np.testing.assert_allclose(out.hidden.data, ref_h, atol=1e-6)
        np.testing.assert_allclose(out.memory.data, ref_m, atol=1e-6)

    def test_saturated_forget_gate_preserves_memory(self):
        hidden = 4
        b = np.zeros(4 * hidden)
        b[:hidden] = -20.0           # input gate closed
        b[hidden:2 * hidden] = 20.0  # forget gate open
        rng = np.random.default_rng(2)
        p = LstmParams(Tensor(rng.normal(size=(3, 4 * hidden)) * 0.1),
                       Tensor(rng.normal(size=(hidden, 4 * hidden)) * 0.1), Tensor(b))
        prev = LstmState(Tensor(rng.normal(size=(1, hidden))), Tensor(rng.normal(size=(1, hidden))))
        out = lstm_cell_step(p, Tensor(rng.normal(size=(1, 3))), prev)
        np.testing.assert_allclose(out.memory.data, prev.memory.data, atol=1e-3)

    def test_mask_carries_state(self):
        s = lstm_store(3, 4)
        rng = np.random.default_rng(3)
        prev = LstmState(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4))))
        out = lstm_cell_step(LstmParams.from_store(s, "fwd"), Tensor(rng.normal(size=(2, 3))), prev, mask=[1, 0])
        np.testing.assert_array_equal(out.hidden.data[1], prev.hidden.data[1])
        assert not np.allclose(out.hidden.data[0], prev.hidden.data[0])

    def test_forget_bias_initialized_to_one(self):
        s = lstm_store(3, 4)
        np.testing.assert_array_equal(s["fwd.b"].data, [0] * 4 + [1] * 4 + [0] * 8)

    def test_input_dim_mismatch(self):
        s = lstm_store(3, 4)
        with pytest.raises(T.ShapeError):
            lstm_cell_step(LstmParams.from_store(s, "fwd"), Tensor(np.ones((1, 5))), zero_state(1, 4))

    def test_gradient_check(self):
        s = lstm_store(5, 8, scale=0.4)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 5))
        prev = (rng.normal(size=(1, 8)), rng.normal(size=(1, 8)))

        def loss(p):
            st = lstm_cell_step(LstmParams.from_store(p, "fwd"), Tensor(x),
                                LstmState(Tensor(prev[0]), Tensor(prev[1])))
            return T.sum(T.mul(T.add(st.hidden, st.memory), Tensor(np.arange(8.0))))

        assert T.finite_difference_check(loss, s, names=["fwd.w_x", "fwd.w_h", "fwd.b"]) < 5e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_lstm_hidden_is_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p = LstmParams(Tensor(rng.normal(size=(3, 16)) * scale), Tensor(rng.normal(size=(4, 16)) * scale),
                   Tensor(rng.normal(size=16) * scale))
    state = zero_state(2, 4)
    for _ in range(5):
        state = lstm_cell_step(p, Tensor(rng.normal(size=(2, 3)) * 10), state)
        assert np.all(np.abs(state.hidden.data) <= 1.0)
        assert np.all(np.isfinite(state.memory.data))


class TestBiLstm:
    def test_single_step_is_both_directions_applied_once(self):
        s = lstm_store(3, 4)
        x = np.random.default_rng(5).normal(size=(1, 1, 3))
        enc = bilstm_encode(LstmParams.from_store(s, "fwd"), LstmParams.from_store(s, "bwd"), Tensor(x))
        f = lstm_cell_step(LstmParams.from_store(s, "fwd"), Tensor(x[:, 0]), zero_state(1, 4))
        b = lstm_cell_step(LstmParams.from_store(s, "bwd"), Tensor(x[:, 0]), zero_state(1, 4))
        np.testing.assert_allclose(enc.outputs.data[0, 0], np.concatenate([f.hidden.data[0], b.hidden.data[0]]),
                                   atol=1e-6)

    def test_reversal_swaps_directions(self):
        s = lstm_store(3, 4)
        fwd, bwd = LstmParams.from_store(s, "fwd"), LstmParams.from_store(s, "bwd")
        x = np.random.default_rng(6).normal(size=(1, 6, 3))
        orig = bilstm_encode(fwd, bwd, Tensor(x)).outputs.data[0]
        rev = bilstm_encode(bwd, fwd, Tensor(x[:, ::-1].copy())).outputs.data[0]
        np.testing.assert_allclose(rev[:, :4], orig[::-1, 4:], atol=1e-6)
        np.testing.assert_allclose(rev[:, 4:], orig[::-1, :4], atol=1e-6)

    def test_padding_does_not_change_real_rows(self):
        s = lstm_store(3, 4)
        fwd, bwd = LstmParams.from_store(s, "fwd"), LstmParams.from_store(s, "bwd")
        x = np.random.default_rng(7).normal(size=(1, 4, 3))
        alone = bilstm_encode(fwd, bwd, Tensor(x))
        padded_x = np.concatenate([x, np.random.default_rng(8).normal(size=(1, 3, 3))], axis=1)
        padded = bilstm_encode(fwd, bwd, Tensor(padded_x), mask=np.array([[1, 1, 1, 1, 0, 0, 0]]))
        np.testing.assert_allclose(padded.outputs.data[0, :4], alone.outputs.data[0], atol=1e-6)
        np.testing.assert_array_equal(padded.outputs.data[0, 4:], 0)
        np.testing.assert_allclose(padded.bwd_final.memory.data, alone.bwd_final.memory.data, atol=1e-6)
        np.testing.assert_allclose(padded.fwd_final.memory.data, alone.fwd_final.memory.data, atol=1e-6)

    @pytest.mark.parametrize("steps", [1, 2, 17, 400])
    def test_row_count_equals_length(self, steps):
        s = lstm_store(3, 2)
        enc = bilstm_encode(LstmParams.from_store(s, "fwd"), LstmParams.from_store(s, "bwd"),
                            Tensor(np.ones((1, steps, 3))))
        assert enc.outputs.shape == (1, steps, 4)
        assert enc.length == steps

    def test_empty_sequence_rejected(self):
        s = lstm_store(3, 2)
        with pytest.raises(ValueError, match="empty"):
            bilstm_encode(LstmParams.from_store(s, "fwd"), LstmParams.from_store(s, "bwd"),
                          Tensor(np.ones((1, 0, 3))))

    def test_gradient_check(self):
        s = lstm_store(4, 8, scale=0.4)
        x = np.random.default_rng(9).normal(size=(1, 4, 4))
        weights = np.random.default_rng(10).normal(size=(1, 4, 16))

        def loss(p):
            enc = bilstm_encode(LstmParams.from_store(p, "fwd"), LstmParams.from_store(p, "bwd"), Tensor(x))
            return T.sum(T.mul(enc.outputs, Tensor(weights)))

        assert T.finite_difference_check(loss, s) < 5e-3


class TestReduce:
    def test_zero_inputs_zero_params(self):
        rp = ReduceParams(Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)), Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
        z = zero_state(1, 2)
        out = reduce_states(rp, z, z)
        np.testing.assert_array_equal(out.hidden.data, 0)
        np.testing.assert_array_equal(out.memory.data, 0)

    def test_identity_weights_give_tanh_of_concatenation(self):
        eye = Tensor(np.eye(4))
        rp = ReduceParams(eye, Tensor(np.zeros(4)), eye, Tensor(np.zeros(4)))
        rng = np.random.default_rng(11)
        f = LstmState(Tensor(rng.normal(size=(1, 2))), Tensor(rng.normal(size=(1, 2))))
        b = LstmState(Tensor(rng.normal(size=(1, 2))), Tensor(rng.normal(size=(1, 2))))
        out = reduce_states(rp, f, b)
        np.testing.assert_allclose(out.hidden.data, np.tanh(np.concatenate([f.hidden.data, b.hidden.data], -1)),
                                   atol=1e-6)
        np.testing.assert_allclose(out.memory.data, np.tanh(np.concatenate([f.memory.data, b.memory.data], -1)),
                                   atol=1e-6)

    def test_gradient_check(self):
        s = ParamStore()
        init_reduce(s, "reduce", 3, 5, np.random.default_rng(12), 0.5)
        rng = np.random.default_rng(13)
        f = [rng.normal(size=(2, 3)) for _ in range(2)]
        b = [rng.normal(size=(2, 3)) for _ in range(2)]

        def loss(p):
            out = reduce_states(ReduceParams.from_store(p), LstmState(Tensor(f[0]), Tensor(f[1])),
                                LstmState(Tensor(b[0]), Tensor(b[1])))
            return T.sum(T.mul(T.add(out.hidden, T.scale(out.memory, 2.0)), Tensor(np.arange(5.0))))

        assert T.finite_difference_check(loss, s) < 5e-3
