import io
import math

import numpy as np
import pytest
from conftest import random_example, toy_model, toy_vocab
from hypothesis import given, settings
from hypothesis import strategies as st

from cbdec import tensor as T
from cbdec import training
from cbdec.data import make_batch
from cbdec.decoding import rollout
from cbdec.model import CLOSED_BOOK_PREFIXES, ENCODER_PREFIXES, names_in
from cbdec.tensor import ParamStore, Tensor
from cbdec.training import (Adagrad, Adam, Optimizer, TrainConfig, clip_gradients, compute_gradients, compute_loss,
                            coverage_loss, fit, format_log_line, global_norm, mixed_rl_xe_loss, optimizer_step,
                            rl_self_critical_loss, train_step, xe_mixed_loss)


def uniform_steps(steps, batch, vocab):
    return [Tensor(np.full((batch, vocab), 1 / vocab)) for _ in range(steps)]


def toy_batch(seed=0, n=2, n_oov=1):
    rng = np.random.default_rng(seed)
    vocab = toy_vocab()
    return make_batch([random_example(rng, vocab, 5 + k, 3 + k, n_oov=n_oov) for k in range(n)])


class TestXeLoss:
    def test_uniform_distributions_give_log_vocab(self):
        targets = np.array([[5, 6, 7, 3]])
        loss = xe_mixed_loss(uniform_steps(4, 1, 20), uniform_steps(4, 1, 20), targets, targets,
                             np.ones((1, 4)), 2 / 3)
        assert loss.item() == pytest.approx(math.log(20), abs=1e-5)
        assert loss.item() == pytest.approx(2.9957, abs=1e-4)

    def test_gamma_zero_is_pointer_nll(self):
        rng = np.random.default_rng(1)
        ptr = [rng.dirichlet(np.ones(6), size=2) for _ in range(3)]
        tgt = np.array([[1, 2, 3], [4, 5, 0]])
        mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
        loss = xe_mixed_loss([Tensor(p) for p in ptr], None, tgt, tgt, mask, 0.0)
        row0 = -np.mean([np.log(ptr[t][0, tgt[0, t]]) for t in range(3)])
        row1 = -np.mean([np.log(ptr[t][1, tgt[1, t]]) for t in range(2)])
        assert loss.item() == pytest.approx((row0 + row1) / 2, rel=1e-5)

    def test_mixture_weights(self):
        rng = np.random.default_rng(2)
        ptr = [rng.dirichlet(np.ones(6), size=1) for _ in range(2)]
        cb = [rng.dirichlet(np.ones(5), size=1) for _ in range(2)]
        ext, unk = np.array([[5, 2]]), np.array([[1, 2]])
        g = 0.3
        loss = xe_mixed_loss([Tensor(p) for p in ptr], [Tensor(p) for p in cb], ext, unk, np.ones((1, 2)), g)
        oracle = -np.mean([(1 - g) * np.log(ptr[t][0, ext[0, t]]) + g * np.log(cb[t][0, unk[0, t]])
                           for t in range(2)])
        assert loss.item() == pytest.approx(oracle, rel=1e-5)

    def test_zero_probability_is_clamped_and_counted(self):
        before = training.zero_probability_events()
        p = np.zeros((1, 4))
        p[0, 0] = 1.0
        loss = xe_mixed_loss([Tensor(p)], None, np.array([[2]]), np.array([[2]]), np.ones((1, 1)), 0.0)
        assert loss.item() == pytest.approx(-math.log(1e-10), rel=1e-4)
        assert training.zero_probability_events() == before + 1

    def test_gamma_one_leaves_pointer_params_untouched(self):
        model = toy_model(seed=1)
        grads, _ = compute_gradients(model, toy_batch(), TrainConfig(gamma=1.0))
        for name in names_in(model.params, ("attention", "gate", "ptrdec")):
            assert np.all(grads[name] == 0)


class TestCoverageLoss:
    def test_first_step_contributes_nothing(self):
        a = Tensor([[0.2, 0.8]])
        assert coverage_loss([a], [Tensor(np.zeros((1, 2)))], np.ones((1, 1))).item() == 0

    def test_repeated_attention_costs_one(self):
        a = np.array([[0.1, 0.6, 0.3]])
        loss = coverage_loss([Tensor(a), Tensor(a)], [Tensor(np.zeros_like(a)), Tensor(a)], np.ones((1, 2)))
        assert loss.item() == pytest.approx(0.5)  # (0 + 1) / 2 steps

    def test_disjoint_attention_costs_nothing(self):
        eye = np.eye(3)
        atts = [Tensor(eye[t][None]) for t in range(3)]
        covs = [Tensor(eye[:t].sum(axis=0)[None]) for t in range(3)]
        assert coverage_loss(atts, covs, np.ones((1, 3))).item() == 0


class TestRlLoss:
    def test_zero_advantage_gives_zero_loss_and_gradients(self):
        s = ParamStore()
        s.add("w", [0.3, -0.2])
        with T.recording():
            lp = [T.log(T.sigmoid(T.reshape(T.sum(s["w"]), (1,))))]
            loss = rl_self_critical_loss(lp, np.ones((1, 1)), [0.4], [0.4])
            g = T.backward(loss, s)
        assert loss.item() == 0
        np.testing.assert_array_equal(g["w"], 0)

    def test_doubling_advantage_doubles_loss(self):
        lp = [Tensor([-1.2, -0.3]), Tensor([-0.7, -2.0])]
        mask = np.array([[1, 1], [1, 0]])
        one = rl_self_critical_loss(lp, mask, [0.2, 0.5], [0.4, 0.1]).item()
        two = rl_self_critical_loss(lp, mask, [0.0, 0.9], [0.4, 0.1]).item()
        assert two == pytest.approx(2 * one, rel=1e-6)

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError):
            rl_self_critical_loss([Tensor([-1.0])], np.zeros((1, 1)), [0.0], [0.0])

    def test_better_sample_becomes_more_likely(self):
        model = toy_model(seed=4, init_scale=0.5)
        batch = toy_batch(seed=4, n=1)
        rng = np.random.default_rng(4)
        with T.recording():
            enc, init = model.encode(batch.enc_ids, batch.enc_mask)
            sample = rollout(model, batch, enc, init, "sample", rng=rng, record=True, max_len=5)
            before = sum(lp.item() for lp in sample.log_probs)
            loss = rl_self_critical_loss(sample.log_probs, sample.mask, sample_rewards=[1.0], greedy_rewards=[0.0])
            grads = T.backward(loss, model.params)
        optimizer_step("sgd", model.params, grads, lr=0.05)

        def replay_logp():
            enc, init = model.encode(batch.enc_ids, batch.enc_mask)
            state, (ctx, cov) = init, model.initial_decoder_inputs(enc)
            from cbdec.model import attention_features
            feats = attention_features(model.attention, enc)
            prev, total = 2, 0.0
            for tok in sample.ids[0]:
                step = model.pointer_step(enc, feats, state, ctx, [prev], cov, batch.enc_ext_ids, batch.n_oov)
                total += math.log(step.p_final.data[0, tok])
                state, ctx, cov = step.state, step.context, step.next_coverage
                prev = tok if tok < 20 else 1
            return total

        with T.no_record():
            after = replay_logp()
        assert after > before


class TestMixedRlXe:
    @pytest.mark.parametrize("lam,expected", [(0.0, 2.0), (1.0, 1.0), (0.9984, 1.0016)])
    def test_examples(self, lam, expected):
        assert mixed_rl_xe_loss(1.0, 2.0, lam) == pytest.approx(expected, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            mixed_rl_xe_loss(1.0, 2.0, 1.5)


class TestClipping:
    def test_below_threshold_unchanged(self):
        g = {"a": np.array([0.6, 0.8])}
        out, norm = clip_gradients(g, 2.0)
        assert norm == pytest.approx(1.0)
        np.testing.assert_array_equal(out["a"], g["a"])

    def test_scaled_to_threshold(self):
        out, norm = clip_gradients({"a": np.array([3.0, 4.0])}, 2.0)
        assert norm == 5.0
        np.testing.assert_allclose(out["a"], [1.2, 1.6])

    def test_non_finite_names_parameter(self):
        with pytest.raises(FloatingPointError, match="ptrdec.proj.b2"):
            clip_gradients({"a": np.ones(2), "ptrdec.proj.b2": np.array([np.nan])}, 2.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=12), st.floats(0.01, 10))
def test_clipped_norm_never_exceeds_threshold(values, clip):
    grads = {"a": np.array(values[: len(values) // 2 + 1]), "b": np.array(values[len(values) // 2 + 1:])}
    out, _ = clip_gradients(grads, clip)
    assert global_norm(out) <= clip + 1e-5


class TestOptimizers:
    def test_adagrad_zero_gradient(self):
        s = ParamStore()
        s.add("w", [1.0, 2.0])
        opt = Adagrad(0.15, 0.1)
        opt.step(s, {"w": np.zeros(2)})
        np.testing.assert_array_equal(s["w"].data, [1.0, 2.0])
        np.testing.assert_allclose(opt.acc["w"], 0.1)

    def test_adagrad_first_step(self):
        s = ParamStore()
        s.add("w", [0.0])
        optimizer_step("adagrad", s, {"w": np.array([1.0])}, lr=0.15)
        assert s["w"].data[0] == pytest.approx(-0.15 / math.sqrt(1.1), abs=1e-6)
        assert s["w"].data[0] == pytest.approx(-0.14302, abs=1e-5)

    @pytest.mark.parametrize("g", [1e-3, 0.5, -7.0])
    def test_adam_first_step_moves_by_lr(self, g):
        s = ParamStore()
        s.add("w", [0.0])
        Adam(lr=1e-3).step(s, {"w": np.array([g])})
        assert abs(s["w"].data[0]) == pytest.approx(1e-3, rel=1e-4)

    def test_sgd(self):
        s = ParamStore()
        s.add("w", [1.0])
        Optimizer(0.5).step(s, {"w": np.array([2.0])})
        assert s["w"].data[0] == 0.0

    def test_state_round_trip(self):
        s = ParamStore()
        s.add("w", [1.0, 2.0])
        opt = Adam(0.01)
        opt.step(s, {"w": np.array([0.5, -1.0])})
        clone = Adam(0.01)
        clone.load_state(opt.state_arrays())
        a, b = s.copy(), s.copy()
        opt.step(a, {"w": np.array([0.1, 0.2])})
        clone.step(b, {"w": np.array([0.1, 0.2])})
        np.testing.assert_array_equal(a["w"].data, b["w"].data)


class TestConfigValidation:
    @pytest.mark.parametrize("kwargs", [{"gamma": 1.5}, {"rl_mix_lambda": -0.1}, {"clip_norm": 0},
                                        {"optimizer": "rmsprop"}])
    def test_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestAblationSwitches:
    def grads(self, gamma=1.0, **kw):
        model = toy_model(seed=5)
        g, _ = compute_gradients(model, toy_batch(seed=5), TrainConfig(gamma=gamma, **kw))
        return model, g

    def test_cut_one_blocks_encoder_gradients(self):
        model, g = self.grads(flow_cut_1=True)
        for name in names_in(model.params, ENCODER_PREFIXES):
            assert np.all(g[name] == 0), name
        assert np.any(g["embedding"] != 0)

    def test_cut_two_leaves_only_the_encoder_route_into_embeddings(self):
        _, full = self.grads()
        _, cut1 = self.grads(flow_cut_1=True)
        _, cut2 = self.grads(flow_cut_2=True)
        model, both = self.grads(flow_cut_1=True, flow_cut_2=True)
        # the two routes into the embedding matrix add up to the uncut gradient
        np.testing.assert_allclose(cut1["embedding"] + cut2["embedding"], full["embedding"], atol=1e-6)
        assert np.any(cut2["embedding"] != 0)
        np.testing.assert_array_equal(both["embedding"], 0)
        for name in names_in(model.params, ENCODER_PREFIXES):
            assert np.all(both[name] == 0), name
        for name in names_in(model.params, CLOSED_BOOK_PREFIXES):
            assert np.any(both[name] != 0), name

    def test_cuts_do_not_change_the_loss_value(self):
        model = toy_model(seed=6)
        batch = toy_batch(seed=6)
        with T.no_record():
            a, _ = compute_loss(model, batch, TrainConfig())
            b, _ = compute_loss(model, batch, TrainConfig(flow_cut_1=True, flow_cut_2=True))
        assert a.item() == b.item()

    def test_fixed_encoder_is_bit_identical_after_training(self):
        model = toy_model(seed=7)
        before = {n: model.params[n].data.copy() for n in names_in(model.params, ENCODER_PREFIXES)}
        emb = model.params["embedding"].data.copy()
        cfg = TrainConfig(fixed_encoder=True, optimizer="adam", lr=0.01)
        opt = training.make_optimizer(cfg)
        for seed in range(4):
            res = train_step(model, toy_batch(seed=seed), cfg, opt)
            assert res.encoder_grad_norm == 0
        for name, data in before.items():
            np.testing.assert_array_equal(model.params[name].data, data)
        assert np.any(model.params["embedding"].data != emb)


class TestTrainLoop:
    def test_step_result_and_log_line(self):
        model = toy_model(seed=8)
        cfg = TrainConfig(optimizer="adam", lr=0.01)
        res = train_step(model, toy_batch(seed=8), cfg, training.make_optimizer(cfg))
        assert res.grad_norm > 0 and res.xe > 0
        line = format_log_line(3, res)
        assert line.startswith("step 3 xe ")
        for key in ("cov", "rl", "grad_norm", "sec"):
            assert f" {key} " in line

    def test_fit_reduces_loss_and_logs_each_step(self):
        rng = np.random.default_rng(9)
        vocab = toy_vocab()
        data = [random_example(rng, vocab, 6, 3) for _ in range(4)]
        model = toy_model(seed=9)
        cfg = TrainConfig(optimizer="adam", lr=0.02, batch_size=4)
        log = io.StringIO()
        hist = fit(model, data, cfg, steps=60, log_file=log)
        assert len(hist) == 60
        assert len(log.getvalue().splitlines()) == 60
        assert hist[-1].xe < 0.5 * hist[0].xe

    def test_coverage_loss_requires_coverage_model(self):
        with pytest.raises(ValueError, match="coverage"):
            compute_loss(toy_model(), toy_batch(), TrainConfig(coverage_loss=True))

    def test_coverage_objective_adds_weighted_term(self):
        model = toy_model(coverage=True, seed=10)
        batch = toy_batch(seed=10)
        with T.no_record():
            _, s = compute_loss(model, batch, TrainConfig(coverage_loss=True, coverage_weight=0.5))
        assert s["coverage"] > 0
        assert s["total"] == pytest.approx(s["xe"] + 0.5 * s["coverage"], rel=1e-6)

    def test_rl_objective_keeps_closed_book_term(self):
        model = toy_model(seed=11)
        batch = toy_batch(seed=11)
        cfg = TrainConfig(rl=True, rl_mix_lambda=0.5)
        grads, stats = compute_gradients(model, batch, cfg, np.random.default_rng(0))
        assert stats["total"] == pytest.approx(0.5 * stats["rl"] + 0.5 * stats["xe"], rel=1e-5, abs=1e-7)
        assert np.any(grads["cbdec.proj.b2"] != 0)

    def test_full_model_gradient_check_with_coverage_loss(self):
        model = toy_model(hidden=4, embed=4, coverage=True, seed=12, init_scale=0.5)
        batch = toy_batch(seed=12, n=2)
        cfg = TrainConfig(coverage_loss=True)
        err = T.finite_difference_check(lambda p: compute_loss(type(model)(model.config, p), batch, cfg)[0],
                                         model.params)
        assert err < 5e-3
