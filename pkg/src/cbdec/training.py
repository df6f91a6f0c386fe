"""Losses, optimizers, gradient clipping and the training step."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Batch
from .model import CLOSED_BOOK_PREFIXES, ENCODER_PREFIXES, POINTER_PREFIXES, TwoDecoderModel, names_in
from .tensor import ParamStore, Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-10
_zero_prob_events = 0


def zero_probability_events() -> int:
    """How many target probabilities hit the clamp floor so far."""
    return _zero_prob_events


@dataclass
class TrainConfig:
    gamma: float = 2 / 3
    rl_mix_lambda: float = 0.9984
    coverage_weight: float = 1.0
    coverage_loss: bool = False
    rl: bool = False
    optimizer: str = "adagrad"
    lr: float = 0.15
    adagrad_init_acc: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 2.0
    batch_size: int = 16
    flow_cut_1: bool = False
    flow_cut_2: bool = False
    fixed_encoder: bool = False
    seed: int = 13

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 <= self.rl_mix_lambda <= 1:
            raise ValueError("rl_mix_lambda must lie in [0, 1]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.coverage_weight < 0:
            raise ValueError("coverage_weight must be non-negative")
        if self.optimizer not in ("adagrad", "adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------


def _target_log_prob(probs: Tensor, targets) -> Tensor:
    global _zero_prob_events
    p = T.pick(probs, targets)
    hits = int(np.sum(p.data <= 0))
    if hits:
        _zero_prob_events += hits
        log.warning("target probability of 0 clamped to %g (%d entries)", PROB_FLOOR, hits)
    return T.log(T.clamp_min(p, PROB_FLOOR))


def _per_example_mean(step_terms: Sequence[Tensor], mask: np.ndarray) -> Tensor:
    """(1/T_b) * sum_t term_t masked, averaged over the batch."""
    mask = np.asarray(mask, dtype=T.get_dtype())
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("every sequence needs at least one unmasked step")
    total = T.sum(T.mul(T.stack(step_terms, axis=1), Tensor(mask)), axis=1)
    return T.mean(T.div(total, Tensor(lengths)))


def xe_mixed_loss(ptr_probs: Sequence[Tensor] | None, cb_probs: Sequence[Tensor] | None,
                  target_ext, target_unk, mask, gamma: float) -> Tensor:
    """(1/T) sum_t -[(1 - gamma) log P_attn(w_t) + gamma log P_cbdec(w_t)], padding excluded.

    A decoder whose weight is zero may be passed as None and is skipped.
    """
    target_ext = np.asarray(target_ext)
    target_unk = np.asarray(target_unk)
    terms = []
    for t in range(target_ext.shape[1]):
        parts = []
        if gamma < 1:
            parts.append(T.scale(_target_log_prob(ptr_probs[t], target_ext[:, t]), -(1 - gamma)))
        if gamma > 0:
            parts.append(T.scale(_target_log_prob(cb_probs[t], target_unk[:, t]), -gamma))
        terms.append(parts[0] if len(parts) == 1 else T.add(parts[0], parts[1]))
    return _per_example_mean(terms, mask)


def coverage_loss(attentions: Sequence[Tensor], coverages: Sequence[Tensor], mask) -> Tensor:
    """(1/T) sum_t sum_i min(a_i^t, c_i^t) with c^t the coverage before step t."""
    terms = [T.sum(T.minimum(a, c), axis=-1) for a, c in zip(attentions, coverages)]
    return _per_example_mean(terms, mask)


def rl_self_critical_loss(log_probs: Sequence[Tensor], mask, sample_rewards, greedy_rewards) -> Tensor:
    """(1/T) sum_t (r(greedy) - r(sample)) * log P(sampled w_t); rewards are constants."""
    mask = np.asarray(mask)
    if mask.size == 0 or np.any(mask.sum(axis=1) == 0):
        raise ValueError("rl_self_critical_loss: empty sampled sequence")
    advantage = np.asarray(greedy_rewards, dtype=T.get_dtype()) - np.asarray(sample_rewards, dtype=T.get_dtype())
    adv = Tensor(advantage)
    return _per_example_mean([T.mul(adv, lp) for lp in log_probs], mask)


def mixed_rl_xe_loss(l_rl, l_xe, rl_mix_lambda: float):
    """lambda * L_RL + (1 - lambda) * L_XE."""
    if not 0 <= rl_mix_lambda <= 1:
        raise ValueError("rl_mix_lambda must lie in [0, 1]")
    if isinstance(l_rl, Tensor) or isinstance(l_xe, Tensor):
        return T.add(T.scale(l_rl, rl_mix_lambda), T.scale(l_xe, 1 - rl_mix_lambda))
    return rl_mix_lambda * l_rl + (1 - rl_mix_lambda) * l_xe


# ----------------------------------------------------------------------------
# gradients and optimizers
# ----------------------------------------------------------------------------


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads, norm
    factor = clip_norm / norm
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}, norm


class Optimizer:
    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.step_count = 0

    def update(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return param - self.lr * grad

    def step(self, params: ParamStore, grads: dict[str, np.ndarray], frozen: Sequence[str] = ()) -> None:
        self.step_count += 1
        skip = set(frozen)
        for name, t in params.items():
            if name in skip or name not in grads:
                continue
            t.data = self.update(name, t.data, grads[name]).astype(t.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"step": np.array([self.step_count], dtype=np.float32)}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["step"][0]) if "step" in arrays else 0


class Adagrad(Optimizer):
    """acc += g^2; theta -= lr * g / sqrt(acc), accumulators start at ``init_acc``."""

    kind = "adagrad"

    def __init__(self, lr: float = 0.15, init_acc: float = 0.1):
        super().__init__(lr)
        self.init_acc = init_acc
        self.acc: dict[str, np.ndarray] = {}

    def update(self, name, param, grad):
        acc = self.acc.get(name)
        if acc is None:
            acc = np.full_like(param, self.init_acc)
        acc = acc + grad * grad
        self.acc[name] = acc
        return param - self.lr * grad / np.sqrt(acc)

    def state_arrays(self):
        out = super().state_arrays()
        out.update({f"acc/{k}": v for k, v in self.acc.items()})
        return out

    def load_state(self, arrays):
        super().load_state(arrays)
        self.acc = {k[4:]: np.array(v) for k, v in arrays.items() if k.startswith("acc/")}


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr: float = 1e-6, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, name, param, grad):
        m = self.beta1 * self.m.get(name, 0) + (1 - self.beta1) * grad
        v = self.beta2 * self.v.get(name, 0) + (1 - self.beta2) * grad * grad
        self.m[name], self.v[name] = m, v
        t = self.step_count
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        out = super().state_arrays()
        out.update({f"m/{k}": v for k, v in self.m.items()})
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays):
        super().load_state(arrays)
        self.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}


def make_optimizer(config: TrainConfig) -> Optimizer:
    if config.optimizer == "adagrad":
        return Adagrad(config.lr, config.adagrad_init_acc)
    if config.optimizer == "adam":
        return Adam(config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    return Optimizer(config.lr)


def optimizer_step(kind: str, params: ParamStore, grads: dict[str, np.ndarray], state: Optimizer | None = None,
                   lr: float | None = None) -> Optimizer:
    """Functional wrapper: build (or reuse) the optimizer state and apply one update."""
    if state is None:
        state = make_optimizer(TrainConfig(optimizer=kind, lr=lr if lr is not None else 0.15))
    elif lr is not None:
        state.lr = lr
    state.step(params, grads)
    return state


# ----------------------------------------------------------------------------
# training step
# ----------------------------------------------------------------------------


@dataclass
class StepResult:
    xe: float
    coverage: float = 0.0
    rl: float = 0.0
    total: float = 0.0
    grad_norm: float = 0.0
    seconds: float = 0.0
    encoder_grad_norm: float = 0.0
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def encoder_param_names(params: ParamStore) -> list[str]:
    return names_in(params, ENCODER_PREFIXES)


def compute_loss(model: TwoDecoderModel, batch: Batch, config: TrainConfig,
                 rng: np.random.Generator | None = None,
                 reward_fn: Callable[[list[int], list[int]], float] | None = None) -> tuple[Tensor, dict[str, float]]:
    """Build the configured objective on the active tape."""
    enc, init = model.encode(batch.enc_ids, batch.enc_mask)
    need_ptr = config.gamma < 1 or config.coverage_loss or config.rl
    ptr = model.run_pointer(batch, enc, init) if need_ptr else None
    cb = None
    if config.gamma > 0:
        cb = model.run_closed_book(batch, init, config.flow_cut_1, config.flow_cut_2)
    xe = xe_mixed_loss([s.p_final for s in ptr] if ptr else None, [s.p_cbdec for s in cb] if cb else None,
                       batch.dec_target_ext, batch.dec_target_unk, batch.dec_mask, config.gamma)
    stats = {"xe": float(xe.item()), "coverage": 0.0, "rl": 0.0}
    total = xe
    if config.coverage_loss:
        if not model.config.coverage_enabled:
            raise ValueError("coverage loss requested but the model has coverage disabled")
        cov = coverage_loss([s.attention for s in ptr], [s.coverage for s in ptr], batch.dec_mask)
        stats["coverage"] = float(cov.item())
        total = T.add(total, T.scale(cov, config.coverage_weight))
    if config.rl:
        from .decoding import reference_ids, rollout, strip_stop
        from .metrics import rouge_l

        reward_fn = reward_fn or (lambda cand, ref: rouge_l(cand, ref)[2])
        rng = rng or np.random.default_rng(config.seed)
        sample = rollout(model, batch, enc, init, mode="sample", rng=rng, record=True)
        with T.no_record():
            greedy = rollout(model, batch, enc, init, mode="greedy")
        r_s, r_g = [], []
        for b in range(batch.size):
            ref = reference_ids(batch.examples[b])
            r_s.append(reward_fn(strip_stop(sample.ids[b]), ref))
            r_g.append(reward_fn(strip_stop(greedy.ids[b]), ref))
        l_rl = rl_self_critical_loss(sample.log_probs, sample.mask, r_s, r_g)
        stats["rl"] = float(l_rl.item())
        stats["reward_sample"] = float(np.mean(r_s))
        stats["reward_greedy"] = float(np.mean(r_g))
        total = mixed_rl_xe_loss(l_rl, total, config.rl_mix_lambda)
    stats["total"] = float(total.item())
    return total, stats


def compute_gradients(model: TwoDecoderModel, batch: Batch, config: TrainConfig,
                      rng: np.random.Generator | None = None) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    with T.recording():
        total, stats = compute_loss(model, batch, config, rng)
        grads = T.backward(total, model.params)
    if config.fixed_encoder:
        for name in encoder_param_names(model.params):
            grads[name] = np.zeros_like(grads[name])
    return grads, stats


def train_step(model: TwoDecoderModel, batch: Batch, config: TrainConfig, optimizer: Optimizer,
               rng: np.random.Generator | None = None) -> StepResult:
    """Forward both decoders, backward once, apply ablation switches, clip, update."""
    start = time.perf_counter()
    grads, stats = compute_gradients(model, batch, config, rng)
    enc_norm = global_norm({n: grads[n] for n in encoder_param_names(model.params)})
    grads, norm = clip_gradients(grads, config.clip_norm)
    frozen = encoder_param_names(model.params) if config.fixed_encoder else ()
    optimizer.step(model.params, grads, frozen=frozen)
    return StepResult(stats["xe"], stats["coverage"], stats["rl"], stats["total"], norm,
                      time.perf_counter() - start, enc_norm, grads)


def evaluate_xe(model: TwoDecoderModel, batches: Sequence[Batch], gamma: float) -> float:
    """Mean mixed XE loss over batches without recording."""
    cfg = TrainConfig(gamma=gamma)
    losses = []
    with T.no_record():
        for batch in batches:
            _, stats = compute_loss(model, batch, cfg)
            losses.append(stats["xe"])
    return float(np.mean(losses)) if losses else float("nan")


def group_names(params: ParamStore) -> dict[str, list[str]]:
    return {
        "encoder": names_in(params, ENCODER_PREFIXES),
        "embedding": ["embedding"],
        "pointer": names_in(params, POINTER_PREFIXES),
        "closed_book": names_in(params, CLOSED_BOOK_PREFIXES),
    }


def format_log_line(step: int, r: StepResult) -> str:
    return (f"step {step} xe {r.xe:.5f} cov {r.coverage:.5f} rl {r.rl:.5f} "
            f"grad_norm {r.grad_norm:.5f} enc_grad_norm {r.encoder_grad_norm:.5f} sec {r.seconds:.4f}")


def fit(model: TwoDecoderModel, encoded: Sequence, config: TrainConfig, steps: int,
        optimizer: Optimizer | None = None, start_step: int = 0, log_file=None,
        callback: Callable[[int, StepResult], None] | None = None, echo: bool = False) -> list[StepResult]:
    """Run ``steps`` optimizer steps over shuffled passes of ``encoded``.

    Each step writes one log line (to ``log_file`` and, with ``echo``, to
    stdout). ``callback(step, result)`` runs after every step.
    """
    from .data import iterate_batches

    optimizer = optimizer or make_optimizer(config)
    rng = np.random.default_rng(config.seed + start_step)
    history: list[StepResult] = []
    step = start_step
    while step < start_step + steps:
        for batch in iterate_batches(encoded, config.batch_size, rng):
            step += 1
            result = train_step(model, batch, config, optimizer, rng)
            result.grads = {}
            history.append(result)
            line = format_log_line(step, result)
            if log_file is not None:
                log_file.write(line + "\n")
            if echo:
                print(line, flush=True)
            if callback is not None:
                callback(step, result)
            if step >= start_step + steps:
                break
    return history
