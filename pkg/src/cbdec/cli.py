"""Command-line entry point: build-vocab, train, decode, eval, analyze.

Configuration precedence is flags > JSON config file > defaults. Every
field of :class:`RunConfig` has a kebab-case flag on ``train`` and
``analyze``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Vocabulary, build_vocab, encode_example, generate_synthetic_corpus, iterate_batches,
                   load_jsonl, save_jsonl, tokenize)
from .decoding import DecodeConfig, beam_search_decode, detokenize, greedy_decode_batch, sample_decode
from .metrics import MEMORY_STATES, MetricReport, evaluate_corpus, memory_similarity
from .model import ModelConfig, TwoDecoderModel, init_params
from .training import TrainConfig, encoder_param_names, evaluate_xe, fit, format_log_line, make_optimizer


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    vocab_size: int = 50000
    embed_dim: int = 128
    hidden_dim: int = 256
    max_enc_steps: int = 400
    max_dec_steps: int = 100
    coverage_enabled: bool = False
    init_scale: float = 0.02
    # training
    gamma: float = 2 / 3
    rl_mix_lambda: float = 0.9984
    coverage_weight: float = 1.0
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
    steps: int = 1000
    eval_every: int = 100
    # decoding
    mode: str = "greedy"
    beam_size: int = 4
    min_len: int = 35
    max_len: int = 100
    # paths
    train_data: str | None = None
    val_data: str | None = None
    test_data: str | None = None
    vocab: str | None = None
    checkpoint_dir: str | None = None
    report: str | None = None

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        return ModelConfig(vocab_size or self.vocab_size, self.embed_dim, self.hidden_dim, self.max_enc_steps,
                           self.max_dec_steps, self.coverage_enabled, self.init_scale)

    def train_config(self, **overrides) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kw.update(overrides)
        return TrainConfig(**kw)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.mode, self.beam_size, self.min_len, min(self.max_len, self.max_dec_steps), self.seed)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def add_run_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        kind = {"int": int, "float": float, "bool": _bool}.get(str(f.type), str)
        if f.type == "bool":
            p.add_argument(_flag(f.name), type=_bool, nargs="?", const=True, default=None)
        else:
            p.add_argument(_flag(f.name), type=kind, default=None)


def resolve_run_config(args: argparse.Namespace) -> tuple[RunConfig, set[str]]:
    """Merge defaults, config file and flags; also return the explicitly-set names."""
    values = {}
    explicit: set[str] = set()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        loaded = json.loads(path.read_text())
        known = {f.name for f in fields(RunConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise CliError(f"unknown config keys in {path}: {sorted(unknown)}")
        values.update(loaded)
        explicit.update(loaded)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
            explicit.add(f.name)
    return RunConfig(**values), explicit


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise CliError(f"missing required path: {what}")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not readable: {p}")
    return p


def _load_examples(path, what):
    try:
        return load_jsonl(_require_file(path, what))
    except ValueError as exc:
        raise CliError(str(exc)) from None


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_generate_corpus(args) -> int:
    corpus = generate_synthetic_corpus(args.seed, args.n_examples, args.article_len, args.n_salient,
                                       args.oov_fraction)
    save_jsonl(corpus, args.out)
    print(f"wrote {len(corpus)} examples to {args.out}")
    return 0


def cmd_build_vocab(args) -> int:
    examples = _load_examples(args.data, "data")
    vocab = build_vocab((ex.article + ex.summary for ex in examples), args.max_size)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} tokens to {args.out}")
    return 0


def _load_model(ckpt_path, cfg: RunConfig | None = None):
    try:
        ckpt = load_checkpoint(ckpt_path)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from None
    saved = ckpt.config or {}
    base = RunConfig(**{k: v for k, v in saved.items() if k in {f.name for f in fields(RunConfig)}})
    # tensor shapes are the ground truth for the architecture
    vocab_size, base.embed_dim = ckpt.params["embedding"].shape
    base.hidden_dim = ckpt.params["encoder.fwd.w_h"].shape[0]
    model_cfg = base.model_config(vocab_size=vocab_size)
    if cfg is not None and cfg.coverage_enabled:
        model_cfg.coverage_enabled = True
    return TwoDecoderModel(model_cfg, ckpt.params), ckpt


class Trainer:
    """Owns one training run: data, model, optimizer, logs and checkpoints."""

    def __init__(self, cfg: RunConfig, phase: str, restore: str | None, explicit: set[str],
                 encoder_from: str | None = None):
        self.cfg = cfg
        self.phase = phase
        if not cfg.checkpoint_dir:
            raise CliError("missing required path: --checkpoint-dir")
        vocab_path = _require_file(cfg.vocab, "vocab")
        self.train_examples = _load_examples(cfg.train_data, "train data")
        self.val_examples = _load_examples(cfg.val_data, "validation data") if cfg.val_data else []
        self.vocab = Vocabulary.load(vocab_path)
        self.out = Path(cfg.checkpoint_dir)
        self.out.mkdir(parents=True, exist_ok=True)

        overrides = {}
        if phase == "coverage":
            cfg.coverage_enabled = True
            overrides["coverage_loss"] = True
        elif phase == "rl":
            overrides["rl"] = True
            if "optimizer" not in explicit:
                cfg.optimizer = overrides["optimizer"] = "adam"
            if "lr" not in explicit:
                cfg.lr = overrides["lr"] = 1e-6
        if phase in ("coverage", "rl") and not restore:
            raise CliError(f"phase {phase!r} needs --restore pointing at a trained checkpoint")
        self.train_cfg = cfg.train_config(**overrides)

        self.step = 0
        self.optimizer = make_optimizer(self.train_cfg)
        if restore:
            model, ckpt = _load_model(restore, cfg)
            mc = model.config
            cfg.embed_dim, cfg.hidden_dim = mc.embed_dim, mc.hidden_dim
            cfg.max_enc_steps, cfg.max_dec_steps = mc.max_enc_steps, mc.max_dec_steps
            cfg.coverage_enabled = mc.coverage_enabled
            if len(self.vocab) != model.vocab_size:
                raise CliError(f"vocab mismatch: checkpoint has {model.vocab_size} rows, vocab file has {len(self.vocab)}")
            self.model = model
            self.step = ckpt.step
            if ckpt.optimizer_kind == self.optimizer.kind and ckpt.optimizer_state:
                self.optimizer.load_state(ckpt.optimizer_state)
        else:
            self.model = TwoDecoderModel(cfg.model_config(len(self.vocab)),
                                         init_params(cfg.model_config(len(self.vocab)), cfg.seed))
        if encoder_from:
            donor, _ = _load_model(encoder_from)
            for name in encoder_param_names(self.model.params):
                self.model.params.assign(name, donor.params[name].data)
        cfg.vocab_size = len(self.vocab)
        (self.out / "run_config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True))

        mc = self.model.config
        self.train_enc = [encode_example(e, self.vocab, mc.max_enc_steps, mc.max_dec_steps) for e in self.train_examples]
        self.val_enc = [encode_example(e, self.vocab, mc.max_enc_steps, mc.max_dec_steps) for e in self.val_examples]
        self.best_val = float("inf")
        self.val_history: dict[int, float] = {}

    def save(self, tag: str) -> Path:
        return save_checkpoint(self.out / tag, self.model.params, self.optimizer,
                               dataclasses.asdict(self.cfg), self.step)

    def validate(self) -> float:
        if not self.val_enc:
            return float("nan")
        batches = list(iterate_batches(self.val_enc, self.cfg.batch_size))
        return evaluate_xe(self.model, batches, self.train_cfg.gamma)

    def run(self, steps: int) -> list:
        history = []
        log_path = self.out / "train.log"

        def callback(step, result):
            self.step = step
            if self.cfg.eval_every and step % self.cfg.eval_every == 0:
                val = self.validate()
                if val == val:
                    self.val_history[step] = val
                    print(f"step {step} val_xe {val:.5f}", flush=True)
                    if val < self.best_val:
                        self.best_val = val
                        self.save("best-val")

        with open(log_path, "a", encoding="utf-8") as log_file:
            history = fit(self.model, self.train_enc, self.train_cfg, steps, self.optimizer, self.step,
                          log_file=log_file, callback=callback, echo=True)
        self.save("latest")
        if not self.val_enc:
            self.save("best-val")
        self._plot(history)
        return history

    def _plot(self, history) -> None:
        from .plotting import plot_training_curve

        if not history:
            return
        steps = list(range(self.step - len(history) + 1, self.step + 1))
        plot_training_curve(steps, {"xe": [h.xe for h in history], "coverage": [h.coverage for h in history],
                                    "rl": [h.rl for h in history]},
                            self.out / f"train_curve_{self.phase}.png", self.val_history)


def cmd_train(args) -> int:
    cfg, explicit = resolve_run_config(args)
    trainer = Trainer(cfg, args.phase, args.restore, explicit)
    start = time.perf_counter()
    trainer.run(cfg.steps)
    print(f"trained to step {trainer.step} in {time.perf_counter() - start:.1f}s; checkpoints in {trainer.out}")
    return 0


def _decode_examples(model, examples, vocab, dcfg: DecodeConfig) -> list[list[str]]:
    mc = model.config
    enc = [encode_example(e, vocab, mc.max_enc_steps, mc.max_dec_steps) for e in examples]
    if dcfg.mode == "greedy":
        ids = []
        for start in range(0, len(enc), 64):
            ids.extend(greedy_decode_batch(model, enc[start:start + 64], dcfg))
    elif dcfg.mode == "sample":
        rng = np.random.default_rng(dcfg.seed)
        ids = [sample_decode(model, e, dcfg, rng)[0] for e in enc]
    else:
        ids = [beam_search_decode(model, e, dcfg) for e in enc]
    return [detokenize(i, vocab, e.oov_words) for i, e in zip(ids, enc)]


def cmd_decode(args) -> int:
    vocab = Vocabulary.load(_require_file(args.vocab, "vocab"))
    examples = _load_examples(args.data, "data")
    model, _ = _load_model(args.checkpoint)
    if model.vocab_size != len(vocab):
        raise CliError(f"vocab mismatch: checkpoint has {model.vocab_size} rows, vocab file has {len(vocab)}")
    dcfg = DecodeConfig(args.mode, args.beam_size, args.min_len, min(args.max_len, model.config.max_dec_steps),
                        args.seed)
    summaries = _decode_examples(model, examples, vocab, dcfg)
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, s in enumerate(summaries):
            fh.write(json.dumps({"summary": " ".join(s), "example_index": i}) + "\n")
    print(f"wrote {len(summaries)} summaries to {args.out}")
    return 0


def _read_summaries(path) -> list[list[str]]:
    rows = []
    with open(_require_file(path, "summaries"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                rows.append((obj.get("example_index", len(rows)), tokenize(obj.get("summary", ""))))
    rows.sort(key=lambda r: r[0])
    return [r[1] for r in rows]


def _write_report(report: MetricReport, path: str | None, figure: str | None) -> None:
    print(report.table())
    if path:
        Path(path).write_text(report.to_json())
        print(f"report written to {path}")
        if figure is None:
            figure = str(Path(path).with_suffix(".png"))
    if figure:
        from .plotting import plot_metric_report

        plot_metric_report(report, figure)
        print(f"figure written to {figure}")


def cmd_eval(args) -> int:
    candidates = _read_summaries(args.summaries)
    refs = _load_examples(args.references, "references")
    if len(candidates) != len(refs):
        raise CliError(f"length mismatch: {len(candidates)} summaries vs {len(refs)} references")
    keywords = [e.keywords for e in refs]
    report = evaluate_corpus(candidates, [e.summary for e in refs], [e.article for e in refs],
                             keywords if any(keywords) else None)
    _write_report(report, args.report, args.figure)
    return 0


def _validation_report(model, examples, vocab, cfg: RunConfig) -> MetricReport:
    dcfg = DecodeConfig("greedy", 1, cfg.min_len, min(cfg.max_len, model.config.max_dec_steps), cfg.seed)
    cands = _decode_examples(model, examples, vocab, dcfg)
    keywords = [e.keywords for e in examples]
    return evaluate_corpus(cands, [e.summary for e in examples], [e.article for e in examples],
                           keywords if any(keywords) else None)


def cmd_analyze(args) -> int:
    if args.analysis == "memory-sim":
        return _analyze_memory(args)
    cfg, explicit = resolve_run_config(args)
    if args.analysis == "fixed-encoder":
        if not args.encoder_from:
            raise CliError("fixed-encoder needs --encoder-from CHECKPOINT")
        cfg.fixed_encoder = True
        if "gamma" not in explicit:
            cfg.gamma = 0.0
        trainer = Trainer(cfg, "xe", None, explicit, encoder_from=args.encoder_from)
    else:
        if args.cut == 1:
            cfg.flow_cut_1 = True
        else:
            cfg.flow_cut_2 = True
        trainer = Trainer(cfg, "xe", None, explicit)
    before = {n: trainer.model.params[n].data.copy() for n in encoder_param_names(trainer.model.params)}
    history = trainer.run(cfg.steps)
    frozen_ok = all(np.array_equal(before[n], trainer.model.params[n].data) for n in before)
    summary = {
        "analysis": args.analysis,
        "steps": trainer.step,
        "final_xe": history[-1].xe if history else None,
        "val_xe": trainer.validate() if trainer.val_enc else None,
        "encoder_unchanged": frozen_ok,
        "max_encoder_grad_norm": max((h.encoder_grad_norm for h in history), default=0.0),
    }
    if args.analysis == "flow-cut":
        summary["cut"] = args.cut
    if trainer.val_examples:
        summary["val_metrics"] = _validation_report(trainer.model, trainer.val_examples, trainer.vocab, cfg).to_dict()
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    if cfg.report:
        Path(cfg.report).write_text(text)
    return 0


def _analyze_memory(args) -> int:
    vocab = Vocabulary.load(_require_file(args.vocab, "vocab"))
    examples = _load_examples(args.data, "data")
    results, all_sims = {}, {}
    for path in args.checkpoint:
        model, _ = _load_model(path)
        if model.vocab_size != len(vocab):
            raise CliError(f"vocab mismatch for {path}: {model.vocab_size} vs {len(vocab)}")
        mc = model.config
        arts = [[vocab.id(t) for t in e.article[:mc.max_enc_steps]] for e in examples]
        sums = [[vocab.id(t) for t in e.summary[:mc.max_enc_steps]] for e in examples]
        mean, sims = memory_similarity(model, arts, sums, state=args.memory_state, return_all=True)
        results[path] = mean
        all_sims[Path(path).name or path] = sims
        print(f"{path}\tmemory_cosine {mean:.4f}")
    if args.report:
        Path(args.report).write_text(json.dumps({"memory_cosine": results, "state": args.memory_state}, indent=2))
    figure = args.figure or (str(Path(args.report).with_suffix(".png")) if args.report else None)
    if figure:
        from .plotting import plot_memory_similarity

        plot_memory_similarity(all_sims, figure)
    return 0


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbdec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-corpus", help="write a synthetic JSON-lines corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-examples", type=int, default=500)
    g.add_argument("--article-len", type=int, default=8, help="sentences per article")
    g.add_argument("--n-salient", type=int, default=2)
    g.add_argument("--oov-fraction", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=13)
    g.set_defaults(func=cmd_generate_corpus)

    b = sub.add_parser("build-vocab", help="build a frequency-ranked vocabulary file")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--max-size", type=int, default=50000)
    b.set_defaults(func=cmd_build_vocab)

    t = sub.add_parser("train", help="train one phase (xe, coverage fine-tune, rl)")
    t.add_argument("--phase", choices=("xe", "coverage", "rl"), default="xe")
    t.add_argument("--restore", help="checkpoint directory to resume or fine-tune from")
    add_run_config_flags(t)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode summaries with the pointer decoder")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--vocab", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=("greedy", "sample", "beam"), default="greedy")
    d.add_argument("--beam-size", type=int, default=4)
    d.add_argument("--min-len", type=int, default=35)
    d.add_argument("--max-len", type=int, default=100)
    d.add_argument("--seed", type=int, default=13)
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="score decoded summaries against references")
    e.add_argument("--summaries", required=True)
    e.add_argument("--references", required=True, help="dataset JSON-lines aligned by index")
    e.add_argument("--report", help="JSON report path (figure goes next to it)")
    e.add_argument("--figure")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="memory-similarity test and ablations")
    asub = a.add_subparsers(dest="analysis", required=True)
    m = asub.add_parser("memory-sim", help="cosine of encoder memory after article vs gold summary")
    m.add_argument("--checkpoint", action="append", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--vocab", required=True)
    m.add_argument("--memory-state", choices=MEMORY_STATES, default="raw")
    m.add_argument("--report")
    m.add_argument("--figure")
    m.set_defaults(func=cmd_analyze)
    f = asub.add_parser("fixed-encoder", help="train with an encoder restored from a checkpoint and frozen")
    f.add_argument("--encoder-from", required=True)
    add_run_config_flags(f, skip=("fixed_encoder",))
    f.set_defaults(func=cmd_analyze)
    c = asub.add_parser("flow-cut", help="train with one closed-book gradient path cut")
    c.add_argument("--cut", type=int, choices=(1, 2), required=True)
    add_run_config_flags(c, skip=("flow_cut_1", "flow_cut_2"))
    c.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError, IndexError, KeyError) as exc:
        msg = str(exc).strip("'\"") or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
