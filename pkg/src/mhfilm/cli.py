"""Command-line entry point: gen-data, train, eval, gradcheck, dump-attention, compare.

Exit codes: 0 success, 1 gradient check failure, 64 usage, 2 I/O, 3 divergence, 4 checkpoint mismatch.
Settings merge in the order built-in defaults < ``--config`` file < explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .errors import CheckpointError, ConfigError, DatasetParseError, GenerationError, InputError, MHFilmError
from .film import GENERATOR_MODES, TASKS, ModelConfig, MultiHopFiLM, write_hop_trace
from .games import GameConfig, Vocabulary, build_vocabulary, game_corpus, generate_dataset, read_dataset, write_dataset
from .training import (
    TrainSettings,
    analysis_pipeline,
    attention_analysis,
    evaluate,
    gradcheck_model,
    make_examples,
    metrics_record,
    micro_config,
    train,
)

logger = logging.getLogger("mhfilm")

EXIT_OK, EXIT_FAIL, EXIT_IO, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_USAGE = 0, 1, 2, 3, 4, 64
GRADCHECK_MODES = ("baseline_nn_mlb", "single_hop", "multi_hop", "multi_hop_img")
ARCHITECTURE_FIELDS = (
    "generator_mode", "task", "blocks", "stem_channels", "block_channels", "head_channels", "d_wemb", "d_rnn",
    "d_spat", "d_cat", "d_mlb", "glimpses", "final_units", "vocab_size", "n_categories", "use_category",
    "use_crop", "use_image", "use_mask", "share_attention",
)


class UsageError(MHFilmError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Every setting a command can read. Model fields not listed here can still come from ``--config``."""

    command: str = ""
    seed: int = 0
    out: str | None = None
    dataset: str = "games.jsonl"
    checkpoint: str = "model.mhfm"
    resume: str | None = None
    metrics: str = "metrics.jsonl"
    figures: str | None = None
    split: str = "test"
    tolerance: float = 1e-3
    # generator
    n: int = 3000
    grid: int = 7
    phi_min: int = 2
    phi_max: int = 5
    dialogue_min: int = 3
    dialogue_max: int = 6
    na_rate: float = 0.1
    referit: bool = False
    split_sizes: str | None = None
    # model and training
    mode: str = "multi_hop"
    task: str = "guesser"
    epochs: int = 15
    batch: int = 32
    lr: float = 3e-4
    dropout: float = 0.5
    weight_decay: float = 5e-6
    use_category: bool = True
    use_crop: bool = True
    use_image: bool = True
    blocks: int = 4
    guesser_loss: str = "bernoulli"
    oracle_input: str = "dialogue"
    max_games: int | None = None
    plots: int = 4
    model_overrides: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)

    # run-config name -> ModelConfig name
    MODEL_KEYS = {
        "mode": "generator_mode", "task": "task", "batch": "batch_size", "lr": "lr", "dropout": "dropout",
        "weight_decay": "weight_decay", "use_category": "use_category", "use_crop": "use_crop",
        "use_image": "use_image", "blocks": "blocks", "oracle_input": "oracle_input", "seed": "seed",
    }

    def game_config(self) -> GameConfig:
        return GameConfig(grid=self.grid, phi_min=self.phi_min, phi_max=self.phi_max, dialogue_min=self.dialogue_min,
                          dialogue_max=self.dialogue_max, na_rate=self.na_rate, referit=self.referit)

    def model_changes(self, only_explicit: bool = False) -> dict:
        out = {}
        for key, name in self.MODEL_KEYS.items():
            if not only_explicit or key in self.explicit:
                out[name] = getattr(self, key)
        out.update(self.model_overrides)
        return out

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model_changes())


_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name not in ("model_overrides", "explicit", "command")}
_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_NONE_LIKE = {"max_games": 0}


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError as exc:
        raise UsageError(f"bad numeric value {value!r}") from exc
    return value


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys may use dashes or underscores."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace) -> RunConfig:
    rc = RunConfig(command=args.command)
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if key in _RUN_FIELDS:
                default = _RUN_FIELDS[key].default
                like = default if default is not None else _NONE_LIKE.get(key, "")
                setattr(rc, key, _coerce(value, like) if value.lower() != "none" else None)
                rc.explicit.add(key)
            elif key in _MODEL_FIELDS:
                rc.model_overrides[key] = _coerce(value, _MODEL_FIELDS[key].default)
            else:
                raise UsageError(f"unknown config key {key!r}")
    for key in _RUN_FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(rc, key, value)
            rc.explicit.add(key)
    return rc


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


_D = RunConfig()


def _opt(p: argparse.ArgumentParser, flag: str, typ=str, help_: str = "", shown=None, **kw) -> None:
    dest = flag.lstrip("-").replace("-", "_")
    default = getattr(_D, dest) if shown is None else shown
    p.add_argument(flag, type=typ, default=None, dest=dest, help=f"{help_} (default: {default})", **kw)


def _flag_pair(p: argparse.ArgumentParser, name: str, help_: str) -> None:
    dest = name.replace("-", "_")
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=dest, action="store_true", default=None,
                   help=f"{help_} (default: {getattr(_D, dest)})")
    neg = "--no-category" if name == "use-category" else f"--no-{name[4:]}"
    g.add_argument(neg, dest=dest, action="store_false", default=None,
                   help=f"disable: {help_} (default: {getattr(_D, dest)})")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value settings file; flags override it (default: None)")
    _opt(p, "--seed", int, "random seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: False)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    _opt(p, "--mode", str, "generator mode", choices=GENERATOR_MODES)
    _opt(p, "--task", str, "task head", choices=TASKS)
    _opt(p, "--blocks", int, "number of modulated residual blocks")
    _opt(p, "--batch", int, "mini-batch size")
    _opt(p, "--lr", float, "Adam learning rate")
    _opt(p, "--dropout", float, "dropout before the final layers")
    _opt(p, "--weight-decay", float, "decoupled weight decay on conv kernels")
    _opt(p, "--oracle-input", str, "Oracle language input", choices=("dialogue", "question"))
    _flag_pair(p, "use-category", "category embedding as side information")
    _flag_pair(p, "use-crop", "object-crop visual pipeline")
    _flag_pair(p, "use-image", "full-image visual pipeline")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="mhfilm", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic game dataset (JSON lines)")
    _common(p)
    _opt(p, "--out", str, "output dataset path", shown="games.jsonl")
    _opt(p, "--n", int, "number of games")
    _opt(p, "--grid", int, "grid cells per side")
    _opt(p, "--phi-min", int, "minimum objects per game")
    _opt(p, "--phi-max", int, "maximum objects per game")
    _opt(p, "--dialogue-min", int, "minimum dialogue length")
    _opt(p, "--dialogue-max", int, "maximum dialogue length")
    _opt(p, "--na-rate", float, "probability of a pattern question answered n/a")
    _opt(p, "--split-sizes", str, "train,valid,test counts by id range; hashed 80/10/10 when omitted")
    p.add_argument("--referit", action="store_true", default=None, help="referring-expression games (default: False)")

    p = sub.add_parser("train", help="train a model, write the best checkpoint and a metrics stream")
    _common(p)
    _opt(p, "--dataset", str, "dataset path")
    _opt(p, "--checkpoint", str, "output checkpoint path")
    _opt(p, "--resume", str, "checkpoint to resume from")
    _opt(p, "--metrics", str, "metrics JSON-lines output")
    _opt(p, "--figures", str, "directory for learning-curve figures")
    _opt(p, "--epochs", int, "maximum epochs")
    _opt(p, "--guesser-loss", str, "Guesser likelihood", choices=("bernoulli", "softmax"))
    _model_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split; prints a JSON object")
    _common(p)
    _opt(p, "--dataset", str, "dataset path")
    _opt(p, "--checkpoint", str, "checkpoint path")
    _opt(p, "--split", str, "split to evaluate", choices=("train", "valid", "test"))
    _opt(p, "--guesser-loss", str, "Guesser likelihood", choices=("bernoulli", "softmax"))
    _model_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter tensor on a micro game")
    _common(p)
    _opt(p, "--mode", str, "single mode to check", shown=",".join(GRADCHECK_MODES), choices=GENERATOR_MODES)
    _opt(p, "--task", str, "task head", choices=TASKS)
    _opt(p, "--tolerance", float, "maximum relative error")

    p = sub.add_parser("dump-attention", help="write hop-attention traces, analysis summary and heatmaps")
    _common(p)
    _opt(p, "--dataset", str, "dataset path")
    _opt(p, "--checkpoint", str, "checkpoint path")
    _opt(p, "--split", str, "split to analyse", choices=("train", "valid", "test"))
    _opt(p, "--out", str, "output directory", shown="attention")
    _opt(p, "--max-games", int, "analyse at most this many games")
    _opt(p, "--plots", int, "number of heatmap figures to render")

    p = sub.add_parser("compare", help="tabulate test metrics of several runs (TSV) and plot them")
    _common(p)
    p.add_argument("runs", nargs="+", help="metrics JSON-lines files")
    _opt(p, "--out", str, "comparison figure path (PNG)")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _parse_split_sizes(text: str | None, n: int) -> tuple[int, int, int] | None:
    if text is None:
        return None
    try:
        sizes = tuple(int(s) for s in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--split-sizes must be three integers, got {text!r}") from exc
    if len(sizes) != 3 or min(sizes) < 0 or sum(sizes) != n:
        raise UsageError(f"--split-sizes must be three nonnegative counts summing to --n={n}, got {text!r}")
    return sizes


def cmd_gen_data(rc: RunConfig) -> int:
    if rc.n <= 0:
        raise UsageError(f"--n must be positive, got {rc.n}")
    gcfg = rc.game_config()
    try:
        gcfg.validate()
    except GenerationError as exc:
        raise UsageError(str(exc)) from exc
    games = generate_dataset(rc.seed, rc.n, gcfg, _parse_split_sizes(rc.split_sizes, rc.n))
    out = rc.out or "games.jsonl"
    write_dataset(out, games)
    counts = {s: sum(g.split == s for g in games) for s in ("train", "valid", "test")}
    vocab = build_vocabulary(game_corpus([g for g in games if g.split == "train"]))
    n_obj = [len(g.objects) for g in games]
    _emit({
        "out": out, "games": len(games), "splits": counts, "vocab_size": len(vocab), "grid": gcfg.grid,
        "phi": [min(n_obj), max(n_obj)], "phi_range": [gcfg.phi_min, gcfg.phi_max],
        "dialogue_range": [gcfg.dialogue_min, gcfg.dialogue_max], "seed": rc.seed,
    })
    return EXIT_OK


def _load_games(path: str) -> list:
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return read_dataset(path)


def _split(games, name):
    return [g for g in games if g.split == name]


def _write_jsonl(fh, rec: dict) -> None:
    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    fh.flush()


def cmd_train(rc: RunConfig) -> int:
    games = _load_games(rc.dataset)
    tr, va, te = _split(games, "train"), _split(games, "valid"), _split(games, "test")
    if not tr:
        raise InputError(f"{rc.dataset}: no train games")
    if not te:
        raise InputError(f"{rc.dataset}: no test games")
    model, optimizer, start = None, None, 0
    if rc.resume:
        ck = ckpt_io.load(rc.resume)
        vocab = Vocabulary(ck.meta["vocab"])
        cfg = ck.config.replace(**rc.model_changes(only_explicit=True))
        model = MultiHopFiLM(cfg)
        ckpt_io.restore_model(model, ck)
        optimizer = ckpt_io.restore_optimizer(ck)
        start = int(ck.meta.get("epoch", 0))
        logger.info("resuming from %s at epoch %d, step %d", rc.resume, start, optimizer.t if optimizer else 0)
    else:
        vocab = build_vocabulary(game_corpus(tr))
        cfg = rc.model_config(len(vocab))
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    Path(rc.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    task = cfg.task
    with open(rc.metrics, "a" if rc.resume else "w", encoding="utf-8") as mfh:
        def cb(rec):
            _write_jsonl(mfh, rec)
            logger.info("epoch %d %s loss %.4f error %.4f", rec["epoch"], rec["split"], rec["loss"], rec["error"])

        settings = TrainSettings(epochs=rc.epochs, guesser_mode=rc.guesser_loss, callback=cb)
        result = train(cfg, make_examples(tr, task), make_examples(va, task), vocab, settings, model, optimizer, start)
        last_epoch = result.history[-1]["epoch"] if result.history else start
        ck = ckpt_io.from_training(result.model, vocab.to_list(), result.optimizer, last_epoch,
                                   {"best_epoch": result.best_epoch, "best_valid_error": result.best_valid_error,
                                    "guesser_loss": rc.guesser_loss})
        ckpt_io.save(rc.checkpoint, ck)
        if result.diverged:
            print(f"training diverged (non-finite loss); best checkpoint so far written to {rc.checkpoint}",
                  file=sys.stderr)
            return EXIT_DIVERGED
        res = evaluate(result.model, make_examples(te, task), vocab, guesser_mode=rc.guesser_loss, keep_traces=True)
        test_rec = metrics_record(result.best_epoch, "test", cfg, res.loss, res.error, res.extra)
        test_rec["seed"] = cfg.seed
        _write_jsonl(mfh, test_rec)
    if rc.figures:
        from .plots import plot_learning_curves

        Path(rc.figures).mkdir(parents=True, exist_ok=True)
        plot_learning_curves(result.history, Path(rc.figures) / "learning_curve.png")
    _emit(test_rec)
    return EXIT_OK


def _load_for_eval(rc: RunConfig):
    games = _load_games(rc.dataset)
    if not Path(rc.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {rc.checkpoint}")
    ck = ckpt_io.load(rc.checkpoint)
    vocab = Vocabulary(ck.meta["vocab"])
    cfg = ck.config.replace(**rc.model_changes(only_explicit=True))
    for name in ARCHITECTURE_FIELDS:
        if getattr(cfg, name) != getattr(ck.config, name):
            raise CheckpointError(f"architecture mismatch: {name} is {getattr(ck.config, name)!r} in checkpoint "
                                  f"but {getattr(cfg, name)!r} requested")
    try:
        model = MultiHopFiLM(cfg)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    ckpt_io.restore_model(model, ck)
    games = _split(games, rc.split)
    if not games:
        raise InputError(f"{rc.dataset}: no {rc.split} games")
    return ck, model, vocab, games


def cmd_eval(rc: RunConfig) -> int:
    ck, model, vocab, games = _load_for_eval(rc)
    mode = rc.guesser_loss if "guesser_loss" in rc.explicit else ck.meta.get("guesser_loss", "bernoulli")
    res = evaluate(model, make_examples(games, model.cfg.task), vocab, guesser_mode=mode)
    rec = {"split": rc.split, "task": model.cfg.task, "mode": model.cfg.generator_mode, "loss": res.loss,
           "error": res.error, "n": len(res.keys)}
    rec.update({k: v for k, v in res.extra.items() if not k.startswith("per_hop")})
    _emit(rec)
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig) -> int:
    modes = [rc.mode] if "mode" in rc.explicit else list(GRADCHECK_MODES)
    ok = True
    writer = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    writer.writerow(["mode", "tensor", "max_rel_error", "status"])
    summary = []
    for mode in modes:
        cfg = micro_config(mode, rc.task, seed=rc.seed + 11)
        report = gradcheck_model(cfg, tolerance=rc.tolerance, seed=rc.seed)
        for name, err, _ in report.entries:
            writer.writerow([mode, name, f"{err:.3e}", "ok" if err <= rc.tolerance else "FAIL"])
        summary.append({"mode": mode, "passed": report.passed, "max_error": report.max_error,
                        "failures": report.failures})
        ok &= report.passed
    sys.stdout.flush()
    print(json.dumps({"tolerance": rc.tolerance, "passed": ok, "modes": summary}), file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_dump_attention(rc: RunConfig) -> int:
    ck, model, vocab, games = _load_for_eval(rc)
    if rc.max_games is not None:
        games = games[: rc.max_games]
    pipe = analysis_pipeline(model)
    if pipe is None:
        raise UsageError(f"mode {model.cfg.generator_mode} has no attention hops to dump")
    out = Path(rc.out or "attention")
    out.mkdir(parents=True, exist_ok=True)
    res = evaluate(model, make_examples(games, model.cfg.task), vocab, keep_traces=True)
    with open(out / "hop_traces.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for key, mat in zip(res.keys, res.traces):
            write_hop_trace(fh, key, pipe, mat)
    stats = attention_analysis(res.traces, res.layouts)
    summary = {"checkpoint": rc.checkpoint, "split": rc.split, "pipeline": pipe, "examples": len(res.keys),
               "hops": model.cfg.blocks, **stats}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if rc.plots > 0:
        from .plots import plot_hop_attention

        words = vocab.to_list()
        for key, mat, lay in list(zip(res.keys, res.traces, res.layouts))[: rc.plots]:
            plot_hop_attention(mat, [words[i] for i in lay.ids], out / f"attention_{key}.png",
                               title=f"game {key} ({pipe} pipeline)")
    _emit(summary)
    return EXIT_OK


def cmd_compare(rc: RunConfig, runs: Sequence[str]) -> int:
    rows = []
    for path in runs:
        with open(path, encoding="utf-8") as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        test = [r for r in recs if r.get("split") == "test"]
        if not test:
            raise InputError(f"{path}: no split=test record")
        r = test[-1]
        rows.append({"run": path, "task": r["task"], "mode": r["mode"], "seed": r.get("seed", ""),
                     "epoch": r["epoch"], "loss": r["loss"], "error": r["error"]})
    writer = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    cols = ["run", "task", "mode", "seed", "epoch", "loss", "error"]
    writer.writerow(cols)
    for r in rows:
        writer.writerow([r[c] if not isinstance(r[c], float) else f"{r[c]:.6f}" for c in cols])
    modes = dict.fromkeys(r["mode"] for r in rows)
    for m in modes:
        errs = [r["error"] for r in rows if r["mode"] == m]
        writer.writerow(["mean", rows[0]["task"], m, "", "", "", f"{np.mean(errs):.6f}"])
    if rc.out:
        from .plots import plot_comparison

        plot_comparison(rows, rc.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        if rc.command == "gen-data":
            return cmd_gen_data(rc)
        if rc.command == "train":
            return cmd_train(rc)
        if rc.command == "eval":
            return cmd_eval(rc)
        if rc.command == "gradcheck":
            return cmd_gradcheck(rc)
        if rc.command == "dump-attention":
            return cmd_dump_attention(rc)
        return cmd_compare(rc, args.runs)
    except (UsageError, ConfigError, InputError) as exc:
        print(f"mhfilm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"mhfilm: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, DatasetParseError) as exc:
        print(f"mhfilm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
