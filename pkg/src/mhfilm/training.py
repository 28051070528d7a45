"""Batching, losses, error metrics, Adam, the epoch loop, attention analysis and model gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, TrainingError
from .film import ANSWERS, Batch, ModelConfig, MultiHopFiLM, TaskOutput
from .games import ANSWER_TOKENS, Game, GameObject, Vocabulary, crop_image, iou, rescale_mask
from .layers import spatial_vector

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
CLAMP = 1e-7


# ---------------------------------------------------------------------------
# examples and batching
# ---------------------------------------------------------------------------

@dataclass
class Example:
    """One training instance: a game, plus the index of the question to answer (Oracle only)."""

    game: Game
    question: int | None = None

    @property
    def key(self) -> str:
        return f"{self.game.id}" if self.question is None else f"{self.game.id}.{self.question}"


@dataclass
class TokenLayout:
    """Token ids of an example with the span of its final question and the answer-token positions."""

    ids: list[int]
    last_question: tuple[int, int]
    answer_positions: set[int] = field(default_factory=set)


def make_examples(games: Iterable[Game], task: str) -> list[Example]:
    if task != "oracle":
        return [Example(g) for g in games]
    return [Example(g, i) for g in games for i in range(len(g.dialogue))]


def layout(example: Example, vocab: Vocabulary, oracle_input: str = "dialogue") -> TokenLayout:
    game = example.game
    if game.expression is not None:
        ids = vocab.encode(game.expression)
        return TokenLayout(ids, (0, len(ids)))
    if example.question is None:
        pairs, final = game.dialogue, None
    else:
        pairs = [] if oracle_input == "question" else game.dialogue[: example.question]
        final = game.dialogue[example.question][0]
    ids: list[int] = []
    answers: set[int] = set()
    span = (0, 0)
    for q, a in pairs:
        span = (len(ids), len(ids) + len(q))
        ids += vocab.encode(q)
        answers.add(len(ids))
        ids.append(vocab.id(ANSWER_TOKENS[a]))
    if final is not None:
        span = (len(ids), len(ids) + len(final))
        ids += vocab.encode(final)
    return TokenLayout(ids, span, answers)


def feature_size(n: int) -> int:
    """Spatial extent after the stride-2 backbone convolution."""
    return (n + 2 - 3) // 2 + 1


def box_to_unit(bbox: Sequence[float], img_size: int) -> np.ndarray:
    """Pixel ``(x, y, w, h)`` to ``(x_min, y_min, w_box, h_box)`` in the [-1, 1] convention."""
    v = spatial_vector(bbox, img_size, img_size)
    return np.array([v[0], v[1], v[6], v[7]])


def unit_to_box(u: Sequence[float], img_size: int, min_extent: float = 1e-6) -> tuple[float, float, float, float]:
    x0, y0, wb, hb = u
    s = img_size / 2.0
    return ((x0 + 1.0) * s, (y0 + 1.0) * s, max(wb * s, min_extent), max(hb * s, min_extent))


@dataclass
class Targets:
    task: str
    answers: np.ndarray | None = None
    target_index: np.ndarray | None = None
    offsets: np.ndarray | None = None
    boxes: np.ndarray | None = None


def make_batch(examples: Sequence[Example], vocab: Vocabulary, cfg: ModelConfig) -> tuple[Batch, Targets, list[TokenLayout]]:
    task = cfg.task
    layouts = [layout(ex, vocab, cfg.oracle_input) for ex in examples]
    rows, images, crops, masks, spatial, cats = [], [], [], [], [], []
    offsets, answers, target_index, boxes = [0], [], [], []
    for r, ex in enumerate(examples):
        g = ex.game
        img = g.image()
        n = g.image_size
        hf = feature_size(n)
        if task == "guesser":
            objs: list[GameObject] = g.objects
            target_index.append(g.target)
        else:
            objs = [g.target_object]
        for obj in objs:
            rows.append(r)
            images.append(img)
            if task != "pointer":
                crops.append(crop_image(img, obj.bbox))
                masks.append(rescale_mask(obj.mask(n, n), hf, hf)[None])
                spatial.append(obj.spatial(n))
                cats.append(obj.cat)
        offsets.append(len(rows))
        if task == "oracle":
            answers.append(ANSWERS.index(g.dialogue[ex.question][1]))
        elif task == "pointer":
            boxes.append(box_to_unit(g.target_object.bbox, n))
    batch = Batch(
        tokens=[lay.ids for lay in layouts],
        rows=np.array(rows),
        images=np.stack(images),
        crops=np.stack(crops) if crops else None,
        masks=np.stack(masks) if masks else None,
        spatial=np.stack(spatial) if spatial else None,
        categories=np.array(cats) if cats else None,
    )
    targets = Targets(
        task,
        answers=np.array(answers) if answers else None,
        target_index=np.array(target_index) if target_index else None,
        offsets=np.array(offsets),
        boxes=np.stack(boxes) if boxes else None,
    )
    return batch, targets, layouts


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------

def _clamped(scores: Tensor) -> Tensor:
    if np.any((scores.data < CLAMP) | (scores.data > 1 - CLAMP)):
        logger.debug("clamping %d guesser scores to [%g, %g]", int(np.sum((scores.data < CLAMP) | (scores.data > 1 - CLAMP))), CLAMP, 1 - CLAMP)
    return ad.clamp(scores, CLAMP, 1.0 - CLAMP)


def guesser_loss(scores: Tensor, offsets: Sequence[int], targets: Sequence[int], mode: str = "bernoulli",
                 logits: Tensor | None = None) -> Tensor:
    """Mean over games of the per-object average negative log-likelihood.

    ``scores`` holds sigma for every object of every game; game ``n`` owns
    ``scores[offsets[n]:offsets[n+1]]``. In the Bernoulli reading the likelihood of object
    ``phi`` is sigma for the target and 1 - sigma otherwise. ``mode="softmax"`` instead
    normalizes the logits over each game's objects.
    """
    offsets = np.asarray(offsets)
    n_games = len(offsets) - 1
    counts = np.diff(offsets)
    if mode == "softmax":
        if logits is None:
            raise ValueError("softmax reading needs logits")
        total = None
        for n in range(n_games):
            lo, hi = offsets[n], offsets[n + 1]
            logp = ad.log(_clamped(ad.softmax(logits[lo:hi], axis=0)))
            term = logp[int(targets[n])]
            total = term if total is None else total + term
        return ad.scale(total, -1.0 / n_games)
    y = np.zeros(scores.shape[0])
    y[offsets[:-1] + np.asarray(targets)] = 1.0
    w = np.repeat(1.0 / (counts * n_games), counts)
    s = _clamped(scores)
    ll = ad.mul(Tensor(y), ad.log(s)) + ad.mul(Tensor(1.0 - y), ad.log(ad.sub(1.0, s)))
    return ad.scale(ad.mul(ll, Tensor(w)).sum(), -1.0)


def guesser_predictions(scores: np.ndarray, offsets: Sequence[int]) -> np.ndarray:
    """Argmax per game; ties go to the lowest index."""
    return np.array([int(np.argmax(scores[lo:hi])) for lo, hi in zip(offsets[:-1], offsets[1:])])


def guesser_error(scores: Sequence[Sequence[float]] | np.ndarray, targets: Sequence[int], offsets=None) -> float:
    """Fraction of games whose highest-scoring object is not the target.

    ``scores`` is either a list of per-game score vectors, or a flat array with ``offsets``.
    """
    if offsets is None:
        preds = [int(np.argmax(np.asarray(s))) for s in scores]
    else:
        preds = guesser_predictions(np.asarray(scores), offsets)
    return float(np.mean([p != int(t) for p, t in zip(preds, targets)]))


def oracle_loss(probs: Tensor, truth: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the true answer class."""
    truth = np.asarray(truth)
    picked = probs[np.arange(len(truth)), truth]
    return ad.scale(ad.log(ad.clamp(picked, 1e-300, 1.0)).sum(), -1.0 / len(truth))


def oracle_error(probs: np.ndarray, truth: Sequence[int]) -> float:
    return float(np.mean(np.argmax(probs, axis=1) != np.asarray(truth)))


def pointer_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return ad.smooth_l1(pred, Tensor(target))


def pointer_metrics(pred_box: Sequence[float], true_box: Sequence[float]) -> dict[str, float]:
    """``error@t`` is 1 when the IoU falls below threshold ``t``."""
    v = iou(pred_box, true_box)
    return {f"error@{t}": float(v < t) for t in IOU_THRESHOLDS}


def task_loss(out: TaskOutput, tg: Targets, guesser_mode: str = "bernoulli") -> Tensor:
    if tg.task == "oracle":
        return oracle_loss(out.values, tg.answers)
    if tg.task == "guesser":
        return guesser_loss(out.values, tg.offsets, tg.target_index, guesser_mode, out.logits)
    return pointer_loss(out.values, tg.boxes)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 3e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimizerState) -> None:
    """Bias-corrected Adam; decoupled weight decay hits only tensors flagged as conv kernels."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if p.decay and state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# attention analysis
# ---------------------------------------------------------------------------

def attention_analysis(traces: Sequence[np.ndarray], layouts: Sequence[TokenLayout]) -> dict:
    """Per-hop rates: top-1 weight inside the final question, and any top-3 weight on an answer token."""
    if len(traces) != len(layouts):
        raise InputError(f"{len(traces)} traces for {len(layouts)} dialogues")
    if not traces:
        return {"per_hop_last_q": [], "per_hop_answer": [], "attn_last_q_rate": None, "attn_answer_rate": None, "n": 0}
    k = traces[0].shape[0]
    last_q = np.zeros(k)
    answer = np.zeros(k)
    for tr, lay in zip(traces, layouts):
        if tr.shape[1] != len(lay.ids) or tr.shape[0] != k:
            raise InputError(f"trace of shape {tr.shape} does not match {len(lay.ids)} tokens / {k} hops")
        lo, hi = lay.last_question
        for hop in range(k):
            w = tr[hop]
            top1 = int(np.argmax(w))
            last_q[hop] += lo <= top1 < hi
            top3 = np.argsort(-w, kind="stable")[:3]
            answer[hop] += any(int(i) in lay.answer_positions for i in top3)
    n = len(traces)
    per_q, per_a = (last_q / n).tolist(), (answer / n).tolist()
    return {
        "per_hop_last_q": per_q,
        "per_hop_answer": per_a,
        "attn_last_q_rate": float(np.mean(per_q)),
        "attn_answer_rate": float(np.mean(per_a)),
        "n": n,
    }


def analysis_pipeline(model: MultiHopFiLM) -> str | None:
    """The pipeline whose hops are analysed: crop when present, else image; None without hops."""
    if not model.cfg.is_multi_hop:
        return None
    return "crop" if model.crop_pipeline is not None else "image"


# ---------------------------------------------------------------------------
# evaluation and training loop
# ---------------------------------------------------------------------------

def batches(items: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


@dataclass
class EvalResult:
    loss: float
    error: float
    extra: dict = field(default_factory=dict)
    traces: list[np.ndarray] = field(default_factory=list)
    layouts: list[TokenLayout] = field(default_factory=list)
    keys: list[str] = field(default_factory=list)


def evaluate(model: MultiHopFiLM, examples: Sequence[Example], vocab: Vocabulary, batch_size: int = 64,
             guesser_mode: str = "bernoulli", keep_traces: bool = True) -> EvalResult:
    cfg = model.cfg
    was_training = model.training
    model.eval()
    pipe = analysis_pipeline(model)
    total_loss, n_items = 0.0, 0
    errors: list[float] = []
    thresh = {t: [] for t in IOU_THRESHOLDS}
    traces, layouts, keys = [], [], []
    with ad.no_grad():
        for chunk in batches(examples, batch_size):
            batch, tg, lays = make_batch(chunk, vocab, cfg)
            out = model(batch)
            total_loss += task_loss(out, tg, guesser_mode).item() * len(chunk)
            n_items += len(chunk)
            if cfg.task == "oracle":
                errors += list(np.argmax(out.values.data, axis=1) != tg.answers)
            elif cfg.task == "guesser":
                preds = guesser_predictions(out.values.data, tg.offsets)
                errors += list(preds != tg.target_index)
            else:
                for ex, pred in zip(chunk, out.values.data):
                    n = ex.game.image_size
                    m = pointer_metrics(unit_to_box(pred, n), ex.game.target_object.bbox)
                    for t in IOU_THRESHOLDS:
                        thresh[t].append(m[f"error@{t}"])
            if pipe is not None and keep_traces:
                trace = out.traces[pipe]
                for r, lay in enumerate(lays):
                    traces.append(trace.hop_matrix(r, len(lay.ids)))
            layouts += lays
            keys += [ex.key for ex in chunk]
    model.train(was_training)
    extra: dict = {}
    if cfg.task == "pointer":
        extra = {f"error@{t}": float(np.mean(v)) for t, v in thresh.items()}
        error = extra["error@0.5"]
    else:
        error = float(np.mean(errors))
    if pipe is not None and keep_traces:
        stats = attention_analysis(traces, layouts)
        extra.update({"attn_last_q_rate": stats["attn_last_q_rate"], "attn_answer_rate": stats["attn_answer_rate"],
                      "per_hop_last_q": stats["per_hop_last_q"], "per_hop_answer": stats["per_hop_answer"]})
    return EvalResult(total_loss / max(n_items, 1), error, extra, traces, layouts, keys)


def metrics_record(epoch: int, split: str, cfg: ModelConfig, loss: float, error: float, extra: dict | None = None) -> dict:
    extra = extra or {}
    rec = {
        "epoch": epoch,
        "split": split,
        "task": cfg.task,
        "mode": cfg.generator_mode,
        "loss": float(loss),
        "error": float(error),
        "attn_last_q_rate": extra.get("attn_last_q_rate"),
        "attn_answer_rate": extra.get("attn_answer_rate"),
    }
    for t in IOU_THRESHOLDS:
        if f"error@{t}" in extra:
            rec[f"error@{t}"] = extra[f"error@{t}"]
    return rec


def state_dict(model: MultiHopFiLM) -> dict[str, np.ndarray]:
    out = {name: p.data.copy() for name, p in model.named_parameters()}
    out.update({name: b.copy() for name, b in model.named_buffers()})
    return out


def load_state(model: MultiHopFiLM, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, arr in state.items():
        if name in params:
            params[name].data = np.array(arr, dtype=np.float64).reshape(params[name].shape)
        elif name in buffers:
            buffers[name][...] = arr


@dataclass
class TrainSettings:
    epochs: int = 15
    guesser_mode: str = "bernoulli"
    eval_train: bool = False
    stop_at_zero_train_error: bool = False
    eval_batch_size: int = 64
    callback: Callable[[dict], None] | None = None


@dataclass
class TrainResult:
    model: MultiHopFiLM
    history: list[dict]
    best_epoch: int
    best_valid_error: float
    optimizer: OptimizerState
    diverged: bool = False


def train(cfg: ModelConfig, train_examples: Sequence[Example], valid_examples: Sequence[Example], vocab: Vocabulary,
          settings: TrainSettings | None = None, model: MultiHopFiLM | None = None,
          optimizer: OptimizerState | None = None, start_epoch: int = 0) -> TrainResult:
    """Epoch loop with shuffled mini-batches; the best-validation parameters are restored at the end.

    On a non-finite loss the loop stops, restores the last best state and sets ``diverged``.
    """
    settings = settings or TrainSettings()
    model = model or MultiHopFiLM(cfg)
    model.train()
    opt = optimizer or OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = dict(model.named_parameters())
    rng = np.random.default_rng([cfg.seed, 2, start_epoch])
    history: list[dict] = []
    best = (math.inf, -1, state_dict(model))
    diverged = False

    def emit(rec):
        history.append(rec)
        if settings.callback:
            settings.callback(rec)

    for epoch in range(start_epoch + 1, start_epoch + settings.epochs + 1):
        order = rng.permutation(len(train_examples))
        run_loss, run_err, seen = 0.0, 0.0, 0
        for idx in batches(order, cfg.batch_size):
            chunk = [train_examples[i] for i in idx]
            batch, tg, _ = make_batch(chunk, vocab, cfg)
            out = model(batch)
            loss = task_loss(out, tg, settings.guesser_mode)
            if not np.isfinite(loss.item()):
                diverged = True
                break
            model.zero_grad()
            ad.backward(loss)
            try:
                adam_step(params, {n: p.grad for n, p in params.items()}, opt)
            except TrainingError:
                diverged = True
                break
            run_loss += loss.item() * len(chunk)
            if cfg.task == "guesser":
                run_err += float(np.sum(guesser_predictions(out.values.data, tg.offsets) != tg.target_index))
            elif cfg.task == "oracle":
                run_err += float(np.sum(np.argmax(out.values.data, axis=1) != tg.answers))
            seen += len(chunk)
        if diverged:
            logger.error("training diverged at epoch %d", epoch)
            break
        if settings.eval_train:
            res = evaluate(model, train_examples, vocab, settings.eval_batch_size, settings.guesser_mode)
            emit(metrics_record(epoch, "train", cfg, res.loss, res.error, res.extra))
            train_error = res.error
        else:
            train_error = run_err / max(seen, 1)
            emit(metrics_record(epoch, "train", cfg, run_loss / max(seen, 1), train_error))
        if valid_examples:
            res = evaluate(model, valid_examples, vocab, settings.eval_batch_size, settings.guesser_mode)
            emit(metrics_record(epoch, "valid", cfg, res.loss, res.error, res.extra))
            score = res.error
        else:
            score = train_error
        if score < best[0]:
            best = (score, epoch, state_dict(model))
        if settings.stop_at_zero_train_error and train_error == 0.0:
            break
    load_state(model, best[2])
    return TrainResult(model, history, best[1], best[0], opt, diverged)


# ---------------------------------------------------------------------------
# model gradient check
# ---------------------------------------------------------------------------

def micro_config(mode: str = "multi_hop", task: str = "guesser", **overrides) -> ModelConfig:
    base = dict(
        generator_mode=mode, task=task, blocks=2, stem_channels=4, block_channels=4, head_channels=4,
        d_wemb=4, d_rnn=4, d_spat=4, d_cat=4, d_mlb=4, final_units=8, dropout=0.0, seed=11,
        vocab_size=11, n_categories=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_game() -> Game:
    """Two objects on a 6x6 image described by a three-token phrase."""
    objs = [GameObject("red", "square", "large", 0, 0, 1), GameObject("blue", "circle", "small", 4, 3, 1)]
    return Game(0, 6, 1, objs, 0, [(["is", "it", "red", "?"], "yes")], ["the", "red", "square"], "train", "referit")


def micro_vocab() -> Vocabulary:
    return Vocabulary(["<pad>", "<unk>", "<yes>", "<no>", "<n/a>", "<?>", "the", "red", "square", "is", "it"])


@dataclass
class GradcheckReport:
    mode: str
    tolerance: float
    entries: list[tuple[str, float, int]]

    @property
    def failures(self) -> list[str]:
        return [name for name, err, _ in self.entries if not err <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(err for _, err, _ in self.entries)


def gradcheck_model(cfg: ModelConfig, game: Game | None = None, vocab: Vocabulary | None = None,
                    tolerance: float = 1e-3, h: float = 1e-4, coords_per_tensor: int = 5, seed: int = 0,
                    grad_hook: Callable[[str, np.ndarray], np.ndarray] | None = None) -> GradcheckReport:
    """Central-difference check of the task loss against every parameter tensor.

    Parameters are jittered away from their initial values so that zero-initialized FiLM
    projections do not hide paths. Per tensor, half the sampled coordinates are those with the
    largest analytic gradient and the rest are random, preferring coordinates whose gradient
    is large enough to be resolved by central differences. Steps that straddle a relu/clamp
    kink are shrunk (see :func:`autodiff.kink_safe_numerical_grad`).
    """
    game = game or micro_game()
    vocab = vocab or micro_vocab()
    model = MultiHopFiLM(cfg)
    rng = np.random.default_rng(seed)
    params = list(model.named_parameters())
    for _, p in params:
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    example = [Example(game, 0 if cfg.task == "oracle" else None)]
    batch, tg, _ = make_batch(example, vocab, cfg)
    model.train()

    def loss_value() -> float:
        with ad.no_grad():
            return task_loss(model(batch), tg).item()

    model.zero_grad()
    ad.backward(task_loss(model(batch), tg))
    entries = []
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        if grad_hook is not None:
            g = grad_hook(name, g)
        flat = np.abs(g).reshape(-1)
        k = min(coords_per_tensor, flat.size)
        top = list(np.argsort(-flat, kind="stable")[: (k + 1) // 2])
        # round-off in the loss swamps central differences below ~1e-7
        live = [i for i in rng.permutation(flat.size) if i not in top and flat[i] >= 1e-7]
        dead = [i for i in rng.permutation(flat.size) if i not in top and flat[i] < 1e-7]
        rest = (live + dead)[: k - len(top)]
        coords = [np.unravel_index(int(i), p.shape) for i in top + rest]
        num = ad.kink_safe_numerical_grad(loss_value, p, coords, h)
        err = float(np.max(ad.relative_error([g[c] for c in coords], num)))
        entries.append((name, err, len(coords)))
    return GradcheckReport(cfg.generator_mode, tolerance, entries)
