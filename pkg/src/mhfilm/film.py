"""Multi-hop FiLM: feature-wise modulation of a convolutional pipeline driven by attention hops over language.

The visual pipeline is a small trainable stem followed by ``K`` modulated residual blocks, a
1x1 head and MLB spatial attention. FiLM parameters for block ``k`` come either from the final
language state (single-hop) or from a context vector that is refined by one attention hop over
the encoder states per block (multi-hop). Baselines skip the modulated blocks entirely.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, StateError
from .layers import (
    BatchNorm,
    BiGRUEncoder,
    CategoryEmbedding,
    Conv2d,
    LanguageEncoding,
    LayerNorm,
    Linear,
    Module,
    SpatialEmbedding,
    coord_maps,
)

GENERATOR_MODES = ("baseline_nn", "baseline_nn_mlb", "single_hop", "multi_hop", "multi_hop_img")
TASKS = ("oracle", "guesser", "pointer")
ANSWERS = ("yes", "no", "n/a")


@dataclass
class ModelConfig:
    """Architecture selection and hyperparameters (desk-scale defaults)."""

    generator_mode: str = "multi_hop"
    task: str = "guesser"
    use_category: bool = True
    use_crop: bool = True
    use_image: bool = True
    use_mask: bool = True
    blocks: int = 4
    stem_channels: int = 8
    block_channels: int = 16
    head_channels: int = 32
    d_wemb: int = 32
    d_rnn: int = 64
    d_spat: int = 16
    d_cat: int = 16
    d_mlb: int = 32
    glimpses: int = 1
    final_units: int = 64
    dropout: float = 0.5
    weight_decay: float = 5e-6
    lr: float = 3e-4
    batch_size: int = 32
    seed: int = 0
    vocab_size: int = 64
    n_categories: int = 3
    oracle_input: str = "dialogue"
    share_attention: bool = False
    context_norm: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.generator_mode not in GENERATOR_MODES:
            raise ConfigError(f"unknown generator mode {self.generator_mode!r}; expected one of {GENERATOR_MODES}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not (self.use_crop or self.use_image):
            raise ConfigError("at least one of use_crop / use_image must be set")
        if self.task == "pointer" and not self.use_image:
            raise ConfigError("the pointer task needs the image pipeline")
        if self.oracle_input not in ("dialogue", "question"):
            raise ConfigError(f"oracle_input must be 'dialogue' or 'question', got {self.oracle_input!r}")
        if self.blocks < 1 or self.glimpses < 1 or self.glimpses > 2:
            raise ConfigError("need at least one block and 1 or 2 glimpses")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def is_film(self) -> bool:
        return self.generator_mode in ("single_hop", "multi_hop", "multi_hop_img")

    @property
    def is_multi_hop(self) -> bool:
        return self.generator_mode in ("multi_hop", "multi_hop_img")

    @property
    def pipelines(self) -> tuple[str, ...]:
        if self.task == "pointer":
            return ("image",)
        return tuple(p for p, on in (("image", self.use_image), ("crop", self.use_crop)) if on)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# attention and modulation primitives
# ---------------------------------------------------------------------------

def mlb_fuse(f_column: Tensor, e_l: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Low-rank bilinear fusion ``tanh(F U) * tanh(e_l V)`` (no bias terms).

    ``f_column`` may carry leading location axes; ``e_l`` must broadcast against them.
    """
    if f_column.shape[-1] != u.shape[0] or e_l.shape[-1] != v.shape[0] or u.shape[1] != v.shape[1]:
        raise ConfigError(f"mlb_fuse: projections {u.shape}/{v.shape} do not fit inputs {f_column.shape}/{e_l.shape}")
    fu = ad.matmul(f_column, u) if f_column.ndim > 1 else ad.linear(f_column, u)
    ev = ad.matmul(e_l, v) if e_l.ndim > 1 else ad.linear(e_l, v)
    return ad.mul(ad.tanh(fu), ad.tanh(ev))


@dataclass
class AttentionResult:
    embedding: Tensor
    weights: Tensor
    scores: Tensor


class SpatialAttention(Module):
    """MLB attention: fused features are scored per location by a one-hidden-layer ReLU network."""

    def __init__(self, rng: np.random.Generator, c: int, d_lang: int, d_mlb: int, glimpses: int = 1):
        self.u = Linear(rng, c, d_mlb, bias=False)
        self.v = Linear(rng, d_lang, d_mlb, bias=False)
        self.hidden = Linear(rng, d_mlb, d_mlb)
        self.score = Linear(rng, d_mlb, glimpses)
        self.glimpses = glimpses

    def __call__(self, features: Tensor, e_l: Tensor) -> AttentionResult:
        single = features.ndim == 3
        if single:
            features = features.reshape((1,) + features.shape)
            e_l = e_l.reshape(1, -1)
        n, c, h, w = features.shape
        if n == 0 or h * w == 0:
            raise DimensionError("spatial attention needs a non-empty feature map")
        cols = features.reshape(n, c, h * w).transpose(0, 2, 1)
        fused = mlb_fuse(cols, e_l.reshape(n, 1, -1), self.u.weight, self.v.weight)
        scores = self.score(ad.relu(self.hidden(fused)))
        alpha = ad.softmax(scores, axis=1)
        pooled = ad.matmul(alpha.transpose(0, 2, 1), cols)
        emb = pooled.reshape(n, self.glimpses * c)
        weights = alpha.transpose(0, 2, 1)
        if single:
            return AttentionResult(emb[0], weights[0], scores[0])
        return AttentionResult(emb, weights, scores)


def spatial_attention(features: Tensor, e_l: Tensor, layer: SpatialAttention) -> AttentionResult:
    return layer(features, e_l)


def film_apply(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine modulation of ``C x H x W`` (or batched) features."""
    c = features.shape[-3]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise DimensionError(f"FiLM parameters of length {gamma.shape[-1]}/{beta.shape[-1]} for {c} channels")
    return ad.add(ad.mul(features, gamma.reshape(gamma.shape + (1, 1))), beta.reshape(beta.shape + (1, 1)))


@dataclass
class ContextState:
    """Controller vector after ``k`` hops, with that hop's attention over encoder states."""

    k: int
    context: Tensor
    weights: Tensor | None = None
    scores: Tensor | None = None


class ContextHop(Module):
    """One shared scoring network for every hop; the new context is layer-normalized."""

    def __init__(self, rng: np.random.Generator, d_state: int, hidden: int, normalize: bool = True):
        self.hidden = Linear(rng, d_state, hidden)
        self.score = Linear(rng, hidden, 1)
        self.norm = LayerNorm(d_state) if normalize else None

    def scores(self, context: Tensor, states: Tensor) -> Tensor:
        fused = ad.mul(context.reshape(context.shape[0], 1, -1), states)
        return self.score(ad.relu(self.hidden(fused))).reshape(states.shape[:2])


def context_init(encoding: LanguageEncoding) -> ContextState:
    return ContextState(0, encoding.final)


def context_hop(prev: ContextState, encoding: LanguageEncoding, hop: ContextHop, max_hops: int) -> ContextState:
    """Attend over encoder states conditioned on the previous context, then normalize."""
    if prev.k >= max_hops:
        raise StateError(f"context already advanced {prev.k} hops; the model has only {max_hops} blocks")
    chi = hop.scores(prev.context, encoding.states)
    kappa = ad.softmax(chi, axis=1, mask=encoding.mask)
    summary = ad.matmul(kappa.reshape(kappa.shape[0], 1, -1), encoding.states)
    summary = summary.reshape(summary.shape[0], -1)
    ctx = hop.norm(summary) if hop.norm is not None else summary
    return ContextState(prev.k + 1, ctx, kappa, chi)


class FiLMGenerator(Module):
    """Layer-specific linear map from [context; side information; pooled features] to (gamma, beta).

    The projection starts at zero and gamma is parameterized as ``1 + delta``, so every block
    is an identity modulation at initialization.
    """

    def __init__(self, rng: np.random.Generator, d_ctx: int, d_ext: int, channels: int, pooled: bool):
        self.d_ctx, self.d_ext, self.channels, self.pooled = d_ctx, d_ext, channels, pooled
        self.proj = Linear(rng, d_ctx + d_ext + (channels if pooled else 0), 2 * channels, zero=True)

    def __call__(self, context: Tensor, ext: Tensor | None, pooled: Tensor | None) -> tuple[Tensor, Tensor]:
        if (pooled is not None) != self.pooled:
            raise ConfigError("pooled visual features must be given exactly when visual feedback is enabled")
        if self.d_ext and ext is None:
            raise ConfigError("this generator expects side information (spatial/category embeddings)")
        parts = [context] + ([ext] if self.d_ext else []) + ([pooled] if pooled is not None else [])
        out = self.proj(ad.concat(parts, axis=-1) if len(parts) > 1 else context)
        c = self.channels
        return out[..., :c] + 1.0, out[..., c:]


def film_generate(ctx: ContextState, e_spat: Tensor | None, e_cat: Tensor | None, pooled: Tensor | None,
                  generator: FiLMGenerator) -> tuple[Tensor, Tensor]:
    ext_parts = [t for t in (e_spat, e_cat) if t is not None and t.shape[-1] > 0]
    ext = ad.concat(ext_parts, axis=-1) if len(ext_parts) > 1 else (ext_parts[0] if ext_parts else None)
    return generator(ctx.context, ext, pooled)


def _with_coords(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    cm = coord_maps(h, w).data
    if x.ndim == 4:
        cm = np.broadcast_to(cm, (x.shape[0],) + cm.shape)
    return ad.concat([x, Tensor(np.array(cm))], axis=-3)


class ModulatedResBlock(Module):
    """1x1 conv + ReLU, 3x3 conv + untrainable batch norm, FiLM, ReLU, residual sum of both ReLUs."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.conv1 = Conv2d(rng, channels + 2, channels, 1)
        self.conv2 = Conv2d(rng, channels, channels, 3, bias=False)
        self.bn = BatchNorm(channels, affine=False)

    def features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        a = ad.relu(self.conv1(_with_coords(x)))
        return a, self.bn(self.conv2(a))

    @staticmethod
    def modulate(a: Tensor, feats: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        return ad.add(a, ad.relu(film_apply(feats, gamma, beta)))

    def __call__(self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        a, feats = self.features(x)
        return self.modulate(a, feats, gamma, beta)


def modulated_res_block(f_in: Tensor, gamma: Tensor, beta: Tensor, block: ModulatedResBlock) -> Tensor:
    return block(f_in, gamma, beta)


@dataclass
class HopTrace:
    """Per-pipeline record of the context chain and the final spatial attention."""

    contexts: list[ContextState] = field(default_factory=list)
    film_inputs: list[Tensor] = field(default_factory=list)
    spatial: Tensor | None = None

    def hop_matrix(self, row: int, length: int) -> np.ndarray:
        """``K x T`` matrix of hop attention weights for one language sequence."""
        rows = [c.weights.data[row, :length] for c in self.contexts if c.weights is not None]
        return np.array(rows)


class VisualPipeline(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, d_ext: int, use_mask: bool,
                 hop: ContextHop | None = None):
        c = cfg.block_channels
        self.mode = cfg.generator_mode
        self.use_mask = use_mask
        self.n_blocks = cfg.blocks
        self.backbone = Conv2d(rng, 3, cfg.stem_channels, 3, stride=2)
        self.stem = Conv2d(rng, cfg.stem_channels + 2 + (1 if use_mask else 0), c, 3, bias=False)
        self.stem_bn = BatchNorm(c)
        d_lang = 2 * cfg.d_rnn
        if cfg.is_film:
            self.blocks = [ModulatedResBlock(rng, c) for _ in range(cfg.blocks)]
            pooled = cfg.generator_mode == "multi_hop_img"
            self.generators = [FiLMGenerator(rng, d_lang, d_ext, c, pooled) for _ in range(cfg.blocks)]
        else:
            self.blocks, self.generators = [], []
        if cfg.is_multi_hop and hop is None:
            hop = ContextHop(rng, d_lang, cfg.d_rnn, cfg.context_norm)
        self.hop = hop
        self.head = Conv2d(rng, c + 2, cfg.head_channels, 1, bias=False)
        self.head_bn = BatchNorm(cfg.head_channels)
        self.attention = (
            SpatialAttention(rng, cfg.head_channels, d_lang, cfg.d_mlb, cfg.glimpses)
            if cfg.generator_mode != "baseline_nn" else None
        )
        self.out_dim = cfg.head_channels * (cfg.glimpses if self.attention is not None else 1)

    def context_chain(self, encoding: LanguageEncoding) -> list[ContextState]:
        """Context states feeding blocks 1..K (lowest to highest)."""
        if self.mode == "single_hop":
            return [ContextState(k + 1, encoding.final) for k in range(self.n_blocks)]
        chain, state = [], context_init(encoding)
        for _ in range(self.n_blocks):
            state = context_hop(state, encoding, self.hop, self.n_blocks)
            chain.append(state)
        return chain

    def stem_features(self, images: Tensor, masks: Tensor | None) -> Tensor:
        x = ad.relu(self.backbone(images))
        x = _with_coords(x)
        if self.use_mask:
            x = ad.concat([x, masks], axis=-3)
        return ad.relu(self.stem_bn(self.stem(x)))

    def modulated_features(self, images: Tensor, masks: Tensor | None, encoding: LanguageEncoding, rows: np.ndarray,
                           ext: Tensor | None, trace: HopTrace | None = None) -> Tensor:
        """Output of the last residual block (the stem output when there are no blocks)."""
        trace = trace if trace is not None else HopTrace()
        x = self.stem_features(images, masks)
        if self.blocks:
            trace.contexts = self.context_chain(encoding)
            for block, gen, state in zip(self.blocks, self.generators, trace.contexts):
                ctx = state.context[rows]
                a, feats = block.features(x)
                pooled = feats.mean(axis=(2, 3)) if gen.pooled else None
                gamma, beta = gen(ctx, ext if gen.d_ext else None, pooled)
                trace.film_inputs.append(ctx)
                x = block.modulate(a, feats, gamma, beta)
        return x

    def __call__(self, images: Tensor, masks: Tensor | None, encoding: LanguageEncoding, rows: np.ndarray,
                 ext: Tensor | None) -> tuple[Tensor, HopTrace]:
        """Run every instance; ``rows[i]`` is the language sequence that conditions instance ``i``."""
        trace = HopTrace()
        x = self.modulated_features(images, masks, encoding, rows, ext, trace)
        x = ad.relu(self.head_bn(self.head(_with_coords(x))))
        if self.attention is None:
            return x.mean(axis=(2, 3)), trace
        att = self.attention(x, encoding.final[rows])
        trace.spatial = att.weights
        return att.embedding, trace


@dataclass
class Batch:
    """Model inputs for a list of examples.

    Language sequences are indexed by ``rows``: instance ``i`` is conditioned on
    ``tokens[rows[i]]``. The Guesser has one instance per candidate object.
    """

    tokens: list[list[int]]
    rows: np.ndarray
    images: np.ndarray
    crops: np.ndarray | None = None
    masks: np.ndarray | None = None
    spatial: np.ndarray | None = None
    categories: np.ndarray | None = None


@dataclass
class TaskOutput:
    task: str
    values: Tensor
    rows: np.ndarray
    encoding: LanguageEncoding
    traces: dict[str, HopTrace]
    logits: Tensor | None = None


class MultiHopFiLM(Module):
    """Oracle / Guesser / Pointer model with any of the generator modes (including baselines)."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])
        self.encoder = BiGRUEncoder(rng, cfg.vocab_size, cfg.d_wemb, cfg.d_rnn, cfg.dropout)
        side = cfg.task != "pointer"
        self.spatial = SpatialEmbedding(rng, cfg.d_spat) if side else None
        self.category = CategoryEmbedding(rng, cfg.n_categories, cfg.d_cat, enabled=side and cfg.use_category)
        d_ext = (cfg.d_spat + self.category.dim) if side else 0
        shared = ContextHop(rng, 2 * cfg.d_rnn, cfg.d_rnn, cfg.context_norm) if cfg.share_attention and cfg.is_multi_hop else None
        names = cfg.pipelines
        self.image_pipeline = (
            VisualPipeline(rng, cfg, d_ext, use_mask=cfg.use_mask and side, hop=shared) if "image" in names else None
        )
        self.crop_pipeline = VisualPipeline(rng, cfg, d_ext, use_mask=False, hop=shared) if "crop" in names else None
        d_final = sum(p.out_dim for p in self._pipelines().values())
        if not cfg.is_film:
            d_final += 2 * cfg.d_rnn + d_ext
        n_out = {"oracle": 3, "guesser": 1, "pointer": 4}[cfg.task]
        self.hidden = Linear(rng, d_final, cfg.final_units)
        self.out = Linear(rng, cfg.final_units, n_out)

    def _pipelines(self) -> dict[str, VisualPipeline]:
        return {k: v for k, v in (("image", self.image_pipeline), ("crop", self.crop_pipeline)) if v is not None}

    def side_information(self, batch: Batch) -> Tensor | None:
        """Per-instance ``[e_spat; e_cat]`` (``None`` for the pointer task)."""
        if self.spatial is None:
            return None
        parts = [self.spatial(Tensor(batch.spatial))]
        if self.category.enabled:
            parts.append(self.category(batch.categories))
        return ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]

    def final_features(self, batch: Batch) -> tuple[Tensor, LanguageEncoding, dict[str, HopTrace]]:
        cfg = self.cfg
        enc = self.encoder(batch.tokens, self.dropout_rng)
        ext = self.side_information(batch)
        traces, feats = {}, []
        for name, pipe in self._pipelines().items():
            images = Tensor(batch.images if name == "image" else batch.crops)
            masks = Tensor(batch.masks) if pipe.use_mask else None
            e_v, traces[name] = pipe(images, masks, enc, batch.rows, ext)
            feats.append(e_v)
        if not cfg.is_film:
            feats.append(enc.final[batch.rows])
            if ext is not None:
                feats.append(ext)
        e_final = ad.concat(feats, axis=-1) if len(feats) > 1 else feats[0]
        return e_final, enc, traces

    def __call__(self, batch: Batch) -> TaskOutput:
        e_final, enc, traces = self.final_features(batch)
        e_final = ad.dropout(e_final, self.cfg.dropout, self.training, self.dropout_rng)
        logits = self.out(ad.relu(self.hidden(e_final)))
        task = self.cfg.task
        if task == "oracle":
            values = ad.softmax(logits, axis=-1)
        elif task == "guesser":
            logits = logits.reshape(-1)
            values = ad.sigmoid(logits)
        else:
            values = logits
        return TaskOutput(task, values, batch.rows, enc, traces, logits)


def model_forward(batch: Batch, model: MultiHopFiLM) -> TaskOutput:
    return model(batch)


def write_hop_trace(fh, game_id: int | str, pipeline: str, matrix: np.ndarray) -> None:
    """Append one ``K x T`` attention matrix: header ``game_id pipeline K T`` then tab-separated rows."""
    k, t = matrix.shape
    fh.write(f"{game_id} {pipeline} {k} {t}\n")
    for row in matrix:
        fh.write("\t".join(repr(float(v)) for v in row) + "\n")


def read_hop_traces(fh) -> list[tuple[str, str, np.ndarray]]:
    out = []
    lines = iter(fh.read().splitlines())
    for header in lines:
        if not header.strip():
            continue
        gid, pipe, k, t = header.split()
        rows = [np.array([float(v) for v in next(lines).split("\t")]) for _ in range(int(k))]
        mat = np.array(rows) if rows else np.zeros((0, int(t)))
        out.append((gid, pipe, mat.reshape(int(k), int(t))))
    return out

