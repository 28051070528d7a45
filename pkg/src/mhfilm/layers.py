"""Reusable building blocks: parameter containers, layer-normalized GRU, embeddings, coordinate maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InputError


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Parameter container; parameters and sub-modules are discovered from attributes."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield f"{prefix}{key}", getattr(self, key)
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def children(self) -> Iterator["Module"]:
        for val in vars(self).values():
            if isinstance(val, Module):
                yield val
            elif isinstance(val, (list, tuple)):
                yield from (m for m in val if isinstance(m, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else glorot(rng, (d_in, d_out), d_in, d_out)
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros(d_out)) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ConfigError(f"linear layer expects input dimension {self.weight.shape[0]}, got {x.shape[-1]}")
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int, stride: int = 1, bias: bool = True):
        self.kernel = ad.parameter(glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k), decay=True)
        self.bias = ad.parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ad.parameter(np.ones(d))
        self.bias = ad.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class BatchNorm(Module):
    """Batch normalization; ``affine=False`` gives the untrainable variant whose affine comes from FiLM."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, affine: bool = True, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.momentum = momentum
        self.eps = eps
        if affine:
            self.gain = ad.parameter(np.ones(c))
            self.shift = ad.parameter(np.zeros(c))
        else:
            self.gain = self.shift = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.frozen_batch_norm(x, self.running_mean, self.running_var, self.training, self.eps, self.momentum)
        if self.gain is None:
            return y
        shape = (-1, 1, 1)
        return ad.add(ad.mul(y, self.gain.reshape(shape)), self.shift.reshape(shape))


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, n: int, d: int):
        self.table = ad.parameter(rng.normal(0.0, 1.0, size=(n, d)))

    def __call__(self, ids) -> Tensor:
        return ad.embedding_lookup(self.table, ids)


# ---------------------------------------------------------------------------
# recurrent encoder
# ---------------------------------------------------------------------------

class GRUCell(Module):
    """GRU whose three gate pre-activations are each layer-normalized.

    The layer-norm bias acts as the gate bias, so a large negative ``ln_z.bias`` closes
    the update gate and the state passes through unchanged.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d: int):
        self.d = d
        self.w_in = ad.parameter(glorot(rng, (d_in, 3 * d), d_in, 3 * d))
        self.w_rz = ad.parameter(glorot(rng, (d, 2 * d), d, 2 * d))
        self.w_h = ad.parameter(glorot(rng, (d, d), d, d))
        self.ln_r = LayerNorm(d)
        self.ln_z = LayerNorm(d)
        self.ln_h = LayerNorm(d)

    def project_inputs(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.w_in.shape[0]:
            raise ConfigError(f"GRU expects inputs of dimension {self.w_in.shape[0]}, got {x.shape[-1]}")
        return ad.matmul(x, self.w_in) if x.ndim > 1 else ad.linear(x, self.w_in)

    def step_projected(self, state: Tensor, xw: Tensor) -> Tensor:
        d = self.d
        hw = ad.matmul(state, self.w_rz) if state.ndim > 1 else ad.linear(state, self.w_rz)
        r = ad.sigmoid(self.ln_r(xw[..., :d] + hw[..., :d]))
        z = ad.sigmoid(self.ln_z(xw[..., d : 2 * d] + hw[..., d:]))
        rh = ad.mul(r, state)
        rhw = ad.matmul(rh, self.w_h) if rh.ndim > 1 else ad.linear(rh, self.w_h)
        cand = ad.tanh(self.ln_h(xw[..., 2 * d :] + rhw))
        return state + ad.mul(z, cand - state)

    def __call__(self, state: Tensor, x: Tensor) -> Tensor:
        if state.shape[-1] != self.d:
            raise ConfigError(f"GRU state must have dimension {self.d}, got {state.shape[-1]}")
        return self.step_projected(state, self.project_inputs(x))


def gru_step(state: Tensor, input_embedding: Tensor, cell: GRUCell) -> Tensor:
    """One transition ``s_{t+1} = f(s_t, e_t)`` of a layer-normalized GRU."""
    return cell(state, input_embedding)


@dataclass
class LanguageEncoding:
    """Bidirectional GRU states for a batch of token sequences.

    ``states`` is ``B x T x 2d`` (padded positions are masked out), ``final`` is ``B x 2d``
    holding ``[fwd_T; bwd_1]``, the last state of each direction, so both halves have read
    the whole sequence.
    """

    states: Tensor
    final: Tensor
    mask: np.ndarray
    lengths: np.ndarray
    tokens: list[list[int]] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.states.shape[-1]

    def take(self, rows: np.ndarray) -> "LanguageEncoding":
        rows = np.asarray(rows)
        return LanguageEncoding(
            self.states[rows], self.final[rows], self.mask[rows], self.lengths[rows],
            [self.tokens[i] for i in rows] if self.tokens else [],
        )


class BiGRUEncoder(Module):
    def __init__(self, rng: np.random.Generator, vocab_size: int, d_wemb: int, d_rnn: int, dropout: float = 0.0):
        self.embed = Embedding(rng, vocab_size, d_wemb)
        self.fwd = GRUCell(rng, d_wemb, d_rnn)
        self.bwd = GRUCell(rng, d_wemb, d_rnn)
        self.d_rnn = d_rnn
        self.dropout = dropout

    def __call__(self, batch: Sequence[Sequence[int]], rng: np.random.Generator | None = None) -> LanguageEncoding:
        if not batch or any(len(seq) == 0 for seq in batch):
            raise InputError("cannot encode an empty token sequence")
        lengths = np.array([len(s) for s in batch])
        b, t_max = len(batch), int(lengths.max())
        ids = np.zeros((b, t_max), dtype=np.int64)
        for i, seq in enumerate(batch):
            ids[i, : len(seq)] = seq
        mask = np.arange(t_max)[None, :] < lengths[:, None]
        emb = ad.dropout(self.embed(ids), self.dropout, self.training, rng)

        ragged = not mask.all()
        xf = self.fwd.project_inputs(emb)
        xb = self.bwd.project_inputs(emb)
        zero = Tensor(np.zeros((b, self.d_rnn)))
        fwd_states: list[Tensor] = []
        h = zero
        for t in range(t_max):
            nxt = self.fwd.step_projected(h, xf[:, t])
            h = nxt if not ragged else h + ad.mul(nxt - h, Tensor(mask[:, t : t + 1].astype(float)))
            fwd_states.append(h)
        bwd_states: list[Tensor] = [zero] * t_max
        h = zero
        for t in reversed(range(t_max)):
            nxt = self.bwd.step_projected(h, xb[:, t])
            h = nxt if not ragged else h + ad.mul(nxt - h, Tensor(mask[:, t : t + 1].astype(float)))
            bwd_states[t] = h
        fwd = ad.stack(fwd_states, axis=1)
        states = ad.concat([fwd, ad.stack(bwd_states, axis=1)], axis=2)
        # each direction's summary of the whole sequence: forward at the last token, backward at the first
        final = ad.concat([fwd[np.arange(b), lengths - 1], bwd_states[0]], axis=1)
        return LanguageEncoding(states, final, mask, lengths, [list(s) for s in batch])


def bigru_encode(tokens: Sequence[int], encoder: BiGRUEncoder, rng: np.random.Generator | None = None) -> LanguageEncoding:
    """Encode a single token sequence (batch of one)."""
    return encoder([list(tokens)], rng)


# ---------------------------------------------------------------------------
# object side information
# ---------------------------------------------------------------------------

def spatial_vector(bbox: Sequence[float], img_w: int, img_h: int) -> np.ndarray:
    """``[x_min, y_min, x_max, y_max, x_center, y_center, w_box, h_box]`` with the image spanning [-1, 1].

    ``bbox`` is ``(x, y, w, h)`` in pixels; extents use the same units, so a full-image box has width 2.
    """
    x, y, w, h = bbox
    x0, x1 = 2.0 * x / img_w - 1.0, 2.0 * (x + w) / img_w - 1.0
    y0, y1 = 2.0 * y / img_h - 1.0, 2.0 * (y + h) / img_h - 1.0
    return np.array([x0, y0, x1, y1, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0])


class SpatialEmbedding(Module):
    """Affine projection of the 8-d spatial vector followed by ReLU."""

    def __init__(self, rng: np.random.Generator, d_spat: int):
        self.proj = Linear(rng, 8, d_spat)

    def __call__(self, x_spatial: Tensor) -> Tensor:
        return ad.relu(self.proj(x_spatial))


def spatial_embed(x_spatial: Tensor, layer: SpatialEmbedding) -> Tensor:
    return layer(x_spatial)


class CategoryEmbedding(Module):
    """Category look-up table; ``enabled=False`` contributes a zero-length vector."""

    def __init__(self, rng: np.random.Generator, n_categories: int, d_cat: int, enabled: bool = True):
        self.enabled = enabled
        self.n = n_categories
        self.table = Embedding(rng, n_categories, d_cat) if enabled else None

    @property
    def dim(self) -> int:
        return self.table.table.shape[1] if self.enabled else 0

    def __call__(self, categories) -> Tensor:
        cats = np.atleast_1d(np.asarray(categories, dtype=np.int64))
        if np.any((cats < 0) | (cats >= self.n)):
            raise IndexError(f"category id out of range [0, {self.n})")
        out = self.table(cats) if self.enabled else Tensor(np.zeros((len(cats), 0)))
        return out if np.ndim(categories) else out[0]


def category_embed(category: int, layer: CategoryEmbedding) -> Tensor:
    return layer(category)


_COORD_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _axis_ramp(n: int) -> np.ndarray:
    return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)


def coord_maps(h: int, w: int) -> Tensor:
    """Two maps: channel 0 is x in [-1, 1] left to right, channel 1 is y top to bottom."""
    if h < 1 or w < 1:
        raise InputError(f"coordinate maps need positive extents, got {h}x{w}")
    key = (h, w)
    if key not in _COORD_CACHE:
        xs = np.broadcast_to(_axis_ramp(w)[None, :], (h, w))
        ys = np.broadcast_to(_axis_ramp(h)[:, None], (h, w))
        _COORD_CACHE[key] = np.stack([xs, ys])
    return Tensor(_COORD_CACHE[key].copy())
