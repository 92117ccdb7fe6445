"""Feed-forward decoder with hand-written backpropagation, AdamW, and checkpoints.

Arrays are plain float64 numpy arrays. A decoder maps latent codes of width
``d`` to outputs of width ``p`` through affine layers separated by a hidden
activation, with an optional sigmoid on the last layer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import FormatError, LengthError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("sigmoid", "identity")
SCHEDULES = ("constant", "cosine_warm_restarts")

CHECKPOINT_MAGIC = b"NSQL"
CHECKPOINT_VERSION = 1

Grads = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass
class DecoderParams:
    layers: list[Layer]
    activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("decoder needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        for i, layer in enumerate(self.layers):
            w, b = layer.weight, layer.bias
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ShapeError(
                    f"layer {i}: input width {w.shape[1]} != output width "
                    f"{self.layers[i - 1].weight.shape[0]} of layer {i - 1}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]

    def copy(self) -> "DecoderParams":
        return DecoderParams(
            [Layer(l.weight.copy(), l.bias.copy()) for l in self.layers],
            self.activation,
            self.output_activation,
        )

    def n_parameters(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


def init_decoder(
    widths: Sequence[int],
    activation: str = "relu",
    output_activation: str = "sigmoid",
    seed: int = 0,
) -> DecoderParams:
    """Glorot-uniform weights, zero biases. ``widths`` = [d, hidden..., p]."""
    if len(widths) < 2 or min(widths) < 1:
        raise ShapeError(f"invalid widths {list(widths)}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out)))
    return DecoderParams(layers, activation, output_activation)


def _hidden(h: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(h, 0.0) if kind == "relu" else np.tanh(h)


def _as_batch(params: DecoderParams, z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2 or z2.shape[1] != params.input_dim:
        raise ShapeError(
            f"layer 0: expected input width {params.input_dim}, got shape {z.shape}"
        )
    return z2, single


def _trace(params: DecoderParams, z2: np.ndarray):
    acts = [z2]
    pre = []
    a = z2
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        h = a @ layer.weight.T + layer.bias
        pre.append(h)
        if i < last:
            a = _hidden(h, params.activation)
        elif params.output_activation == "sigmoid":
            a = expit(h)
        else:
            a = h
        acts.append(a)
    return pre, acts


def forward(params: DecoderParams, z) -> np.ndarray:
    """Decode one latent vector ``(d,)`` or a batch ``(B, d)``."""
    z2, single = _as_batch(params, z)
    _, acts = _trace(params, z2)
    out = acts[-1]
    return out[0] if single else out


def backward(params: DecoderParams, z, grad_out) -> tuple[Grads, np.ndarray]:
    """Gradients of ``sum(grad_out * forward(params, z))``.

    Returns per-layer ``(dW, db)`` summed over the batch, and the gradient with
    respect to ``z`` (same shape as ``z``).
    """
    z2, single = _as_batch(params, z)
    g = np.asarray(grad_out, dtype=np.float64)
    g2 = g[None, :] if g.ndim == 1 else g
    if g2.shape != (z2.shape[0], params.output_dim):
        raise ShapeError(
            f"layer {len(params.layers) - 1}: grad_out shape {g.shape} does not match "
            f"output ({z2.shape[0]}, {params.output_dim})"
        )
    pre, acts = _trace(params, z2)
    last = len(params.layers) - 1

    if params.output_activation == "sigmoid":
        s = acts[-1]
        delta = g2 * s * (1.0 - s)
    else:
        delta = g2

    grads: Grads = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(last, -1, -1):
        layer = params.layers[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        upstream = delta @ layer.weight
        if i > 0:
            if params.activation == "relu":
                delta = upstream * (pre[i - 1] > 0.0)
            else:
                delta = upstream * (1.0 - acts[i] ** 2)
        else:
            grad_z = upstream
    return grads, (grad_z[0] if single else grad_z)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    schedule: str = "cosine_warm_restarts"
    period_epochs: int = 50

    def __post_init__(self):
        # lr == 0 is allowed: it freezes the decoder
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.period_epochs < 1:
            raise ValueError("period_epochs must be >= 1")


@dataclass
class OptimizerState:
    m: Grads
    v: Grads
    step: int = 0


def init_optimizer(params: DecoderParams) -> OptimizerState:
    zeros = lambda: [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]
    return OptimizerState(zeros(), zeros(), 0)


def scheduled_lr(config: OptimizerConfig, epoch_fraction: float) -> float:
    """Learning rate at ``epoch_fraction`` in [0, 1] of the current restart period."""
    if config.schedule == "constant":
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch_fraction))


def period_fraction(epoch: float, period_epochs: int) -> float:
    """Position of a (fractional, 0-based) epoch inside its restart period."""
    return (epoch % period_epochs) / period_epochs


def grad_norm(grads: Grads) -> float:
    return math.sqrt(sum(float(np.sum(gw * gw)) + float(np.sum(gb * gb)) for gw, gb in grads))


def clip_gradients(grads: Grads, max_norm: float) -> tuple[Grads, float]:
    norm = grad_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return [(gw * scale, gb * scale) for gw, gb in grads], norm


def check_finite(grads: Grads) -> None:
    for i, (gw, gb) in enumerate(grads):
        if not np.all(np.isfinite(gw)):
            raise NumericError(f"non-finite gradient in layer {i} weight")
        if not np.all(np.isfinite(gb)):
            raise NumericError(f"non-finite gradient in layer {i} bias")


def adamw_step(
    params: DecoderParams,
    state: OptimizerState,
    grads: Grads,
    config: OptimizerConfig,
    epoch_fraction: float = 0.0,
) -> tuple[DecoderParams, OptimizerState]:
    """One AdamW update with global-norm clipping; inputs are not mutated."""
    if len(grads) != len(params.layers):
        raise ShapeError(f"{len(grads)} gradient pairs for {len(params.layers)} layers")
    for i, ((gw, gb), layer) in enumerate(zip(grads, params.layers)):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeError(f"layer {i}: gradient shape does not match parameters")
    check_finite(grads)
    grads, _ = clip_gradients(grads, config.grad_clip_norm)

    b1, b2 = config.betas
    step = state.step + 1
    lr = scheduled_lr(config, epoch_fraction)
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step

    new_layers, new_m, new_v = [], [], []
    for layer, (gw, gb), (mw, mb), (vw, vb) in zip(params.layers, grads, state.m, state.v):
        updated = []
        moments = []
        for p, g, m, v in ((layer.weight, gw, mw, vw), (layer.bias, gb, mb, vb)):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            p = p - lr * config.weight_decay * p
            p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
            updated.append(p)
            moments.append((m, v))
        new_layers.append(Layer(updated[0], updated[1]))
        new_m.append((moments[0][0], moments[1][0]))
        new_v.append((moments[0][1], moments[1][1]))
    new_params = DecoderParams(new_layers, params.activation, params.output_activation)
    return new_params, OptimizerState(new_m, new_v, step)


def early_stop_update(
    best_loss: float, current_loss: float, patience_counter: int, patience: int
) -> tuple[float, int, bool]:
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if current_loss < best_loss:
        return current_loss, 0, False
    counter = patience_counter + 1
    return best_loss, counter, counter >= patience


# ---------------------------------------------------------------------------
# Checkpoint format: "NSQL", u32 version, u32 layer count, then per layer
# u32 rows, u32 cols, f64 weights (row-major), f64 biases; then two u8 enums.


def checkpoint_bytes(params: DecoderParams) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.layers))]
    for layer in params.layers:
        rows, cols = layer.weight.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    parts.append(
        struct.pack(
            "<BB",
            ACTIVATIONS.index(params.activation),
            OUTPUT_ACTIVATIONS.index(params.output_activation),
        )
    )
    return b"".join(parts)


def params_from_bytes(buf: bytes) -> DecoderParams:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise LengthError(f"checkpoint truncated: need {pos + n} bytes, have {len(view)}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic = bytes(take(4))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    version, n_layers = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", take(8))
        w = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
        b = np.frombuffer(take(8 * rows), dtype="<f8")
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64)))
    act, out_act = struct.unpack("<BB", take(2))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after checkpoint")
    try:
        return DecoderParams(layers, ACTIVATIONS[act], OUTPUT_ACTIVATIONS[out_act])
    except IndexError:
        raise FormatError(f"unknown activation codes ({act}, {out_act})") from None


def save_checkpoint(path, params: DecoderParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> DecoderParams:
    return params_from_bytes(Path(path).read_bytes())
