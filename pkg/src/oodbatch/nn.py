"""Small differentiable multi-label classifiers trained with Adam (AMSGrad).

Parameters live in one flat float64 vector; :func:`param_layout` maps it to
per-layer weight matrices and biases.  Two architectures:

* ``logistic``: ``z = x W + b``
* ``mlp1``: ``z = relu(x W1 + b1) W2 + b2``

The loss is binary cross-entropy with logits, with a per-task positive
weight and a mask that removes missing labels.
"""

from __future__ import annotations

import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

LOGISTIC = "logistic"
MLP1 = "mlp1"
KINDS = (LOGISTIC, MLP1)

# counts of degenerate events (e.g. fully masked batches), for run diagnostics
diagnostics: Counter = Counter()


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden_dim: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if min(self.input_dim, self.output_dim, self.hidden_dim) < 1:
            raise ValueError("model dimensions must be >= 1")


@dataclass
class ModelState:
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    adam_vhat_max: np.ndarray
    step_count: int = 0

    @classmethod
    def fresh(cls, params: np.ndarray) -> "ModelState":
        params = np.asarray(params, dtype=np.float64).copy()
        z = np.zeros_like(params)
        return cls(params, z.copy(), z.copy(), z.copy(), 0)

    def copy(self) -> "ModelState":
        return ModelState(
            self.params.copy(), self.adam_m.copy(), self.adam_v.copy(), self.adam_vhat_max.copy(), self.step_count
        )


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    amsgrad: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class LossWeights:
    pos_weight: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        pw = np.asarray(self.pos_weight, dtype=np.float64)
        if np.any(pw <= 0):
            raise ValueError("pos_weight must be > 0 for every task")
        object.__setattr__(self, "pos_weight", pw)


# ---------------------------------------------------------------------------
# parameters


def param_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """``(name, shape, offset)`` for each parameter block, in storage order."""
    if spec.kind == LOGISTIC:
        shapes = [("W", (spec.input_dim, spec.output_dim)), ("b", (spec.output_dim,))]
    else:
        shapes = [
            ("W1", (spec.input_dim, spec.hidden_dim)),
            ("b1", (spec.hidden_dim,)),
            ("W2", (spec.hidden_dim, spec.output_dim)),
            ("b2", (spec.output_dim,)),
        ]
    out, offset = [], 0
    for name, shape in shapes:
        out.append((name, shape, offset))
        offset += math.prod(shape)
    return out


def n_params(spec: ModelSpec) -> int:
    name, shape, offset = param_layout(spec)[-1]
    return offset + math.prod(shape)


def unpack(params: np.ndarray, spec: ModelSpec) -> dict[str, np.ndarray]:
    """Views into the flat vector, keyed by block name."""
    if params.shape != (n_params(spec),):
        raise ValueError(f"params length {params.shape} does not match {spec}")
    return {name: params[off:off + math.prod(shape)].reshape(shape) for name, shape, off in param_layout(spec)}


def init_model(spec: ModelSpec, seed: int) -> ModelState:
    """Glorot-uniform weights, zero biases, zero optimizer state."""
    rng = np.random.default_rng(int(seed) % (1 << 64))
    params = np.zeros(n_params(spec))
    blocks = unpack(params, spec)
    for name, shape, _ in param_layout(spec):
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            blocks[name][...] = rng.uniform(-limit, limit, size=shape)
    return ModelState.fresh(params)


# ---------------------------------------------------------------------------
# forward / backward


def _check_features(features: np.ndarray, spec: ModelSpec) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"features shape {x.shape} incompatible with input_dim {spec.input_dim}")
    return x


def forward(state: ModelState, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    x = _check_features(features, spec)
    p = unpack(state.params, spec)
    if spec.kind == LOGISTIC:
        return x @ p["W"] + p["b"]
    h = np.maximum(x @ p["W1"] + p["b1"], 0.0)
    return h @ p["W2"] + p["b2"]


def backward(state: ModelState, spec: ModelSpec, features: np.ndarray, dloss_dlogits: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the flat parameter vector."""
    x = _check_features(features, spec)
    dz = np.asarray(dloss_dlogits, dtype=np.float64)
    if dz.shape != (x.shape[0], spec.output_dim):
        raise ValueError(f"upstream gradient shape {dz.shape} != {(x.shape[0], spec.output_dim)}")
    p = unpack(state.params, spec)
    grads = np.zeros_like(state.params)
    g = unpack(grads, spec)
    if spec.kind == LOGISTIC:
        g["W"][...] = x.T @ dz
        g["b"][...] = dz.sum(axis=0)
        return grads
    pre = x @ p["W1"] + p["b1"]
    h = np.maximum(pre, 0.0)
    g["W2"][...] = h.T @ dz
    g["b2"][...] = dz.sum(axis=0)
    dpre = (dz @ p["W2"].T) * (pre > 0)
    g["W1"][...] = x.T @ dpre
    g["b1"][...] = dpre.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# loss


def pos_weights_from_counts(counts: Sequence[tuple[int, int, int]]) -> LossWeights:
    """``n_neg / n_pos`` per task; 1.0 when either class is absent."""
    pw = [n_neg / n_pos if n_pos > 0 and n_neg > 0 else 1.0 for n_pos, n_neg, _ in counts]
    return LossWeights(np.array(pw, dtype=np.float64))


def wbce_loss(
    logits: np.ndarray, labels: np.ndarray, mask: np.ndarray, w: LossWeights
) -> tuple[float, np.ndarray]:
    """Masked, positively-weighted BCE with logits.

    Returns the mean over unmasked elements and its gradient w.r.t. the
    logits (zero where ``mask == 0``).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if not (z.shape == y.shape == m.shape):
        raise ValueError(f"shape mismatch: logits {z.shape}, labels {y.shape}, mask {m.shape}")
    pw = np.broadcast_to(w.pos_weight, z.shape[-1:])
    n = m.sum()
    if n == 0:
        diagnostics["all_masked_batch"] += 1
        log.debug("wbce_loss: every label masked; returning zero loss")
        return 0.0, np.zeros_like(z)
    # softplus(-z) = -log sigmoid(z), softplus(z) = -log(1 - sigmoid(z))
    elem = pw * y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    norm = max(1.0, n)
    loss = float(np.sum(m * elem) / norm)
    grad = m * (-pw * y * expit(-z) + (1.0 - y) * expit(z)) / norm
    return loss, grad


def env_sum_loss(per_env: Sequence[tuple[float, np.ndarray]]) -> tuple[float, np.ndarray]:
    """Sum per-environment ``(loss, grads)`` pairs."""
    if not per_env:
        raise ValueError("need at least one environment")
    n = per_env[0][1].shape
    total_loss, total_grads = 0.0, np.zeros(n)
    for loss, grads in per_env:
        if grads.shape != n:
            raise ValueError(f"gradient length mismatch: {grads.shape} vs {n}")
        total_loss += loss
        total_grads = total_grads + grads
    return total_loss, total_grads


# ---------------------------------------------------------------------------
# optimizer


def adam_step(state: ModelState, grads: np.ndarray, cfg: OptimConfig) -> ModelState:
    """One Adam update with coupled L2 weight decay; returns a new state.

    With ``amsgrad`` the denominator uses the running maximum of the
    bias-corrected second moment.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.params.shape:
        raise ValueError(f"grads shape {grads.shape} != params shape {state.params.shape}")
    t = state.step_count + 1
    g = grads + cfg.weight_decay * state.params
    m = cfg.beta1 * state.adam_m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.adam_v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    if cfg.amsgrad:
        vhat_max = np.maximum(state.adam_vhat_max, v_hat)
        denom = vhat_max
    else:
        vhat_max = state.adam_vhat_max
        denom = v_hat
    params = state.params - cfg.learning_rate * m_hat / (np.sqrt(denom) + cfg.epsilon)
    return ModelState(params, m, v, vhat_max, t)


# ---------------------------------------------------------------------------
# checkpoint file
#
# little-endian:
#   magic      4s   b"OODC"
#   version    u16  1
#   kind       u8   0 = logistic, 1 = mlp1
#   reserved   u8   0
#   input_dim  u32
#   hidden_dim u32
#   output_dim u32
#   step_count u64
#   n_params   u64
#   params, adam_m, adam_v, adam_vhat_max: n_params f64 each

CKPT_MAGIC = b"OODC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHBBIIIQQ")


def checkpoint_bytes(state: ModelState, spec: ModelSpec) -> bytes:
    n = n_params(spec)
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, KINDS.index(spec.kind), 0,
        spec.input_dim, spec.hidden_dim, spec.output_dim, state.step_count, n,
    )
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (state.params, state.adam_m, state.adam_v, state.adam_vhat_max)
    )
    return header + body


def save_checkpoint(state: ModelState, spec: ModelSpec, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state, spec))


def checkpoint_from_bytes(raw: bytes) -> tuple[ModelSpec, ModelState]:
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError("truncated checkpoint header")
    magic, version, kind, _, d_in, d_hid, d_out, steps, n = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    spec = ModelSpec(KINDS[kind], d_in, d_out, d_hid)
    if n != n_params(spec) or len(raw) != _CKPT_HEADER.size + 4 * 8 * n:
        raise ValueError("checkpoint payload does not match its header")
    arrs = np.frombuffer(raw, dtype="<f8", offset=_CKPT_HEADER.size).reshape(4, n).astype(np.float64)
    return spec, ModelState(arrs[0].copy(), arrs[1].copy(), arrs[2].copy(), arrs[3].copy(), int(steps))


def load_checkpoint(path) -> tuple[ModelSpec, ModelState]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def with_params(state: ModelState, params: np.ndarray) -> ModelState:
    return replace(state, params=np.asarray(params, dtype=np.float64))
