"""Velocity network: an MLP backbone with AdaLN conditioning and two heads.

The network maps ``(x_t, t, cond)`` to the parameters of an isotropic
Gaussian over velocities: a mean vector from the mean head and a scalar
log-variance from a separate log-variance head. Forward and reverse-mode
passes are written out by hand in numpy so that gradients can be checked
against central finite differences.

Array conventions: batches are row-major ``(B, features)``, weights are
stored ``(fan_in, fan_out)`` so a dense layer is ``x @ W + b``.
"""

from __future__ import annotations

import functools
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .errors import InputDomainError, NumericDomainError
from .rng import INIT, Stream

LOGVAR_INIT = math.log(0.1)
LN_EPS = 1e-5
TIME_SCALE = 1000.0

CHECKPOINT_MAGIC = b"DFMCKPT\x00"
CHECKPOINT_VERSION = 1


class ConditionSet(NamedTuple):
    class_id: int
    pitch_id: int
    velocity_id: int


@dataclass
class VelocityDistribution:
    mu: np.ndarray
    log_var: float

    @property
    def var(self) -> float:
        return math.exp(self.log_var)

    @property
    def sigma(self) -> float:
        return math.exp(0.5 * self.log_var)


@dataclass(frozen=True)
class NetConfig:
    """Layer sizes of the velocity network.

    ``hidden`` is the residual width H, ``depth`` the number of AdaLN blocks
    L, ``mlp_hidden`` the inner width of each block's two-layer MLP (defaults
    to H). The block nonlinearity is SiLU, x * sigmoid(x): smooth, C^1.
    """

    d: int
    hidden: int = 128
    depth: int = 4
    n_classes: int = 1
    n_pitches: int = 1
    n_velocities: int = 1
    mlp_hidden: int | None = None
    activation: str = "silu"

    def __post_init__(self):
        for name in ("d", "hidden", "n_classes", "n_pitches", "n_velocities"):
            if getattr(self, name) < 1:
                raise InputDomainError(f"{name} must be >= 1")
        if self.depth < 0:
            raise InputDomainError("depth must be >= 0")
        if self.activation != "silu":
            raise InputDomainError(f"unsupported activation {self.activation!r}")

    @property
    def inner(self) -> int:
        return self.mlp_hidden or self.hidden


def tensor_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable tensor."""
    H, d, M = config.hidden, config.d, config.inner
    shapes: dict[str, tuple[int, ...]] = {
        "emb_class": (config.n_classes, H),
        "emb_pitch": (config.n_pitches, H),
        "emb_velocity": (config.n_velocities, H),
        "in_w": (d, H),
        "in_b": (H,),
    }
    for i in range(config.depth):
        shapes[f"block{i}.mod_w"] = (H, 3 * H)
        shapes[f"block{i}.mod_b"] = (3 * H,)
        shapes[f"block{i}.fc1_w"] = (H, M)
        shapes[f"block{i}.fc1_b"] = (M,)
        shapes[f"block{i}.fc2_w"] = (M, H)
        shapes[f"block{i}.fc2_b"] = (H,)
    shapes["mu_w"] = (H, d)
    shapes["mu_b"] = (d,)
    shapes["logvar_w"] = (H, 1)
    shapes["logvar_b"] = (1,)
    return shapes


LOGVAR_HEAD = ("logvar_w", "logvar_b")


@dataclass
class NetParams:
    config: NetConfig
    tensors: dict[str, np.ndarray]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        if list(self.tensors) != list(expected):
            missing = set(expected) ^ set(self.tensors)
            if missing:
                raise InputDomainError(f"tensor set mismatch: {sorted(missing)}")
            self.tensors = {k: self.tensors[k] for k in expected}
        for name, shape in expected.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise InputDomainError(f"{name}: expected shape {shape}, got {arr.shape}")

    @classmethod
    def init(cls, config: NetConfig, seed: int) -> "NetParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.

        Embedding tables are Uniform(-1, 1). The log-variance head gets zero
        weights and bias log(0.1), so every fresh network predicts
        sigma^2 = 0.1 regardless of its input.
        """
        rng = Stream(seed).child(INIT).generator()
        tensors = {}
        for name, shape in tensor_shapes(config).items():
            if name.startswith("emb_"):
                tensors[name] = rng.uniform(-1.0, 1.0, size=shape)
            elif name == "logvar_w":
                tensors[name] = np.zeros(shape)
            elif name == "logvar_b":
                tensors[name] = np.full(shape, LOGVAR_INIT)
            else:
                fan_in = shape[0] if name.endswith("_w") else _bias_fan_in(config, name)
                bound = 1.0 / math.sqrt(fan_in)
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, tensors, seed)

    def copy(self) -> "NetParams":
        return NetParams(
            self.config, {k: v.copy() for k, v in self.tensors.items()}, self.seed, dict(self.meta)
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def block(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"block{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def to_bytes(self) -> bytes:
        header = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "seed": self.seed,
            "meta": self.meta,
            "tensors": [[k, list(v.shape)] for k, v in self.tensors.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
        for v in self.tensors.values():
            buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "NetParams":
        if data[:8] != CHECKPOINT_MAGIC:
            raise InputDomainError("not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + n])
        if header["version"] != CHECKPOINT_VERSION:
            raise InputDomainError(f"unsupported checkpoint version {header['version']}")
        offset = 16 + n
        tensors = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            tensors[name] = arr.reshape(shape).astype(np.float64)
            offset += 8 * count
        return cls(NetConfig(**header["config"]), tensors, header["seed"], header["meta"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "NetParams":
        return cls.from_bytes(Path(path).read_bytes())


def _bias_fan_in(config: NetConfig, name: str) -> int:
    if name == "in_b":
        return config.d
    if name.endswith("fc2_b"):
        return config.inner
    return config.hidden


# ---------------------------------------------------------------------------
# primitives


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@functools.lru_cache(maxsize=None)
def _time_freqs(half: int) -> np.ndarray:
    freqs = TIME_SCALE * np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    freqs.setflags(write=False)
    return freqs


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal features of t, shape ``(B, width)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    args = t[:, None] * _time_freqs(half)[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _as_cond_array(conds, config: NetConfig, batch: int) -> np.ndarray:
    bounds = (config.n_classes, config.n_pitches, config.n_velocities)
    if isinstance(conds, tuple) and len(conds) == 3:
        for name, val, hi in zip(ConditionSet._fields, conds, bounds):
            if not 0 <= val < hi:
                raise InputDomainError(f"{name} out of range [0, {hi})")
        return np.broadcast_to(np.array(conds, dtype=np.int64), (batch, 3))
    arr = np.asarray(conds, dtype=np.int64)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (batch, 3))
    if arr.shape != (batch, 3):
        raise InputDomainError(f"conditions must have shape ({batch}, 3), got {arr.shape}")
    for j, (name, hi) in enumerate(zip(ConditionSet._fields, bounds)):
        col = arr[:, j]
        if col.min() < 0 or col.max() >= hi:
            raise InputDomainError(f"{name} out of range [0, {hi})")
    return arr


def embed_condition(cond, params: NetParams) -> np.ndarray:
    """Sum of the class, pitch and velocity lookup rows (time excluded)."""
    c = _as_cond_array(cond, params.config, 1)[0]
    T = params.tensors
    return T["emb_class"][c[0]] + T["emb_pitch"][c[1]] + T["emb_velocity"][c[2]]


def _embed_rows(conds: np.ndarray, T: dict[str, np.ndarray]) -> np.ndarray:
    return T["emb_class"][conds[:, 0]] + T["emb_pitch"][conds[:, 1]] + T["emb_velocity"][conds[:, 2]]


def _layer_norm(x):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv_std, inv_std


def _adaln_forward(h, cvec, bp):
    H = h.shape[-1]
    mod = cvec @ bp["mod_w"] + bp["mod_b"]
    gamma, beta, alpha = mod[:, :H], mod[:, H:2 * H], mod[:, 2 * H:]
    n, inv_std = _layer_norm(h)
    u = n * (1.0 + gamma) + beta
    z1 = u @ bp["fc1_w"] + bp["fc1_b"]
    a1 = silu(z1)
    z2 = a1 @ bp["fc2_w"] + bp["fc2_b"]
    out = h + alpha * z2
    cache = (n, inv_std, gamma, alpha, u, z1, a1, z2)
    return out, cache


def adaln_block(x, cond_vec, block_params: dict[str, np.ndarray]) -> np.ndarray:
    """``x + alpha * MLP(LN(x) * (1 + gamma) + beta)`` with (gamma, beta, alpha)
    an affine projection of ``cond_vec``. Accepts single vectors or batches."""
    x = np.asarray(x, dtype=np.float64)
    cond_vec = np.asarray(cond_vec, dtype=np.float64)
    single = x.ndim == 1
    x2, c2 = np.atleast_2d(x), np.atleast_2d(cond_vec)
    H = block_params["mod_w"].shape[0]
    if x2.shape[-1] != H or c2.shape[-1] != H:
        raise InputDomainError(f"expected feature width {H}, got {x2.shape[-1]} and {c2.shape[-1]}")
    if c2.shape[0] != x2.shape[0]:
        c2 = np.broadcast_to(c2, x2.shape)
    out, _ = _adaln_forward(x2, c2, block_params)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# batched forward / backward


def forward_batch(params: NetParams, x, t, conds, *, keep_cache: bool = False):
    """Batched forward pass.

    ``x``: (B, d); ``t``: scalar or (B,); ``conds``: a single triple or (B, 3).
    Returns ``(mu (B, d), log_var (B,))`` and, when ``keep_cache``, the
    activations needed by :func:`backward_batch`.
    """
    cfg = params.config
    T = params.tensors
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.d:
        raise InputDomainError(f"x must have shape (B, {cfg.d}), got {x.shape}")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
        raise NumericDomainError("non-finite network input")
    c = _as_cond_array(conds, cfg, B)

    cvec = _embed_rows(c, T) + time_embedding(t, cfg.hidden)
    h = x @ T["in_w"] + T["in_b"]
    block_caches = []
    for i in range(cfg.depth):
        h_next, bc = _adaln_forward(h, cvec, params.block(i))
        block_caches.append(bc)
        h = h_next
    mu = h @ T["mu_w"] + T["mu_b"]
    log_var = (h @ T["logvar_w"])[:, 0] + T["logvar_b"][0]
    if keep_cache:
        return mu, log_var, (x, c, cvec, h, block_caches)
    return mu, log_var


def backward_batch(params: NetParams, cache, grad_mu, grad_log_var) -> dict[str, np.ndarray]:
    """Reverse-mode pass; returns d(sum of upstream . outputs)/d(tensor)."""
    cfg = params.config
    T = params.tensors
    x, c, cvec, h, block_caches = cache
    grad_mu = np.asarray(grad_mu, dtype=np.float64).reshape(-1, cfg.d)
    grad_log_var = np.asarray(grad_log_var, dtype=np.float64).reshape(-1)
    g = params.zeros_like()

    g["mu_w"] = h.T @ grad_mu
    g["mu_b"] = grad_mu.sum(axis=0)
    g["logvar_w"] = h.T @ grad_log_var[:, None]
    g["logvar_b"] = np.array([grad_log_var.sum()])
    gh = grad_mu @ T["mu_w"].T + grad_log_var[:, None] * T["logvar_w"][:, 0][None, :]

    gcvec = np.zeros_like(cvec)
    for i in reversed(range(cfg.depth)):
        bp = params.block(i)
        n, inv_std, gamma, alpha, u, z1, a1, z2 = block_caches[i]
        p = f"block{i}."
        g_alpha = gh * z2
        gz2 = gh * alpha
        g[p + "fc2_w"] = a1.T @ gz2
        g[p + "fc2_b"] = gz2.sum(axis=0)
        gz1 = (gz2 @ bp["fc2_w"].T) * silu_grad(z1)
        g[p + "fc1_w"] = u.T @ gz1
        g[p + "fc1_b"] = gz1.sum(axis=0)
        gu = gz1 @ bp["fc1_w"].T
        g_gamma = gu * n
        g_beta = gu
        gn = gu * (1.0 + gamma)
        gx_ln = inv_std * (
            gn - gn.mean(axis=1, keepdims=True) - n * (gn * n).mean(axis=1, keepdims=True)
        )
        gmod = np.concatenate([g_gamma, g_beta, g_alpha], axis=1)
        g[p + "mod_w"] = cvec.T @ gmod
        g[p + "mod_b"] = gmod.sum(axis=0)
        gcvec += gmod @ bp["mod_w"].T
        gh = gh + gx_ln

    g["in_w"] = x.T @ gh
    g["in_b"] = gh.sum(axis=0)
    np.add.at(g["emb_class"], c[:, 0], gcvec)
    np.add.at(g["emb_pitch"], c[:, 1], gcvec)
    np.add.at(g["emb_velocity"], c[:, 2], gcvec)
    return g


def predict(params: NetParams, x, t, conds) -> tuple[np.ndarray, np.ndarray]:
    """Inference-only forward pass through the kernel backend.

    Same map as :func:`forward_batch`; with the compiled backend each row is
    computed independently, and it is several times faster for the small
    batches used while sampling.
    """
    cfg = params.config
    T = params.tensors
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.d:
        raise InputDomainError(f"x must have shape (B, {cfg.d}), got {x.shape}")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
        raise NumericDomainError("non-finite network input")
    c = _as_cond_array(conds, cfg, B)
    cvec = np.ascontiguousarray(_embed_rows(c, T) + time_embedding(t, cfg.hidden))
    h = kernels.dense_rows(x, T["in_w"], T["in_b"])
    for i in range(cfg.depth):
        p = f"block{i}."
        h = kernels.adaln_rows(
            h, cvec,
            T[p + "mod_w"], T[p + "mod_b"],
            T[p + "fc1_w"], T[p + "fc1_b"],
            T[p + "fc2_w"], T[p + "fc2_b"],
        )
    mu = kernels.dense_rows(h, T["mu_w"], T["mu_b"])
    log_var = kernels.dense_rows(h, T["logvar_w"], T["logvar_b"])[:, 0]
    return mu, log_var


def forward(params: NetParams, x_t, t: float, cond) -> VelocityDistribution:
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (params.config.d,):
        raise InputDomainError(f"x_t must have length {params.config.d}")
    if not math.isfinite(t):
        raise NumericDomainError("non-finite time")
    if not 0.0 <= t <= 1.0:
        raise InputDomainError(f"t must lie in [0, 1], got {t}")
    mu, lv = predict(params, x_t[None, :], t, cond)
    return VelocityDistribution(mu[0], float(lv[0]))


def backward(params: NetParams, x_t, t: float, cond, grad_mu, grad_log_var) -> dict[str, np.ndarray]:
    x_t = np.asarray(x_t, dtype=np.float64)
    _, _, cache = forward_batch(params, x_t[None, :], t, cond, keep_cache=True)
    return backward_batch(params, cache, np.reshape(grad_mu, (1, -1)), [grad_log_var])


def finite_diff_grad(
    params: NetParams | dict[str, np.ndarray],
    loss_fn: Callable[[NetParams | dict[str, np.ndarray]], float],
    step: float = 1e-5,
    order: int = 2,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` w.r.t. every tensor entry.

    ``order`` 2 is the three-point stencil, ``order`` 4 the five-point one,
    which stays accurate for entries whose gradient is tiny next to the loss.
    Tensors are perturbed in place and restored, so ``loss_fn`` sees the
    same object it would in normal use.
    """
    if not step > 0:
        raise InputDomainError("finite-difference step must be > 0")
    if order not in (2, 4):
        raise InputDomainError("order must be 2 or 4")

    def at(flat, k, orig, offset):
        flat[k] = orig + offset
        return loss_fn(params)

    tensors = params.tensors if isinstance(params, NetParams) else params
    grads = {}
    for name, arr in tensors.items():
        gr = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), gr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            if order == 2:
                gflat[k] = (at(flat, k, orig, step) - at(flat, k, orig, -step)) / (2.0 * step)
            else:
                near = at(flat, k, orig, step) - at(flat, k, orig, -step)
                far = at(flat, k, orig, 2.0 * step) - at(flat, k, orig, -2.0 * step)
                gflat[k] = (8.0 * near - far) / (12.0 * step)
            flat[k] = orig
        grads[name] = gr
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries whose true gradient is zero from dividing by zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
