"""Trainable denoiser: an MLP with noise-level conditioning, hand-rolled
reverse-mode gradients, and a bias-corrected Adam optimizer.

Parameterization: D(x, t) = x + sigma_t * mlp(x, features(sigma_t)).  The
residual scaling makes D(., 0) the identity for every parameter value, and a
zero-initialized final layer makes the freshly initialized net the identity
denoiser at all t.

Checkpoint format: one JSON text line encoding the topology, followed by the
flat little-endian float64 parameter vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schedule_sde import NoiseSchedule

SMOOTH_RECTIFIER = "silu"  # x * sigmoid(x)

_SIGMA_FLOOR = 1e-12  # guards log(sigma) only; the residual scale handles sigma = 0


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_widths: tuple[int, ...] = (64, 64, 64)
    embed_pairs: int = 8
    activation: str = SMOOTH_RECTIFIER

    def __post_init__(self):
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError("input_dim and hidden widths must be positive")
        if self.activation != SMOOTH_RECTIFIER:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim + 2 * self.embed_pairs, *self.hidden_widths, self.input_dim]

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))


def init_params(cfg: NetConfig, seed: int) -> np.ndarray:
    """Fan-in-scaled uniform init; final layer zeroed so training starts at
    the identity denoiser."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6E65]))
    dims = cfg.layer_dims
    chunks = []
    last = len(dims) - 2
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i == last:
            chunks.append(np.zeros(fan_out * fan_in + fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in + fan_out))
    return np.concatenate(chunks)


def time_features(sigma: np.ndarray, pairs: int) -> np.ndarray:
    """Fourier features of the log noise level: sin/cos(2^j * log(sigma)/4),
    j = 0..pairs-1.  The log conditioning resolves noise levels spanning
    decades; raw-t features cannot."""
    u = 0.25 * np.log(np.maximum(sigma, _SIGMA_FLOOR))
    ang = u[:, None] * (2.0 ** np.arange(pairs))[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DenoiserNet:
    """Immutable denoiser value: config + schedule + flat parameter vector."""

    def __init__(self, config: NetConfig, schedule: NoiseSchedule, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (config.param_count,):
            raise ValueError(
                f"parameter vector has length {params.shape}, expected ({config.param_count},)")
        self.config = config
        self.schedule = schedule
        self.params = params
        self.params.setflags(write=False)
        self._layers = _unflatten(params, config)

    @classmethod
    def create(cls, config: NetConfig, schedule: NoiseSchedule, seed: int) -> "DenoiserNet":
        return cls(config, schedule, init_params(config, seed))

    def with_params(self, params: np.ndarray) -> "DenoiserNet":
        return DenoiserNet(self.config, self.schedule, params.copy())

    def _prepare(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.config.input_dim:
            raise ValueError(f"x has dimension {x.shape[1]}, net expects {self.config.input_dim}")
        sig = np.asarray(self.schedule.sigma_at(t), dtype=np.float64)
        sig = np.broadcast_to(sig, (x.shape[0],))
        return x, sig

    def denoise(self, x, t) -> np.ndarray:
        x, sig = self._prepare(x, t)
        out, _ = _forward(self._layers, x, sig, self.config.embed_pairs)
        return x + sig[:, None] * out

    def denoise_vjp(self, x, t):
        """Returns (D(x, t), vjp) where vjp maps a cotangent of D's output to
        the flat parameter gradient."""
        x, sig = self._prepare(x, t)
        out, caches = _forward(self._layers, x, sig, self.config.embed_pairs)
        value = x + sig[:, None] * out

        def vjp(cotangent: np.ndarray) -> np.ndarray:
            g = sig[:, None] * np.asarray(cotangent, dtype=np.float64)
            return _backward(self._layers, caches, g)

        return value, vjp


def _unflatten(params: np.ndarray, cfg: NetConfig):
    dims = cfg.layer_dims
    layers, off = [], 0
    for i in range(len(dims) - 1):
        fi, fo = dims[i], dims[i + 1]
        W = params[off:off + fo * fi].reshape(fo, fi)
        off += fo * fi
        b = params[off:off + fo]
        off += fo
        layers.append((W, b))
    return layers


def _forward(layers, x, sig, pairs):
    h = np.concatenate([x, time_features(sig, pairs)], axis=1)
    caches = []
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        if i < last:
            s = 1.0 / (1.0 + np.exp(-z))
            caches.append((h, z, s))
            h = z * s
        else:
            caches.append((h, None, None))
            h = z
    return h, caches


def _backward(layers, caches, g):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        h, _, _ = caches[i]
        gW = g.T @ h
        gb = g.sum(axis=0)
        grads[i] = (gW, gb)
        if i > 0:
            g = g @ layers[i][0]
            _, z_prev, s_prev = caches[i - 1]
            g = g * (s_prev * (1.0 + z_prev * (1.0 - s_prev)))  # d silu / dz
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


def grad_params(net: DenoiserNet, loss_evaluator) -> np.ndarray:
    """Parameter gradient of a scalar loss.

    ``loss_evaluator`` is a callable mapping the net to an object with
    ``value`` and ``grad`` attributes (or a ``(value, grad)`` pair); the loss
    constructors in :mod:`sfbdlab.losses` build such evaluators.
    """
    res = loss_evaluator(net)
    grad = res.grad if hasattr(res, "grad") else res[1]
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.params.shape:
        raise ValueError(f"gradient length {grad.shape} != parameter count {net.params.shape}")
    return grad


class GradientNumericsError(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"non-finite gradient entry at index {index}")
        self.index = index


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(step=0, m=np.zeros(n_params), v=np.zeros(n_params),
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              lr: float | None = None) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns (new state, new parameters).

    ``lr`` overrides the state's learning rate for this step (used by decay
    schedules) without mutating the state.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError("gradient and parameter lengths differ")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise GradientNumericsError(int(bad[0]))
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    rate = state.lr if lr is None else lr
    new_params = params - rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(step=step, m=m, v=v, lr=state.lr, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)
    return new_state, new_params


def save_checkpoint(net: DenoiserNet, path: str | Path) -> None:
    header = json.dumps({
        "format": "sfbd-denoiser",
        "version": 1,
        "input_dim": net.config.input_dim,
        "hidden_widths": list(net.config.hidden_widths),
        "embed_pairs": net.config.embed_pairs,
        "activation": net.config.activation,
        "sigma_max": net.schedule.sigma_max,
        "n_params": int(net.params.size),
    }).encode("utf-8") + b"\n"
    Path(path).write_bytes(header + net.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> DenoiserNet:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header line")
    meta = json.loads(raw[:nl].decode("utf-8"))
    if meta.get("format") != "sfbd-denoiser" or meta.get("version") != 1:
        raise ValueError(f"{path}: not a version-1 denoiser checkpoint")
    cfg = NetConfig(input_dim=int(meta["input_dim"]),
                    hidden_widths=tuple(meta["hidden_widths"]),
                    embed_pairs=int(meta["embed_pairs"]),
                    activation=meta["activation"])
    schedule = NoiseSchedule(sigma_max=float(meta["sigma_max"]), T=float(meta["sigma_max"]))
    params = np.frombuffer(raw[nl + 1:], dtype="<f8")
    if params.size != int(meta["n_params"]):
        raise ValueError(f"{path}: payload has {params.size} parameters, header says {meta['n_params']}")
    return DenoiserNet(cfg, schedule, params.copy())
