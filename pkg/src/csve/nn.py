"""Minimal float64 neural substrate: MLPs with explicit reverse-mode
gradients, Adam, diagonal-Gaussian heads and a binary checkpoint format.

The backward passes are written by hand and certified against central
finite differences in the test suite; keeping everything in numpy float64
makes training runs bit-reproducible for a fixed seed and thread count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
LOG_TWO_PI = float(np.log(2.0 * np.pi))

_MAGIC = b"MLPCKPT\x00"
_BLOB_VERSION = 1
_ACTIVATION_CODES = {"relu": 0, "tanh": 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}


class Mlp:
    """Fully connected network with identity output and relu/tanh hidden
    activations.  Parameters are stored as [W0, b0, W1, b1, ...] with W of
    shape (n_in, n_out)."""

    def __init__(self, layer_sizes, params, activation="relu"):
        self.layer_sizes = [int(n) for n in layer_sizes]
        if len(self.layer_sizes) < 2 or any(n <= 0 for n in self.layer_sizes):
            raise InputError(f"bad layer sizes {layer_sizes}")
        if activation not in _ACTIVATION_CODES:
            raise InputError(f"unknown activation {activation!r}")
        self.activation = activation
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        expected = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            expected.append((n_in, n_out))
            expected.append((n_out,))
        shapes = [p.shape for p in self.params]
        if shapes != expected:
            raise InputError(f"parameter shapes {shapes} do not match sizes {expected}")

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, activation="relu",
             final_scale: float = 1.0) -> "Mlp":
        """Fan-in uniform initialization; the last layer may be scaled down
        (used for near-zero initial policy actions)."""
        params = []
        n_layers = len(layer_sizes) - 1
        for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            limit = np.sqrt(6.0 / n_in)
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
            b = np.zeros(n_out)
            if i == n_layers - 1 and final_scale != 1.0:
                w *= final_scale
            params.append(w)
            params.append(b)
        return cls(layer_sizes, params, activation)

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, [p.copy() for p in self.params], self.activation)

    def _act(self, z):
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return np.tanh(z)

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cache(x)
        return y

    def forward_cache(self, x: np.ndarray):
        """Returns (output, cache); accepts (batch, n_in) or (n_in,)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[1] != self.layer_sizes[0]:
            raise InputError(f"input width {h.shape[1]} != {self.layer_sizes[0]}")
        inputs, preacts = [], []
        for i in range(self.num_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            inputs.append(h)
            z = h @ w + b
            preacts.append(z)
            h = self._act(z) if i < self.num_layers - 1 else z
        out = h[0] if squeeze else h
        return out, (inputs, preacts, squeeze)

    def backward(self, cache, cotangent: np.ndarray):
        """Gradients of <output, cotangent> for every parameter and the input."""
        inputs, preacts, squeeze = cache
        dz = np.asarray(cotangent, dtype=np.float64)
        if squeeze:
            dz = dz[None, :]
        grads = [None] * len(self.params)
        for i in reversed(range(self.num_layers)):
            if i < self.num_layers - 1:
                z = preacts[i]
                if self.activation == "relu":
                    dz = dz * (z > 0.0)
                else:
                    dz = dz * (1.0 - np.tanh(z) ** 2)
            grads[2 * i] = inputs[i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            dz = dz @ self.params[2 * i].T
        input_grad = dz[0] if squeeze else dz
        return grads, input_grad


def zeros_like_params(params):
    return [np.zeros_like(p) for p in params]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr: float) -> AdamState:
    return AdamState(m=zeros_like_params(params), v=zeros_like_params(params), step=0, lr=lr)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if len(grads) != len(params):
        raise InputError("gradient list does not match parameter list")
    step = state.step + 1
    new_m, new_v, new_params = [], [], []
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise InputError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, step, state.lr, b1, b2, state.eps)


def polyak_update(target_params, source_params, omega: float):
    """target <- (1 - omega) * target + omega * source, per parameter."""
    return [(1.0 - omega) * t + omega * s for t, s in zip(target_params, source_params)]


# ---------------------------------------------------------------------------
# Diagonal Gaussians
# ---------------------------------------------------------------------------

def clamp_log_std(raw: np.ndarray) -> np.ndarray:
    return np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)


@dataclass(frozen=True)
class DiagGaussianHead:
    """Mean and clamped log-standard-deviation of a diagonal Gaussian; the
    leading axes may carry a batch."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        log_std = clamp_log_std(np.asarray(self.log_std, dtype=np.float64))
        if mean.shape != log_std.shape:
            raise InputError("mean and log_std must share a shape")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)


def gaussian_log_prob(head: DiagGaussianHead, x: np.ndarray) -> np.ndarray:
    """Exact diagonal-Gaussian log density, summed over the last axis."""
    z = (np.asarray(x, dtype=np.float64) - head.mean) / np.exp(head.log_std)
    return -0.5 * np.sum(z * z + 2.0 * head.log_std + LOG_TWO_PI, axis=-1)


def gaussian_sample(head: DiagGaussianHead, noise: np.ndarray) -> np.ndarray:
    """Reparameterized sample mean + exp(log_std) * noise."""
    return head.mean + np.exp(head.log_std) * np.asarray(noise, dtype=np.float64)


def gaussian_log_prob_grads(mean, log_std, x):
    """d log N(x; mean, std) / d mean and / d log_std, elementwise."""
    inv_var = np.exp(-2.0 * log_std)
    diff = x - mean
    d_mean = diff * inv_var
    d_log_std = diff * diff * inv_var - 1.0
    return d_mean, d_log_std


# Tanh-squashed policy head: a = scale * tanh(u), u ~ N(mean, std).

_ATANH_CLIP = 1.0 - 1e-9


def squashed_gaussian_sample(mean, log_std, noise, scale):
    """Returns (action, presquash) with gradients flowing through mean and
    log_std via the reparameterization u = mean + std * noise."""
    u = mean + np.exp(log_std) * noise
    return scale * np.tanh(u), u


def squashed_gaussian_log_prob(mean, log_std, actions, scale):
    """log pi(a|s) for a = scale * tanh(u): Gaussian density of the presquash
    point minus the log-Jacobian of the squash, summed over action dims."""
    a = np.clip(np.asarray(actions, dtype=np.float64) / scale, -_ATANH_CLIP, _ATANH_CLIP)
    u = np.arctanh(a)
    base = gaussian_log_prob(DiagGaussianHead(mean, log_std), u)
    jacobian = np.sum(np.log(scale * (1.0 - a * a)), axis=-1)
    return base - jacobian


def presquash_actions(actions, scale):
    a = np.clip(np.asarray(actions, dtype=np.float64) / scale, -_ATANH_CLIP, _ATANH_CLIP)
    return np.arctanh(a)


# ---------------------------------------------------------------------------
# Checkpoint blobs
# ---------------------------------------------------------------------------

def save_mlp_blob(mlp: Mlp) -> bytes:
    """Header (magic, version, activation, layer sizes) followed by all
    parameters as little-endian float64 in layer order."""
    header = bytearray()
    header += _MAGIC
    header += struct.pack("<I", _BLOB_VERSION)
    header += struct.pack("<B", _ACTIVATION_CODES[mlp.activation])
    header += struct.pack("<I", len(mlp.layer_sizes))
    for n in mlp.layer_sizes:
        header += struct.pack("<I", n)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in mlp.params)
    return bytes(header) + body


def load_mlp_blob(data: bytes) -> Mlp:
    if data[: len(_MAGIC)] != _MAGIC:
        raise InputError("not a checkpoint blob (bad magic)")
    offset = len(_MAGIC)
    (version,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if version != _BLOB_VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    (act_code,) = struct.unpack_from("<B", data, offset)
    offset += 1
    (n_sizes,) = struct.unpack_from("<I", data, offset)
    offset += 4
    sizes = list(struct.unpack_from(f"<{n_sizes}I", data, offset))
    offset += 4 * n_sizes
    params = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=offset)
        offset += 8 * n_in * n_out
        params.append(w.reshape(n_in, n_out).copy())
        b = np.frombuffer(data, dtype="<f8", count=n_out, offset=offset)
        offset += 8 * n_out
        params.append(b.copy())
    return Mlp(sizes, params, _ACTIVATION_NAMES[act_code])
