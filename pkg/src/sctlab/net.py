"""Small fully-connected consistency network with hand-written backprop.

The net outputs an x0 prediction through skip/out preconditioning,

    D(x, t) = c_skip(t) * x/alpha_t + c_out(t) * F(c_in(t) * x/alpha_t, emb(ln rho_t), label)

with rho_t = sigma_t/alpha_t. c_skip and c_out are shifted by rho(t_min), so
D(x, t_min) = x/alpha(t_min) holds exactly whatever the weights are.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .schedule import NoiseSchedule


class NetError(ValueError):
    pass


class CheckpointError(IOError):
    pass


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _tanh(z):
    y = np.tanh(z)
    return y, y


ACTIVATIONS = ("silu", "tanh")


class ConsistencyNet:
    def __init__(self, dim: int, schedule: NoiseSchedule, sigma_data: float = 0.5,
                 hidden: Sequence[int] = (128, 128, 128), n_freq: int = 16,
                 n_classes: int = 0, class_dim: int = 16, activation: str = "silu",
                 seed=0, params: Optional[np.ndarray] = None,
                 freq_band: Sequence[float] = (0.05, 1.0)):
        if activation not in ACTIVATIONS:
            raise NetError(f"unknown activation {activation!r}")
        self.dim = int(dim)
        self.schedule = schedule
        self.sigma_data = float(sigma_data)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_freq = int(n_freq)
        self.n_classes = int(n_classes)
        self.class_dim = int(class_dim) if n_classes else 0
        self.activation = activation
        lo, hi = (float(f) for f in freq_band)
        if not 0 < lo <= hi:
            raise NetError(f"bad frequency band {freq_band}")
        self.freq_band = (lo, hi)
        # angular frequencies applied to ln(rho)
        self.freqs = np.geomspace(lo, hi, self.n_freq) if self.n_freq else np.zeros(0)
        self.in_dim = self.dim + 2 * self.n_freq + self.class_dim
        self.widths = (self.in_dim,) + self.hidden + (self.dim,)
        self.rho_min = float(schedule.rho(schedule.t_min))

        self._slices = []
        off = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            self._slices.append(((off, off + a * b, (a, b)), (off + a * b, off + a * b + b)))
            off += a * b + b
        self._emb_slice = (off, off + (self.n_classes + 1) * self.class_dim)
        off = self._emb_slice[1]
        self.n_params = off
        if params is None:
            params = self.init_params(seed)
        self.params = np.array(params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise NetError(f"expected {self.n_params} parameters, got {self.params.shape}")

    def analytic_param_count(self) -> int:
        n = sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))
        return n + (self.n_classes + 1) * self.class_dim if self.n_classes else n

    def init_params(self, seed) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        p = np.zeros(self.n_params)
        for (w0, w1, shape), _ in self._slices:
            p[w0:w1] = rng.standard_normal(shape[0] * shape[1]) / np.sqrt(shape[0])
        e0, e1 = self._emb_slice
        p[e0:e1] = rng.standard_normal(e1 - e0)
        return p

    def arch(self) -> dict:
        return {"dim": self.dim, "hidden": list(self.hidden), "n_freq": self.n_freq,
                "n_classes": self.n_classes, "class_dim": self.class_dim,
                "activation": self.activation, "sigma_data": self.sigma_data,
                "freq_band": list(self.freq_band), "schedule": self.schedule.to_dict()}

    @classmethod
    def from_arch(cls, arch: dict, params=None) -> "ConsistencyNet":
        sched = NoiseSchedule(**arch["schedule"])
        return cls(arch["dim"], sched, arch["sigma_data"], arch["hidden"], arch["n_freq"],
                   arch["n_classes"], arch["class_dim"] or 16, arch["activation"], params=params,
                   freq_band=arch["freq_band"])

    def copy(self, params=None) -> "ConsistencyNet":
        return ConsistencyNet.from_arch(self.arch(), self.params if params is None else params)

    def same_arch(self, other) -> bool:
        return isinstance(other, ConsistencyNet) and self.arch() == other.arch()

    # preconditioning
    def coefficients(self, t):
        rho = np.asarray(self.schedule.rho(t), dtype=float)
        sd2 = self.sigma_data ** 2
        shifted = rho - self.rho_min
        c_skip = sd2 / (shifted ** 2 + sd2)
        c_out = self.sigma_data * shifted / np.sqrt(sd2 + rho ** 2)
        c_in = 1.0 / np.sqrt(sd2 + rho ** 2)
        return c_skip, c_out, c_in, rho

    def _label_rows(self, label, n):
        if label is None:
            if self.n_classes:
                return np.full(n, self.n_classes)
            return None
        lab = np.broadcast_to(np.asarray(label), (n,)).astype(int)
        if not self.n_classes or np.any(lab < 0) or np.any(lab >= self.n_classes):
            raise NetError(f"unknown label(s) {np.unique(lab)} for net with {self.n_classes} classes")
        return lab

    def _forward(self, x, t, label, params):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise NetError(f"input dimension {x.shape[1]} != net dimension {self.dim}")
        n = len(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        alpha = self.schedule.alpha(t)
        c_skip, c_out, c_in, rho = self.coefficients(t)
        x_tilde = x / alpha[:, None]
        feats = [c_in[:, None] * x_tilde]
        if self.n_freq:
            # floor keeps t = 0 finite for schedules that reach it
            phase = np.log(np.maximum(rho, 1e-12))[:, None] * self.freqs[None, :]
            feats += [np.sin(phase), np.cos(phase)]
        rows = self._label_rows(label, n)
        if rows is not None:
            e0, e1 = self._emb_slice
            table = params[e0:e1].reshape(self.n_classes + 1, self.class_dim)
            feats.append(table[rows])
        h = np.concatenate(feats, axis=1)
        act = _silu if self.activation == "silu" else _tanh
        cache = [h]
        n_layers = len(self._slices)
        for li, ((w0, w1, shape), (b0, b1)) in enumerate(self._slices):
            z = h @ params[w0:w1].reshape(shape) + params[b0:b1]
            if li < n_layers - 1:
                h, aux = act(z)
                cache.append((z, aux, h))
            else:
                h = z
        out = c_skip[:, None] * x_tilde + c_out[:, None] * h
        return out, (cache, c_out, rows)

    def raw(self, x, t, label=None, params=None):
        """F before preconditioning."""
        params = self.params if params is None else params
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out, (cache, c_out, _) = self._forward(x, t, label, params)
        n = len(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        c_skip = self.coefficients(t)[0]
        x_tilde = x / self.schedule.alpha(t)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            return (out - c_skip[:, None] * x_tilde) / c_out[:, None]

    def predict_x0(self, x, t, label=None, params=None):
        squeeze = np.ndim(x) == 1
        out, _ = self._forward(x, t, label, self.params if params is None else params)
        return out[0] if squeeze else out

    __call__ = predict_x0

    def forward_with_cache(self, x, t, label=None, params=None):
        return self._forward(x, t, label, self.params if params is None else params)

    def backprop_cached(self, cache_bundle, upstream, params=None):
        """Parameter gradient of sum(upstream * D) given a forward cache."""
        params = self.params if params is None else params
        cache, c_out, rows = cache_bundle
        grad = np.zeros(self.n_params)
        g = np.atleast_2d(upstream) * c_out[:, None]
        n_layers = len(self._slices)
        for li in range(n_layers - 1, -1, -1):
            (w0, w1, shape), (b0, b1) = self._slices[li]
            h_in = cache[0] if li == 0 else cache[li][2]
            grad[w0:w1] = (h_in.T @ g).ravel()
            grad[b0:b1] = g.sum(axis=0)
            g = g @ params[w0:w1].reshape(shape).T
            if li > 0:
                z, aux, _ = cache[li]
                if self.activation == "silu":
                    g = g * (aux + z * aux * (1.0 - aux))
                else:
                    g = g * (1.0 - aux * aux)
        if rows is not None:
            e0, e1 = self._emb_slice
            gt = np.zeros((self.n_classes + 1, self.class_dim))
            np.add.at(gt, rows, g[:, self.in_dim - self.class_dim:])
            grad[e0:e1] = gt.ravel()
        return grad

    def backprop(self, x, t, label, upstream, params=None):
        """Exact gradient of sum(upstream * predict_x0(x, t)) w.r.t. the parameters."""
        x2 = np.atleast_2d(x)
        up = np.atleast_2d(np.asarray(upstream, dtype=float))
        if up.shape != x2.shape:
            raise NetError(f"upstream shape {up.shape} does not match output {x2.shape}")
        _, bundle = self.forward_with_cache(x2, t, label, params)
        return self.backprop_cached(bundle, up, params)


@dataclass
class EmaShadow:
    decay: float
    params: np.ndarray
    count: int = 0

    @classmethod
    def of(cls, net: ConsistencyNet, decay: float) -> "EmaShadow":
        if not 0.0 <= decay <= 1.0:
            raise NetError(f"EMA decay must lie in [0, 1], got {decay}")
        return cls(float(decay), net.params.copy(), 0)


def ema_update(shadow: EmaShadow, net: ConsistencyNet) -> EmaShadow:
    if shadow.params.shape != net.params.shape:
        raise NetError("EMA shadow and net parameter shapes differ")
    shadow.params *= shadow.decay
    shadow.params += (1.0 - shadow.decay) * net.params
    shadow.count += 1
    return shadow


# Checkpoint layout (little endian):
#   magic(8) version(u32) arch_len(u32) arch_json param_count(u64) n_shadows(u32)
#   per shadow: decay(f64) count(u64)
#   sha256(32) over everything before it plus the payload
#   payload: params f64[param_count], then each shadow f64[param_count]
MAGIC = b"SCTLAB\x00\x01"
VERSION = 1


def checkpoint_bytes(net: ConsistencyNet, shadows: Sequence[EmaShadow] = ()) -> bytes:
    arch = json.dumps(net.arch(), sort_keys=True, separators=(",", ":")).encode()
    head = MAGIC + struct.pack("<II", VERSION, len(arch)) + arch
    head += struct.pack("<QI", net.n_params, len(shadows))
    for sh in shadows:
        head += struct.pack("<dQ", sh.decay, sh.count)
    payload = net.params.astype("<f8").tobytes()
    for sh in shadows:
        payload += sh.params.astype("<f8").tobytes()
    digest = hashlib.sha256(head + payload).digest()
    return head + digest + payload


def save_checkpoint(net: ConsistencyNet, shadows: Sequence[EmaShadow], path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net, shadows))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        return parse_checkpoint(blob)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None


def parse_checkpoint(blob: bytes):
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not an sctlab checkpoint")
    version, arch_len = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    off = 16
    arch = json.loads(blob[off:off + arch_len].decode())
    off += arch_len
    n_params, n_shadows = struct.unpack_from("<QI", blob, off)
    off += 12
    meta = []
    for _ in range(n_shadows):
        meta.append(struct.unpack_from("<dQ", blob, off))
        off += 16
    head_end = off
    digest = blob[off:off + 32]
    off += 32
    payload = blob[off:]
    if len(payload) != 8 * n_params * (1 + n_shadows) or len(digest) != 32:
        raise CheckpointError("checkpoint truncated")
    if hashlib.sha256(blob[:head_end] + payload).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    arrays = np.frombuffer(payload, dtype="<f8").reshape(1 + n_shadows, n_params).astype(np.float64)
    net = ConsistencyNet.from_arch(arch, arrays[0])
    shadows = [EmaShadow(d, arrays[i + 1].copy(), int(c)) for i, (d, c) in enumerate(meta)]
    return net, shadows
