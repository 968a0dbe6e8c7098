"""Minimal NN stack: linear layers, masked multi-head self-attention,
MSE, reverse-mode backprop and Adam, plus a flat binary checkpoint format.

Attention follows Y = softmax((X Wq)(X Wk)^T / sqrt(d_in)) (X Wv) with the
logit scale taken from the layer's input width (a `scale_by_dk` switch
selects the conventional 1/sqrt(d_k)); heads are concatenated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MASK_FILL = -1e30


class ShapeError(ValueError):
    pass


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_in, fan_out) if shape is None else shape)


class Linear:
    """y = x W + b over the last axis."""

    def __init__(self, d_in, d_out, rng=None, name="linear"):
        self.name = name
        if rng is None:
            self.W = np.zeros((d_in, d_out))
        else:
            self.W = xavier_uniform(rng, d_in, d_out)
        self.b = np.zeros(d_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.W.shape[0]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.W.shape[0]}")
        self._x = x
        return x @ self.W + self.b

    def backward(self, gy):
        x = self._x
        self.gW += x.reshape(-1, x.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
        self.gb += gy.reshape(-1, gy.shape[-1]).sum(axis=0)
        return gy @ self.W.T

    def params(self):
        return {f"{self.name}.W": self.W, f"{self.name}.b": self.b}

    def grads(self):
        return {f"{self.name}.W": self.gW, f"{self.name}.b": self.gb}


class Tanh:
    def __init__(self):
        self._y = None

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, gy):
        return gy * (1.0 - self._y ** 2)


def masked_softmax(logits, mask):
    """Row softmax with masked entries receiving exactly zero weight."""
    filled = np.where(mask, logits, MASK_FILL)
    m = filled.max(axis=-1, keepdims=True)
    e = np.exp(filled - m)
    e = np.where(mask, e, 0.0)
    z = e.sum(axis=-1, keepdims=True)
    if np.any(z == 0.0):
        raise ShapeError("softmax row with every position masked")
    return e / z


class MultiHeadSelfAttention:
    """Masked multi-head self-attention over (..., N, d_in) inputs.

    mask is boolean (N, N) or (..., N, N); entry (i, j) True means token i
    may attend to token j.  Returns (Y, attn) with attn of shape
    (..., heads, N, N), exposed for behavior analysis.
    """

    def __init__(self, d_in, n_heads, d_k, d_v, rng, name="attn",
                 scale_by_dk=False):
        self.name = name
        self.n_heads = n_heads
        self.d_k = d_k
        self.d_v = d_v
        self.scale = 1.0 / np.sqrt(d_k if scale_by_dk else d_in)
        self.Wq = xavier_uniform(rng, d_in, d_k, (n_heads, d_in, d_k))
        self.Wk = xavier_uniform(rng, d_in, d_k, (n_heads, d_in, d_k))
        self.Wv = xavier_uniform(rng, d_in, d_v, (n_heads, d_in, d_v))
        self.gWq = np.zeros_like(self.Wq)
        self.gWk = np.zeros_like(self.Wk)
        self.gWv = np.zeros_like(self.Wv)
        self._cache = None

    def _project(self, x2, W):
        # x2: (B*N, d); W: (H, d, w) -> (B*N, H, w) via one GEMM
        H, d, w = W.shape
        return (x2 @ W.transpose(1, 0, 2).reshape(d, H * w)).reshape(-1, H, w)

    def forward(self, x, mask):
        single = x.ndim == 2
        if single:
            x = x[None]
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = np.broadcast_to(mask, x.shape[:-2] + mask.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("attention mask has an all-masked row")
        B, N, d = x.shape
        x2 = x.reshape(B * N, d)
        # q, k: (B, H, N, d_k); v: (B, H, N, d_v)
        q = self._project(x2, self.Wq).reshape(B, N, self.n_heads, self.d_k).transpose(0, 2, 1, 3)
        k = self._project(x2, self.Wk).reshape(B, N, self.n_heads, self.d_k).transpose(0, 2, 1, 3)
        v = self._project(x2, self.Wv).reshape(B, N, self.n_heads, self.d_v).transpose(0, 2, 1, 3)
        logits = self.scale * (q @ k.transpose(0, 1, 3, 2))
        attn = masked_softmax(logits, mask[:, None, :, :])
        y = attn @ v
        out = y.transpose(0, 2, 1, 3).reshape(B, N, self.n_heads * self.d_v)
        self._cache = (x, q, k, v, attn, mask, single)
        return (out[0], attn[0]) if single else (out, attn)

    def backward(self, gy):
        x, q, k, v, attn, mask, single = self._cache
        if single:
            gy = gy[None]
        B, N, _ = gy.shape
        H, dk, dv = self.n_heads, self.d_k, self.d_v
        gyh = gy.reshape(B, N, H, dv).transpose(0, 2, 1, 3)
        gattn = gyh @ v.transpose(0, 1, 3, 2)
        gv = attn.transpose(0, 1, 3, 2) @ gyh
        # softmax backward (masked positions have attn == 0 so drop out)
        dot = (gattn * attn).sum(axis=-1, keepdims=True)
        glogits = attn * (gattn - dot)
        gq = self.scale * (glogits @ k)
        gk = self.scale * (glogits.transpose(0, 1, 3, 2) @ q)
        x2 = x.reshape(B * N, -1)
        gq2 = gq.transpose(0, 2, 1, 3).reshape(B * N, H * dk)
        gk2 = gk.transpose(0, 2, 1, 3).reshape(B * N, H * dk)
        gv2 = gv.transpose(0, 2, 1, 3).reshape(B * N, H * dv)
        d = x2.shape[1]
        self.gWq += (x2.T @ gq2).reshape(d, H, dk).transpose(1, 0, 2)
        self.gWk += (x2.T @ gk2).reshape(d, H, dk).transpose(1, 0, 2)
        self.gWv += (x2.T @ gv2).reshape(d, H, dv).transpose(1, 0, 2)
        gx = (gq2 @ self.Wq.transpose(1, 0, 2).reshape(d, H * dk).T
              + gk2 @ self.Wk.transpose(1, 0, 2).reshape(d, H * dk).T
              + gv2 @ self.Wv.transpose(1, 0, 2).reshape(d, H * dv).T)
        gx = gx.reshape(B, N, d)
        return gx[0] if single else gx

    def params(self):
        return {f"{self.name}.Wq": self.Wq, f"{self.name}.Wk": self.Wk,
                f"{self.name}.Wv": self.Wv}

    def grads(self):
        return {f"{self.name}.Wq": self.gWq, f"{self.name}.Wk": self.gWk,
                f"{self.name}.Wv": self.gWv}


def mse(pred, target):
    """Mean squared error and its gradient w.r.t. pred."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


class Adam:
    """Adam over a dict of parameter arrays (updated in place)."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1 = beta1
        self.b2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for key, p in self.params.items():
            g = grads[key]
            self.m[key] = self.b1 * self.m[key] + (1 - self.b1) * g
            self.v[key] = self.b2 * self.v[key] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[key] / c1) / (np.sqrt(self.v[key] / c2) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, layer count, then per entry
# (name length, name, ndim, dims, row-major float64 payload).
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SWPNET\x00\x01"
CHECKPOINT_VERSION = 1


def save_params(path, params: dict) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_params(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a swarmpush checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            size = int(np.prod(shape, dtype=np.int64))  # 1 for ndim == 0
            data = np.frombuffer(f.read(8 * size), dtype=np.float64)
            out[name] = data.reshape(shape).copy()
    return out


@dataclass
class TrainCurve:
    train_loss: list
    val_loss: list
    best_epoch: int
