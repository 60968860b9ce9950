"""Small fully connected networks with hand-written backprop and Adam.

Parameters of a network live in one flat float64 vector; weights and biases
are views into it, so optimizers and checkpoints only ever see the flat
array.  Inputs are row batches of shape (batch, features).
"""
from __future__ import annotations

import io
import zipfile
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class NetworkUsageError(RuntimeError):
    pass


class Mlp:
    """ReLU hidden layers, linear output."""

    def __init__(self, sizes, rng=None, params=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes += [(fan_in, fan_out), (fan_out,)]
        self.n_params = sum(int(np.prod(s)) for s in self.shapes)
        if params is not None:
            params = np.array(params, dtype=np.float64)
            if params.shape != (self.n_params,):
                raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
            self.params = params
        else:
            self.params = np.zeros(self.n_params)
            if rng is not None:
                self.init(rng)
        self.last_cache = None

    def init(self, rng) -> None:
        """Glorot-uniform weights, zero biases."""
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = self.layers()[k][0]
            w[...] = rng.uniform(-limit, limit, size=w.shape)
            self.layers()[k][1][...] = 0.0

    def layers(self, flat=None):
        """(W, b) views into ``flat`` (defaults to the parameters)."""
        flat = self.params if flat is None else flat
        out, i = [], 0
        for wshape, bshape in zip(self.shapes[0::2], self.shapes[1::2]):
            nw = wshape[0] * wshape[1]
            w = flat[i:i + nw].reshape(wshape)
            i += nw
            b = flat[i:i + bshape[0]]
            i += bshape[0]
            out.append((w, b))
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise NetworkUsageError(f"input has {x.shape[1]} features, network expects {self.sizes[0]}")
        acts = [x]
        h = x
        layers = self.layers()
        for k, (w, b) in enumerate(layers):
            h = h @ w + b
            if k < len(layers) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        self.last_cache = (acts, squeeze)
        return h[0] if squeeze else h

    def backward(self, dy, cache=None):
        """Gradient of sum(dy * output) w.r.t. the flat parameters."""
        cache = cache if cache is not None else self.last_cache
        if cache is None:
            raise NetworkUsageError("backward() without a forward cache")
        acts, squeeze = cache
        dy = np.asarray(dy, dtype=np.float64)
        if squeeze:
            dy = dy[None, :]
        grad = np.zeros(self.n_params)
        glayers = self.layers(grad)
        layers = self.layers()
        delta = dy
        for k in range(len(layers) - 1, -1, -1):
            gw, gb = glayers[k]
            gw[...] = acts[k].T @ delta
            gb[...] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ layers[k][0].T) * (acts[k] > 0)
        return grad

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, params=self.params.copy())

    def save(self, path) -> None:
        save_params(path, self.params, {"sizes": np.array(self.sizes)})

    @classmethod
    def load(cls, path) -> "Mlp":
        params, extra = load_params(path)
        return cls(tuple(int(s) for s in extra["sizes"]), params=params)


class Adam:
    """Adam with bias correction, global-norm clipping and optional L2 decay."""

    def __init__(self, n_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip=10.0, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip = clip
        self.weight_decay = weight_decay
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.skipped = 0

    def step(self, params, grads):
        """Update ``params`` in place; non-finite gradients skip the update."""
        if grads.shape != params.shape or self.m.shape != params.shape:
            raise ValueError("shape mismatch between parameters, gradients and moments")
        if not np.all(np.isfinite(grads)):
            self.skipped += 1
            return params
        g = grads + self.weight_decay * params if self.weight_decay else grads
        if self.clip:
            norm = np.sqrt(g @ g)
            if norm > self.clip:
                g = g * (self.clip / norm)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if not np.all(np.isfinite(params)):
            raise FloatingPointError("non-finite parameters after update")
        return params

    def state_dict(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t, "skipped": self.skipped}

    def load_state_dict(self, state) -> None:
        self.m = np.array(state["m"], dtype=np.float64)
        self.v = np.array(state["v"], dtype=np.float64)
        self.t = int(state["t"])
        self.skipped = int(state["skipped"])


def save_params(path, params, extra=None) -> None:
    """Flat parameter dump with a version and shape header (npz)."""
    payload = {"version": np.array(CHECKPOINT_VERSION), "params": np.asarray(params, dtype=np.float64)}
    for k, v in (extra or {}).items():
        payload[k] = np.asarray(v)
    # fixed entry timestamps keep identical parameters byte-identical on disk
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, payload[name], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_params(path):
    path = Path(path)
    with np.load(path) as data:
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {int(data['version'])}")
        extra = {k: data[k] for k in data.files if k not in ("version", "params")}
        return data["params"].copy(), extra
