"""Dense/convolutional network kernels with exact reverse-mode gradients.

Layers operate on float64 numpy arrays. Feature maps are laid out NCHW;
dense layers take (batch, features). Each layer implements a pure
forward(x) -> (y, cache) and backward(dy, cache) -> (dx, param_grads)
pair, so the engine-level ops stay stateless and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

DTYPE = np.float64


def _check_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values produced in {context}")


class Dense:
    """Fully connected layer: y = x @ w + b."""

    kind = "dense"

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = np.asarray(w, dtype=DTYPE)
        self.b = np.asarray(b, dtype=DTYPE)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ValueError(f"dense parameter shapes inconsistent: "
                             f"w {self.w.shape}, b {self.b.shape}")

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.w.shape[0]:
            raise ValueError(f"dense expected input (batch, {self.w.shape[0]}), "
                             f"got {x.shape}")
        return x @ self.w + self.b, x

    def backward(self, dy, cache):
        x = cache
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.w.T
        return dx, {"w": dw, "b": db}

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "w", self.w
        yield "b", self.b


class Conv2d:
    """3x3-style convolution, stride 1, zero padding k//2 (shape preserving)."""

    kind = "conv2d"

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = np.asarray(w, dtype=DTYPE)  # (out_c, in_c, k, k)
        self.b = np.asarray(b, dtype=DTYPE)
        if self.w.ndim != 4 or self.w.shape[2] != self.w.shape[3]:
            raise ValueError(f"conv2d weight must be (out, in, k, k), got {self.w.shape}")
        if self.b.shape != (self.w.shape[0],):
            raise ValueError(f"conv2d bias shape {self.b.shape} does not match "
                             f"{self.w.shape[0]} output channels")
        if self.w.shape[2] % 2 == 0:
            raise ValueError(f"conv2d kernel size must be odd, got {self.w.shape[2]}")

    @property
    def kernel_size(self) -> int:
        return self.w.shape[2]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.w.shape[1]:
            raise ValueError(f"conv2d expected input (batch, {self.w.shape[1]}, H, W), "
                             f"got {x.shape}")
        k = self.kernel_size
        p = k // 2
        n, _, h, wd = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.zeros((n, self.w.shape[0], h, wd), dtype=DTYPE)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di:di + h, dj:dj + wd]
                out += np.einsum("fc,nchw->nfhw", self.w[:, :, di, dj], patch,
                                 optimize=True)
        out += self.b[None, :, None, None]
        return out, xp

    def backward(self, dy, cache):
        xp = cache
        k = self.kernel_size
        p = k // 2
        n, _, hp, wp = xp.shape
        h, wd = hp - 2 * p, wp - 2 * p
        dw = np.zeros_like(self.w)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di:di + h, dj:dj + wd]
                dw[:, :, di, dj] = np.einsum("nfhw,nchw->fc", dy, patch, optimize=True)
                dxp[:, :, di:di + h, dj:dj + wd] += np.einsum(
                    "fc,nfhw->nchw", self.w[:, :, di, dj], dy, optimize=True)
        db = dy.sum(axis=(0, 2, 3))
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return dx, {"w": dw, "b": db}

    def named_params(self):
        yield "w", self.w
        yield "b", self.b


class Relu:
    """Elementwise max(x, 0); subgradient at 0 is 0."""

    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, dy, cache):
        return dy * (cache > 0.0), {}

    def named_params(self):
        return iter(())


class MaxPool:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""

    kind = "max-pool"
    size = 2

    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"max-pool expected (batch, C, H, W), got {x.shape}")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max-pool needs even spatial dims, got {h}x{w}")
        windows = (x.reshape(n, c, h // 2, 2, w // 2, 2)
                    .transpose(0, 1, 2, 4, 3, 5)
                    .reshape(n, c, h // 2, w // 2, 4))
        idx = windows.argmax(axis=4)
        out = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dy, cache):
        idx, (n, c, h, w) = cache
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=4)
        dx = (dwin.reshape(n, c, h // 2, w // 2, 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(n, c, h, w))
        return dx, {}

    def named_params(self):
        return iter(())


class GlobalAvgPool:
    """Mean over spatial dims: (N, C, H, W) -> (N, C)."""

    kind = "global-average-pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ValueError(f"global-average-pool expected (batch, C, H, W), got {x.shape}")
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, cache):
        n, c, h, w = cache
        dx = np.broadcast_to(dy[:, :, None, None] / (h * w), (n, c, h, w)).copy()
        return dx, {}

    def named_params(self):
        return iter(())


class ResidualBlock:
    """Skip connection: y = x + f(x), f a shape-preserving layer chain."""

    kind = "residual-add"

    def __init__(self, inner: list):
        self.inner = list(inner)

    def forward(self, x):
        y = x
        caches = []
        for layer in self.inner:
            y, c = layer.forward(y)
            caches.append(c)
        if y.shape != x.shape:
            raise ValueError(f"residual-add inner chain changed shape "
                             f"{x.shape} -> {y.shape}")
        return x + y, caches

    def backward(self, dy, cache):
        grads = {}
        d = dy
        for i in reversed(range(len(self.inner))):
            d, g = self.inner[i].backward(d, cache[i])
            for pname, garr in g.items():
                grads[f"{i}/{pname}"] = garr
        return dy + d, grads

    def named_params(self):
        for i, layer in enumerate(self.inner):
            for pname, arr in layer.named_params():
                yield f"{i}/{pname}", arr


@dataclass
class Stage:
    """Named group of layers; the unit that learning-rate multipliers index."""

    name: str
    layers: list = field(default_factory=list)

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for pname, arr in layer.named_params():
                yield f"{self.name}/{i}/{pname}", arr


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch.

    Returns (loss, probs, dlogits) where dlogits is the gradient of the
    mean loss with respect to the logits.
    """
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    probs = exp / denom
    log_probs = shifted - np.log(denom)
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, probs, dlogits


@dataclass
class ForwardCache:
    """Activations saved by forward() for the matching backward() call."""

    stage_caches: list
    probs: np.ndarray
    dlogits: np.ndarray
    labels: np.ndarray
    batch_shape: tuple


def _as_labels(labels, batch_size: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.shape[0] != batch_size:
        raise ValueError(f"labels must be a length-{batch_size} vector, "
                         f"got shape {arr.shape}")
    return arr.astype(np.int64)


def forward(stages: list[Stage], batch: np.ndarray, labels) -> tuple[float, np.ndarray, ForwardCache]:
    """Run the stage list on a batch and apply softmax cross-entropy.

    Returns (loss, per-label probabilities, cache for backward).
    Shape problems and non-finite activations are rejected with the
    offending stage named.
    """
    x = np.asarray(batch, dtype=DTYPE)
    y = _as_labels(labels, x.shape[0])
    stage_caches = []
    for stage in stages:
        layer_caches = []
        for layer in stage.layers:
            try:
                x, c = layer.forward(x)
            except ValueError as e:
                raise ValueError(f"stage '{stage.name}': {e}") from None
            layer_caches.append(c)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"stage '{stage.name}': non-finite activation")
        stage_caches.append(layer_caches)
    if x.ndim != 2:
        raise ValueError(f"head stage '{stages[-1].name}' must produce "
                         f"(batch, labels) scores, got shape {x.shape}")
    if np.any(y < 0) or np.any(y >= x.shape[1]):
        raise ValueError(f"labels out of range for {x.shape[1]} classes")
    loss, probs, dlogits = softmax_cross_entropy(x, y)
    _check_finite(probs, "softmax")
    cache = ForwardCache(stage_caches, probs, dlogits, y, tuple(batch.shape))
    return float(loss), probs, cache


def backward(stages: list[Stage], cache: ForwardCache, labels) -> dict[str, np.ndarray]:
    """Gradients of the mean loss for every parameter, keyed stage/layer/param.

    Requires the cache produced by forward() on the same batch and labels.
    """
    if not isinstance(cache, ForwardCache):
        raise ValueError("backward called without a forward cache; run forward first")
    y = _as_labels(labels, len(cache.labels))
    if not np.array_equal(y, cache.labels):
        raise ValueError("labels do not match the batch passed to forward")
    if len(cache.stage_caches) != len(stages):
        raise ValueError("cache does not match this stage list")
    grads: dict[str, np.ndarray] = {}
    d = cache.dlogits
    for si in reversed(range(len(stages))):
        stage = stages[si]
        layer_caches = cache.stage_caches[si]
        for li in reversed(range(len(stage.layers))):
            d, layer_grads = stage.layers[li].backward(d, layer_caches[li])
            for pname, g in layer_grads.items():
                grads[f"{stage.name}/{li}/{pname}"] = g
    for name, g in grads.items():
        _check_finite(g, f"gradient of {name}")
    return grads


def param_count(stages: list[Stage]) -> int:
    return sum(arr.size for stage in stages for _, arr in stage.named_params())


MAX_GRAD_CHECK_PARAMS = 10_000


def grad_check(stages: list[Stage], batch: np.ndarray, labels,
               epsilon: float = 1e-5) -> float:
    """Compare analytic gradients to central finite differences.

    Perturbs every parameter scalar by +-epsilon and returns the maximum
    relative error max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    Only intended for models with at most 10^4 parameters.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    total = param_count(stages)
    if total > MAX_GRAD_CHECK_PARAMS:
        raise ValueError(f"model has {total} parameters; grad_check supports "
                         f"at most {MAX_GRAD_CHECK_PARAMS}")
    _, _, cache = forward(stages, batch, labels)
    analytic = backward(stages, cache, labels)
    worst = 0.0
    for stage in stages:
        for name, arr in stage.named_params():
            a = analytic[name]
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                loss_p, _, _ = forward(stages, batch, labels)
                flat[i] = orig - epsilon
                loss_m, _, _ = forward(stages, batch, labels)
                flat[i] = orig
                numeric = (loss_p - loss_m) / (2.0 * epsilon)
                ana = a.reshape(-1)[i]
                err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-12)
                worst = max(worst, err)
    return worst
