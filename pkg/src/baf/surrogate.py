"""Small stand-in host network and a synthetic classification task.

The network mirrors the structure the restoration method relies on: a
front stack producing ``X``, a stride-2 3x3 split convolution followed by
a folded BN producing ``Z``, then activation and a cloud-side stack with a
classifier head.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError, TrainingError
from .net import Adam
from .tensor import Activation, BnAffine, ConvLayer, conv_backward, conv_forward, to_nchw, to_nhwc

IMAGE_SIZE = 32
BRIGHTNESS_JITTER = 45.0


@dataclass
class Dataset:
    images: np.ndarray        # (N, 1, 32, 32) uint8
    labels: np.ndarray        # (N,) int64
    train_idx: np.ndarray
    val_idx: np.ndarray
    K: int

    @property
    def train(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.images[self.train_idx], self.labels[self.train_idx]

    @property
    def val(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.images[self.val_idx], self.labels[self.val_idx]


def _pattern(kind: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    freq = rng.uniform(0.15, 0.45)
    phase = rng.uniform(0, 2 * np.pi)
    if kind == 0:
        p = np.sin(freq * yy + phase)
    elif kind == 1:
        p = np.sin(freq * xx + phase)
    elif kind == 2:
        cy, cx = rng.uniform(10, 22, size=2)
        r = rng.uniform(5, 9)
        p = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64) * 2 - 1
    else:
        p = np.sin(freq * (xx + yy) + phase)
    return p - p.mean()


def gen_synthetic_dataset(seed: int = 0, count: int = 1024, K: int = 4, val_fraction: float = 0.25,
                          separable: bool = False) -> Dataset:
    """Deterministic 32x32 grayscale images of ``K`` classes, round-robin labels.

    Each class has its own mean brightness (spaced at least 20 gray levels
    apart) and one of four zero-mean textures: horizontal, vertical or
    diagonal stripes, or a disk. Per-image brightness jitter makes the
    classes overlap in brightness, so the texture has to be recognised.
    ``separable`` drops textures, noise and jitter, leaving brightness alone.
    """
    if K < 2 or K > 8:
        raise ConfigError("K must be between 2 and 8")
    if count < K:
        raise ConfigError(f"need at least one image per class (count={count}, K={K})")
    rng = np.random.default_rng(seed)
    bases = np.linspace(50, 205, K)
    images = np.empty((count, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    labels = np.arange(count) % K
    for i, k in enumerate(labels):
        img = np.full((IMAGE_SIZE, IMAGE_SIZE), bases[k])
        if not separable:
            img += rng.uniform(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER)
            img += rng.uniform(25, 40) * _pattern(k % 4, rng)
            img += rng.normal(0, 6, size=img.shape)
        images[i, 0] = np.clip(np.round(img), 0, 255).astype(np.uint8)
    perm = rng.permutation(count)
    n_val = max(1, int(round(count * val_fraction))) if count > 1 else 0
    return Dataset(images, labels.astype(np.int64), np.sort(perm[n_val:]), np.sort(perm[:n_val]), K)


def normalize(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (np.asarray(images, dtype=dtype) / dtype(255.0) - dtype(0.5)).astype(dtype)


@dataclass
class SurrogateNet:
    front: List[ConvLayer]
    split: ConvLayer
    bn: BnAffine
    back: ConvLayer
    head_w: np.ndarray        # (K, P_back)
    head_b: np.ndarray        # (K,)
    sigma: Activation = field(default_factory=Activation)

    @property
    def Q(self) -> int:
        return self.split.in_channels

    @property
    def P(self) -> int:
        return self.split.out_channels

    @property
    def K(self) -> int:
        return self.head_w.shape[0]

    def front_features(self, images: np.ndarray) -> np.ndarray:
        """Split-layer input ``X`` for uint8 images (N, 1, 32, 32) or one (1, 32, 32)."""
        x = normalize(images)
        single = x.ndim == 3
        x = to_nhwc(x[None] if single else x)
        for layer in self.front:
            x = self.sigma(conv_forward(x, layer.weight, layer.bias, 1)[0])
        x = to_nchw(x)
        return x[0] if single else x

    def split_output(self, x: np.ndarray) -> np.ndarray:
        """BN output ``Z`` of the split layer, the tensor that gets transmitted."""
        single = x.ndim == 3
        xb = x[None] if single else x
        z = conv_forward(to_nhwc(xb), self.split.weight, self.split.bias, 2)[0]
        z = to_nchw(z * self.bn.scale + self.bn.bias)
        return z[0] if single else z

    def cloud_logits(self, z: np.ndarray) -> np.ndarray:
        """Activation of the split layer, then the remaining layers."""
        single = z.ndim == 3
        zb = np.asarray(z, dtype=np.float32)
        zb = to_nhwc(zb[None] if single else zb)
        h = self.sigma(conv_forward(self.sigma(zb), self.back.weight, self.back.bias, 2)[0])
        logits = h.mean(axis=(1, 2)) @ self.head_w.T + self.head_b
        return logits[0] if single else logits

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self.cloud_logits(self.split_output(self.front_features(images)))

    def predict(self, images: np.ndarray, chunk: int = 128) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            return int(np.argmax(self.logits(images)))
        return np.concatenate([np.argmax(self.logits(images[s:s + chunk]), axis=1)
                               for s in range(0, len(images), chunk)])

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(images) == labels))

    def params(self) -> dict:
        p = {}
        for i, layer in enumerate(self.front):
            p[f"front{i}_w"], p[f"front{i}_b"] = layer.weight, layer.bias
        p["split_w"] = self.split.weight
        p["bn_scale"], p["bn_bias"] = self.bn.scale, self.bn.bias
        p["back_w"], p["back_b"] = self.back.weight, self.back.bias
        p["head_w"], p["head_b"] = self.head_w, self.head_b
        return p

    @classmethod
    def from_params(cls, p: dict, slope: float = 0.1) -> "SurrogateNet":
        n_front = sum(1 for k in p if k.startswith("front") and k.endswith("_w"))
        front = [ConvLayer(p[f"front{i}_w"], p[f"front{i}_b"], 1) for i in range(n_front)]
        return cls(front, ConvLayer(p["split_w"], None, 2), BnAffine(p["bn_scale"], p["bn_bias"]),
                   ConvLayer(p["back_w"], p["back_b"], 2), p["head_w"], p["head_b"],
                   Activation("leaky_relu", slope))


def init_surrogate(Q: int = 16, P: int = 32, K: int = 4, front_width: int = 8, seed: int = 0) -> SurrogateNet:
    rng = np.random.default_rng(seed)

    def conv(out_c, in_c, bias=True):
        bound = math.sqrt(6.0 / (in_c * 9))
        w = rng.uniform(-bound, bound, size=(out_c, in_c, 3, 3)).astype(np.float32)
        return w, (np.zeros(out_c, np.float32) if bias else None)

    front = [ConvLayer(*conv(front_width, 1), 1), ConvLayer(*conv(Q, front_width), 1)]
    split = ConvLayer(conv(P, Q, bias=False)[0], None, 2)
    bn = BnAffine(np.ones(P, np.float32), np.zeros(P, np.float32))
    back = ConvLayer(*conv(P, P), 2)
    bound = math.sqrt(1.0 / P)
    head_w = rng.uniform(-bound, bound, size=(K, P)).astype(np.float32)
    return SurrogateNet(front, split, bn, back, head_w, np.zeros(K, np.float32))


def _loss_and_grads(net: SurrogateNet, images: np.ndarray, labels: np.ndarray):
    sig = net.sigma
    acts = [to_nhwc(normalize(images))]
    pres, cols = [], []
    for layer in net.front:
        pre, c = conv_forward(acts[-1], layer.weight, layer.bias, 1)
        pres.append(pre)
        cols.append(c)
        acts.append(sig(pre))
    x = acts[-1]
    s_out, s_cols = conv_forward(x, net.split.weight, None, 2)
    a, b = net.bn.scale, net.bn.bias
    z = s_out * a + b
    y = sig(z)
    bk_pre, bk_cols = conv_forward(y, net.back.weight, net.back.bias, 2)
    h = sig(bk_pre)
    pooled = h.mean(axis=(1, 2))
    logits = pooled @ net.head_w.T + net.head_b
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.log(probs[np.arange(n), labels] + 1e-12).mean())

    g = {}
    dlog = probs.copy()
    dlog[np.arange(n), labels] -= 1
    dlog /= n
    g["head_w"] = dlog.T @ pooled
    g["head_b"] = dlog.sum(axis=0)
    dh = np.broadcast_to((dlog @ net.head_w)[:, None, None, :], h.shape) / (h.shape[1] * h.shape[2])
    dpre = sig.grad(bk_pre, dh)
    dy, g["back_w"], g["back_b"] = conv_backward(dpre, bk_cols, y.shape, net.back.weight, 2)
    dz = sig.grad(z, dy)
    g["bn_scale"] = (dz * s_out).sum(axis=(0, 1, 2))
    g["bn_bias"] = dz.sum(axis=(0, 1, 2))
    dx, g["split_w"], _ = conv_backward(dz * a, s_cols, x.shape, net.split.weight, 2)
    for i in range(len(net.front) - 1, -1, -1):
        dpre = sig.grad(pres[i], dx)
        dx, g[f"front{i}_w"], g[f"front{i}_b"] = conv_backward(
            dpre, cols[i], acts[i].shape, net.front[i].weight, 1, need_input_grad=i > 0)
    return loss, g


def train_surrogate(data: Dataset, seed: int = 0, Q: int = 16, P: int = 32, epochs: int = 12,
                    batch_size: int = 32, lr: float = 3e-3, min_accuracy: float = 0.9,
                    log: Optional[list] = None) -> SurrogateNet:
    """Train the stand-in network end to end; deterministic for a given seed.

    Raises :class:`TrainingError` if validation accuracy ends below
    ``min_accuracy``, which indicates a misconfigured task.
    """
    net = init_surrogate(Q, P, data.K, seed=seed)
    params = net.params()
    opt = Adam(params, lr)
    rng = np.random.default_rng(seed + 7)
    images, labels = data.train
    for epoch in range(epochs):
        perm = rng.permutation(len(images))
        for s in range(0, len(perm), batch_size):
            idx = np.sort(perm[s:s + batch_size])
            loss, grads = _loss_and_grads(net, images[idx], labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"surrogate training diverged in epoch {epoch}")
            opt.step(params, grads)
            net = SurrogateNet.from_params(params, net.sigma.slope)
        if log is not None:
            log.append((epoch, loss))
    if np.any(net.bn.scale == 0):
        raise TrainingError("split-layer BN scale collapsed to zero")
    val_images, val_labels = data.val
    acc = net.accuracy(val_images, val_labels)
    if acc < min_accuracy:
        raise TrainingError(f"surrogate validation accuracy {acc:.3f} is below {min_accuracy}")
    return net


def save_surrogate(net: SurrogateNet) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, slope=np.float64(net.sigma.slope), **net.params())
    return buf.getvalue()


def load_surrogate(data: bytes) -> SurrogateNet:
    try:
        with np.load(io.BytesIO(data)) as f:
            p = {k: f[k] for k in f.files}
    except (ValueError, OSError) as exc:
        raise FormatError(f"cannot read network file: {exc}") from exc
    slope = float(p.pop("slope"))
    return SurrogateNet.from_params(p, slope)
