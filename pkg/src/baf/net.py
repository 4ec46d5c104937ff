"""Back-and-forth restoration network.

The received channels are taken back through the inverse BN, upsampled by
two, and passed through four trainable 3x3 convolutions (PReLU after the
first three) to estimate every input channel of the split layer. The
frozen split convolution and BN then carry that estimate forward to all
output channels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CompatibilityError, CorruptionError, FormatError, InputError, ShapeError, TrainingError
from .quant import bin_interval, dequantize_pack, QuantizedPack
from .tensor import (Activation, BnAffine, ConvLayer, bn_inverse, check_finite, conv_backward, conv_forward,
                     to_nchw, to_nhwc)

PARAM_ORDER = ("w1", "b1", "a1", "w2", "b2", "a2", "w3", "b3", "a3", "w4", "b4")
PRELU_INIT = 0.25
BAFM_MAGIC = b"BAFM"
BAFM_VERSION = 1


def prelu(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=x.dtype)
    if alpha.shape != (x.shape[-3],):
        raise ShapeError(f"need one PReLU slope per channel ({x.shape[-3]}), got {alpha.shape}")
    return np.where(x >= 0, x, alpha.reshape(-1, 1, 1) * x)


def upsample_nn2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour x2: every value becomes a 2x2 block."""
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


@dataclass
class BafModel:
    params: Dict[str, np.ndarray]
    split: ConvLayer
    bn: BnAffine
    order: Tuple[int, ...]
    n_bits: int
    sigma: Activation = field(default_factory=Activation)
    history: List[Tuple[int, float]] = field(default_factory=list, repr=False)

    @property
    def C(self) -> int:
        return self.params["w1"].shape[1]

    @property
    def hidden(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def Q(self) -> int:
        return self.split.in_channels

    @property
    def P(self) -> int:
        return self.split.out_channels

    @property
    def dtype(self):
        return self.params["w1"].dtype

    def copy(self) -> "BafModel":
        return BafModel({k: v.copy() for k, v in self.params.items()}, self.split, self.bn,
                        self.order, self.n_bits, self.sigma, list(self.history))

    def astype(self, dtype) -> "BafModel":
        return BafModel({k: v.astype(dtype) for k, v in self.params.items()},
                        self.split.astype(dtype), self.bn.astype(dtype),
                        self.order, self.n_bits, self.sigma, list(self.history))


def init_baf(split: ConvLayer, bn: BnAffine, order: Sequence[int], n_bits: int,
             hidden: Optional[int] = None, seed: int = 0, dtype=np.float32,
             sigma: Optional[Activation] = None) -> BafModel:
    """Seeded uniform(+-sqrt(1/fan_in)) initialisation; PReLU slopes start at 0.25."""
    if split.stride != 2:
        raise ShapeError("the split layer must have stride 2")
    if bn.channels != split.out_channels:
        raise ShapeError("BN and split conv disagree on output channels")
    C, Q = len(order), split.in_channels
    hidden = hidden or Q
    rng = np.random.default_rng(seed)
    params = {}
    shapes = [(hidden, C), (hidden, hidden), (hidden, hidden), (Q, hidden)]
    for i, (out_c, in_c) in enumerate(shapes, start=1):
        bound = math.sqrt(1.0 / (in_c * 9))
        params[f"w{i}"] = rng.uniform(-bound, bound, size=(out_c, in_c, 3, 3)).astype(dtype)
        params[f"b{i}"] = rng.uniform(-bound, bound, size=out_c).astype(dtype)
        if i < 4:
            params[f"a{i}"] = np.full(out_c, PRELU_INIT, dtype=dtype)
    return BafModel(params, split.astype(dtype), bn.astype(dtype), tuple(order), n_bits,
                    sigma or Activation())


def _as_batch(x: np.ndarray, dtype):
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")


def _prelu_last(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, alpha * x)


def _forward(model: BafModel, zc: np.ndarray):
    # activations are channels-last (N, H, W, C) inside the network
    p = model.params
    cache = {}
    u = to_nhwc(bn_inverse(zc, model.bn.subset(model.order)))
    h = np.repeat(np.repeat(u, 2, axis=1), 2, axis=2)
    for i in (1, 2, 3):
        cache[f"in{i}"] = h
        pre, cache[f"cols{i}"] = conv_forward(h, p[f"w{i}"], p[f"b{i}"], 1)
        cache[f"pre{i}"] = pre
        h = _prelu_last(pre, p[f"a{i}"])
    cache["in4"] = h
    x_tilde, cache["cols4"] = conv_forward(h, p["w4"], p["b4"], 1)
    split_out, cache["cols5"] = conv_forward(x_tilde, model.split.weight, model.split.bias, model.split.stride)
    z_tilde = split_out * model.bn.scale + model.bn.bias
    cache["x_tilde"] = x_tilde
    return to_nchw(x_tilde), to_nchw(check_finite(z_tilde, "BaF output")), cache


def baf_forward(zc_hat: np.ndarray, model: BafModel) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(x_tilde, z_tilde)`` for one (C, h, w) input or a batch."""
    zc, single = _as_batch(zc_hat, model.dtype)
    if zc.shape[1] != model.C:
        raise ShapeError(f"model expects {model.C} channels, got {zc.shape[1]}")
    x_tilde, z_tilde, _ = _forward(model, zc)
    return (x_tilde[0], z_tilde[0]) if single else (x_tilde, z_tilde)


def charbonnier_loss(y_target: np.ndarray, z_tilde: np.ndarray, sigma: Activation = Activation(),
                     eps: float = 1e-3) -> float:
    """Sum over all elements of ``sqrt((y - sigma(z))**2 + eps**2)``."""
    y = np.asarray(y_target)
    z = np.asarray(z_tilde)
    if y.shape != z.shape:
        raise ShapeError(f"target {y.shape} and prediction {z.shape} differ")
    r = y - sigma(z)
    return float(np.sqrt(r * r + eps * eps).sum())


def charbonnier_grad(y_target: np.ndarray, z_tilde: np.ndarray, sigma: Activation = Activation(),
                     eps: float = 1e-3) -> np.ndarray:
    """Gradient of :func:`charbonnier_loss` with respect to ``z_tilde``."""
    r = y_target - sigma(z_tilde)
    return sigma.grad(z_tilde, -r / np.sqrt(r * r + eps * eps))


def backward(model: BafModel, zc_hat: np.ndarray, y_target: np.ndarray, eps: float = 1e-3):
    """Loss and exact gradients for every trainable parameter.

    Consolidation is not part of the training graph. The frozen split conv
    and BN only pass gradients through; they never receive updates.
    """
    zc, _ = _as_batch(zc_hat, model.dtype)
    y, _ = _as_batch(y_target, model.dtype)
    p = model.params
    _, z_tilde, cache = _forward(model, zc)
    if y.shape != z_tilde.shape:
        raise ShapeError(f"target {y.shape} does not match prediction {z_tilde.shape}")
    loss = charbonnier_loss(y, z_tilde, model.sigma, eps)
    g = to_nhwc(charbonnier_grad(y, z_tilde, model.sigma, eps)) * model.bn.scale
    g, _, _ = conv_backward(g, cache["cols5"], cache["x_tilde"].shape, model.split.weight, model.split.stride)
    grads = {}
    g, grads["w4"], grads["b4"] = conv_backward(g, cache["cols4"], cache["in4"].shape, p["w4"], 1)
    for i in (3, 2, 1):
        pre = cache[f"pre{i}"]
        neg = pre < 0
        grads[f"a{i}"] = np.where(neg, g * pre, 0).sum(axis=(0, 1, 2))
        g = np.where(neg, g * p[f"a{i}"], g)
        g, grads[f"w{i}"], grads[f"b{i}"] = conv_backward(
            g, cache[f"cols{i}"], cache[f"in{i}"].shape, p[f"w{i}"], 1, need_input_grad=i > 1)
    return loss, grads


def consolidate(z_tilde_p, codes_p, m, M, n: int) -> np.ndarray:
    """Keep predictions that fall in the received code's bin, clamp the rest.

    The bin of code ``k`` is the closed interval of half a step either
    side of its reconstruction level; a collapsed range yields ``m``.
    """
    z = np.asarray(z_tilde_p)
    codes = np.asarray(codes_p)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << n)):
        raise CorruptionError(f"code out of range for {n}-bit quantizer")
    if float(m) == float(M):
        return np.full(z.shape, float(m), dtype=z.dtype)
    lo, hi = bin_interval(codes, m, M, n)
    out = np.clip(z.astype(np.float64), lo, hi).astype(z.dtype)
    # a bin edge may round outward when cast to a narrower float
    out = np.where(out < lo, np.nextafter(out, np.inf, dtype=out.dtype), out)
    out = np.where(out > hi, np.nextafter(out, -np.inf, dtype=out.dtype), out)
    return out.astype(z.dtype)


def consolidate_tensor(z_tilde: np.ndarray, pack: QuantizedPack) -> np.ndarray:
    """Apply :func:`consolidate` to the transmitted channels of a (P, h, w) estimate."""
    out = np.array(z_tilde, copy=True)
    for i, ch in enumerate(pack.order):
        out[ch] = consolidate(out[ch], pack.codes[i], pack.m[i], pack.M[i], pack.n_bits)
    return out


def restore(pack: QuantizedPack, model: BafModel) -> np.ndarray:
    """Full (P, h, w) BN-output estimate from a decoded pack."""
    if pack.order != model.order or pack.n_bits != model.n_bits:
        raise CompatibilityError(
            f"stream (C={pack.C}, n={pack.n_bits}) does not match model (C={model.C}, n={model.n_bits}) "
            "or uses a different channel selection")
    zc_hat = dequantize_pack(pack, model.dtype)
    _, z_tilde = baf_forward(zc_hat, model)
    return consolidate_tensor(z_tilde, pack)


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= update.astype(params[k].dtype)


@dataclass
class TrainConfig:
    epsilon: float = 1e-3
    lr: float = 1e-3
    batch_size: int = 8
    iterations: int = 1500
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: Optional[int] = None
    eval_every: int = 100
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise InputError("epsilon must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise InputError("batch_size must be >= 1 and iterations >= 0")


def _mean_loss(model: BafModel, zc: np.ndarray, y: np.ndarray, eps: float, chunk: int = 32) -> float:
    total = 0.0
    for s in range(0, len(zc), chunk):
        _, z_tilde = baf_forward(zc[s:s + chunk], model)
        total += charbonnier_loss(y[s:s + chunk], z_tilde, model.sigma, eps)
    return total / len(zc)


def train_baf(zc_hat: np.ndarray, y_target: np.ndarray, split: ConvLayer, bn: BnAffine,
              order: Sequence[int], n_bits: int, config: TrainConfig = TrainConfig(),
              holdout: Optional[Tuple[np.ndarray, np.ndarray]] = None,
              sigma: Optional[Activation] = None, dtype=np.float32) -> BafModel:
    """Fit a BaF model with Adam on ``(zc_hat, y_target)`` pairs.

    ``y_target`` is the post-activation split output. Unless ``holdout`` is
    given, the last ``holdout_fraction`` of the pairs are held out (when
    there are at least ten). The parameters with the lowest held-out loss
    seen at any evaluation point are returned; ``history`` records the
    per-iteration training loss.
    """
    zc_hat = np.asarray(zc_hat, dtype=dtype)
    y_target = np.asarray(y_target, dtype=dtype)
    if zc_hat.ndim == 3:
        zc_hat, y_target = zc_hat[None], y_target[None]
    if len(zc_hat) == 0 or len(zc_hat) != len(y_target):
        raise InputError("training needs a non-empty set of matching (input, target) pairs")
    check_finite(zc_hat, "training inputs")
    check_finite(y_target, "training targets")
    if holdout is None:
        n_hold = int(len(zc_hat) * config.holdout_fraction) if len(zc_hat) >= 10 else 0
        if n_hold:
            holdout = (zc_hat[-n_hold:], y_target[-n_hold:])
            zc_hat, y_target = zc_hat[:-n_hold], y_target[:-n_hold]
        else:
            holdout = (zc_hat, y_target)
    hold_zc = np.asarray(holdout[0], dtype=dtype)
    hold_y = np.asarray(holdout[1], dtype=dtype)

    model = init_baf(split, bn, order, n_bits, config.hidden, config.seed, dtype, sigma)
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed + 1)
    best = model.copy()
    best_loss = _mean_loss(model, hold_zc, hold_y, config.epsilon)
    perm, cursor = rng.permutation(len(zc_hat)), 0
    last_finite = best_loss
    for it in range(1, config.iterations + 1):
        bs = min(config.batch_size, len(zc_hat))
        if cursor + bs > len(perm):
            perm, cursor = rng.permutation(len(zc_hat)), 0
        idx = np.sort(perm[cursor:cursor + bs])
        cursor += bs
        try:
            loss, grads = backward(model, zc_hat[idx], y_target[idx], config.epsilon)
        except InputError as exc:
            raise TrainingError(f"network output diverged at iteration {it} (last finite loss "
                                f"{last_finite:.6g}); lower the learning rate (currently {config.lr})") from exc
        loss /= bs
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"loss diverged at iteration {it} (last finite loss {last_finite:.6g}); "
                                f"lower the learning rate (currently {config.lr})")
        last_finite = loss
        model.history.append((it, loss))
        opt.step(model.params, grads)
        if it % config.eval_every == 0 or it == config.iterations:
            held = _mean_loss(model, hold_zc, hold_y, config.epsilon)
            if not math.isfinite(held):
                raise TrainingError(f"held-out loss became non-finite at iteration {it}")
            if held < best_loss:
                best_loss = held
                best = model.copy()
    best.history = model.history
    return best


def save_baf(model: BafModel) -> bytes:
    head = BAFM_MAGIC + struct.pack("<B5I", BAFM_VERSION, model.C, model.Q, model.P, model.hidden, model.n_bits)
    head += struct.pack(f"<{model.C}I", *model.order)
    body = b"".join(model.params[k].astype("<f4").tobytes() for k in PARAM_ORDER)
    return head + body


def load_baf(data: bytes, split: ConvLayer, bn: BnAffine, sigma: Optional[Activation] = None,
             dtype=np.float32) -> BafModel:
    """Read a BAFM file; the frozen split layer comes from the host network."""
    if len(data) < 25 or data[:4] != BAFM_MAGIC:
        raise FormatError("not a BAFM model file")
    version, C, Q, P, hidden, n_bits = struct.unpack_from("<B5I", data, 4)
    if version != BAFM_VERSION:
        raise FormatError(f"unsupported BAFM version {version}")
    if (Q, P) != (split.in_channels, split.out_channels):
        raise CompatibilityError(f"model was trained for Q={Q}, P={P}; network split layer is "
                                 f"Q={split.in_channels}, P={split.out_channels}")
    off = 25
    order = struct.unpack_from(f"<{C}I", data, off)
    off += 4 * C
    shapes = {
        "w1": (hidden, C, 3, 3), "b1": (hidden,), "a1": (hidden,),
        "w2": (hidden, hidden, 3, 3), "b2": (hidden,), "a2": (hidden,),
        "w3": (hidden, hidden, 3, 3), "b3": (hidden,), "a3": (hidden,),
        "w4": (Q, hidden, 3, 3), "b4": (Q,),
    }
    params = {}
    for k in PARAM_ORDER:
        size = int(np.prod(shapes[k]))
        chunk = data[off:off + 4 * size]
        if len(chunk) != 4 * size:
            raise FormatError("BAFM file is truncated")
        params[k] = np.frombuffer(chunk, dtype="<f4").astype(dtype).reshape(shapes[k])
        off += 4 * size
    if off != len(data):
        raise FormatError("BAFM file has trailing bytes")
    return BafModel(params, split.astype(dtype), bn.astype(dtype), tuple(order), n_bits,
                    sigma or Activation())
