"""Edge-to-cloud pipeline over the surrogate network, and rate-accuracy sweeps."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import bitstream
from .errors import CompatibilityError, ConfigError
from .net import BafModel, TrainConfig, restore, train_baf
from .quant import QuantizedPack, dequantize_pack, quantize_tensor
from .select import ChannelSelection, CorrelationMatrix, accumulate_stats, select_channels
from .surrogate import SurrogateNet

CSV_HEADER = ("C", "n", "codec", "bits_mean", "accuracy", "restore_err")
DEFAULT_C = (4, 8, 16, 32)
DEFAULT_N = (2, 4, 6, 8)


def split_io(net: SurrogateNet, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """``(X, Z)`` at the split layer for one image."""
    x = net.front_features(image)
    return x, net.split_output(x)


def compute_stats(net: SurrogateNet, images: np.ndarray, workers: int = 1) -> CorrelationMatrix:
    return accumulate_stats(lambda img: split_io(net, img), list(images), workers)


def pipeline_pack(image: np.ndarray, net: SurrogateNet, selection: ChannelSelection, n: int) -> QuantizedPack:
    """Edge side up to quantization: front layers, split-layer BN, channel pick, quantize."""
    if selection.P != net.P:
        raise CompatibilityError(f"selection is for P={selection.P}, network has P={net.P}")
    z = net.split_output(net.front_features(image))
    return quantize_tensor(z[list(selection.order)], n, selection.order)


def pipeline_encode(image: np.ndarray, net: SurrogateNet, selection: ChannelSelection, n: int,
                    codec: str = "med_range") -> bitstream.Bitstream:
    """Full edge side: :func:`pipeline_pack`, then tile and code."""
    return bitstream.encode(pipeline_pack(image, net, selection, n), codec)


def zero_fill(pack: QuantizedPack, net: SurrogateNet) -> np.ndarray:
    """Baseline restorer: dequantized channels where sent, BN bias elsewhere."""
    zc_hat = dequantize_pack(pack)
    z = np.broadcast_to(net.bn.bias.astype(np.float32).reshape(-1, 1, 1),
                        (net.P, pack.channel_h, pack.channel_w)).copy()
    z[list(pack.order)] = zc_hat
    return z


def restore_full(pack: QuantizedPack, net: SurrogateNet, baf: Optional[BafModel]) -> np.ndarray:
    if baf is None:
        return zero_fill(pack, net)
    if baf.P != net.P or baf.Q != net.Q:
        raise CompatibilityError("restoration model does not belong to this network")
    return restore(pack, baf)


def pipeline_decode(stream, net: SurrogateNet, baf: Optional[BafModel] = None,
                    companion: Optional[bytes] = None) -> Tuple[int, np.ndarray]:
    """Cloud side: decode, dequantize, restore, activation, remaining layers.

    Returns ``(predicted_class, restored_Z)``. Without a BaF model the
    untransmitted channels are zero-filled, which is exact when every
    channel was sent.
    """
    pack = bitstream.decode(stream, companion)
    z = restore_full(pack, net, baf)
    return int(np.argmax(net.cloud_logits(z))), z


@dataclass
class EvalResult:
    bits: List[int]
    predictions: np.ndarray
    restore_err: float

    @property
    def bits_mean(self) -> float:
        return float(np.mean(self.bits))

    def accuracy(self, labels: np.ndarray) -> float:
        return float(np.mean(self.predictions == labels))


def evaluate(net: SurrogateNet, images: np.ndarray, selection: ChannelSelection, n: int,
             codec: str = "med_range", baf: Optional[BafModel] = None, workers: int = 1) -> EvalResult:
    """Run the full pipeline on every image; results are reduced in image order."""
    if baf is not None and (baf.order != selection.order or baf.n_bits != n):
        raise CompatibilityError(f"model for C={baf.C}, n={baf.n_bits} used with C={selection.C}, n={n}")
    z_true = net.split_output(net.front_features(images))

    def one(i):
        stream = pipeline_encode(images[i], net, selection, n, codec)
        pred, z = pipeline_decode(stream, net, baf)
        return stream.total_bits, pred, float(np.abs(z.astype(np.float64) - z_true[i]).mean())

    idx = range(len(images))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, idx))
    else:
        rows = [one(i) for i in idx]
    return EvalResult([r[0] for r in rows], np.array([r[1] for r in rows]),
                      float(np.mean([r[2] for r in rows])))


def baf_training_pairs(net: SurrogateNet, images: np.ndarray, selection: ChannelSelection,
                       n: int) -> Tuple[np.ndarray, np.ndarray]:
    """``(zc_hat, y_target)`` for BaF training: dequantized selected channels and sigma(Z)."""
    z = net.split_output(net.front_features(images))
    zc = z[:, list(selection.order)]
    zc_hat = np.stack([dequantize_pack(quantize_tensor(s, n, selection.order)) for s in zc])
    return zc_hat, net.sigma(z)


def train_for(net: SurrogateNet, images: np.ndarray, selection: ChannelSelection, n: int,
              config: TrainConfig = TrainConfig()) -> BafModel:
    zc_hat, y = baf_training_pairs(net, images, selection, n)
    return train_baf(zc_hat, y, net.split, net.bn, selection.order, n, config, sigma=net.sigma)


def train_sweep_models(net: SurrogateNet, images: np.ndarray, stats: CorrelationMatrix,
                       C_list: Sequence[int] = DEFAULT_C, n_list: Sequence[int] = DEFAULT_N,
                       config: TrainConfig = TrainConfig()) -> Dict[Tuple[int, int], BafModel]:
    """One BaF model per (C, n), each trained separately."""
    models = {}
    for C in C_list:
        sel = select_channels(stats, C)
        for n in n_list:
            models[(C, n)] = train_for(net, images, sel, n, config)
    return models


@dataclass
class SweepResult:
    rows: List[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r["C"], r["n"], r["codec"], f"{r['bits_mean']:.6f}",
                        f"{r['accuracy']:.6f}", f"{r['restore_err']:.9g}"])
        return buf.getvalue()

    def lookup(self, C: int, n: int, codec: str) -> dict:
        for r in self.rows:
            if (r["C"], r["n"], r["codec"]) == (C, n, codec):
                return r
        raise KeyError((C, n, codec))


def sweep(net: SurrogateNet, baf_models: Dict[Tuple[int, int], BafModel], stats: CorrelationMatrix,
          images: np.ndarray, labels: np.ndarray, C_list: Sequence[int] = DEFAULT_C,
          n_list: Sequence[int] = DEFAULT_N, codecs: Sequence[str] = ("med_range",),
          workers: int = 1) -> SweepResult:
    """Evaluate every (C, n, codec) configuration on a labelled image set."""
    result = SweepResult()
    for C in C_list:
        sel = select_channels(stats, C)
        for n in n_list:
            if (C, n) not in baf_models:
                raise ConfigError(f"no BaF model for C={C}, n={n}")
            for codec in codecs:
                ev = evaluate(net, images, sel, n, codec, baf_models[(C, n)], workers)
                result.rows.append({"C": C, "n": n, "codec": codec, "bits_mean": ev.bits_mean,
                                    "accuracy": ev.accuracy(labels), "restore_err": ev.restore_err})
    return result
