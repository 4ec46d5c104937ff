"""Command-line front-end.

Exit codes: 0 success, 2 configuration error, 3 data or corruption error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import bitstream
from .config import load_config
from .errors import BafError, ConfigError, InputError
from .net import TrainConfig, load_baf, save_baf, train_baf
from .pipeline import (DEFAULT_C, DEFAULT_N, baf_training_pairs, compute_stats, evaluate, pipeline_decode,
                       pipeline_pack, sweep)
from .select import format_selection, parse_selection, select_channels
from .surrogate import gen_synthetic_dataset, load_surrogate, save_surrogate, train_surrogate
from .tensor import dtype_for, read_ften, write_ften

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "precision": 32,
    "count": 1024,
    "classes": 4,
    "epochs": 12,
    "stats_images": 64,
    "C": 8,
    "n": 8,
    "codec": "med_range",
    "iterations": 1500,
    "lr": 1e-3,
    "batch_size": 8,
    "epsilon": 1e-3,
    "hidden": None,
    "eval_images": None,
    "C_list": list(DEFAULT_C),
    "n_list": list(DEFAULT_N),
    "codecs": ["med_range"],
    "workers": 1,
}


class Settings:
    """Command-line value, then config file value, then built-in default."""

    def __init__(self, args: argparse.Namespace, config: Dict[str, Any]):
        self.args = args
        self.config = config

    def __getattr__(self, name: str):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        if name in self.config:
            return self.config[name]
        return DEFAULTS.get(name)


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _as_list(value) -> list:
    return value if isinstance(value, list) else [value]


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _dataset(s: Settings, K: int):
    return gen_synthetic_dataset(s.seed, int(s.count), K)


def _load_images_dir(path: Path) -> np.ndarray:
    images = []
    for f in sorted(path.iterdir()):
        if f.suffix.lower() == ".ften":
            images.append(read_ften(f.read_bytes()))
        elif f.suffix.lower() == ".pgm":
            images.append(bitstream.read_pgm(f.read_bytes())[None].astype(np.float32))
    if not images:
        raise InputError(f"no .ften or .pgm images in {path}")
    return np.stack(images)


def cmd_train_surrogate(s: Settings) -> int:
    data = _dataset(s, int(s.classes))
    net = train_surrogate(data, s.seed, epochs=int(s.epochs))
    Path(s.out).write_bytes(save_surrogate(net))
    print(f"validation accuracy {net.accuracy(*data.val):.4f}")
    return 0


def cmd_stats(s: Settings) -> int:
    net = load_surrogate(_read(s.net))
    if s.data_dir:
        images = _load_images_dir(Path(s.data_dir))
    else:
        images = _dataset(s, net.K).train[0][:int(s.stats_images)]
    stats = compute_stats(net, images, int(s.workers))
    sel = select_channels(stats, int(s.C))
    Path(s.out).write_text(format_selection(stats, sel))
    print(f"selected {sel.C} of {stats.P} channels: {sel.fingerprint()}")
    return 0


def _train_config(s: Settings) -> TrainConfig:
    return TrainConfig(epsilon=float(s.epsilon), lr=float(s.lr), batch_size=int(s.batch_size),
                       iterations=int(s.iterations), seed=s.seed,
                       hidden=None if s.hidden is None else int(s.hidden))


def cmd_train_baf(s: Settings) -> int:
    net = load_surrogate(_read(s.net))
    _, sel = parse_selection(_read(s.selection).decode())
    images = _dataset(s, net.K).train[0]
    zc_hat, y = baf_training_pairs(net, images, sel, int(s.n))
    model = train_baf(zc_hat, y, net.split, net.bn, sel.order, int(s.n), _train_config(s),
                      sigma=net.sigma, dtype=dtype_for(s.precision))
    Path(s.out).write_bytes(save_baf(model))
    print(f"final training loss {model.history[-1][1]:.6g}" if model.history else "no iterations run")
    return 0


def _image(s: Settings, K: int) -> np.ndarray:
    if s.image:
        return read_ften(_read(s.image))
    return _dataset(s, K).images[int(s.index or 0)]


def cmd_encode(s: Settings) -> int:
    net = load_surrogate(_read(s.net))
    _, sel = parse_selection(_read(s.selection).decode())
    pack = pipeline_pack(_image(s, net.K), net, sel, int(s.n))
    stream = bitstream.encode(pack, s.codec)
    out = Path(s.out)
    out.write_bytes(stream.data)
    if s.codec == "external":
        out.with_suffix(".pgm").write_bytes(bitstream.export_tile_pgm(pack))
        out.with_suffix(".hdr").write_text(bitstream.pgm_sidecar(pack))
    for key, value in stream.report().items():
        print(f"{key} {value}")
    return 0


def cmd_decode(s: Settings) -> int:
    net = load_surrogate(_read(s.net))
    baf = None
    if s.baf:
        baf = load_baf(_read(s.baf), net.split, net.bn, net.sigma, dtype_for(s.precision))
    companion = _read(s.companion) if s.companion else None
    pred, z = pipeline_decode(_read(s.stream), net, baf, companion)
    if s.out_tensor:
        Path(s.out_tensor).write_bytes(write_ften(z))
    print(f"class {pred}")
    return 0


def cmd_eval(s: Settings) -> int:
    net = load_surrogate(_read(s.net))
    _, sel = parse_selection(_read(s.selection).decode())
    baf = load_baf(_read(s.baf), net.split, net.bn, net.sigma, dtype_for(s.precision)) if s.baf else None
    images, labels = _dataset(s, net.K).val
    if s.eval_images:
        images, labels = images[:int(s.eval_images)], labels[:int(s.eval_images)]
    ev = evaluate(net, images, sel, int(s.n), s.codec, baf, int(s.workers))
    print(f"baseline_accuracy {net.accuracy(images, labels):.6f}")
    print(f"accuracy {ev.accuracy(labels):.6f}")
    print(f"bits_mean {ev.bits_mean:.3f}")
    print(f"restore_err {ev.restore_err:.6g}")
    return 0


def cmd_sweep(s: Settings) -> int:
    net = load_surrogate(_read(s.net))
    data = _dataset(s, net.K)
    train_images = data.train[0]
    stats = compute_stats(net, train_images[:int(s.stats_images)], int(s.workers))
    C_list, n_list = _as_list(s.C_list), _as_list(s.n_list)
    models_dir = Path(s.models_dir) if s.models_dir else None
    dtype = dtype_for(s.precision)
    models = {}
    for C in C_list:
        sel = select_channels(stats, int(C))
        for n in n_list:
            path = models_dir / f"baf_C{C}_n{n}.bafm" if models_dir else None
            if path is not None and path.exists():
                models[(C, n)] = load_baf(path.read_bytes(), net.split, net.bn, net.sigma, dtype)
                continue
            zc_hat, y = baf_training_pairs(net, train_images, sel, int(n))
            models[(C, n)] = train_baf(zc_hat, y, net.split, net.bn, sel.order, int(n), _train_config(s),
                                       sigma=net.sigma, dtype=dtype)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(save_baf(models[(C, n)]))
    images, labels = data.val
    if s.eval_images:
        images, labels = images[:int(s.eval_images)], labels[:int(s.eval_images)]
    result = sweep(net, models, stats, images, labels, [int(c) for c in C_list], [int(n) for n in n_list],
                   _as_list(s.codecs), int(s.workers))
    text = result.to_csv()
    if s.out:
        Path(s.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="baf", description="Split-inference feature tensor compression")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--config", help="key = value settings file")
    parser.add_argument("--precision", type=int, choices=(32, 64))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-surrogate", help="train the stand-in host network")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_surrogate)

    p = sub.add_parser("stats", help="channel correlation statistics and selection file")
    p.add_argument("--net", required=True)
    p.add_argument("--C", type=int)
    p.add_argument("--stats-images", type=int)
    p.add_argument("--data-dir", help="directory of .ften/.pgm images instead of synthetic data")
    p.add_argument("--count", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-baf", help="train a restoration model for one (C, n)")
    p.add_argument("--net", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_baf)

    p = sub.add_parser("encode", help="edge side: image to BAFC stream")
    p.add_argument("--net", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--codec", choices=sorted(bitstream.CODECS))
    p.add_argument("--image", help="FTEN file holding a (1, 32, 32) image")
    p.add_argument("--index", type=int, help="index into the synthetic dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="cloud side: BAFC stream to class prediction")
    p.add_argument("--net", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--baf", help="BAFM model; omit to zero-fill untransmitted channels")
    p.add_argument("--companion", help="graymap for streams using the external codec")
    p.add_argument("--out-tensor", help="write the restored BN output as FTEN")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="pipeline accuracy, rate and restoration error")
    p.add_argument("--net", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--baf")
    p.add_argument("--n", type=int)
    p.add_argument("--codec", choices=sorted(bitstream.CODECS))
    p.add_argument("--count", type=int)
    p.add_argument("--eval-images", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="rate-accuracy sweep over (C, n, codec) to CSV")
    p.add_argument("--net", required=True)
    p.add_argument("--C-list", type=_int_list)
    p.add_argument("--n-list", type=_int_list)
    p.add_argument("--codecs", type=_str_list)
    p.add_argument("--models-dir", help="load/save BAFM models here as baf_C{C}_n{n}.bafm")
    p.add_argument("--iterations", type=int)
    p.add_argument("--stats-images", type=int)
    p.add_argument("--eval-images", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config) if args.config else {}
        return args.func(Settings(args, config))
    except BafError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
