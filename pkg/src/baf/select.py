"""Offline channel ranking by correlation with the split layer's input.

For every BN-output channel ``p`` and every input channel ``q`` we average
the absolute Pearson correlation between ``Z_p`` and the four stride-2
phases of ``X_q``. Channels are then ranked by their row sum.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError, InputError, ShapeError
from .tensor import downsample_phases

SELECTION_VERSION = 1


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def abs_corr(z, x) -> float:
    """Absolute Pearson correlation; 0 when either vector is constant."""
    z = np.asarray(z, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    if z.shape != x.shape:
        raise ShapeError(f"length mismatch: {z.size} vs {x.size}")
    if z.size < 2:
        raise ShapeError("correlation needs at least two samples")
    zc = z - z.mean()
    xc = x - x.mean()
    denom = np.linalg.norm(zc) * np.linalg.norm(xc)
    if denom == 0.0:
        return 0.0
    return float(min(1.0, abs(zc @ xc) / denom))


def rho_pq(z_p, x_q) -> float:
    """Mean absolute correlation of ``z_p`` with each stride-2 phase of ``x_q``."""
    z_p = np.asarray(z_p)
    x_q = np.asarray(x_q)
    if z_p.ndim != 2 or x_q.ndim != 2 or x_q.shape != (2 * z_p.shape[0], 2 * z_p.shape[1]):
        raise ShapeError(f"x_q must be twice the size of z_p, got {x_q.shape} vs {z_p.shape}")
    return sum(abs_corr(z_p, ph) for ph in downsample_phases(x_q)) / 4.0


def _normalized_rows(a: np.ndarray) -> np.ndarray:
    """Center and unit-normalize each row; constant rows become zero."""
    a = a - a.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, a / safe, 0.0)


def rho_matrix(z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """All ``rho_pq`` for one sample: ``z`` is (P, H, W), ``x`` is (Q, 2H, 2W)."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z.ndim != 3 or x.ndim != 3 or x.shape[1:] != (2 * z.shape[1], 2 * z.shape[2]):
        raise ShapeError(f"x must be (Q, 2H, 2W) for z of shape {z.shape}, got {x.shape}")
    zn = _normalized_rows(z.reshape(z.shape[0], -1))
    rho = np.zeros((z.shape[0], x.shape[0]))
    for ph in downsample_phases(x):
        xn = _normalized_rows(ph.reshape(x.shape[0], -1))
        rho += np.abs(zn @ xn.T)
    return np.clip(rho / 4.0, 0.0, 1.0)


@dataclass
class CorrelationMatrix:
    rho: np.ndarray
    sample_count: int

    @property
    def P(self) -> int:
        return self.rho.shape[0]

    @property
    def Q(self) -> int:
        return self.rho.shape[1]

    def scores(self) -> np.ndarray:
        return self.rho.sum(axis=1)


def accumulate_stats(split_io: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
                     images: Sequence[np.ndarray], workers: int = 1) -> CorrelationMatrix:
    """Average per-image correlation matrices.

    ``split_io(image)`` must return ``(x, z)``: the split layer's input and
    its BN output for one image. The reduction sums in dataset order, so
    the result does not depend on ``workers``.
    """
    images = list(images)
    if not images:
        raise InputError("channel statistics need at least one image")

    def one(img):
        x, z = split_io(img)
        return rho_matrix(z, x)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            mats = list(pool.map(one, images))
    else:
        mats = [one(img) for img in images]
    total = np.zeros_like(mats[0])
    for m in mats:
        total += m
    return CorrelationMatrix(total / len(mats), len(mats))


@dataclass(frozen=True)
class ChannelSelection:
    order: Tuple[int, ...]
    P: int

    @property
    def C(self) -> int:
        return len(self.order)

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if len(set(order)) != len(order) or any(not 0 <= i < self.P for i in order):
            raise ConfigError(f"selection indices must be distinct and < {self.P}")
        object.__setattr__(self, "order", order)

    def fingerprint(self) -> str:
        return ",".join(map(str, self.order))


def select_channels(stats, C: int) -> ChannelSelection:
    """Top-``C`` channels by total correlation, descending; ties by lower index.

    ``stats`` is a :class:`CorrelationMatrix` or a raw (P, Q) array.
    """
    rho = stats.rho if isinstance(stats, CorrelationMatrix) else np.asarray(stats, dtype=np.float64)
    P = rho.shape[0]
    if not is_power_of_two(C):
        raise ConfigError(f"C must be a power of two, got {C}")
    if C > P:
        raise ConfigError(f"C={C} exceeds the {P} available channels")
    scores = rho.sum(axis=1)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(P), -scores))[:C]
    return ChannelSelection(tuple(order.tolist()), P)


def format_selection(stats: CorrelationMatrix, sel: ChannelSelection) -> str:
    lines = [
        f"version = {SELECTION_VERSION}",
        f"P = {stats.P}",
        f"Q = {stats.Q}",
        f"C = {sel.C}",
        f"sample_count = {stats.sample_count}",
        f"order = {sel.fingerprint()}",
        "rho =",
    ]
    lines += [",".join(repr(float(v)) for v in row) for row in stats.rho]
    return "\n".join(lines) + "\n"


def parse_selection(text: str) -> Tuple[CorrelationMatrix, ChannelSelection]:
    fields = {}
    rows: List[List[float]] = []
    in_rho = False
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if in_rho:
            rows.append([float(v) for v in line.split(",")])
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad selection line: {raw!r}")
        key, value = key.strip(), value.strip()
        if key == "rho":
            in_rho = True
        else:
            fields[key] = value
    try:
        if int(fields["version"]) != SELECTION_VERSION:
            raise FormatError(f"unsupported selection version {fields['version']}")
        P, Q, C = int(fields["P"]), int(fields["Q"]), int(fields["C"])
        order = tuple(int(v) for v in fields["order"].split(","))
        count = int(fields["sample_count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"selection file missing or bad field: {exc}") from exc
    rho = np.array(rows, dtype=np.float64)
    if rho.shape != (P, Q) or len(order) != C:
        raise FormatError("selection file dimensions do not match its header")
    return CorrelationMatrix(rho, count), ChannelSelection(order, P)
