import numpy as np

from baf.quant import QuantizedPack, round_f16_directed


def random_pack(rng, max_log2_c=4, max_dim=12, n=None):
    """Arbitrary valid pack: random codes, random binary16 ranges (some collapsed)."""
    C = 1 << int(rng.integers(0, max_log2_c + 1))
    h, w = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
    n = int(rng.integers(2, 9)) if n is None else n
    codes = rng.integers(0, 1 << n, size=(C, h, w)).astype(np.uint8)
    lo = rng.normal(scale=10, size=C)
    hi = lo + np.where(rng.random(C) < 0.1, 0, rng.exponential(5, size=C))
    mM = [round_f16_directed(a, b) for a, b in zip(lo, hi)]
    order = tuple(int(i) for i in rng.permutation(max(C, 64))[:C])
    return QuantizedPack(n, codes, np.array([a for a, _ in mM]), np.array([b for _, b in mM]), order)


def smooth_pack(rng, C, n, size=16, sigma=2.0):
    """Pack built from low-pass filtered noise channels."""
    from scipy.ndimage import gaussian_filter

    from baf.quant import quantize_tensor
    z = gaussian_filter(rng.normal(size=(C, size, size)), sigma=(0, sigma, sigma), mode="wrap")
    return quantize_tensor(z.astype(np.float32), n, tuple(range(C)))
