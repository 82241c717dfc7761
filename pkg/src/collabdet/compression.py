"""Learned linear channel bottleneck for transmitted feature maps."""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .params import ParamSet, uniform_init

RATIOS = (1, 2, 4, 8, 16, 32, 64)


def _check(channels: int, ratio: int) -> None:
    if ratio not in RATIOS:
        raise ValueError(f"compression ratio must be one of {RATIOS}, got {ratio}")
    if channels % ratio:
        raise ValueError(f"{channels} channels not divisible by ratio {ratio}")


def init_compression(ps: ParamSet, rng, channels: int, ratio: int) -> None:
    _check(channels, ratio)
    if ratio == 1:
        return
    k = channels // ratio
    ps.add(f"comp{ratio}.down", uniform_init(rng, (k, channels), channels))
    ps.add(f"comp{ratio}.up", uniform_init(rng, (channels, k), k))


def compress(features, ps: ParamSet, ratio: int) -> nc.Tensor:
    """Project (C, H, W) or (B, C, H, W) maps to C/ratio channels and back.

    Ratio 1 returns the input object unchanged.
    """
    f = nc.as_tensor(features)
    c = f.shape[-3]
    _check(c, ratio)
    if ratio == 1:
        return f
    down, up = ps[f"comp{ratio}.down"], ps[f"comp{ratio}.up"]
    lead = f.shape[:-3]
    h, w = f.shape[-2:]
    flat = f.reshape(lead + (c, h * w))
    code = nc.matmul(down, flat)
    return nc.matmul(up, code).reshape(f.shape)


apply_compression = compress


def fit_pca_adapter(samples: np.ndarray, ratio: int) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares optimal (down, up) pair for ``samples`` shaped (n, C)."""
    c = samples.shape[1]
    _check(c, ratio)
    k = c // ratio
    cov = samples.T @ samples / max(len(samples), 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:k]
    basis = evecs[:, order]
    # fix the sign of each component so the fit is reproducible
    signs = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(k)])
    basis = basis * np.where(signs == 0, 1.0, signs)
    return basis.T.copy(), basis.copy()
