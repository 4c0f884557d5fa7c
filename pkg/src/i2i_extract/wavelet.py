"""Orthonormal 2-D Haar transform and the high-frequency wavelet penalty.

Transforms act on the trailing two axes, so ``[C,H,W]`` images and
``[B,C,H,W]`` batches are both accepted.  Every function is differentiable
through :mod:`i2i_extract.autodiff`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError

BANDS = ("ll", "lh", "hl", "hh")


@dataclass(frozen=True)
class WaveletConfig:
    p: int = 2
    family: str = "haar-orthonormal"

    def __post_init__(self):
        if self.p < 1:
            raise ConfigurationError(f"wavelet level p must be >= 1, got {self.p}")
        if self.family != "haar-orthonormal":
            raise ConfigurationError(f"unsupported wavelet family {self.family!r}")

    def check(self, shape: tuple[int, ...]) -> None:
        m = 2 ** self.p
        if len(shape) < 2:
            raise DimensionError(f"image needs at least 2 axes, got {shape}", axis="rank")
        h, w = shape[-2:]
        if h % m:
            raise DimensionError(f"height {h} not divisible by 2^p={m}", axis="H")
        if w % m:
            raise DimensionError(f"width {w} not divisible by 2^p={m}", axis="W")


@dataclass
class WaveletPyramid:
    """Detail bands per level (level 1 first) plus the last low band."""

    levels: list[dict[str, Tensor]]
    ll: Tensor

    def high_bands(self) -> list[Tensor]:
        return [lvl[b] for lvl in self.levels for b in ("lh", "hl", "hh")]

    def energy(self) -> float:
        total = float(np.sum(self.ll.data ** 2))
        for band in self.high_bands():
            total += float(np.sum(band.data ** 2))
        return total


def _analysis(x: np.ndarray) -> np.ndarray:
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return 0.5 * np.stack([a + b + c + d, a + b - c - d, a - b + c - d, a - b - c + d])


def _synthesis(bands: np.ndarray) -> np.ndarray:
    ll, lh, hl, hh = bands
    out = np.empty(ll.shape[:-2] + (2 * ll.shape[-2], 2 * ll.shape[-1]), dtype=ad.DTYPE)
    out[..., 0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
    out[..., 0::2, 1::2] = 0.5 * (ll + lh - hl - hh)
    out[..., 1::2, 0::2] = 0.5 * (ll - lh + hl - hh)
    out[..., 1::2, 1::2] = 0.5 * (ll - lh - hl + hh)
    return out


def _stacked_dwt(x: Tensor) -> Tensor:
    # Orthonormal: the adjoint of analysis is synthesis.
    return ad.custom_op(_analysis(x.data), (x,), lambda g: (_synthesis(g),), "haar_dwt2")


def _stacked_idwt(s: Tensor) -> Tensor:
    return ad.custom_op(_synthesis(s.data), (s,), lambda g: (_analysis(g),), "haar_idwt2")


def dwt2(image) -> dict[str, Tensor]:
    """One level of the Haar analysis: ``{ll, lh, hl, hh}`` at half resolution."""
    image = ad.as_tensor(image)
    if image.ndim < 2:
        raise DimensionError(f"image needs at least 2 axes, got {image.shape}", axis="rank")
    h, w = image.shape[-2:]
    if h % 2:
        raise DimensionError(f"height {h} is odd", axis="H")
    if w % 2:
        raise DimensionError(f"width {w} is odd", axis="W")
    stacked = _stacked_dwt(image)
    return {name: ad.index(stacked, k) for k, name in enumerate(BANDS)}


def idwt2(bands: dict) -> Tensor:
    parts = [ad.as_tensor(bands[name]) for name in BANDS]
    ref = parts[0].shape
    for name, t in zip(BANDS, parts):
        if t.shape != ref:
            raise DimensionError(f"band {name} has shape {t.shape}, ll has {ref}",
                                 axis=name)
    stacked = ad.concat([ad.reshape(t, (1,) + ref) for t in parts], axis=0)
    return _stacked_idwt(stacked)


def decompose(image, cfg: WaveletConfig) -> WaveletPyramid:
    image = ad.as_tensor(image)
    cfg.check(image.shape)
    levels = []
    low = image
    for _ in range(cfg.p):
        bands = dwt2(low)
        levels.append({b: bands[b] for b in ("lh", "hl", "hh")})
        low = bands["ll"]
    return WaveletPyramid(levels, low)


def high_bands(image, cfg: WaveletConfig) -> list[Tensor]:
    """``[lh, hl, hh]`` of every cascade level 1..p, in that order."""
    return decompose(image, cfg).high_bands()


def _flat_high(x: Tensor, cfg: WaveletConfig) -> Tensor:
    pieces = []
    low = x
    for _ in range(cfg.p):
        stacked = _stacked_dwt(low)
        pieces.append(ad.reshape(ad.index(stacked, slice(1, 4)), (-1,)))
        low = ad.index(stacked, 0)
    return pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)


def wavelet_reg_loss(attack_out, victim_out, cfg: WaveletConfig) -> Tensor:
    """Mean absolute difference between the detail bands of two images.

    The sum of |band difference| over every detail band of every level (and
    every batch item) is divided by the total number of band elements.
    """
    attack_out, victim_out = ad.as_tensor(attack_out), ad.as_tensor(victim_out)
    if attack_out.shape != victim_out.shape:
        raise DimensionError(
            f"attack output {attack_out.shape} vs victim output {victim_out.shape}",
            axis="shape")
    cfg.check(attack_out.shape)
    # Haar is linear, so the bands of the difference are the band differences.
    return ad.mean_all(ad.absolute(_flat_high(attack_out - victim_out, cfg)))
