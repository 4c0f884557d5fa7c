"""PSNR, toy-feature FID/KID (tFID/tKID), extraction scores and landscape slices.

tFID and tKID use :class:`FeatureEmbedder`, a frozen random conv stack, in
place of an Inception network.  Their values are not comparable with
published Inception-based FID/KID numbers.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tensor
from .errors import ConfigurationError, DimensionError, SampleSizeError

EIG_TOL = 1e-8


def psnr(a, b, max_val: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes {a.shape} vs {b.shape}", axis="shape")
    if max_val <= 0:
        raise ConfigurationError("max_val must be > 0")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


class FeatureEmbedder:
    """Seeded, frozen conv(3x3,s2)+relu -> conv(3x3,s2)+relu -> global mean pool."""

    def __init__(self, channels: int = 1, dim: int = 16, hidden: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.dim = dim
        self.channels = channels
        self._w1 = rng.normal(0, math.sqrt(2.0 / (9 * channels)), (hidden, channels, 3, 3))
        self._b1 = rng.normal(0, 0.1, hidden)
        self._w2 = rng.normal(0, math.sqrt(2.0 / (9 * hidden)), (dim, hidden, 3, 3))
        self._b2 = rng.normal(0, 0.1, dim)
        for w in (self._w1, self._b1, self._w2, self._b2):
            w.flags.writeable = False

    def __call__(self, images, chunk: int = 128) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != self.channels:
            raise DimensionError(f"expected [N,{self.channels},H,W], got {images.shape}",
                                 axis="channels")
        w1, b1, w2, b2 = (ad.Tensor(w) for w in (self._w1, self._b1, self._w2, self._b2))
        feats = []
        for i in range(0, len(images), chunk):
            h = ad.relu(ad.conv2d(ad.Tensor(images[i:i + chunk]), w1, b1, 2, 1))
            h = ad.relu(ad.conv2d(h, w2, b2, 2, 1))
            feats.append(h.data.mean(axis=(2, 3)))
        return np.concatenate(feats)


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -EIG_TOL:
        raise np.linalg.LinAlgError(f"matrix not PSD (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _stats(feats, d_expected: int | None = None):
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    n, d = f.shape
    if n < d + 1:
        raise SampleSizeError(f"need at least d+1={d + 1} samples, got {n}")
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False)), f


def frechet_distance(feats_a, feats_b) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``."""
    mu_a, cov_a, fa = _stats(feats_a)
    mu_b, cov_b, fb = _stats(feats_b)
    if fa.shape[1] != fb.shape[1]:
        raise DimensionError(f"feature dims {fa.shape[1]} vs {fb.shape[1]}", axis="features")
    root_a = _sym_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    eig = np.linalg.eigvalsh((middle + middle.T) / 2)
    if eig.min() < -EIG_TOL:
        raise np.linalg.LinAlgError(f"negative eigenvalue {eig.min():.3g} in trace term")
    tr_sqrt = float(np.sqrt(np.clip(eig, 0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    if value < -EIG_TOL:
        raise np.linalg.LinAlgError(f"negative Frechet distance {value:.3g}")
    return max(value, 0.0)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


@dataclass
class KernelDistance:
    mean: float
    std: float
    n_subsets: int
    subset_size: int

    def scaled(self) -> tuple[float, float]:
        """The ``x100 +- std x100`` reporting convention."""
        return self.mean * 100.0, self.std * 100.0


def kernel_distance(feats_a, feats_b, n_subsets: int = 10, subset_size: int | None = None,
                    seed: int = 0) -> KernelDistance:
    """Unbiased polynomial-kernel MMD^2 averaged over random subsets."""
    fa = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if fa.shape[1] != fb.shape[1]:
        raise DimensionError(f"feature dims {fa.shape[1]} vs {fb.shape[1]}", axis="features")
    if subset_size is None:
        subset_size = min(100, len(fa), len(fb))
    if subset_size > len(fa) or subset_size > len(fb):
        raise SampleSizeError(
            f"subset_size {subset_size} exceeds sample counts {len(fa)}/{len(fb)}")
    if subset_size < 2:
        raise SampleSizeError("subset_size must be >= 2")
    rng = np.random.default_rng(seed)
    vals = np.array([
        mmd2_unbiased(fa[rng.choice(len(fa), subset_size, replace=False)],
                      fb[rng.choice(len(fb), subset_size, replace=False)])
        for _ in range(n_subsets)])
    return KernelDistance(float(vals.mean()), float(vals.std()), n_subsets, subset_size)


# extraction scores ----------------------------------------------------------

@dataclass
class MetricReport:
    name: str
    mode: str
    label: str
    value: float
    std: float | None = None
    n: int = 0
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def records(self, prefix: str = "") -> list[str]:
        key = f"{prefix}{self.name}.{self.mode}"
        lines = [f"{key}.label={self.label}", f"{key}.value={self.value!r}"]
        if self.std is not None:
            lines.append(f"{key}.std={self.std!r}")
        lines.append(f"{key}.n={self.n}")
        if self.seed is not None:
            lines.append(f"{key}.seed={self.seed}")
        lines.extend(f"{key}.{k}={v!r}" for k, v in sorted(self.extra.items()))
        return lines


def reports_to_text(reports: Sequence[MetricReport], prefix: str = "") -> str:
    return "\n".join(line for r in reports for line in r.records(prefix)) + "\n"


def reports_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols.extend(k for k in r if k not in cols)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _images(x, what: str) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.size == 0 or len(arr) == 0:
        raise SampleSizeError(f"{what} is empty")
    return arr


def _distribution_report(name: str, a: np.ndarray, b: np.ndarray, mode: str,
                         embedder: FeatureEmbedder | None, seed: int) -> MetricReport:
    embedder = embedder or FeatureEmbedder(channels=a.shape[1])
    fa, fb = embedder(a), embedder(b)
    if mode == "frechet":
        return MetricReport(name, mode, "tFID", frechet_distance(fa, fb), None,
                            min(len(fa), len(fb)), embedder.seed)
    kd = kernel_distance(fa, fb, seed=seed)
    mean, std = kd.scaled()
    return MetricReport(name, mode, "tKIDx100", mean, std, min(len(fa), len(fb)), seed,
                        {"embedder_seed": embedder.seed, "subset_size": kd.subset_size,
                         "n_subsets": kd.n_subsets})


def r_capability(attack_outputs, target_domain_samples, mode: str = "frechet",
                 embedder: FeatureEmbedder | None = None, seed: int = 0) -> MetricReport:
    """Distance from attack outputs to the true target domain.

    ``l1_to_oracle`` expects ``target_domain_samples`` aligned with the
    attack outputs (ground-truth translations of the same inputs).
    """
    a = _images(attack_outputs, "attack outputs")
    t = _images(target_domain_samples, "target samples")
    if mode in ("frechet", "kernel"):
        return _distribution_report("r_capability", a, t, mode, embedder, seed)
    if mode == "l1_to_oracle":
        if a.shape != t.shape:
            raise DimensionError(f"attack outputs {a.shape} vs oracle targets {t.shape}")
        return MetricReport("r_capability", mode, "L1", float(np.mean(np.abs(a - t))), None,
                            len(a))
    raise ConfigurationError(f"unknown r_capability mode {mode!r}")


def r_fidelity(attack_outputs, victim_outputs, mode: str = "l1",
               embedder: FeatureEmbedder | None = None, seed: int = 0) -> MetricReport:
    """Distance between attack and victim outputs on the same test inputs."""
    a = _images(attack_outputs, "attack outputs")
    v = _images(victim_outputs, "victim outputs")
    if a.shape != v.shape:
        axis = next((i for i, (m, n) in enumerate(zip(a.shape, v.shape)) if m != n), "rank")
        raise DimensionError(f"attack outputs {a.shape} vs victim outputs {v.shape}", axis=axis)
    if mode == "l1":
        return MetricReport("r_fidelity", mode, "L1", float(np.mean(np.abs(a - v))), None,
                            len(a))
    if mode == "psnr":
        per = [psnr(x, y) for x, y in zip(a, v)]
        return MetricReport("r_fidelity", mode, "PSNR", psnr(a, v), None, len(a),
                            extra={"mean_per_image": float(np.mean(per))})
    if mode in ("frechet", "kernel"):
        return _distribution_report("r_fidelity", a, v, mode, embedder, seed)
    raise ConfigurationError(f"unknown r_fidelity mode {mode!r}")


# loss landscape -------------------------------------------------------------

def filter_normalized_direction(params: Sequence[Tensor], rng: np.random.Generator
                                ) -> list[np.ndarray]:
    """Gaussian direction rescaled so each filter (leading-axis slice) matches the weight's norm."""
    out = []
    for p in params:
        d = rng.standard_normal(p.shape)
        if p.ndim <= 1:
            dn = np.linalg.norm(d)
            out.append(d * (np.linalg.norm(p.data) / dn) if dn > 0 else d * 0.0)
            continue
        flat_d = d.reshape(p.shape[0], -1)
        flat_w = p.data.reshape(p.shape[0], -1)
        scale = np.linalg.norm(flat_w, axis=1) / np.maximum(np.linalg.norm(flat_d, axis=1), 1e-12)
        out.append((flat_d * scale[:, None]).reshape(p.shape))
    return out


def _flatten(params) -> list[Tensor]:
    if isinstance(params, ParamGroup):
        return params.tensors()
    out = []
    for p in params:
        out.extend(p.tensors() if isinstance(p, ParamGroup) else [p])
    return out


def landscape_slice(params, loss_closure: Callable[[], object], grid: int = 11,
                    radius: float = 1.0, seed: int = 0) -> np.ndarray:
    """Loss on ``w + a*u + b*v`` over a ``grid x grid`` lattice; row index is ``a``."""
    if grid < 1 or grid % 2 == 0:
        raise ConfigurationError("grid must be a positive odd integer")
    if radius <= 0:
        raise ConfigurationError("radius must be > 0")
    tensors = _flatten(params)
    rng = np.random.default_rng(seed)
    u = filter_normalized_direction(tensors, rng)
    v = filter_normalized_direction(tensors, rng)
    saved = [t.data.copy() for t in tensors]
    coords = np.linspace(-radius, radius, grid)
    coords[grid // 2] = 0.0
    values = np.empty((grid, grid))
    try:
        for i, a in enumerate(coords):
            for j, b in enumerate(coords):
                for t, s, du, dv in zip(tensors, saved, u, v):
                    t.data[...] = s + a * du + b * dv if (a or b) else s
                out = loss_closure()
                values[i, j] = float(out.data) if isinstance(out, Tensor) else float(out)
    finally:
        for t, s in zip(tensors, saved):
            t.data[...] = s
    return values


def landscape_coords(grid: int, radius: float) -> np.ndarray:
    coords = np.linspace(-radius, radius, grid)
    coords[grid // 2] = 0.0
    return coords
