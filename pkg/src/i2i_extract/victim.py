"""Synthetic I2IT tasks, the domain-shift knob, datasets and the victim oracle.

Two paired tasks stand in for the real workloads:

* ``sharpen``: targets are crisp procedural textures (sinusoidal gratings
  plus filled polygons); sources are their 2x block-mean downsample followed
  by nearest upsampling.
* ``stylize``: sources are procedural scenes; targets apply a fixed S-shaped
  tone curve and darken edges.

``shift`` in [0, 1] moves the scene distribution: grating frequencies rise
from [2, 4] to [3, 6] cycles per image, a polygon family the victim never
saw (triangles) appears, and the background level drifts.  It is a lab
construct, not a calibrated measure of real-world shift.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbones import BackboneSpec, ModelBundle, build_bundle, load_bundle, save_bundle
from .backbones import pix2pix_loss
from .errors import (BudgetError, ConfigurationError, ContractError, DimensionError,
                     FormatError, VictimTrainingError)
from .sam import AdamState, SamConfig, sam_gan_train_step
from .tensor_io import read_manifest, read_tensor, write_manifest, write_tensor

log = logging.getLogger(__name__)

TASKS = ("sharpen", "stylize")
# Train-L1 stopping thresholds.  The identity map already scores ~0.069 on
# sharpen, so the victim must beat that to have learned anything.
TASK_L1_THRESHOLD = {"sharpen": 0.05, "stylize": 0.07}


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "sharpen"
    image_size: int = 32
    channels: int = 1

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ConfigurationError(f"unknown task {self.kind!r}; expected one of {TASKS}")
        if self.image_size < 4 or self.image_size % 2:
            raise ConfigurationError("image_size must be even and >= 4")
        if self.channels < 1:
            raise ConfigurationError("channels must be >= 1")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def translate(self, x: np.ndarray) -> np.ndarray:
        """Ground-truth translator T for ``[..., C, H, W]`` sources."""
        if self.kind == "sharpen":
            raise ContractError("sharpen has no closed-form T(x); use dataset targets")
        return stylize(x)


@dataclass(frozen=True)
class DomainParams:
    shift: float = 0.0
    freq_lo: float = 2.0
    freq_hi: float = 4.0
    novel_prob: float = 0.0
    bg_level: float = 0.0

    @classmethod
    def from_shift(cls, shift: float) -> "DomainParams":
        if not 0.0 <= shift <= 1.0:
            raise ConfigurationError(f"shift must lie in [0, 1], got {shift}")
        return cls(shift=float(shift), freq_lo=2.0 + shift, freq_hi=4.0 + 2.0 * shift,
                   novel_prob=0.6 * shift, bg_level=0.3 * shift)


def block_mean_resample(img: np.ndarray, factor: int = 2) -> np.ndarray:
    """Block-mean downsample followed by nearest upsample on the last two axes."""
    # Explicit row-major sum keeps the result independent of numpy's reduction order.
    total = sum(img[..., i::factor, j::factor] for i in range(factor) for j in range(factor))
    blocks = total / (factor * factor)
    return np.repeat(np.repeat(blocks, factor, axis=-2), factor, axis=-1)


def stylize(x: np.ndarray) -> np.ndarray:
    """S-curve tone map minus a gradient-magnitude edge term, clipped to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    tone = np.tanh(2.0 * x) / np.tanh(2.0)
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad, mode="edge")
    gy = (xp[..., 2:, 1:-1] - xp[..., :-2, 1:-1]) / 2.0
    gx = (xp[..., 1:-1, 2:] - xp[..., 1:-1, :-2]) / 2.0
    edges = np.sqrt(gx * gx + gy * gy)
    return np.clip(tone - 0.8 * edges, -1.0, 1.0)


def _polygon_mask(xx, yy, rng, family: str, size: int) -> np.ndarray:
    cx, cy = rng.uniform(0.15, 0.85, size=2)
    r = rng.uniform(0.12, 0.3)
    if family == "rect":
        aspect = rng.uniform(0.5, 1.5)
        return (np.abs(xx - cx) < r * aspect) & (np.abs(yy - cy) < r / aspect)
    if family == "disc":
        return (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
    # Triangle: inside all three half-planes of a randomly rotated equilateral triangle.
    theta = rng.uniform(0, 2 * np.pi)
    angles = theta + np.array([0.0, 2.0, 4.0]) * np.pi / 3
    verts = np.stack([cx + r * np.cos(angles), cy + r * np.sin(angles)], axis=1)
    inside = np.ones_like(xx, dtype=bool)
    for k in range(3):
        (x0, y0), (x1, y1) = verts[k], verts[(k + 1) % 3]
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def procedural_scene(rng: np.random.Generator, task: TaskSpec, dom: DomainParams) -> np.ndarray:
    s = task.image_size
    yy, xx = np.mgrid[0:s, 0:s] / s
    img = np.full((s, s), rng.uniform(-0.2, 0.2) + dom.bg_level)
    for _ in range(rng.integers(1, 3)):
        f = rng.uniform(dom.freq_lo, dom.freq_hi)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.25, 0.45)
        img = img + amp * np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta))
                                 + phase)
    for _ in range(rng.integers(1, 4)):
        family = "tri" if rng.uniform() < dom.novel_prob else ("rect", "disc")[rng.integers(2)]
        mask = _polygon_mask(xx, yy, rng, family, s)
        img = np.where(mask, rng.uniform(-0.9, 0.9), img)
    gains = rng.uniform(0.8, 1.0, size=task.channels) if task.channels > 1 else np.ones(1)
    return np.clip(gains[:, None, None] * img[None], -1.0, 1.0)


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray | None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.targets is not None and self.targets.shape != self.inputs.shape:
            raise DimensionError(f"inputs {self.inputs.shape} vs targets {self.targets.shape}")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        t = None if self.targets is None else self.targets[idx]
        m = dict(self.manifest)
        m["count"] = len(self.inputs[idx])
        return Dataset(self.inputs[idx], t, m)


def gen_dataset(task: TaskSpec, domain: DomainParams, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    rng = np.random.default_rng([seed, int(round(domain.shift * 1000))])
    scenes = np.stack([procedural_scene(rng, task, domain) for _ in range(n)])
    if task.kind == "sharpen":
        inputs, targets = block_mean_resample(scenes), scenes
    else:
        inputs, targets = scenes, stylize(scenes)
    manifest = {"task": task.kind, "image_size": task.image_size, "channels": task.channels,
                **{f"domain.{k}": v for k, v in asdict(domain).items()},
                "seed": seed, "count": n}
    return Dataset(inputs, targets, manifest)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = ["inputs"] + ([] if ds.targets is None else ["targets"])
    write_tensor(path / "inputs.i2it", ds.inputs)
    if ds.targets is not None:
        write_tensor(path / "targets.i2it", ds.targets)
    meta = {k: v for k, v in ds.manifest.items() if k not in ("blobs", "count")}
    write_manifest(path / "manifest.txt", {"blobs": blobs, **meta, "count": len(ds)})


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise FormatError(f"no manifest in {path}", field="manifest")
    raw = read_manifest(path / "manifest.txt")
    for key in ("blobs", "count"):
        if key not in raw:
            raise FormatError("manifest lacks required key", field=key)
    try:
        count = int(raw["count"])
    except ValueError:
        raise FormatError(f"count {raw['count']!r} is not an integer", field="count") from None
    names = [b for b in raw["blobs"].split(",") if b]
    arrays = {}
    for name in names:
        if name not in ("inputs", "targets"):
            raise FormatError(f"unknown blob {name!r}", field="blobs")
        try:
            arrays[name] = read_tensor(path / f"{name}.i2it")
        except FileNotFoundError:
            raise FormatError(f"missing blob {name}.i2it", field="blobs") from None
        except FormatError as exc:
            raise FormatError(f"{name}.i2it: {exc}", field=exc.field, offset=exc.offset) from None
        if arrays[name].ndim != 4 or arrays[name].shape[0] != count:
            raise FormatError(
                f"blob {name} holds shape {arrays[name].shape}, manifest count is {count}",
                field="count")
    if "inputs" not in arrays:
        raise FormatError("dataset has no inputs blob", field="blobs")
    manifest = {k: _parse_scalar(v) for k, v in raw.items() if k != "blobs"}
    return Dataset(arrays["inputs"], arrays.get("targets"), manifest)


def _parse_scalar(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def task_from_manifest(manifest: dict) -> TaskSpec:
    return TaskSpec(str(manifest["task"]), int(manifest["image_size"]), int(manifest["channels"]))


def domain_from_manifest(manifest: dict) -> DomainParams:
    return DomainParams(**{k[len("domain."):]: float(v) for k, v in manifest.items()
                           if k.startswith("domain.")})


# victim -------------------------------------------------------------------

@dataclass
class VictimConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_steps: int = 1500
    l1_threshold: float | None = None  # None: per-task default
    check_every: int = 50
    lambda_l1: float = 100.0
    base_channels: int = 8
    depth: int = 2
    seed: int = 0
    budget: int = 2000


class VictimOracle:
    """Query-only wrapper around a trained translator with a hard budget.

    The wrapped model is kept private; the public surface is ``query``,
    ``used``, ``budget`` and ``remaining``.
    """

    def __init__(self, task: TaskSpec, budget: int = 2000, *, _model: ModelBundle | None = None):
        if budget < 0:
            raise ConfigurationError("budget must be >= 0")
        self.task = task
        self.budget = budget
        self.__model = _model
        self.__used = 0
        self.__lock = threading.Lock()

    @property
    def used(self) -> int:
        return self.__used

    @property
    def remaining(self) -> int:
        return self.budget - self.__used

    @property
    def trained(self) -> bool:
        return self.__model is not None

    def query(self, x) -> np.ndarray:
        """F_V(x) for one ``[C,H,W]`` image or a ``[B,C,H,W]`` batch; charges one query per image."""
        if self.__model is None:
            raise ContractError("victim oracle queried before training")
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        batch = x[None] if single else x
        if batch.ndim != 4 or batch.shape[1:] != self.task.image_shape:
            raise DimensionError(
                f"query expects {self.task.image_shape} images, got {x.shape}", axis="image")
        n = batch.shape[0]
        with self.__lock:
            if self.__used + n > self.budget:
                raise BudgetError(self.__used, self.budget, n)
            self.__used += n
        out = self.__model.generate(batch).data
        return out[0] if single else out

    def query_all(self, inputs: np.ndarray, chunk: int = 64) -> np.ndarray:
        return np.concatenate([self.query(inputs[i:i + chunk])
                               for i in range(0, len(inputs), chunk)])

    def fork(self, budget: int) -> "VictimOracle":
        """Independent oracle over the same model with its own counter (lab-side evaluation)."""
        return VictimOracle(self.task, budget, _model=self.__model)

    def save(self, path) -> None:
        if self.__model is None:
            raise ContractError("cannot save an untrained victim")
        path = Path(path)
        save_bundle(self.__model, path)
        write_manifest(path / "task.txt", {"task": self.task.kind,
                                           "image_size": self.task.image_size,
                                           "channels": self.task.channels})

    @classmethod
    def load(cls, path, budget: int) -> "VictimOracle":
        path = Path(path)
        if not (path / "task.txt").exists():
            raise FileNotFoundError(f"no victim checkpoint at {path}")
        task = task_from_manifest(read_manifest(path / "task.txt"))
        return cls(task, budget, _model=load_bundle(path))


def batch_l1(bundle: ModelBundle, inputs: np.ndarray, targets: np.ndarray,
             chunk: int = 64) -> float:
    total = 0.0
    for i in range(0, len(inputs), chunk):
        out = bundle.generate(inputs[i:i + chunk]).data
        total += float(np.abs(out - targets[i:i + chunk]).sum())
    return total / targets.size


def train_victim(task: TaskSpec, victim_dataset: Dataset, config: VictimConfig | None = None
                 ) -> VictimOracle:
    """Train a Pix2Pix victim with plain Adam until train L1 <= threshold."""
    config = config or VictimConfig()
    threshold = (TASK_L1_THRESHOLD[task.kind] if config.l1_threshold is None
                 else config.l1_threshold)
    if victim_dataset.targets is None:
        raise ConfigurationError("victim training needs paired targets")
    if float(victim_dataset.manifest.get("domain.shift", 0.0)) != 0.0:
        raise ConfigurationError("the victim trains on its own (shift 0) distribution")
    spec = BackboneSpec("pix2pix", config.base_channels, config.depth, task.channels,
                        task.image_size)
    bundle = build_bundle(spec, config.seed)
    states = {g.name: AdamState(lr=config.lr) for g in bundle.groups()}
    sam = SamConfig.uniform(0.0, 1, 1, enabled=False)
    rng = np.random.default_rng(config.seed)
    x_all, y_all = victim_dataset.inputs, victim_dataset.targets
    n = len(x_all)

    def losses(b, batch, part):
        return pix2pix_loss(b, batch[0], batch[1], config.lambda_l1, part)

    curve: list[float] = []
    order = rng.permutation(n)
    pos = 0
    for step in range(config.max_steps):
        if pos + config.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        sam_gan_train_step(bundle, (x_all[idx], y_all[idx]), losses, sam, states, step)
        if (step + 1) % config.check_every == 0 or step == config.max_steps - 1:
            l1 = batch_l1(bundle, x_all, y_all)
            curve.append(l1)
            log.debug("victim step %d train L1 %.4f", step + 1, l1)
            if l1 <= threshold:
                return VictimOracle(task, config.budget, _model=bundle)
    raise VictimTrainingError(
        f"victim train L1 stayed above {threshold} after {config.max_steps} steps",
        curve)
