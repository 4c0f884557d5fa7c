"""Toy Pix2Pix / CycleGAN networks and their loss terms.

Generators are small U-Net style encoder/decoders (strided conv + leaky
ReLU down, nearest upsample + conv up, skip concatenation, tanh head).
Discriminators are patch-style strided conv stacks ending in a logit map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tensor
from .errors import ConfigurationError, DimensionError, FormatError
from .tensor_io import read_manifest, read_tensor, write_manifest, write_tensor

LEAK = 0.2
DEFAULT_LAMBDA_L1 = 100.0
DEFAULT_LAMBDA_CYC = 10.0


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "pix2pix"
    base_channels: int = 8
    depth: int = 2
    image_channels: int = 1
    image_size: int = 32

    def __post_init__(self):
        if self.kind not in ("pix2pix", "cyclegan"):
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}")
        for name in ("base_channels", "depth", "image_channels", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.image_size % (2 ** self.depth):
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by 2^depth={2 ** self.depth}")
        if self.image_size < 4:
            raise ConfigurationError("image_size must be >= 4 for the discriminator")

    @property
    def n_generators(self) -> int:
        return 1 if self.kind == "pix2pix" else 2

    @property
    def generator_names(self) -> list[str]:
        return ["G1"] if self.kind == "pix2pix" else ["G1", "G2"]

    @property
    def discriminator_names(self) -> list[str]:
        return ["D"] if self.kind == "pix2pix" else ["D_X", "D_Y"]


def _init_conv(group: ParamGroup, name: str, rng: np.random.Generator, f: int, c: int,
               k: int) -> None:
    group.add(f"{name}.weight", rng.normal(0.0, 0.02, size=(f, c, k, k)))
    group.add(f"{name}.bias", np.zeros(f))


def _enc_channels(spec: BackboneSpec) -> list[int]:
    return [spec.base_channels * 2 ** k for k in range(spec.depth)]


def _build_generator(name: str, spec: BackboneSpec, rng: np.random.Generator) -> ParamGroup:
    g = ParamGroup(name)
    enc = _enc_channels(spec)
    c_in = spec.image_channels
    for k, c_out in enumerate(enc):
        _init_conv(g, f"enc{k}", rng, c_out, c_in, 4)
        c_in = c_out
    # Decoder stage k consumes the upsampled features plus the skip from encoder input k.
    for k in reversed(range(spec.depth)):
        skip = spec.image_channels if k == 0 else enc[k - 1]
        c_out = spec.image_channels if k == 0 else enc[k - 1]
        _init_conv(g, f"dec{k}", rng, c_out, c_in + skip, 3)
        c_in = c_out
    return g


def _build_discriminator(name: str, in_channels: int, spec: BackboneSpec,
                         rng: np.random.Generator) -> ParamGroup:
    d = ParamGroup(name)
    b = spec.base_channels
    _init_conv(d, "conv0", rng, b, in_channels, 4)
    _init_conv(d, "conv1", rng, 2 * b, b, 4)
    _init_conv(d, "head", rng, 1, 2 * b, 3)
    return d


def generator_forward(group: ParamGroup, x: Tensor, spec: BackboneSpec) -> Tensor:
    skips = [x]
    h = x
    for k in range(spec.depth):
        h = ad.leaky_relu(ad.conv2d(h, group[f"enc{k}.weight"], group[f"enc{k}.bias"],
                                    stride=2, pad=1), LEAK)
        skips.append(h)
    for k in reversed(range(spec.depth)):
        h = ad.concat([ad.upsample_nearest(h, 2), skips[k]], axis=1)
        h = ad.conv2d(h, group[f"dec{k}.weight"], group[f"dec{k}.bias"], stride=1, pad=1)
        h = ad.tanh(h) if k == 0 else ad.leaky_relu(h, LEAK)
    return h


def discriminator_forward(group: ParamGroup, x: Tensor) -> Tensor:
    h = ad.leaky_relu(ad.conv2d(x, group["conv0.weight"], group["conv0.bias"], 2, 1), LEAK)
    h = ad.leaky_relu(ad.conv2d(h, group["conv1.weight"], group["conv1.bias"], 2, 1), LEAK)
    return ad.conv2d(h, group["head.weight"], group["head.bias"], 1, 1)


@dataclass
class ModelBundle:
    """Generators and discriminators of one backbone, addressed by group name."""

    spec: BackboneSpec
    generators: list[ParamGroup]
    discriminators: list[ParamGroup]

    def __post_init__(self):
        n, m = len(self.generators), len(self.discriminators)
        expect = (1, 1) if self.spec.kind == "pix2pix" else (2, 2)
        if (n, m) != expect:
            raise ConfigurationError(f"{self.spec.kind} needs {expect} groups, got {(n, m)}")
        names = [g.name for g in self.groups()]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate group names {names}")

    def groups(self) -> list[ParamGroup]:
        return [*self.generators, *self.discriminators]

    def group(self, name: str) -> ParamGroup:
        for g in self.groups():
            if g.name == name:
                return g
        raise KeyError(name)

    def generate(self, x, which: int = 0) -> Tensor:
        x = ad.as_tensor(x)
        self._check_image(x)
        return generator_forward(self.generators[which], x, self.spec)

    def discriminate(self, x, which: int = 0) -> Tensor:
        """Per-sample logit: the patch logit map averaged over its spatial axes."""
        logits = discriminator_forward(self.discriminators[which], ad.as_tensor(x))
        return ad.mean_axes(logits, (1, 2, 3))

    def state(self) -> dict[str, np.ndarray]:
        return {f"{g.name}/{k}": p.data.copy() for g in self.groups()
                for k, p in g.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = {f"{g.name}/{k}" for g in self.groups() for k in g.params}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigurationError(f"checkpoint mismatch: missing={missing} extra={extra}")
        for g in self.groups():
            for k, p in g.params.items():
                v = np.asarray(state[f"{g.name}/{k}"], dtype=ad.DTYPE)
                if v.shape != p.shape:
                    raise DimensionError(f"{g.name}/{k}: {v.shape} vs {p.shape}")
                p.data[...] = v

    def _check_image(self, x: Tensor) -> None:
        s = self.spec
        want = (s.image_channels, s.image_size, s.image_size)
        if x.ndim != 4 or x.shape[1:] != want:
            axis = "rank" if x.ndim != 4 else next(
                i + 1 for i, (a, b) in enumerate(zip(x.shape[1:], want)) if a != b)
            raise DimensionError(f"expected [B,{want[0]},{want[1]},{want[2]}], got {x.shape}",
                                 axis=axis)


def build_bundle(spec: BackboneSpec, seed: int) -> ModelBundle:
    rng = np.random.default_rng(seed)
    gens = [_build_generator(n, spec, rng) for n in spec.generator_names]
    d_in = 2 * spec.image_channels if spec.kind == "pix2pix" else spec.image_channels
    discs = [_build_discriminator(n, d_in, spec, rng) for n in spec.discriminator_names]
    return ModelBundle(spec, gens, discs)


@dataclass
class LossBundle:
    """Scalar losses of one evaluation.

    ``components`` holds the weighted terms keyed ``"G/<term>"`` or
    ``"D/<term>"``; each total is the sum of its prefix's components.
    ``per_group`` maps a parameter-group name to the loss it minimizes.
    """

    per_group: dict[str, Tensor]
    total_generator_loss: Tensor | None
    total_discriminator_loss: Tensor | None
    components: dict[str, Tensor] = field(default_factory=dict)
    raw: dict[str, float] = field(default_factory=dict)
    outputs: dict[str, Tensor] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        out = {k: v.item() for k, v in self.components.items()}
        if self.total_generator_loss is not None:
            out["G/total"] = self.total_generator_loss.item()
        if self.total_discriminator_loss is not None:
            out["D/total"] = self.total_discriminator_loss.item()
        out.update(self.raw)
        return out


def _sum(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def gan_adversarial_terms(d_real_logits, d_fake_logits) -> dict[str, Tensor]:
    """Discriminator log-loss and the non-saturating generator loss."""
    r, f = ad.as_tensor(d_real_logits), ad.as_tensor(d_fake_logits)
    if r.shape != f.shape:
        raise DimensionError(f"real logits {r.shape} vs fake logits {f.shape}", axis="shape")
    ones, zeros = np.ones(r.shape), np.zeros(r.shape)
    d_loss = ad.bce_with_logits(r, ones) + ad.bce_with_logits(f, zeros)
    g_loss = ad.bce_with_logits(f, ones)
    return {"d_loss": d_loss, "g_loss": g_loss}


def _paired(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        axis = next((i for i, (m, n) in enumerate(zip(a.shape, b.shape)) if m != n), "rank")
        raise DimensionError(f"{what}: {a.shape} vs {b.shape}", axis=axis)


def pix2pix_loss(bundle: ModelBundle, x, y_target, lambda_l1: float = DEFAULT_LAMBDA_L1,
                 part: str = "all") -> LossBundle:
    """cGAN + L1 loss.  ``part`` limits work to ``generator``/``discriminator`` terms."""
    x, y = ad.as_tensor(x), ad.as_tensor(y_target)
    _paired(x, y, "pix2pix pair")
    fake = bundle.generate(x)
    comps: dict[str, Tensor] = {}
    raw: dict[str, float] = {}
    g_total = d_total = None
    if part in ("all", "generator"):
        f_logit = bundle.discriminate(ad.concat([x, fake], axis=1))
        l1 = ad.l1_loss(fake, y)
        comps["G/adv"] = ad.bce_with_logits(f_logit, np.ones(f_logit.shape))
        comps["G/l1"] = l1 * lambda_l1
        raw["l1"] = l1.item()
        g_total = _sum([comps["G/adv"], comps["G/l1"]])
    if part in ("all", "discriminator"):
        r_logit = bundle.discriminate(ad.concat([x, y], axis=1))
        f_logit_d = bundle.discriminate(ad.concat([x, ad.detach(fake)], axis=1))
        comps["D/adv"] = gan_adversarial_terms(r_logit, f_logit_d)["d_loss"]
        d_total = comps["D/adv"]
    if part not in ("all", "generator", "discriminator"):
        raise ConfigurationError(f"unknown loss part {part!r}")
    per_group = {}
    if g_total is not None:
        per_group[bundle.generators[0].name] = g_total
    if d_total is not None:
        per_group[bundle.discriminators[0].name] = d_total
    return LossBundle(per_group, g_total, d_total, comps, raw, {"fake": fake})


def cyclegan_loss(bundle: ModelBundle, x, y, lambda_cyc: float = DEFAULT_LAMBDA_CYC,
                  part: str = "all") -> LossBundle:
    """Two adversarial games (G1 vs D_Y, G2 vs D_X) plus the cycle term."""
    if part not in ("all", "generator", "discriminator"):
        raise ConfigurationError(f"unknown loss part {part!r}")
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape[1:] != y.shape[1:]:
        raise DimensionError(f"domain images {x.shape} vs {y.shape}", axis="image")
    fake_y = bundle.generate(x, 0)
    fake_x = bundle.generate(y, 1)
    comps: dict[str, Tensor] = {}
    raw: dict[str, float] = {}
    per_group: dict[str, Tensor] = {}
    g_total = d_total = None
    if part in ("all", "generator"):
        fy_logit = bundle.discriminate(fake_y, 1)
        fx_logit = bundle.discriminate(fake_x, 0)
        comps["G/adv_G1"] = ad.bce_with_logits(fy_logit, np.ones(fy_logit.shape))
        comps["G/adv_G2"] = ad.bce_with_logits(fx_logit, np.ones(fx_logit.shape))
        rec_x = bundle.generate(fake_y, 1)
        rec_y = bundle.generate(fake_x, 0)
        cyc = ad.l1_loss(rec_x, x) + ad.l1_loss(rec_y, y)
        comps["G/cycle"] = cyc * lambda_cyc
        raw["cycle"] = cyc.item()
        g_total = _sum([comps["G/adv_G1"], comps["G/adv_G2"], comps["G/cycle"]])
        for g in bundle.generators:
            per_group[g.name] = g_total
    if part in ("all", "discriminator"):
        dy = gan_adversarial_terms(bundle.discriminate(y, 1),
                                   bundle.discriminate(ad.detach(fake_y), 1))["d_loss"]
        dx = gan_adversarial_terms(bundle.discriminate(x, 0),
                                   bundle.discriminate(ad.detach(fake_x), 0))["d_loss"]
        comps["D/adv_D_Y"] = dy
        comps["D/adv_D_X"] = dx
        d_total = _sum([dy, dx])
        per_group[bundle.discriminators[1].name] = dy
        per_group[bundle.discriminators[0].name] = dx
    return LossBundle(per_group, g_total, d_total, comps, raw,
                      {"fake": fake_y, "fake_x": fake_x})


def backbone_loss(bundle: ModelBundle, x, y, weight: float | None = None,
                  part: str = "all") -> LossBundle:
    if bundle.spec.kind == "pix2pix":
        return pix2pix_loss(bundle, x, y, DEFAULT_LAMBDA_L1 if weight is None else weight, part)
    return cyclegan_loss(bundle, x, y, DEFAULT_LAMBDA_CYC if weight is None else weight, part)


def attack_total_loss(backbone: LossBundle, wavelet_term, alpha: float) -> LossBundle:
    """Add ``alpha * wavelet_term`` to the generator side only."""
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0, got {alpha}")
    if backbone.total_generator_loss is None:
        return backbone
    wavelet_term = ad.as_tensor(wavelet_term)
    weighted = wavelet_term * alpha
    comps = dict(backbone.components)
    comps["G/wavelet"] = weighted
    g_total = backbone.total_generator_loss + weighted
    per_group = {k: (g_total if v is backbone.total_generator_loss else v)
                 for k, v in backbone.per_group.items()}
    raw = dict(backbone.raw)
    raw["wavelet"] = wavelet_term.item()
    return LossBundle(per_group, g_total, backbone.total_discriminator_loss, comps, raw,
                      backbone.outputs)


def _blob_name(group: str, pname: str) -> str:
    return f"{group}__{pname}.i2it"


def save_bundle(bundle: ModelBundle, path) -> None:
    """One tensor blob per named parameter plus ``manifest.txt``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for g in bundle.groups():
        for k, p in g.params.items():
            write_tensor(path / _blob_name(g.name, k), p.data)
            names.append(f"{g.name}/{k}")
    s = bundle.spec
    write_manifest(path / "manifest.txt", {
        "kind": s.kind, "base_channels": s.base_channels, "depth": s.depth,
        "image_channels": s.image_channels, "image_size": s.image_size,
        "params": names, "count": len(names)})


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    m = read_manifest(path / "manifest.txt")
    try:
        spec = BackboneSpec(m["kind"], int(m["base_channels"]), int(m["depth"]),
                            int(m["image_channels"]), int(m["image_size"]))
        names = [n for n in m["params"].split(",") if n]
        count = int(m["count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad checkpoint manifest: {exc}", field="manifest") from None
    if count != len(names):
        raise FormatError(f"count={count} but {len(names)} params listed", field="count")
    state = {}
    for name in names:
        group, pname = name.split("/", 1)
        state[name] = read_tensor(path / _blob_name(group, pname))
    bundle = build_bundle(spec, 0)
    bundle.load_state(state)
    return bundle
