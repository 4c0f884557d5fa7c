"""Adam, sharpness-aware minimization for GAN groups, and the alpha ramp."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamGroup, Tensor
from .errors import ConfigurationError, DimensionError, TrainingDivergenceError

ZERO_GRAD_NORM = 1e-12


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(state: AdamState, group: ParamGroup, grads: Sequence[np.ndarray],
              direction: str = "descent") -> ParamGroup:
    """Bias-corrected Adam update applied in place; ``ascent`` flips the step sign."""
    if direction not in ("descent", "ascent"):
        raise ConfigurationError(f"direction must be descent or ascent, got {direction!r}")
    params = group.tensors()
    if len(grads) != len(params):
        raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters",
                             axis="params")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise DimensionError(f"gradient shape {np.shape(g)} vs parameter {p.shape}")
    if state.m is None:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    sign = -1.0 if direction == "descent" else 1.0
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data += sign * state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return group


def global_norm(arrays: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def sam_epsilon(grads: Sequence[np.ndarray], rho: float) -> list[np.ndarray]:
    """``rho * g / ||g||`` with one L2 norm over the whole group (zero if ``g`` vanishes)."""
    if rho < 0:
        raise ConfigurationError(f"rho must be >= 0, got {rho}")
    norm = global_norm(grads)
    if norm < ZERO_GRAD_NORM:
        return [np.zeros_like(g) for g in grads]
    scale = rho / norm
    return [g * scale for g in grads]


@dataclass
class SamConfig:
    rho_g: list[float] = field(default_factory=lambda: [0.05])
    rho_d: list[float] = field(default_factory=lambda: [0.05])
    enabled: bool = True

    def __post_init__(self):
        if any(r < 0 for r in [*self.rho_g, *self.rho_d]):
            raise ConfigurationError("all rho values must be >= 0")

    @classmethod
    def uniform(cls, rho: float, n_generators: int, n_discriminators: int,
                enabled: bool = True) -> "SamConfig":
        return cls([rho] * n_generators, [rho] * n_discriminators, enabled)


@dataclass
class RampSchedule:
    alpha_max: float = 0.15
    ramp_steps: int = 1000
    shape: str = "linear"

    def __post_init__(self):
        if self.alpha_max < 0:
            raise ConfigurationError("alpha_max must be >= 0")
        if self.ramp_steps < 0:
            raise ConfigurationError("ramp_steps must be >= 0")
        if self.shape != "linear":
            raise ConfigurationError(f"unsupported ramp shape {self.shape!r}")


def alpha_at(schedule: RampSchedule, t: int) -> float:
    if t < 0:
        raise ConfigurationError(f"step must be >= 0, got {t}")
    if t >= schedule.ramp_steps:
        return schedule.alpha_max
    return schedule.alpha_max * t / schedule.ramp_steps


@dataclass
class TrainStepReport:
    step: int
    losses: dict[str, float]
    evaluations: Counter
    eps_norms: dict[str, float]
    grad_norms: dict[str, float]


LossFn = Callable[[object, object, str], "object"]


def _check_finite(loss: Tensor, step: int, group: str) -> None:
    v = float(loss.data)
    if not np.isfinite(v):
        raise TrainingDivergenceError(step, group, value=v)


def _phase(bundle, batch, losses: LossFn, groups: list[ParamGroup], rhos: list[float],
           use_sam: bool, part: str, states: dict[str, AdamState], direction: str,
           report: TrainStepReport) -> None:
    """One optimizer phase over ``groups``; every group's update starts from the same weights."""
    base = losses(bundle, batch, part)
    for g in groups:
        _check_finite(base.per_group[g.name], report.step, g.name)
    report.losses.update(base.values())
    grads = {g.name: ad.backward(base.per_group[g.name], [g])[g.name] for g in groups}
    for g in groups:
        report.evaluations[g.name] += 1
        report.grad_norms[g.name] = global_norm(grads[g.name])

    updates = grads
    if use_sam:
        updates = {}
        for g, rho in zip(groups, rhos):
            eps = sam_epsilon(grads[g.name], rho)
            report.eps_norms[g.name] = global_norm(eps)
            saved = g.snapshot()
            for p, e in zip(g.tensors(), eps):
                p.data += e
            try:
                perturbed = losses(bundle, batch, part)
                _check_finite(perturbed.per_group[g.name], report.step, g.name)
                updates[g.name] = ad.backward(perturbed.per_group[g.name], [g])[g.name]
            finally:
                # Restore from the copy: (w + eps) - eps is not bit-exact.
                g.load(saved)
            report.evaluations[g.name] += 1
    for g in groups:
        adam_step(states[g.name], g, updates[g.name], direction)


def sam_gan_train_step(bundle, batch, losses: LossFn, sam: SamConfig,
                       states: dict[str, AdamState], step: int = 0,
                       sam_discriminators: bool = True) -> TrainStepReport:
    """One alternating SAM-GAN iteration: every generator, then every discriminator.

    ``losses(bundle, batch, part)`` must rebuild a LossBundle from the current
    parameters; ``part`` is ``"generator"`` or ``"discriminator"``.  With SAM
    on, each group costs two evaluations: one at ``w`` (shared by all groups of
    the phase) and one at its own ``w + eps``.  Discriminators descend on their
    minimization-form log-loss, which is the ascent on the GAN objective.
    """
    if len(sam.rho_g) != len(bundle.generators) or len(sam.rho_d) != len(bundle.discriminators):
        raise ConfigurationError("one rho per generator and per discriminator is required")
    report = TrainStepReport(step, {}, Counter(), {}, {})
    _phase(bundle, batch, losses, bundle.generators, sam.rho_g, sam.enabled, "generator",
           states, "descent", report)
    _phase(bundle, batch, losses, bundle.discriminators, sam.rho_d,
           sam.enabled and sam_discriminators, "discriminator", states, "descent", report)
    return report


def _as_params(params) -> list[Tensor]:
    if isinstance(params, ParamGroup):
        return params.tensors()
    out: list[Tensor] = []
    for item in params:
        out.extend(item.tensors() if isinstance(item, ParamGroup) else [item])
    return out


def _value(loss) -> float:
    return float(loss.data) if isinstance(loss, Tensor) else float(loss)


def sharpness_probe(params, loss_closure: Callable[[], Tensor], rho: float, n_dirs: int,
                    seed: int) -> float:
    """Lower bound on ``max_{||e|| <= rho} L(w + e) - L(w)``.

    Tries ``n_dirs`` random directions of norm ``rho`` (global norm over all
    tensors) plus the normalized-gradient direction.  Parameters are restored
    bit-exactly afterwards.
    """
    if rho <= 0:
        raise ConfigurationError("rho must be > 0")
    if n_dirs < 1:
        raise ConfigurationError("n_dirs must be >= 1")
    tensors = _as_params(params)
    saved = [t.data.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    base = loss_closure()
    l0 = _value(base)
    directions = []
    for _ in range(n_dirs):
        d = [rng.standard_normal(t.shape) for t in tensors]
        norm = global_norm(d)
        directions.append([x * (rho / norm) for x in d])
    if isinstance(base, Tensor) and base.requires_grad:
        directions.append(sam_epsilon(ad.grad(base, tensors), rho))
    best = -np.inf
    try:
        for d in directions:
            for t, s, e in zip(tensors, saved, d):
                t.data[...] = s + e
            best = max(best, _value(loss_closure()) - l0)
    finally:
        for t, s in zip(tensors, saved):
            t.data[...] = s
    return float(best)
