"""Experiment configuration, surrogate extraction per ablation arm, evaluation and reports.

Arms:

============  =====================  =============
arm           generator objective    optimizer
============  =====================  =============
baseline      backbone loss          Adam
wavelet_only  backbone + alpha*L_w   Adam
sam_only      backbone loss          SAM-GAN
full          backbone + alpha*L_w   SAM-GAN
============  =====================  =============

Every emitted file is a pure function of (config, seed); wall-clock timings
only go to the log.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbones import (BackboneSpec, ModelBundle, attack_total_loss, backbone_loss,
                        build_bundle, save_bundle)
from .errors import ConfigurationError, TrainingDivergenceError
from .metrics import (FeatureEmbedder, MetricReport, r_capability, r_fidelity,
                      reports_to_csv, reports_to_text)
from .sam import AdamState, RampSchedule, SamConfig, alpha_at, sam_gan_train_step, sharpness_probe
from .tensor_io import format_value, read_manifest, write_manifest, write_ppm
from .victim import (TASKS, Dataset, DomainParams, TaskSpec, VictimConfig, VictimOracle,
                     gen_dataset, save_dataset, train_victim)
from .wavelet import WaveletConfig, wavelet_reg_loss

log = logging.getLogger(__name__)

ARMS = ("baseline", "wavelet_only", "sam_only", "full")
ARM_FLAGS = {  # (wavelet term, SAM)
    "baseline": (False, False),
    "wavelet_only": (True, False),
    "sam_only": (False, True),
    "full": (True, True),
}
BACKBONES = ("pix2pix", "cyclegan")


@dataclass
class ExperimentConfig:
    task: str = "sharpen"
    shift: float = 1.0
    budget: int = 2000
    backbone: str = "pix2pix"
    p: int = 2
    rho_g: float = 0.05
    rho_d: float = 0.05
    sam_discriminators: bool = True
    alpha_max: float = 0.15
    ramp_steps: int = 500
    lr: float = 2e-4
    batch_size: int = 16
    steps: int = 1000  # sized so a 2-arm x 2-seed ablation fits the desk runtime budget
    epochs: int = 0  # > 0 overrides steps with epochs * ceil(budget / batch_size)
    seeds: list[int] = field(default_factory=lambda: [0])
    arms: list[str] = field(default_factory=lambda: ["baseline", "full"])
    image_size: int = 32
    channels: int = 1
    base_channels: int = 8
    depth: int = 2
    n_victim: int = 500
    n_test: int = 200
    victim_lr: float = 1e-3
    victim_max_steps: int = 1500
    victim_l1_threshold: float | None = None  # None: per-task default
    probe_size: int = 64
    probe_rho: float = 0.05
    probe_dirs: int = 8
    curve_every: int = 10
    n_triptychs: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ExperimentConfig":
        def need(cond: bool, msg: str):
            if not cond:
                raise ConfigurationError(msg)

        need(self.task in TASKS, f"task must be one of {TASKS}, got {self.task!r}")
        need(0.0 <= self.shift <= 1.0, f"shift must lie in [0, 1], got {self.shift}")
        need(self.budget >= 1, "budget must be >= 1")
        need(self.backbone in BACKBONES, f"backbone must be one of {BACKBONES}")
        need(self.p >= 1, "p must be >= 1")
        need(self.rho_g >= 0 and self.rho_d >= 0, "rho values must be >= 0")
        need(self.alpha_max >= 0, "alpha_max must be >= 0")
        need(self.ramp_steps >= 0, "ramp_steps must be >= 0")
        need(self.lr > 0 and self.victim_lr > 0, "learning rates must be > 0")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.steps >= 1, "steps must be >= 1")
        need(self.epochs >= 0, "epochs must be >= 0")
        need(len(self.seeds) >= 1, "at least one seed is required")
        need(len(set(self.seeds)) == len(self.seeds), "seeds must be distinct")
        need(all(s >= 0 for s in self.seeds), "seeds must be >= 0")
        need(len(self.arms) >= 1, "at least one arm is required")
        need(all(a in ARMS for a in self.arms), f"arms must be drawn from {ARMS}")
        need(len(set(self.arms)) == len(self.arms), "arms must be distinct")
        need(self.channels in (1, 3), "channels must be 1 or 3")
        need(self.base_channels >= 1 and self.depth >= 1, "base_channels, depth must be >= 1")
        for what, k in (("depth", self.depth), ("p", self.p)):
            need(self.image_size % 2 ** k == 0, f"image_size must be divisible by 2^{what}")
        need(self.n_victim >= 1 and self.victim_max_steps >= 1, "victim settings must be >= 1")
        need(self.victim_l1_threshold is None or self.victim_l1_threshold > 0,
             "victim_l1_threshold must be > 0")
        need(self.n_test >= self.embed_dim + 1,
             f"n_test must be >= {self.embed_dim + 1} for the Frechet distance")
        need(1 <= self.probe_size, "probe_size must be >= 1")
        need(self.probe_rho > 0 and self.probe_dirs >= 1, "probe_rho > 0 and probe_dirs >= 1")
        need(self.curve_every >= 1 and self.n_triptychs >= 0, "bad reporting settings")
        return self

    embed_dim = 16

    @property
    def total_steps(self) -> int:
        if self.epochs > 0:
            return self.epochs * math.ceil(self.budget / self.batch_size)
        return self.steps

    @property
    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task, self.image_size, self.channels)

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(self.backbone, self.base_channels, self.depth, self.channels,
                            self.image_size)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_manifest(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_mapping(cls, raw: dict[str, str], base: "ExperimentConfig | None" = None
                     ) -> "ExperimentConfig":
        """Build from string values (config file or CLI flags) on top of ``base``."""
        base = base or cls()
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        changes = {}
        for key, value in raw.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigurationError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, kinds[key], value)
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(read_manifest(path))


def _coerce(key: str, kind: str, value):
    if not isinstance(value, str):
        return value
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "float | None":
            return None if value.strip().lower() in ("", "none") else float(value)
        if kind == "bool":
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind == "list[int]":
            return [int(v) for v in value.split(",") if v.strip()]
        if kind == "list[str]":
            return [v.strip() for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"bad value {value!r} for {key} ({kind})") from None
    return value


# data and victim per seed ---------------------------------------------------

SEED_ROLES = ("victim_data", "attack_data", "test_data", "victim_init", "surrogate_init")


def derived_seed(seed: int, role: str) -> int:
    """Disjoint per-role seeds, so the surrogate never shares the victim's initialization."""
    return len(SEED_ROLES) * seed + SEED_ROLES.index(role)


@dataclass
class SeedData:
    seed: int
    oracle: VictimOracle
    victim_data: Dataset
    attack: Dataset  # inputs x, targets F_V(x): the attack set D_A
    test: Dataset  # held-out victim-domain inputs and ground-truth targets
    victim_test: np.ndarray  # F_V on test inputs, from a lab-side oracle

    @property
    def queries_used(self) -> int:
        return self.oracle.used


def build_victim(cfg: ExperimentConfig, seed: int) -> tuple[VictimOracle, Dataset]:
    task = cfg.task_spec
    vdata = gen_dataset(task, DomainParams.from_shift(0.0), cfg.n_victim,
                        derived_seed(seed, "victim_data"))
    vcfg = VictimConfig(lr=cfg.victim_lr, batch_size=cfg.batch_size,
                        max_steps=cfg.victim_max_steps, l1_threshold=cfg.victim_l1_threshold,
                        base_channels=cfg.base_channels,
                        depth=cfg.depth, seed=derived_seed(seed, "victim_init"),
                        budget=cfg.budget)
    return train_victim(task, vdata, vcfg), vdata


def query_attack_set(oracle: VictimOracle, inputs: np.ndarray, manifest: dict) -> Dataset:
    """Charge one query per attacker input and pair it with the victim's answer."""
    outputs = oracle.query_all(inputs)
    m = dict(manifest)
    m["labels"] = "victim"
    return Dataset(inputs, outputs, m)


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedData:
    task = cfg.task_spec
    oracle, vdata = build_victim(cfg, seed)
    raw = gen_dataset(task, DomainParams.from_shift(cfg.shift), cfg.budget,
                      derived_seed(seed, "attack_data"))
    attack = query_attack_set(oracle, raw.inputs, raw.manifest)
    test = gen_dataset(task, DomainParams.from_shift(0.0), cfg.n_test,
                       derived_seed(seed, "test_data"))
    victim_test = oracle.fork(len(test)).query_all(test.inputs)
    return SeedData(seed, oracle, vdata, attack, test, victim_test)


# surrogate training ----------------------------------------------------------

@dataclass
class ArmRun:
    arm: str
    seed: int
    bundle: ModelBundle
    curve: list[dict] = field(default_factory=list)
    steps: int = 0
    final_probe_loss: float = float("nan")
    wall_time: float = 0.0


def probe_batch(attack: Dataset, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    n = min(cfg.probe_size, len(attack))
    return attack.inputs[:n], attack.targets[:n]


def probe_loss(bundle: ModelBundle, x: np.ndarray, y: np.ndarray) -> ad.Tensor:
    """Surrogate objective used for sharpness and landscapes: L1(F_A(x), F_V(x))."""
    return ad.l1_loss(bundle.generate(x), ad.as_tensor(y))


def ignored_settings(arm: str, given: set[str]) -> list[str]:
    """Explicitly supplied settings that ``arm`` does not use."""
    use_wavelet, use_sam = ARM_FLAGS[arm]
    unused = set()
    if not use_sam:
        unused |= {"rho_g", "rho_d", "sam_discriminators"}
    if not use_wavelet:
        unused |= {"alpha_max", "ramp_steps", "p"}
    return sorted(unused & given)


def make_loss_fn(use_wavelet: bool, wcfg: WaveletConfig, alpha_ref: list[float]):
    def losses(bundle, batch, part):
        lb = backbone_loss(bundle, batch[0], batch[1], part=part)
        if use_wavelet and part != "discriminator":
            lw = wavelet_reg_loss(lb.outputs["fake"], batch[1], wcfg)
            lb = attack_total_loss(lb, lw, alpha_ref[0])
        return lb
    return losses


def train_arm(cfg: ExperimentConfig, arm: str, attack: Dataset, seed: int) -> ArmRun:
    if arm not in ARMS:
        raise ConfigurationError(f"unknown arm {arm!r}")
    use_wavelet, use_sam = ARM_FLAGS[arm]
    t0 = time.perf_counter()
    bundle = build_bundle(cfg.backbone_spec(), derived_seed(seed, "surrogate_init"))
    spec = bundle.spec
    sam = SamConfig([cfg.rho_g] * spec.n_generators, [cfg.rho_d] * len(bundle.discriminators),
                    enabled=use_sam)
    states = {g.name: AdamState(lr=cfg.lr) for g in bundle.groups()}
    ramp = RampSchedule(cfg.alpha_max, cfg.ramp_steps)
    alpha_ref = [0.0]
    losses = make_loss_fn(use_wavelet, WaveletConfig(cfg.p), alpha_ref)
    run = ArmRun(arm, seed, bundle)
    rng = np.random.default_rng([seed, 2])
    n = len(attack)
    bs = min(cfg.batch_size, n)
    order, pos = rng.permutation(n), 0
    x_all, y_all = attack.inputs, attack.targets
    total = cfg.total_steps
    for step in range(total):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = np.sort(order[pos:pos + bs])
        pos += bs
        alpha_ref[0] = alpha_at(ramp, step) if use_wavelet else 0.0
        try:
            report = sam_gan_train_step(bundle, (x_all[idx], y_all[idx]), losses, sam, states,
                                        step, cfg.sam_discriminators)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(exc.step, exc.group, arm, seed, exc.value) from None
        if step % cfg.curve_every == 0 or step == total - 1:
            row = {"step": step, "alpha": alpha_ref[0]}
            row.update(report.losses)
            run.curve.append(row)
    run.steps = total
    px, py = probe_batch(attack, cfg)
    run.final_probe_loss = probe_loss(bundle, px, py).item()
    run.wall_time = time.perf_counter() - t0
    log.info("arm=%s seed=%d trained %d steps in %.1fs (probe L1 %.4f)", arm, seed, total,
             run.wall_time, run.final_probe_loss)
    return run


# evaluation ------------------------------------------------------------------

def generate_all(bundle: ModelBundle, x: np.ndarray, chunk: int = 64) -> np.ndarray:
    return np.concatenate([bundle.generate(x[i:i + chunk]).data for i in range(0, len(x), chunk)])


def evaluate_outputs(outputs: np.ndarray, victim_outputs: np.ndarray, truth: np.ndarray,
                     seed: int, channels: int = 1) -> list[MetricReport]:
    emb = FeatureEmbedder(channels=channels, seed=0)
    return [
        r_fidelity(outputs, victim_outputs, "l1"),
        r_fidelity(outputs, victim_outputs, "psnr"),
        r_fidelity(outputs, victim_outputs, "frechet", emb),
        r_fidelity(outputs, victim_outputs, "kernel", emb, seed),
        r_capability(outputs, truth, "l1_to_oracle"),
        r_capability(outputs, truth, "frechet", emb),
        r_capability(outputs, truth, "kernel", emb, seed),
    ]


def measure_sharpness(bundle: ModelBundle, attack: Dataset, cfg: ExperimentConfig,
                      seed: int) -> float:
    px, py = probe_batch(attack, cfg)
    return sharpness_probe(bundle.generators, lambda: probe_loss(bundle, px, py), cfg.probe_rho,
                           cfg.probe_dirs, seed)


@dataclass
class ArmResult:
    arm: str
    seed: int
    reports: list[MetricReport]
    sharpness: float
    final_probe_loss: float
    steps: int
    queries: int
    curve: list[dict]
    wall_time: float = 0.0

    def metric(self, name: str, mode: str) -> float:
        for r in self.reports:
            if r.name == name and r.mode == mode:
                return r.value
        raise KeyError(f"{name}.{mode}")

    def row(self) -> dict:
        wav, sam = ARM_FLAGS[self.arm]
        row = {"seed": self.seed, "arm": self.arm, "wavelet": "yes" if wav else "no",
               "sam": "yes" if sam else "no"}
        for r in self.reports:
            row[f"{r.name}.{r.mode}"] = r.value
            if r.std is not None:
                row[f"{r.name}.{r.mode}.std"] = r.std
        row["sharpness"] = self.sharpness
        row["final_probe_loss"] = self.final_probe_loss
        row["steps"] = self.steps
        row["queries"] = self.queries
        return row


def evaluate_arm(run: ArmRun, data: SeedData, cfg: ExperimentConfig) -> ArmResult:
    outputs = generate_all(run.bundle, data.test.inputs)
    reports = evaluate_outputs(outputs, data.victim_test, data.test.targets, run.seed,
                               cfg.channels)
    sharp = measure_sharpness(run.bundle, data.attack, cfg, run.seed)
    return ArmResult(run.arm, run.seed, reports, sharp, run.final_probe_loss, run.steps,
                     data.queries_used, run.curve, run.wall_time)


# artifacts -------------------------------------------------------------------

def write_triptychs(path: Path, inputs: np.ndarray, victim_out: np.ndarray,
                    attack_out: np.ndarray, n: int) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for i in range(min(n, len(inputs))):
        write_ppm(path / f"triptych_{i:02d}.ppm", [inputs[i], victim_out[i], attack_out[i]])


def write_arm(path: Path, run: ArmRun, result: ArmResult, data: SeedData,
              cfg: ExperimentConfig) -> None:
    path.mkdir(parents=True, exist_ok=True)
    save_bundle(run.bundle, path / "checkpoint")
    (path / "curve.csv").write_text(reports_to_csv(run.curve))
    extra = [f"arm={run.arm}", f"seed={run.seed}", f"steps={run.steps}",
             f"queries={result.queries}", f"final_probe_loss={run.final_probe_loss!r}",
             f"sharpness={result.sharpness!r}", f"sharpness.rho={cfg.probe_rho!r}",
             f"sharpness.dirs={cfg.probe_dirs}"]
    (path / "report.txt").write_text("\n".join(extra) + "\n" + reports_to_text(result.reports))
    outputs = generate_all(run.bundle, data.test.inputs[:cfg.n_triptychs])
    write_triptychs(path, data.test.inputs, data.victim_test, outputs, cfg.n_triptychs)


def write_seed_data(path: Path, data: SeedData) -> None:
    path.mkdir(parents=True, exist_ok=True)
    data.oracle.save(path / "victim")
    save_dataset(data.attack, path / "attack_data")
    save_dataset(data.test, path / "test_data")
    write_manifest(path / "queries.txt", {"used": data.oracle.used,
                                          "budget": data.oracle.budget})


@dataclass
class AblationResult:
    config: ExperimentConfig
    results: list[ArmResult]

    def by_arm(self, arm: str) -> list[ArmResult]:
        return [r for r in self.results if r.arm == arm]

    def table(self) -> str:
        return reports_to_csv([r.row() for r in self.results])

    def summary(self) -> str:
        rows = []
        for arm in self.config.arms:
            rs = self.by_arm(arm)
            base = rs[0].row()
            row = {k: base[k] for k in ("arm", "wavelet", "sam")}
            row["n_seeds"] = len(rs)
            for key, val in base.items():
                if isinstance(val, float):
                    row[f"mean.{key}"] = float(np.mean([r.row()[key] for r in rs]))
            rows.append(row)
        return reports_to_csv(rows)


def run_ablation(cfg: ExperimentConfig, out: Path | None = None) -> AblationResult:
    """All configured arms on identical victim and attack data for every seed."""
    cfg.validate()
    results = []
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "config.txt", cfg.to_manifest())
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        data = prepare_seed(cfg, seed)
        log.info("seed=%d victim and attack set ready in %.1fs (%d queries)", seed,
                 time.perf_counter() - t0, data.oracle.used)
        if out is not None:
            write_seed_data(out / f"seed_{seed}", data)
        for arm in cfg.arms:
            run = train_arm(cfg, arm, data.attack, seed)
            res = evaluate_arm(run, data, cfg)
            results.append(res)
            if out is not None:
                write_arm(out / f"seed_{seed}" / arm, run, res, data, cfg)
    result = AblationResult(cfg, results)
    if out is not None:
        (out / "ablation.csv").write_text(result.table())
        (out / "summary.csv").write_text(result.summary())
    return result


__all__ = ["ARMS", "ARM_FLAGS", "ExperimentConfig", "SeedData", "ArmRun", "ArmResult",
           "AblationResult", "prepare_seed", "train_arm", "evaluate_arm", "run_ablation",
           "probe_loss", "probe_batch", "query_attack_set", "build_victim", "format_value"]
