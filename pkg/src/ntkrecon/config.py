"""Experiment configuration: presets, strict loading and the run manifest."""
from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .fileio import sha256_file


class ConfigError(ValueError):
    pass


@dataclass
class TaskSection:
    kind: str = "mnist_odd_even"
    n_per_class: int = 10
    normalization: str = "global_mean"
    unit_sphere: bool = False
    test_limit: int | None = 2000      # test examples used for accuracies (None = all)


@dataclass
class ArchSection:
    width: int = 1024
    activation: str = "relu"


@dataclass
class TrainSection:
    dynamics: str = "standard"
    lr_per_example: float = 2e-7
    momentum: float = 0.9
    max_iters: int = 100_000
    early_stop_loss: float | None = 1e-10
    log_every: int = 1000


@dataclass
class AttackSection:
    m_factor: int = 2
    iters: int = 30_000
    adam_lr: float = 0.02
    temp_start: float = 10.0
    temp_end: float = 200.0
    temp_update_every: int = 1
    kernel_choice: str = "final"
    batch_size: int | None = None
    image_init_std: float = 0.2


@dataclass
class SweepSection:
    widths: list = field(default_factory=lambda: [256, 1024])
    n_per_class: list = field(default_factory=lambda: [10, 50])
    dynamics: list = field(default_factory=lambda: ["standard", "linearized"])


@dataclass
class OnionSection:
    n_start: int = 900
    remove: int = 20
    iterations: int = 2
    balanced: bool = False
    width_coeff: float = 55.0


@dataclass
class DistillSection:
    n_per_class: int = 250
    m: int = 20
    iters: int = 50_000
    lr: float = 0.001
    learn_labels: bool = False
    methods: list = field(default_factory=lambda: ["full", "random", "kip", "rkip"])
    eval_modes: list = field(default_factory=lambda: ["infinite"])
    eval_width: int = 4096
    eval_max_iters: int = 1_000_000
    lr_per_example: float = 6e-6
    attack_run: str | None = None       # output dir of an attack run (for rkip_finite)
    kernel_weight_variance: float = 1.0  # analytic kernel used by kip, rkip and "infinite"
    kernel_bias_variance: float = 1.0


@dataclass
class RidgeSection:
    mode: str = "relative"
    lam: float = 1e-10


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    arch: ArchSection = field(default_factory=ArchSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    onion: OnionSection = field(default_factory=OnionSection)
    distill: DistillSection = field(default_factory=DistillSection)
    ridge: RidgeSection = field(default_factory=RidgeSection)
    seeds: list = field(default_factory=lambda: [0])
    data_dir: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self, sections=None, **extra) -> str:
        """Digest of the named config sections (all by default) plus extra values."""
        d = self.to_dict()
        if sections is not None:
            d = {k: d[k] for k in sections}
        d.update(extra)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


PRESETS = {
    "desk": {},
    "paper": {
        "arch": {"width": 4096},
        "train": {"max_iters": 1_000_000},
        "attack": {"iters": 80_000},
        "onion": {"n_start": 900, "iterations": 20},
        "distill": {"eval_modes": ["standard", "linearized", "infinite"]},
        "seeds": [0, 1, 2, 3, 4, 5, 6],
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    for k in data:
        if k not in known:
            raise ConfigError(f"unknown config key '{path + k}'")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in data:
            continue
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), data[name], f"{path}{name}.")
        else:
            kwargs[name] = data[name]
    return cls(**kwargs)


def build_config(data: dict | None = None, profile: str = "desk") -> ExperimentConfig:
    if profile not in PRESETS:
        raise ConfigError(f"unknown profile {profile!r}")
    merged = _merge(PRESETS[profile], data or {})
    cfg = _build(ExperimentConfig, merged, "")
    validate(cfg)
    return cfg


def load_config(path=None, profile: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return build_config(_merge(data, overrides or {}), profile)


def validate(cfg: ExperimentConfig):
    """Cross-field checks, reported with the offending key."""
    from .data import TaskSpec
    try:
        TaskSpec(cfg.task.kind, cfg.task.n_per_class, 0, cfg.task.normalization, cfg.task.unit_sphere)
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from exc
    checks = [
        (cfg.arch.width >= 1, "arch.width must be >= 1"),
        (cfg.arch.activation in ("relu", "softplus"), "arch.activation must be relu or softplus"),
        (cfg.train.dynamics in ("standard", "linearized"), "train.dynamics must be standard or linearized"),
        (cfg.train.lr_per_example > 0, "train.lr_per_example must be positive"),
        (0 <= cfg.train.momentum < 1, "train.momentum must lie in [0, 1)"),
        (cfg.train.max_iters >= 1, "train.max_iters must be >= 1"),
        (cfg.attack.m_factor >= 1, "attack.m_factor must be >= 1"),
        (cfg.attack.iters >= 0, "attack.iters must be >= 0"),
        (cfg.attack.kernel_choice in ("final", "initial", "hybrid"), "attack.kernel_choice is invalid"),
        (bool(cfg.sweep.widths) and bool(cfg.sweep.n_per_class) and bool(cfg.sweep.dynamics),
         "sweep axes must be non-empty"),
        (all(d in ("standard", "linearized") for d in cfg.sweep.dynamics), "sweep.dynamics is invalid"),
        (cfg.onion.n_start >= cfg.onion.remove >= 1, "onion.n_start must be >= onion.remove >= 1"),
        (cfg.distill.m >= 1, "distill.m must be >= 1"),
        (cfg.distill.kernel_weight_variance > 0 and cfg.distill.kernel_bias_variance >= 0,
         "distill kernel variances must be weight > 0 and bias >= 0"),
        (set(cfg.distill.methods) <= {"full", "random", "kip", "rkip", "rkip_finite"},
         "distill.methods has an unknown method"),
        (set(cfg.distill.eval_modes) <= {"standard", "linearized", "infinite"},
         "distill.eval_modes has an unknown mode"),
        (cfg.ridge.mode in ("none", "absolute", "relative"), "ridge.mode is invalid"),
        (bool(cfg.seeds), "seeds must be non-empty"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


# ---------------------------------------------------------------------------

class Manifest:
    """Per-run record of completed stages and the files each produced.

    A stage counts as done when it was recorded with the same stage hash (the
    config sections it depends on) by the same package sources, and every file
    it listed still has the recorded checksum.
    """

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / "manifest.json"
        self.code = code_version()
        self.data = {"stages": {}}
        if self.path.exists():
            self.data = json.loads(self.path.read_text())

    def done(self, stage: str, stage_hash: str) -> bool:
        rec = self.data["stages"].get(stage)
        if rec is None or rec.get("hash") != stage_hash or rec.get("code_version") != self.code:
            return False
        for name, digest in rec["files"].items():
            p = self.dir / name
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def record(self, stage: str, stage_hash: str, files, info=None):
        self.data["stages"][stage] = {
            "hash": stage_hash,
            "code_version": self.code,
            "files": {str(Path(f).relative_to(self.dir)): sha256_file(f) for f in files},
            "info": info or {},
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True))

    def info(self, stage: str) -> dict:
        return self.data["stages"][stage]["info"]


def code_version() -> str:
    """Hash of the package sources, so results from older code never count as done."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]
