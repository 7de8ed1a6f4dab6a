import hashlib
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from services.distill import IcTrainStrategy, OptimizerConfig, PkdSchedule, StrategyVariant
from services.errors import ConfigError, DatasetError, DistillError
from services.moddata import MODALITIES, GenSpec, Modality
from services.netmodel import DEFAULT_WIDTHS, NUM_BLOCKS
from services.wise import ISO_SPREAD_LIMIT

TOOL_VERSION = "0.3.0"
PRESET_NAMES = ("toy", "paper")


@dataclass(frozen=True)
class AppConfig:
    base_dir: Path
    configs_dir: Path
    runs_dir: Path
    logs_dir: Path

    threads: int
    log_level: str


def load_config() -> AppConfig:
    """Process settings from the environment and the repository-level .env."""
    base_dir = Path(__file__).resolve().parents[1]
    load_dotenv(dotenv_path=base_dir / ".env")

    try:
        threads = max(1, int(os.environ.get("CASCADE_KD_THREADS", "1")))
    except ValueError:
        raise ConfigError(f"CASCADE_KD_THREADS must be an integer, got {os.environ['CASCADE_KD_THREADS']!r}")

    return AppConfig(
        base_dir=base_dir,
        configs_dir=base_dir / "configs",
        runs_dir=Path(os.environ.get("CASCADE_KD_RUNS_DIR", base_dir / "runs")),
        logs_dir=base_dir / "logs",
        threads=threads,
        log_level=os.environ.get("CASCADE_KD_LOG_LEVEL", "INFO").upper(),
    )


@dataclass(frozen=True)
class ModelConfig:
    widths_mv: Tuple[int, ...] = DEFAULT_WIDTHS[Modality.MV]
    widths_r: Tuple[int, ...] = DEFAULT_WIDTHS[Modality.R]
    widths_i: Tuple[int, ...] = DEFAULT_WIDTHS[Modality.IFRAME]
    ic_hidden_ratio: float = 0.5

    def widths(self) -> Dict[Modality, Tuple[int, ...]]:
        return {Modality.MV: self.widths_mv, Modality.R: self.widths_r, Modality.IFRAME: self.widths_i}


@dataclass(frozen=True)
class TrainingConfig:
    lr_mv: float = 0.01
    lr_r: float = 0.005
    lr_i: float = 0.003
    weight_decay: float = 1e-4
    eps: float = 1e-3
    batch_size: int = 32
    backbone_epochs: int = 100
    backbone_milestones: Tuple[int, ...] = (30, 54, 78)
    gamma: float = 0.1

    def lr(self, modality: Modality) -> float:
        return {Modality.MV: self.lr_mv, Modality.R: self.lr_r, Modality.IFRAME: self.lr_i}[modality]


@dataclass(frozen=True)
class IcConfig:
    strategy: str = "pkd"
    temperature: float = 1.0
    epochs: int = 90
    boundary_k: int = 30
    boundary_t: int = 60
    milestones: Tuple[int, ...] = (30, 60, 90)
    reset_on_phase: bool = True


@dataclass(frozen=True)
class PolicyConfig:
    chain_order: Tuple[str, ...] = ("r", "mv", "iframe")
    tau: float = 0.95
    tau_grid: str = "0:1.01:0.01"
    fit_split: str = "train"
    iso_target_fraction: float = 0.4
    iso_tolerance: float = 0.02


@dataclass(frozen=True)
class ProbeConfig:
    radius: float = 1.0
    resolution: int = 21
    eval_split: str = "train"


@dataclass(frozen=True)
class AblationConfig:
    counts: Tuple[int, ...] = (1, 2, 3, 4)
    tau: float = 0.9999


@dataclass(frozen=True)
class RunConfig:
    seeds: Tuple[int, ...] = (0, 1, 2)
    splits: Tuple[int, ...] = (1, 2, 3)
    output_dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    data: GenSpec = field(default_factory=GenSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    ics: IcConfig = field(default_factory=IcConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def gen_spec(self, seed: int) -> GenSpec:
        return replace(self.data, seed=seed)

    def schedule(self) -> PkdSchedule:
        return PkdSchedule(self.ics.epochs, self.ics.boundary_k, self.ics.boundary_t)

    def strategy(self, variant: Optional[StrategyVariant] = None) -> IcTrainStrategy:
        variant = variant or StrategyVariant.parse(self.ics.strategy)
        schedule = self.schedule() if variant.uses_schedule else None
        return IcTrainStrategy(variant=variant, temperature=self.ics.temperature, schedule=schedule)

    def backbone_optim(self) -> Dict[Modality, OptimizerConfig]:
        t = self.training
        return {
            m: OptimizerConfig(t.lr(m), t.weight_decay, t.eps, t.batch_size, t.backbone_milestones, t.gamma)
            for m in MODALITIES
        }

    def ic_optim(self) -> Dict[Modality, OptimizerConfig]:
        t = self.training
        return {
            m: OptimizerConfig(t.lr(m), t.weight_decay, t.eps, t.batch_size, self.ics.milestones, t.gamma)
            for m in MODALITIES
        }

    def chain_order(self) -> Tuple[Modality, ...]:
        return tuple(Modality(m) for m in self.policy.chain_order)


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _str_list(text: str) -> Tuple[str, ...]:
    return tuple(v.strip().lower() for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _join(values) -> str:
    return ",".join(str(v) for v in values)


# KEY -> (section, field, parse, format)
_Codec = Tuple[str, str, Callable[[str], object], Callable[[object], str]]
_INT: Tuple = (int, str)
_FLOAT: Tuple = (float, repr)
_STR: Tuple = (str.strip, str)
_BOOL: Tuple = (_bool, lambda v: "true" if v else "false")
_INTS: Tuple = (_int_list, _join)
_STRS: Tuple = (_str_list, _join)

KEYS: Dict[str, _Codec] = {
    "DATA_NUM_CLASSES": ("data", "num_classes", *_INT),
    "DATA_SAMPLES_PER_CLASS": ("data", "samples_per_class", *_INT),
    "DATA_DIM_MV": ("data", "dim_mv", *_INT),
    "DATA_DIM_R": ("data", "dim_r", *_INT),
    "DATA_DIM_I": ("data", "dim_i", *_INT),
    "DATA_SIGMA_MV": ("data", "sigma_mv", *_FLOAT),
    "DATA_SIGMA_R": ("data", "sigma_r", *_FLOAT),
    "DATA_SIGMA_I": ("data", "sigma_i", *_FLOAT),
    "DATA_BLOCK_POOL": ("data", "block_pool", *_INT),
    "DATA_FRAMES_MV": ("data", "frames_mv", *_INT),
    "DATA_FRAMES_R": ("data", "frames_r", *_INT),
    "DATA_FRAMES_I": ("data", "frames_i", *_INT),
    "DATA_SIGNAL_SCALE": ("data", "signal_scale", *_FLOAT),
    "MODEL_WIDTHS_MV": ("model", "widths_mv", *_INTS),
    "MODEL_WIDTHS_R": ("model", "widths_r", *_INTS),
    "MODEL_WIDTHS_I": ("model", "widths_i", *_INTS),
    "MODEL_IC_HIDDEN_RATIO": ("model", "ic_hidden_ratio", *_FLOAT),
    "TRAIN_LR_MV": ("training", "lr_mv", *_FLOAT),
    "TRAIN_LR_R": ("training", "lr_r", *_FLOAT),
    "TRAIN_LR_I": ("training", "lr_i", *_FLOAT),
    "TRAIN_WEIGHT_DECAY": ("training", "weight_decay", *_FLOAT),
    "TRAIN_EPS": ("training", "eps", *_FLOAT),
    "TRAIN_BATCH_SIZE": ("training", "batch_size", *_INT),
    "TRAIN_BACKBONE_EPOCHS": ("training", "backbone_epochs", *_INT),
    "TRAIN_BACKBONE_MILESTONES": ("training", "backbone_milestones", *_INTS),
    "TRAIN_GAMMA": ("training", "gamma", *_FLOAT),
    "IC_STRATEGY": ("ics", "strategy", *_STR),
    "IC_TEMPERATURE": ("ics", "temperature", *_FLOAT),
    "IC_EPOCHS": ("ics", "epochs", *_INT),
    "IC_BOUNDARY_K": ("ics", "boundary_k", *_INT),
    "IC_BOUNDARY_T": ("ics", "boundary_t", *_INT),
    "IC_MILESTONES": ("ics", "milestones", *_INTS),
    "IC_RESET_ON_PHASE": ("ics", "reset_on_phase", *_BOOL),
    "POLICY_CHAIN_ORDER": ("policy", "chain_order", *_STRS),
    "POLICY_TAU": ("policy", "tau", *_FLOAT),
    "POLICY_TAU_GRID": ("policy", "tau_grid", *_STR),
    "POLICY_FIT_SPLIT": ("policy", "fit_split", *_STR),
    "POLICY_ISO_TARGET_FRACTION": ("policy", "iso_target_fraction", *_FLOAT),
    "POLICY_ISO_TOLERANCE": ("policy", "iso_tolerance", *_FLOAT),
    "PROBE_RADIUS": ("probe", "radius", *_FLOAT),
    "PROBE_RESOLUTION": ("probe", "resolution", *_INT),
    "PROBE_EVAL_SPLIT": ("probe", "eval_split", *_STR),
    "ABLATION_COUNTS": ("ablation", "counts", *_INTS),
    "ABLATION_TAU": ("ablation", "tau", *_FLOAT),
    "RUN_SEEDS": ("run", "seeds", *_INTS),
    "RUN_SPLITS": ("run", "splits", *_INTS),
    "RUN_OUTPUT_DIR": ("run", "output_dir", *_STR),
}


def _line_numbers(text: str) -> Dict[str, int]:
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("export "):
            line = line[len("export "):].lstrip()
        if not line or line.startswith("#"):
            continue
        key = line.split("=", 1)[0].strip()
        lines.setdefault(key, lineno)
    return lines


def validate_config(cfg: ExperimentConfig) -> None:
    """Cross-field checks; raises ConfigError with the violated constraint."""
    try:
        cfg.data.validate()
        cfg.schedule()
        cfg.strategy()
    except (DatasetError, DistillError) as e:
        raise ConfigError(str(e))
    for name, widths in (("MODEL_WIDTHS_MV", cfg.model.widths_mv), ("MODEL_WIDTHS_R", cfg.model.widths_r),
                         ("MODEL_WIDTHS_I", cfg.model.widths_i)):
        if len(widths) != NUM_BLOCKS or min(widths) < 1:
            raise ConfigError(f"{name} needs {NUM_BLOCKS} positive widths, got {list(widths)}")
    if not 0 < cfg.model.ic_hidden_ratio <= 1:
        raise ConfigError(f"MODEL_IC_HIDDEN_RATIO must lie in (0, 1], got {cfg.model.ic_hidden_ratio}")
    for name, milestones in (("TRAIN_BACKBONE_MILESTONES", cfg.training.backbone_milestones),
                             ("IC_MILESTONES", cfg.ics.milestones)):
        if list(milestones) != sorted(milestones):
            raise ConfigError(f"{name} must be sorted ascending, got {list(milestones)}")
    if min(cfg.training.lr_mv, cfg.training.lr_r, cfg.training.lr_i) < 0:
        raise ConfigError("learning rates must be >= 0")
    if cfg.training.batch_size < 1:
        raise ConfigError(f"TRAIN_BATCH_SIZE must be >= 1, got {cfg.training.batch_size}")
    if sorted(cfg.policy.chain_order) != sorted(m.value for m in MODALITIES):
        raise ConfigError(f"POLICY_CHAIN_ORDER must list mv, r and iframe once each, got {list(cfg.policy.chain_order)}")
    if cfg.policy.fit_split not in ("train", "test"):
        raise ConfigError(f"POLICY_FIT_SPLIT must be train or test, got {cfg.policy.fit_split!r}")
    if cfg.probe.eval_split not in ("train", "test"):
        raise ConfigError(f"PROBE_EVAL_SPLIT must be train or test, got {cfg.probe.eval_split!r}")
    if cfg.probe.resolution % 2 == 0:
        raise ConfigError(f"PROBE_RESOLUTION must be odd, got {cfg.probe.resolution}")
    if not 0 < cfg.policy.iso_target_fraction <= 1:
        raise ConfigError("POLICY_ISO_TARGET_FRACTION must lie in (0, 1]")
    tol = cfg.policy.iso_tolerance
    if not 0 < tol < 1 or 2 * tol / (1 - tol) > ISO_SPREAD_LIMIT:
        raise ConfigError(
            f"POLICY_ISO_TOLERANCE={tol} lets lateral modes drift more than {ISO_SPREAD_LIMIT:.0%} apart in mean FLOPs"
        )
    if not cfg.run.seeds:
        raise ConfigError("RUN_SEEDS must list at least one seed")
    if not cfg.run.splits or any(s not in (1, 2, 3) for s in cfg.run.splits):
        raise ConfigError(f"RUN_SPLITS must be drawn from 1, 2, 3, got {list(cfg.run.splits)}")


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values = dotenv_values(stream=io.StringIO(text))
    lines = _line_numbers(text)
    sections: Dict[str, Dict[str, object]] = {}
    for key, raw in values.items():
        where = f"{source}:{lines.get(key, '?')}"
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key}")
        if raw is None:
            raise ConfigError(f"{where}: key {key} has no value")
        section, name, parse, _ = KEYS[key]
        try:
            sections.setdefault(section, {})[name] = parse(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key}: {e}")

    defaults = ExperimentConfig()
    cfg = replace(defaults, **{s: replace(getattr(defaults, s), **kw) for s, kw in sections.items()})
    validate_config(cfg)
    return cfg


def parse_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=path.name)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines: List[str] = []
    for key, (section, name, _, fmt) in KEYS.items():
        lines.append(f"{key}={fmt(getattr(getattr(cfg, section), name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:12]


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESET_NAMES:
        raise ConfigError(f"Unknown preset: {name} (expected one of {', '.join(PRESET_NAMES)})")
    return parse_config(load_config().configs_dir / f"{name}.env")

