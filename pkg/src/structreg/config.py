"""Run configuration and the flat key = value config file format.

A config file is INI-style. ``[run]`` holds the base settings; compare
files add ``[arm NAME]`` sections that override base keys per arm, and
grid-search files add a ``[grid]`` section whose values are comma lists.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .regularize import MIX_SCOPES, PSEUDO_LABELERS, STRUCTURAL_LOSSES, TRANSFORMS

REQUIRED_KEYS = ("transform", "beta")

# Keys that determine the data and its labeled/unlabeled split; arms that
# disagree on any of these cannot be compared pairwise.
SPLIT_KEYS = (
    "dataset", "n_train", "n_test", "noise", "data_seed", "blob_centers", "blob_sd",
    "data_path", "test_path", "rescale", "val_fraction", "n_labeled", "split_seed",
)


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; ``where`` names the field or line."""

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class RunConfig:
    transform: str = "emu"
    beta: float = 1.0

    # data
    dataset: str = "two_moons"
    n_train: int = 1000
    n_test: int = 1000
    noise: float = 0.1
    data_seed: int = 0
    blob_centers: str = "0,0;10,0"
    blob_sd: float = 0.5
    data_path: str = ""
    test_path: str = ""
    rescale: bool = True
    augment: bool = False
    flip: bool = True
    val_fraction: float = 0.0
    n_labeled: int = 6
    split_seed: int | None = None

    # optimisation
    hidden: str = ""  # "" picks a default by input kind, "none" gives a linear model
    m_labeled: int = 64
    m_unlabeled: int = 64
    total_batches: int = 20_480
    batches_per_epoch: int = 1024
    lr: float = 0.02
    weight_decay: float = 0.0
    decay_mode: str = "decoupled"
    kappa: float = 0.999

    # structural regularization
    w_s_max: float = 10.0
    ramp_epochs: float = 16.0
    epsilon_init: str = "25%"
    epsilon_max: str = "auto"
    learn_epsilon: bool = True
    structural_loss: str = "mse"
    pseudo_labeler: str = "ema_weights"
    pred_decay: float = 0.6
    mix_scope: str = "all"
    noise_sd: float = 0.1

    # bookkeeping
    seed: int = 0
    eval_interval: int = 256
    eval_rows: int = 5000
    checkpoint_interval: int = 0
    label_quality: bool = False
    oracle_steps: int = 2000
    interdist_pairs: int = 100_000

    def __post_init__(self):
        self.validate()

    @property
    def ramp_batches(self) -> int:
        return int(round(self.ramp_epochs * self.batches_per_epoch))

    @property
    def split_seed_value(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed

    def hidden_widths(self, image_like: bool) -> list[int]:
        if self.hidden.strip().lower() == "none":
            return []
        if self.hidden.strip():
            return [int(h) for h in self.hidden.split(",") if h.strip()]
        return [256, 256] if image_like else [64, 64]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def validate(self):
        def bad(key, msg):
            raise ConfigError(msg, where=key)

        for key in ("n_train", "n_test", "total_batches", "batches_per_epoch", "eval_interval",
                    "eval_rows", "oracle_steps", "interdist_pairs"):
            if getattr(self, key) < 0 or (key != "total_batches" and getattr(self, key) == 0):
                bad(key, "must be positive")
        for key in ("m_labeled", "m_unlabeled", "n_labeled", "checkpoint_interval"):
            if getattr(self, key) < 0:
                bad(key, "must be non-negative")
        if self.m_labeled + self.m_unlabeled == 0:
            bad("m_labeled", "batch is empty (m_labeled + m_unlabeled = 0)")
        if not self.lr > 0:
            bad("lr", "learning rate must be positive")
        if self.weight_decay < 0:
            bad("weight_decay", "must be non-negative")
        if not 0 <= self.kappa < 1:
            bad("kappa", "must lie in [0, 1)")
        if not 0 <= self.pred_decay < 1:
            bad("pred_decay", "must lie in [0, 1)")
        if not self.beta > 0:
            bad("beta", "must be positive")
        if self.w_s_max < 0:
            bad("w_s_max", "must be non-negative")
        if self.ramp_epochs < 0:
            bad("ramp_epochs", "must be non-negative")
        if self.transform not in TRANSFORMS:
            bad("transform", f"expected one of {', '.join(TRANSFORMS)}, got {self.transform!r}")
        if self.structural_loss not in STRUCTURAL_LOSSES:
            bad("structural_loss", f"expected one of {', '.join(STRUCTURAL_LOSSES)}")
        if self.pseudo_labeler not in PSEUDO_LABELERS:
            bad("pseudo_labeler", f"expected one of {', '.join(PSEUDO_LABELERS)}")
        if self.mix_scope not in MIX_SCOPES:
            bad("mix_scope", f"expected one of {', '.join(MIX_SCOPES)}")
        if self.decay_mode not in ("decoupled", "coupled"):
            bad("decay_mode", "expected decoupled or coupled")
        if self.dataset not in ("two_moons", "blobs", "csv"):
            bad("dataset", "expected two_moons, blobs or csv")
        if self.dataset == "csv" and not self.data_path:
            bad("data_path", "required when dataset = csv")
        if not 0 <= self.val_fraction < 1:
            bad("val_fraction", "must lie in [0, 1)")
        if self.noise_sd < 0:
            bad("noise_sd", "must be non-negative")
        _parse_epsilon(self.epsilon_init, "epsilon_init")
        if self.epsilon_max.strip().lower() != "auto":
            _parse_epsilon(self.epsilon_max, "epsilon_max")
        try:
            self.hidden_widths(False)
        except ValueError:
            bad("hidden", f"expected comma separated integers, got {self.hidden!r}")


def _parse_epsilon(text: str, key: str) -> tuple[float, bool]:
    """Returns (value, is_percent)."""
    s = str(text).strip()
    pct = s.endswith("%")
    try:
        v = float(s[:-1] if pct else s)
    except ValueError:
        raise ConfigError(f"expected a number or a percentage, got {text!r}", where=key) from None
    if v < 0:
        raise ConfigError("must be non-negative", where=key)
    return v, pct


def resolve_epsilon(text: str, mean_distance: float) -> float:
    v, pct = _parse_epsilon(text, "epsilon")
    return v * mean_distance / 100.0 if pct else v


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str, where: str):
    kind = _FIELD_TYPES[key]
    s = raw.strip()
    try:
        if kind == "bool":
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "int":
            return int(s)
        if kind == "int | None":
            return None if s.lower() in ("", "none") else int(s)
        if kind == "float":
            return float(s)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind}", where=where) from None
    return s


def parse_overrides(section: configparser.SectionProxy, label: str) -> dict[str, Any]:
    out = {}
    for key, raw in section.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", where=f"[{label}] {key}")
        out[key] = _coerce(key, raw, f"[{label}] {key}")
    return out


@dataclass
class ExperimentSpec:
    base: dict[str, Any]
    arms: dict[str, dict[str, Any]] = field(default_factory=dict)
    grid: dict[str, list[Any]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    baseline: str | None = None
    out_dir: str = ""
    source: str = ""

    def base_config(self, **extra) -> RunConfig:
        return build_config({**self.base, **extra}, self.source)

    def arm_config(self, name: str, **extra) -> RunConfig:
        return build_config({**self.base, **self.arms[name], **extra}, f"{self.source} [arm {name}]")


def build_config(values: dict[str, Any], where: str = "") -> RunConfig:
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}", where=where or None)
    return RunConfig(**values)


def _read_parser(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", where=str(path)) from None
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " "), where=str(path)) from None
    return parser


def load_spec(path) -> ExperimentSpec:
    """Parse a config file into base settings, arms, grid axes and seeds.

    Type errors and unknown keys surface as :class:`ConfigError` naming the
    section and key; the required keys are checked when a RunConfig is built.
    """
    path = Path(path)
    parser = _read_parser(path)
    if not parser.has_section("run"):
        raise ConfigError("missing [run] section", where=str(path))
    run = dict(parser["run"])
    seeds_raw = run.pop("seeds", None)
    baseline = run.pop("baseline", None)
    base = parse_overrides(_section_from(run), "run")
    spec = ExperimentSpec(base=base, source=str(path), baseline=baseline)
    if seeds_raw is not None:
        spec.seeds = parse_seeds(seeds_raw, where="[run] seeds")
    elif "seed" in base:
        spec.seeds = [base["seed"]]
    for name in parser.sections():
        if name.startswith("arm "):
            arm = name[4:].strip()
            if not arm:
                raise ConfigError("arm section needs a name", where=f"[{name}]")
            if arm in spec.arms:
                raise ConfigError(f"duplicate arm {arm!r}", where=f"[{name}]")
            spec.arms[arm] = parse_overrides(parser[name], name)
        elif name == "grid":
            for key, raw in parser[name].items():
                if key not in _FIELD_TYPES:
                    raise ConfigError(f"unknown key {key!r}", where=f"[grid] {key}")
                spec.grid[key] = [_coerce(key, v, f"[grid] {key}") for v in raw.split(",") if v.strip()]
        elif name != "run":
            raise ConfigError(f"unknown section [{name}]", where=str(path))
    return spec


def _section_from(values: dict[str, str]) -> configparser.SectionProxy:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_dict({"run": values})
    return parser["run"]


def parse_seeds(text: str, where: str = "--seeds") -> list[int]:
    """``"0,1,2"`` or ``"0-4"`` (inclusive range)."""
    seeds: list[int] = []
    try:
        for part in str(text).split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}", where=where) from None
    if not seeds:
        raise ConfigError("no seeds given", where=where)
    return seeds
