"""Training configuration, dataset profiles, ablations and the INI-style config file."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .fcf import FcfConfig

ABLATIONS = ("no_fcf", "no_rcr", "no_ic", "no_pc", "no_lg", "fixed_ag", "no_lrm")

# Per-dataset settings; everything else is shared.
PROFILES = {
    "yelpchi": {"d_h": 32, "batch_size": 512, "masking_ratio": 0.15, "public_depth": 2},
    "amazon": {"d_h": 16, "batch_size": 256, "masking_ratio": 0.1, "public_depth": 1},
    # desk-scale synthetic graphs (a few thousand nodes)
    "synthetic": {"d_h": 16, "batch_size": 256, "masking_ratio": 0.1, "public_depth": 1},
}


@dataclass
class TrainConfig:
    fcf: FcfConfig = field(default_factory=FcfConfig)
    # label propagation
    alpha: float = 0.9
    lp_max_iters: int = 200
    lp_tol: float = 1e-6
    # loss weights and schedule
    lambda3: float = 0.1
    lambda4: float = 0.3
    beta: float = 0.5
    delta: float = 0.4
    masking_ratio: float = 0.15
    # optimisation
    epochs: int = 100
    batch_size: int = 512
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    # architecture
    hops: int = 2
    n_e: int | None = None  # None -> R + 1
    d_h: int = 32
    public_depth: int = 2
    expert_depth: int = 1
    manager_depth: int = 1
    n_heads: int = 4
    dropout: float = 0.1
    classifier_hidden: int | None = None
    expert_input: str = "full"
    shells: bool = False
    hygiene: bool = True
    split: tuple[float, float, float] = (0.4, 0.1, 0.5)
    seed: int = 0
    # ablation switches
    no_fcf: bool = False
    no_rcr: bool = False
    no_ic: bool = False
    no_pc: bool = False
    no_lg: bool = False
    fixed_ag: tuple[float, ...] | None = None
    no_lrm: bool = False

    def __post_init__(self):
        if isinstance(self.fcf, dict):
            self.fcf = FcfConfig(**self.fcf)
        self.split = tuple(float(s) for s in self.split)
        if self.fixed_ag is not None:
            self.fixed_ag = tuple(float(a) for a in self.fixed_ag)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if not 0.0 <= self.masking_ratio <= 0.5:
            raise ValueError("masking_ratio must lie in [0, 0.5]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.lambda3 < 0 or self.lambda4 < 0:
            raise ValueError("lambda3 and lambda4 must be non-negative")
        if not 1 <= self.hops <= 4:
            raise ValueError("hops must lie in [1, 4]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.d_h % self.n_heads:
            raise ValueError("d_h must be divisible by n_heads")
        if self.expert_input not in ("full", "sliced"):
            raise ValueError("expert_input must be 'full' or 'sliced'")
        if self.fixed_ag is not None:
            if any(a < 0 for a in self.fixed_ag) or abs(sum(self.fixed_ag) - 1.0) > 1e-9:
                raise ValueError("fixed_ag must be a probability vector")
            if self.n_e is not None and len(self.fixed_ag) != self.n_e:
                raise ValueError("fixed_ag length must equal n_e")

    # effective values after ablations
    @property
    def effective_fcf(self) -> FcfConfig:
        return dataclasses.replace(
            self.fcf,
            lambda1=0.0 if self.no_ic else self.fcf.lambda1,
            lambda2=0.0 if self.no_pc else self.fcf.lambda2,
            seed=self.seed,
        )

    @property
    def effective_lambda3(self) -> float:
        return 0.0 if (self.no_lg or self.no_rcr) else self.lambda3

    @property
    def effective_beta(self) -> float:
        # without a filter there is no filtered-feature similarity term
        return 1.0 if self.no_fcf else self.beta

    def num_experts(self, num_relations: int) -> int:
        if self.no_rcr:
            return 1
        return num_relations + 1 if self.n_e is None else self.n_e

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fcf"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d["fcf"].items()}
        d["split"] = list(self.split)
        d["fixed_ag"] = None if self.fixed_ag is None else list(self.fixed_ag)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["fcf"] = FcfConfig(**d.get("fcf", {}))
        return cls(**d)

    @classmethod
    def from_profile(cls, name: str = "yelpchi", **overrides) -> "TrainConfig":
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        fcf = overrides.pop("fcf", None)
        values = {**PROFILES[name], **overrides}
        if fcf is None:
            fcf = FcfConfig(batch_size=values["batch_size"])
        return cls(fcf=fcf, **values)


def default_fixed_ag(n_experts: int) -> tuple[float, ...]:
    """0.4 on the global (last) expert and the rest split evenly: (0.2, 0.2, 0.2, 0.4) for four experts."""
    if n_experts == 1:
        return (1.0,)
    rest = round(0.6 / (n_experts - 1), 15)
    return tuple([rest] * (n_experts - 1) + [0.4])


def with_ablation(config: TrainConfig, name: str | None, n_experts: int | None = None) -> TrainConfig:
    if name in (None, "", "full", "none"):
        return config
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    if name == "fixed_ag":
        vec = config.fixed_ag or default_fixed_ag(n_experts or config.n_e or 4)
        return dataclasses.replace(config, fixed_ag=vec)
    return dataclasses.replace(config, **{name: True})


# ---------------------------------------------------------------- config file

DATA_KEYS = {"path", "profile", "split", "seed"}
SECTION_KEYS = {
    "data": DATA_KEYS,
    "fcf": {f.name for f in dataclasses.fields(FcfConfig)} - {"seed"},
    "rcr": {"lambda3", "lambda4", "beta", "delta", "masking_ratio", "n_e", "d_h", "public_depth",
            "expert_depth", "manager_depth", "n_heads", "dropout", "classifier_hidden", "expert_input",
            "fixed_ag", "no_fcf", "no_rcr", "no_ic", "no_pc", "no_lg", "no_lrm"},
    "train": {"alpha", "lp_max_iters", "lp_tol", "epochs", "batch_size", "learning_rate", "weight_decay",
              "hops", "shells", "hygiene"},
}


class ConfigFileError(ValueError):
    pass


def _field_types(cls) -> dict:
    import typing

    return typing.get_type_hints(cls)


def _parse_value(raw: str, annotation, key: str):
    import types
    import typing

    raw = raw.strip()
    args = typing.get_args(annotation)
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _parse_value(raw, inner, key)
    if origin is tuple:
        elem = args[0]
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(_parse_value(p, elem, key) for p in parts)
    if annotation is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigFileError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return annotation(raw)
    except (TypeError, ValueError):
        raise ConfigFileError(f"{key}: cannot parse {raw!r} as {getattr(annotation, '__name__', annotation)}") from None


@dataclass
class RunSpec:
    """A parsed config file: where the data lives plus the training config."""

    data_path: Path | None
    profile: str
    config: TrainConfig


def read_config_file(path, seed: int | None = None) -> RunSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SECTION_KEYS:
            raise ConfigFileError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in SECTION_KEYS[section]:
                raise ConfigFileError(f"{path}: unknown key {key!r} in [{section}]")

    data = parser["data"] if parser.has_section("data") else {}
    profile = data.get("profile", "yelpchi").strip()
    train_types = _field_types(TrainConfig)
    fcf_types = _field_types(FcfConfig)

    overrides = {}
    for section in ("rcr", "train"):
        if parser.has_section(section):
            for key, raw in parser[section].items():
                overrides[key] = _parse_value(raw, train_types[key], f"[{section}] {key}")
    if "split" in data:
        overrides["split"] = _parse_value(data["split"], train_types["split"], "[data] split")
    if "seed" in data:
        overrides["seed"] = _parse_value(data["seed"], int, "[data] seed")
    if seed is not None:
        overrides["seed"] = seed

    base = TrainConfig.from_profile(profile)
    fcf_values = dataclasses.asdict(base.fcf)
    if "batch_size" in overrides:
        fcf_values["batch_size"] = overrides["batch_size"]
    if parser.has_section("fcf"):
        for key, raw in parser["fcf"].items():
            fcf_values[key] = _parse_value(raw, fcf_types[key], f"[fcf] {key}")
    try:
        fcf = FcfConfig(**fcf_values)
        config = TrainConfig.from_profile(profile, fcf=fcf, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    data_path = Path(data["path"]).expanduser() if "path" in data else None
    if data_path is not None and not data_path.is_absolute():
        data_path = (path.parent / data_path).resolve()
    return RunSpec(data_path, profile, config)
