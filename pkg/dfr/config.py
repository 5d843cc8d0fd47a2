# Registration settings, their file format and the command line flags
# generated from them

from __future__ import annotations

import configparser
import copy
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

from . import ConfigError
from .dfrtypes import PathLike
from .energies import EnergyWeights

TOP_SECTION = "__top__"
"Name used internally for keys that appear before any section header"

THREADS_ENV = "DFR_THREADS"


@dataclass
class StageConfig:
    "Settings for one registration stage"
    enabled: bool = True
    lambda_cd: float = 0.01
    lambda_corr: float = 1.0
    lambda_arap: float = 20.0
    alpha_smooth: float = 0.2
    eps: float = 1e-8
    "Energy change below which an iteration counts towards convergence"
    max_iterations: int = 5000

    def weights(self) -> EnergyWeights:
        return EnergyWeights(self.lambda_cd, self.lambda_corr, self.lambda_arap, self.alpha_smooth)


def _stage2() -> StageConfig:
    return StageConfig(lambda_cd=1.0, lambda_corr=0.01, lambda_arap=1.0, eps=1e-7)


@dataclass
class FilterConfig:
    "Bijectivity filter settings"
    enabled: bool = True
    "When false every nearest neighbour pair is kept"
    tau: float = 0.05
    "Threshold as a fraction of the square root of the source surface area"


@dataclass
class OptimizerConfig:
    "Adaptive moment gradient descent settings"
    learning_rate: float = 0.01
    """Step size for rotations in radians.  Translations use this times the
    square root of the source surface area"""
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    monotone: bool = True
    "Reject steps that increase the energy, halving the step size"
    max_backtracks: int = 8


@dataclass
class RegistrationConfig:
    """Every tunable of a registration run

    Defaults refresh correspondences every 100 iterations and need 15
    consecutive small energy changes to converge.
    """
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=_stage2)
    filter: FilterConfig = field(default_factory=FilterConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    update_interval: int = 100
    "Iterations between correspondence refreshes"
    patience: int = 15
    "Consecutive small energy changes needed beyond which a stage has converged"
    update_correspondences: bool = True
    "When false correspondences are computed once at the start of each stage"
    nodes: int = 0
    "Deformation graph node count, 0 for half the source vertex count"
    skin_neighbors: int = 4
    feature_refresh: str = "reuse"
    "``reuse`` keeps the rest pose source features, ``command`` runs :attr:`feature_command`"
    feature_command: str = ""
    "Command line with ``{input}`` and ``{output}`` placeholders producing source features"
    normalize: str = "center"
    "Normalization of the template, ``center`` or ``center_unit_area``"
    align: str = "none"
    "Target alignment when no rotation file is given: ``none`` or ``pca``"
    chamfer_subsample: int = 0
    "Evaluate the Chamfer term on this many source vertices, 0 for all"
    geodesics: str = "auto"
    "Geodesic matrix storage: ``auto``, ``dense`` or ``rows``"
    threads: int = 0
    "Worker threads, 0 for the number of cores"

    def stage(self, name: str) -> StageConfig:
        if name not in ("stage1", "stage2"):
            raise ConfigError(f"unknown stage '{ name }'")
        return getattr(self, name)

    def validate(self) -> RegistrationConfig:
        "Raises :exc:`ConfigError` on out of range values, returning self"
        problems = []
        for name in ("stage1", "stage2"):
            s = self.stage(name)
            if s.eps <= 0:
                problems.append(f"[{ name }] eps must be > 0")
            if s.max_iterations < 1:
                problems.append(f"[{ name }] max_iterations must be >= 1")
            try:
                s.weights()
            except Exception as exc:
                problems.append(f"[{ name }] { exc }")
        if self.update_interval < 1:
            problems.append("update_interval must be >= 1")
        if self.patience < 0:
            problems.append("patience must be >= 0")
        if self.filter.tau <= 0:
            problems.append("[filter] tau must be > 0")
        if self.optimizer.learning_rate <= 0:
            problems.append("[optimizer] learning_rate must be > 0")
        if not (0 <= self.optimizer.beta1 < 1 and 0 <= self.optimizer.beta2 < 1):
            problems.append("[optimizer] beta1 and beta2 must be in [0, 1)")
        if self.optimizer.max_backtracks < 0:
            problems.append("[optimizer] max_backtracks must be >= 0")
        if self.skin_neighbors < 1:
            problems.append("skin_neighbors must be >= 1")
        if self.nodes != 0 and self.nodes < 4:
            problems.append("nodes must be 0 or at least 4")
        if self.feature_refresh not in ("reuse", "command"):
            problems.append("feature_refresh must be reuse or command")
        if self.feature_refresh == "command" and not self.feature_command:
            problems.append("feature_refresh = command needs feature_command")
        if self.normalize not in ("center", "center_unit_area"):
            problems.append("normalize must be center or center_unit_area")
        if self.align not in ("none", "pca"):
            problems.append("align must be none or pca")
        if self.geodesics not in ("auto", "dense", "rows"):
            problems.append("geodesics must be auto, dense or rows")
        if self.chamfer_subsample < 0 or self.threads < 0:
            problems.append("chamfer_subsample and threads must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


@dataclass(frozen=True)
class ConfigKey:
    "One settable key"
    section: str | None
    "Section name, None for top level keys"
    name: str
    type: type
    default: Any

    @property
    def flag(self) -> str:
        "Command line flag, eg ``--stage1-lambda-cd``"
        prefix = f"{ self.section }-" if self.section else ""
        return "--" + (prefix + self.name).replace("_", "-")

    @property
    def dest(self) -> str:
        return (f"{ self.section }_" if self.section else "") + self.name


def config_keys(config: RegistrationConfig | None = None) -> list[ConfigKey]:
    "All keys in file order, with defaults taken from `config`"
    config = config or RegistrationConfig()
    keys = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for sf in dataclasses.fields(value):
                v = getattr(value, sf.name)
                keys.append(ConfigKey(f.name, sf.name, type(v), v))
        else:
            keys.append(ConfigKey(None, f.name, type(value), value))
    # top level keys first, matching where they must appear in a file
    return sorted(keys, key=lambda k: k.section is not None)


def parse_value(key: ConfigKey, text: str) -> Any:
    "Converts text to the key's type"
    text = text.strip()
    try:
        if key.type is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if key.type is int:
            return int(text)
        if key.type is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{ key.flag[2:] }: can't parse { text!r} as { key.type.__name__ }") from None


def apply_overrides(config: RegistrationConfig, overrides: dict[tuple[str | None, str], Any]) -> RegistrationConfig:
    """A copy of `config` with values replaced

    :param overrides: Maps (section, name) to a value, or to text which is
       parsed with the key's type
    """
    config = copy.deepcopy(config)
    known = {(k.section, k.name): k for k in config_keys(config)}
    for (section, name), value in overrides.items():
        key = known.get((section, name))
        if key is None:
            where = f"[{ section }] " if section else ""
            raise ConfigError(f"unknown configuration key { where }{ name }")
        if isinstance(value, str):
            value = parse_value(key, value)
        holder = getattr(config, section) if section else config
        setattr(holder, name, value)
    return config


def load_config(path: PathLike, base: RegistrationConfig | None = None) -> RegistrationConfig:
    """Reads ``key = value`` lines with ``#`` comments

    Keys before the first section header are top level.  Sections are
    ``[stage1]``, ``[stage2]``, ``[filter]`` and ``[optimizer]``.  Unknown
    sections or keys are errors.

    :param base: Settings to start from, default :class:`RegistrationConfig`
    """
    try:
        with open(path, "rt", encoding="utf8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"can't read config { path }: { exc }") from exc
    parser = configparser.ConfigParser(comment_prefixes=("#", ),
                                       inline_comment_prefixes=("#", ),
                                       interpolation=None,
                                       default_section="__defaults__")
    try:
        parser.read_string(f"[{ TOP_SECTION }]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{ path }: { exc }") from None

    overrides: dict[tuple[str | None, str], Any] = {}
    sections = {k.section for k in config_keys()}
    for section in parser.sections():
        name = None if section == TOP_SECTION else section
        if name not in sections:
            raise ConfigError(f"{ path }: unknown section [{ section }]")
        for key, value in parser.items(section):
            overrides[(name, key.replace("-", "_"))] = value
    try:
        return apply_overrides(base or RegistrationConfig(), overrides).validate()
    except ConfigError as exc:
        raise ConfigError(f"{ path }: { exc }") from None


def to_text(config: RegistrationConfig) -> str:
    "The file form of `config`, readable by :func:`load_config`"

    def fmt(v: Any) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)

    lines = []
    section = None
    for key in config_keys(config):
        if key.section != section:
            section = key.section
            lines.append(f"\n[{ section }]")
        lines.append(f"{ key.name } = { fmt(key.default) }")
    return "\n".join(lines) + "\n"


def worker_count(threads: int | None = None) -> int:
    """Worker pool size

    `threads` (or the core count when it is None or 0) capped by the
    ``DFR_THREADS`` environment variable.
    """
    count = threads if threads else (os.cpu_count() or 1)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError(f"{ THREADS_ENV }={ env!r} is not an integer") from None
        if cap < 1:
            raise ConfigError(f"{ THREADS_ENV } must be at least 1")
        count = min(count, cap)
    return max(1, count)
