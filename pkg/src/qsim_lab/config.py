"""Experiment configuration: YAML in, validated frozen dataclasses out."""

from __future__ import annotations

import difflib
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .qsim_target import KappaSchedule

VARIANTS = ("GreedyBaseline", "QSIM", "QSIM-Mean", "QSIM-TopN", "QSIM-NoState")
ENVS = ("climbing", "gridworld")
MIXERS = ("QMIX", "VDN")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class EnvConfig:
    name: str = "climbing"
    width: int = 4
    height: int = 4
    n_agents: int = 2
    horizon: int = 25


@dataclass(frozen=True)
class EpsilonConfig:
    start: float = 1.0
    end: float = 0.05
    anneal_steps: int = 50_000


@dataclass(frozen=True)
class TargetUpdateConfig:
    mode: str = "soft"
    tau: float = 0.01
    interval: int = 200


@dataclass(frozen=True)
class NetworkConfig:
    agent_hidden: tuple[int, ...] = (64,)
    mixer_embed: int = 32
    hypernet_hidden: int = 64
    ae_hidden: int = 128
    embed_dim: int = 16


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    variant: str = "QSIM"
    mixer: str = "QMIX"
    kappa: KappaSchedule = field(default_factory=KappaSchedule)
    threshold: float = 0.0
    top_n: int | None = None
    use_state: bool = True
    double_q: bool = True
    gamma: float = 0.99
    lr: float = 0.0005
    ae_lr: float = 0.0005
    optimizer: str = "adam"
    grad_clip: float | None = 10.0
    buffer_size: int = 5000
    batch_size: int = 32
    epsilon: EpsilonConfig = field(default_factory=EpsilonConfig)
    target_update: TargetUpdateConfig = field(default_factory=TargetUpdateConfig)
    reward_standardization: bool = True
    step_max: int = 50_000
    eval_interval: int = 1000
    eval_episodes: int = 32
    seeds: tuple[int, ...] = (1,)
    output_dir: str = "runs"
    network: NetworkConfig = field(default_factory=NetworkConfig)

    @property
    def effective_kappa_zero(self) -> bool:
        return self.variant == "QSIM-Mean"

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["network"]["agent_hidden"] = list(self.network.agent_hidden)
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def content_hash(self) -> str:
        """Git blob hash of the canonical JSON echo."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


_REQUIRED = ("env", "variant", "seeds")


def _check_keys(raw: dict, cls, path: str) -> None:
    known = [f.name for f in fields(cls)]
    for key in raw:
        if key not in known:
            close = difflib.get_close_matches(str(key), known, n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise ConfigError(f"{path}{key}", f"unknown key{hint}")


def _num(value, path, kind=float, lo=None, hi=None, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(path, f"expected an integer, got {value!r}")
        value = int(value)
    else:
        value = float(value)
    if lo is not None and (value <= lo if lo_open else value < lo):
        raise ConfigError(path, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(path, f"must be <= {hi}, got {value}")
    return value


def _choice(value, path, options):
    if value not in options:
        close = difflib.get_close_matches(str(value), options, n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise ConfigError(path, f"invalid value {value!r}, expected one of {list(options)}{hint}")
    return value


def _bool(value, path):
    if not isinstance(value, bool):
        raise ConfigError(path, f"expected true/false, got {value!r}")
    return value


def _section(raw, cls, path):
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {raw!r}")
    _check_keys(raw, cls, path + ".")
    return raw


def _parse_env(raw) -> EnvConfig:
    if isinstance(raw, str):
        raw = {"name": raw}
    raw = _section(raw, EnvConfig, "env")
    name = _choice(str(raw.get("name", "climbing")).lower(), "env.name", ENVS)
    kw = {"name": name}
    for key in ("width", "height", "n_agents", "horizon"):
        if key in raw:
            kw[key] = _num(raw[key], f"env.{key}", int, lo=1)
    env = EnvConfig(**kw)
    if name == "gridworld":
        if env.width < 2 or env.height < 2:
            raise ConfigError("env.width", "gridworld needs at least a 2x2 grid")
        if not 2 <= env.n_agents <= 4:
            raise ConfigError("env.n_agents", "gridworld supports 2 to 4 agents")
    return env


def _parse_kappa(raw) -> KappaSchedule:
    if raw is None:
        return KappaSchedule()
    if not isinstance(raw, dict):
        return KappaSchedule("constant", _num(raw, "kappa", lo=0.0))
    _check_keys(raw, KappaSchedule, "kappa.")
    mode = _choice(raw.get("mode", "constant"), "kappa.mode", ("constant", "linear"))
    kw = {"mode": mode}
    for key in ("value", "start", "end"):
        if key in raw:
            kw[key] = _num(raw[key], f"kappa.{key}", lo=0.0)
    if "horizon" in raw:
        kw["horizon"] = _num(raw["horizon"], "kappa.horizon", int, lo=0, lo_open=True)
    return KappaSchedule(**kw)


def _parse_epsilon(raw) -> EpsilonConfig:
    raw = _section(raw, EpsilonConfig, "epsilon")
    kw = {}
    for key in ("start", "end"):
        if key in raw:
            kw[key] = _num(raw[key], f"epsilon.{key}", lo=0.0, hi=1.0)
    if "anneal_steps" in raw:
        kw["anneal_steps"] = _num(raw["anneal_steps"], "epsilon.anneal_steps", int, lo=0, lo_open=True)
    return EpsilonConfig(**kw)


def _parse_target_update(raw) -> TargetUpdateConfig:
    if isinstance(raw, str):
        raw = {"mode": raw}
    raw = _section(raw, TargetUpdateConfig, "target_update")
    kw = {"mode": _choice(raw.get("mode", "soft"), "target_update.mode", ("soft", "hard"))}
    if "tau" in raw:
        kw["tau"] = _num(raw["tau"], "target_update.tau", lo=0.0, hi=1.0, lo_open=True)
    if "interval" in raw:
        kw["interval"] = _num(raw["interval"], "target_update.interval", int, lo=0, lo_open=True)
    return TargetUpdateConfig(**kw)


def _parse_network(raw) -> NetworkConfig:
    raw = _section(raw, NetworkConfig, "network")
    kw = {}
    if "agent_hidden" in raw:
        hidden = raw["agent_hidden"]
        if not isinstance(hidden, (list, tuple)):
            raise ConfigError("network.agent_hidden", "expected a list of widths")
        kw["agent_hidden"] = tuple(_num(h, f"network.agent_hidden[{k}]", int, lo=1) for k, h in enumerate(hidden))
    for key in ("mixer_embed", "hypernet_hidden", "ae_hidden", "embed_dim"):
        if key in raw:
            kw[key] = _num(raw[key], f"network.{key}", int, lo=1)
    return NetworkConfig(**kw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a mapping")
    _check_keys(raw, ExperimentConfig, "")
    for key in _REQUIRED:
        if key not in raw:
            raise ConfigError(key, "missing required field")

    env = _parse_env(raw["env"])
    variant = _choice(raw["variant"], "variant", VARIANTS)
    kw: dict[str, Any] = {
        "env": env,
        "variant": variant,
        "mixer": _choice(raw.get("mixer", "QMIX"), "mixer", MIXERS),
        "kappa": _parse_kappa(raw.get("kappa")),
        "epsilon": _parse_epsilon(raw.get("epsilon")),
        "target_update": _parse_target_update(raw.get("target_update")),
        "network": _parse_network(raw.get("network")),
    }
    if "threshold" in raw:
        kw["threshold"] = _num(raw["threshold"], "threshold", lo=-1.0, hi=1.0)
    top_n = raw.get("top_n")
    if top_n is not None:
        kw["top_n"] = _num(top_n, "top_n", int, lo=1)
    if variant == "QSIM-TopN" and top_n is None:
        raise ConfigError("top_n", "required for variant QSIM-TopN")
    if variant != "QSIM-TopN" and top_n is not None:
        raise ConfigError("top_n", "only valid with variant QSIM-TopN")

    use_state = raw.get("use_state")
    if use_state is None:
        use_state = variant != "QSIM-NoState"
    kw["use_state"] = _bool(use_state, "use_state")
    if variant == "QSIM-NoState" and kw["use_state"]:
        raise ConfigError("use_state", "must be false for variant QSIM-NoState")

    if "double_q" in raw:
        kw["double_q"] = _bool(raw["double_q"], "double_q")
    if "gamma" in raw:
        kw["gamma"] = _num(raw["gamma"], "gamma", lo=0.0, hi=1.0, lo_open=True)
    for key in ("lr", "ae_lr"):
        if key in raw:
            kw[key] = _num(raw[key], key, lo=0.0, lo_open=True)
    if "optimizer" in raw:
        kw["optimizer"] = _choice(raw["optimizer"], "optimizer", ("adam", "sgd"))
    if "grad_clip" in raw:
        kw["grad_clip"] = None if raw["grad_clip"] is None else _num(raw["grad_clip"], "grad_clip", lo=0.0, lo_open=True)
    for key in ("buffer_size", "batch_size", "eval_interval", "eval_episodes"):
        if key in raw:
            kw[key] = _num(raw[key], key, int, lo=1)
    if "step_max" in raw:
        kw["step_max"] = _num(raw["step_max"], "step_max", int, lo=0)

    rs = raw.get("reward_standardization")
    kw["reward_standardization"] = (env.name == "climbing") if rs is None else _bool(rs, "reward_standardization")

    seeds = raw["seeds"]
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise ConfigError("seeds", "must be a non-empty list of integers")
    kw["seeds"] = tuple(_num(s, f"seeds[{k}]", int, lo=0) for k, s in enumerate(seeds))
    if len(set(kw["seeds"])) != len(kw["seeds"]):
        raise ConfigError("seeds", "seeds must be distinct")
    if "output_dir" in raw:
        if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
            raise ConfigError("output_dir", "expected a non-empty path string")
        kw["output_dir"] = raw["output_dir"]
    return ExperimentConfig(**kw)


def parse_config(source) -> ExperimentConfig:
    """Parse a YAML file path, a YAML string, or an already-loaded mapping."""
    if isinstance(source, dict):
        return config_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).is_file()):
        text = Path(source).read_text()
    else:
        text = str(source)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from exc
    return config_from_dict(raw)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Re-validate a config after replacing top-level fields."""
    raw = cfg.to_dict()
    for key, value in kw.items():
        raw[key] = asdict(value) if is_dataclass(value) else value
    return config_from_dict(raw)
