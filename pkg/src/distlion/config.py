"""Run configuration: dataclasses, per-method defaults and strict TOML loading."""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import tomli

from .aggregation import METHODS, DgcConfig, canonical_keep_fraction
from .core_math import Hyperparams
from .errors import ConfigError, InvalidParameterError

__all__ = [
    "METHOD_DEFAULTS",
    "ProblemSpec",
    "CompressionConfig",
    "RunConfig",
    "load_config",
    "parse_config",
    "config_to_dict",
    "config_from_dict",
    "apply_overrides",
    "defaults_toml",
]

# (lr, weight_decay) per method, from the reference hyperparameter table.
# D-SIGNUM has no entry there and shares the D-Lion values.
METHOD_DEFAULTS = {
    "g_adamw": (0.0001, 0.0005),
    "g_lion": (0.00005, 0.005),
    "dgc": (0.01, 0.0005),
    "graddrop": (0.001, 0.0005),
    "terngrad": (0.001, 0.0005),
    "d_lion_avg": (0.00005, 0.005),
    "d_lion_mavo": (0.00005, 0.005),
    "d_signum_avg": (0.00005, 0.005),
    "d_signum_mavo": (0.00005, 0.005),
}


@dataclass(frozen=True)
class ProblemSpec:
    kind: str = "quadratic"  # quadratic | logistic | mlp
    dim: int = 10
    # quadratic
    quadratic_form: str = "diagonal"  # diagonal | random
    curvature_min: float = 1.0
    curvature_max: float = 1.0
    optimum: float = 1.0
    condition: float = 10.0
    sigma: float = 1.0
    # datasets
    data_seed: int = 0
    n_samples: int = 2000
    separation: float = 4.0
    reg: float = 0.0
    hidden: int = 16
    classes: int = 2
    csv_path: str = ""
    # initial point
    init: str = "zeros"  # zeros | constant | normal
    init_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("quadratic", "logistic", "mlp"):
            raise InvalidParameterError(f"unknown problem kind {self.kind!r}")
        if self.quadratic_form not in ("diagonal", "random"):
            raise InvalidParameterError(f"unknown quadratic_form {self.quadratic_form!r}")
        if self.init not in ("zeros", "constant", "normal"):
            raise InvalidParameterError(f"unknown init {self.init!r}")
        if self.dim < 1:
            raise InvalidParameterError("dim must be positive")
        if self.sigma < 0:
            raise InvalidParameterError("sigma must be nonnegative")


@dataclass(frozen=True)
class CompressionConfig:
    keep_fraction: float = 0.04
    dgc_momentum: float = 0.9
    clip_norm: float = math.inf
    warmup_schedule: tuple = (0.25, 0.0625, 0.015625)
    warmup_stage_rounds: int = 1

    def dgc(self) -> DgcConfig:
        return DgcConfig(
            self.keep_fraction, self.dgc_momentum, self.clip_norm, tuple(self.warmup_schedule), self.warmup_stage_rounds
        )


@dataclass(frozen=True)
class RunConfig:
    method: str = "d_lion_mavo"
    workers: int = 4
    batch_size: int = 32
    rounds: int = 1000
    seed: int = 0
    lr: Optional[float] = None
    weight_decay: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.99
    signum_beta: float = 0.99
    adamw_beta1: float = 0.9
    adamw_beta2: float = 0.999
    adamw_eps: float = 1e-8
    lr_schedule: str = "constant"  # constant | cosine
    codec: str = "one_bit"  # one_bit | ternary
    sharding: str = "iid"  # iid | disjoint
    global_form: str = "averaged_gradients"  # averaged_gradients | averaged_momenta
    threads: int = 1
    early_stop_grad_norm: float = 0.0
    record_trajectory: bool = False
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    compression: CompressionConfig = field(default_factory=CompressionConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidParameterError(f"unknown method {self.method!r}")
        if self.workers < 1:
            raise InvalidParameterError("workers must be >= 1")
        if self.rounds < 1:
            raise InvalidParameterError("rounds must be >= 1")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.threads < 1:
            raise InvalidParameterError("threads must be >= 1")
        for name, allowed in (
            ("lr_schedule", ("constant", "cosine")),
            ("codec", ("one_bit", "ternary")),
            ("sharding", ("iid", "disjoint")),
            ("global_form", ("averaged_gradients", "averaged_momenta")),
        ):
            if getattr(self, name) not in allowed:
                raise InvalidParameterError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.global_form == "averaged_momenta" and self.method != "g_lion":
            raise InvalidParameterError("averaged_momenta applies to g_lion only")
        self.hyperparams()  # validates lr / weight decay / betas

    @property
    def effective_lr(self) -> float:
        return METHOD_DEFAULTS[self.method][0] if self.lr is None else self.lr

    @property
    def effective_weight_decay(self) -> float:
        return METHOD_DEFAULTS[self.method][1] if self.weight_decay is None else self.weight_decay

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.beta1, self.beta2, self.effective_lr, self.effective_weight_decay)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# -- dict / TOML round trip --------------------------------------------------

_SECTIONS = {"problem": ProblemSpec, "compression": CompressionConfig}
_OUTPUT_KEYS = {"dir": str, "checkpoint_every": int, "checkpoint_path": str}


def _coerce(cls, name, value, key_path):
    ftype = {f.name: f for f in fields(cls)}[name].type
    default = {f.name: f for f in fields(cls)}[name].default
    try:
        if name == "warmup_schedule":
            return tuple(float(v) for v in value)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float) or "float" in str(ftype):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r}", key=key_path) from None
    return value


def _build(cls, table: dict, prefix: str, lines: dict):
    known = {f.name for f in fields(cls)} - set(_SECTIONS)
    kwargs = {}
    for key, value in table.items():
        path = f"{prefix}{key}"
        if cls is RunConfig and key in _SECTIONS:
            continue
        if cls is CompressionConfig and key == "drop_rate":
            continue
        if key not in known:
            raise ConfigError("unknown key", key=path, line=lines.get(path))
        kwargs[key] = _coerce(cls, key, value, path)
    if cls is CompressionConfig and ("drop_rate" in table or "keep_fraction" in table):
        try:
            kwargs["keep_fraction"] = canonical_keep_fraction(table.get("keep_fraction"), table.get("drop_rate"))
        except InvalidParameterError as exc:
            raise ConfigError(str(exc), key=f"{prefix}keep_fraction") from None
    return kwargs


def config_from_dict(data: dict, lines: Optional[dict] = None) -> tuple[RunConfig, dict]:
    """Build a RunConfig (and the output table) from nested dicts, rejecting unknown keys."""
    lines = lines or {}
    top = dict(data)
    output = top.pop("output", {}) or {}
    for key in output:
        if key not in _OUTPUT_KEYS:
            raise ConfigError("unknown key", key=f"output.{key}", line=lines.get(f"output.{key}"))
    run_table = top.pop("run", {})
    for key in top:
        if key not in _SECTIONS:
            raise ConfigError("unknown section", key=key, line=lines.get(key))
    try:
        kwargs = _build(RunConfig, run_table, "run.", lines)
        for name, cls in _SECTIONS.items():
            if name in top:
                if not isinstance(top[name], dict):
                    raise ConfigError("expected a table", key=name)
                kwargs[name] = cls(**_build(cls, top[name], f"{name}.", lines))
        cfg = RunConfig(**kwargs)
    except InvalidParameterError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, output


def _key_lines(text: str) -> dict:
    """Map dotted key paths to their 1-based line numbers, for diagnostics."""
    out, section = {}, ""
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        m = re.match(r"^\[([A-Za-z0-9_.]+)\]$", line)
        if m:
            section = m.group(1)
            out.setdefault(section, i)
            continue
        m = re.match(r"^([A-Za-z0-9_]+)\s*=", line)
        if m:
            key = f"{section}.{m.group(1)}" if section else m.group(1)
            out.setdefault(key, i)
    return out


def parse_config(text: str) -> tuple[RunConfig, dict]:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", line=int(m.group(1)) if m else None) from None
    return config_from_dict(data, _key_lines(text))


def load_config(path) -> tuple[RunConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def config_to_dict(cfg: RunConfig) -> dict:
    run = {}
    for f in fields(RunConfig):
        if f.name in _SECTIONS:
            continue
        v = getattr(cfg, f.name)
        if v is not None:
            run[f.name] = v
    out = {"run": run}
    for name in _SECTIONS:
        sub = dataclasses.asdict(getattr(cfg, name))
        if "warmup_schedule" in sub:
            sub["warmup_schedule"] = list(sub["warmup_schedule"])
        out[name] = sub
    return out


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"run.workers": 8, "problem.sigma": 0.5, ...}`` style overrides."""
    data = config_to_dict(cfg)
    for dotted, value in overrides.items():
        section, _, key = dotted.rpartition(".")
        section = section or "run"
        if section not in data:
            raise ConfigError("unknown section", key=dotted)
        if section == "run" and key in ("lr", "weight_decay") and value is None:
            data["run"].pop(key, None)
            continue
        data[section][key] = value
    return config_from_dict(data)[0]


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def defaults_toml() -> str:
    """The full default configuration as TOML, with the per-method lr / weight decay table."""
    cfg = RunConfig()
    data = config_to_dict(cfg)
    data["run"]["lr"] = cfg.effective_lr
    data["run"]["weight_decay"] = cfg.effective_weight_decay
    lines = [
        "# distlion default configuration.",
        "# When run.lr / run.weight_decay are omitted they default per method:",
    ]
    for m, (lr, wd) in METHOD_DEFAULTS.items():
        lines.append(f"#   {m:<14} lr = {lr!r:<8} weight_decay = {wd!r}")
    for section in ("run", "problem", "compression"):
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in data[section].items():
            lines.append(f"{k} = {_toml_value(v)}")
    lines += ["", "[output]", 'dir = "runs"', "checkpoint_every = 0", 'checkpoint_path = ""', ""]
    return "\n".join(lines)
