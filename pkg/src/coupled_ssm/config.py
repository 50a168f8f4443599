"""Dataclass configs and the INI-style run-config file."""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

FUSION_MODES = ("coupled", "average", "concat", "mamba", "cross_attention")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class CoupledModelConfig:
    n_modalities: int = 3
    raw_dims: tuple[int, ...] = (20, 5, 10)
    d_model: int = 128
    expand: int = 2
    d_conv: int = 4
    d_state: int = 64
    # low-rank delta projection: rank = d_state // dt_rank_divisor
    dt_rank_divisor: int = 8
    n_layers: int = 3
    head: str = "regression"
    n_classes: int = 3
    fusion: str = "coupled"
    # "mean" divides the summed states by M before the transition; "sum" is
    # the literal sum and is unstable for M > 1 over long sequences
    coupling: str = "mean"
    engine: str = "scan"
    ln_eps: float = 1e-5
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        return max(1, self.d_state // self.dt_rank_divisor)

    @property
    def out_dim(self) -> int:
        return 1 if self.head == "regression" else self.n_classes

    def validate(self) -> "CoupledModelConfig":
        dims = [self.n_modalities, self.d_model, self.expand, self.d_conv, self.d_state, self.dt_rank_divisor]
        if any(d < 1 for d in dims) or self.n_layers < 0:
            raise ConfigError(f"all model dims must be >= 1: {self}")
        if len(self.raw_dims) != self.n_modalities:
            raise ConfigError(f"raw_dims has {len(self.raw_dims)} entries for {self.n_modalities} modalities")
        if self.dt_rank > self.d_inner:
            raise ConfigError("delta rank exceeds the expanded dimension")
        if self.head not in ("regression", "classification"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}; choose from {FUSION_MODES}")
        if self.coupling not in ("mean", "sum"):
            raise ConfigError(f"unknown coupling {self.coupling!r}")
        if self.engine not in ("scan", "sequential"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        return self


@dataclass
class SyntheticTaskSpec:
    n_modalities: int = 3
    raw_dims: tuple[int, ...] = (20, 5, 10)
    latent_dim: int = 6
    noise: tuple[float, ...] = (0.3, 0.3, 0.3)
    # fraction of label-relevant latent coordinates visible to one modality only
    rho: float = 1.0
    seq_len: int = 32
    unaligned: bool = False
    min_len_frac: float = 0.5
    task: str = "regression"
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    seed: int = 0


@dataclass
class OptimConfig:
    lr: float = 5e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    early_stop_patience: int = 0


@dataclass
class RunConfig:
    model: CoupledModelConfig = field(default_factory=CoupledModelConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out_dir: str = "runs/default"


_SECTIONS = {"model": CoupledModelConfig, "task": SyntheticTaskSpec, "optim": OptimConfig}


def _coerce(tp, raw: str, where: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if origin is tuple:
            (inner, _) = typing.get_args(tp)
            return tuple(inner(p.strip()) for p in raw.split(",") if p.strip())
        return tp(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp}") from None


def _fill(cls, items: dict[str, str], section: str, lines: dict[str, int]):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        where = f"[{section}] {key} (line {lines.get(key, '?')})"
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        kwargs[key] = _coerce(hints[key], raw, where)
    return cls(**kwargs)


def _key_lines(text: str) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    section = ""
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif "=" in s and not s.startswith(("#", ";")):
            out.setdefault(section, {})[s.split("=", 1)[0].strip()] = i
    return out


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse an INI document with sections ``run``, ``model``, ``task``, ``optim``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = _key_lines(text)
    cfg = RunConfig()
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "run":
            for key, raw in items.items():
                where = f"[run] {key} (line {lines.get('run', {}).get(key, '?')})"
                if key == "seed":
                    cfg.seed = _coerce(int, raw, where)
                elif key == "out_dir":
                    cfg.out_dir = raw.strip()
                else:
                    raise ConfigError(f"{where}: unknown key")
        elif section in _SECTIONS:
            setattr(cfg, section, _fill(_SECTIONS[section], items, section, lines.get(section, {})))
        else:
            raise ConfigError(f"{source}: unknown section [{section}]")
    cfg.model.validate()
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_run_config(path.read_text(), source=str(path))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def dump_run_config(cfg: RunConfig) -> str:
    """Render every field, defaults included, as a re-loadable document."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {"seed": str(cfg.seed), "out_dir": cfg.out_dir}
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def apply_overrides(cfg: RunConfig, overrides: typing.Iterable[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (``run.seed=3``, ``model.fusion=mamba``)."""
    for item in overrides:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        where = f"override {item!r}"
        if section == "run":
            if key == "seed":
                cfg.seed = _coerce(int, raw, where)
            elif key == "out_dir":
                cfg.out_dir = raw.strip()
            else:
                raise ConfigError(f"{where}: unknown key")
        elif section in _SECTIONS:
            obj = getattr(cfg, section)
            if key not in {f.name for f in dataclasses.fields(obj)}:
                raise ConfigError(f"{where}: unknown key")
            hints = typing.get_type_hints(type(obj))
            setattr(cfg, section, dataclasses.replace(obj, **{key: _coerce(hints[key], raw, where)}))
        else:
            raise ConfigError(f"{where}: unknown section {section!r}")
    cfg.model.validate()
    return cfg
