"""Run configuration: dataclass sections, flat ``section.key = value`` files.

Unknown sections or keys are rejected.  ``dump`` writes every resolved value
in a fixed order so the output can be fed back in unchanged.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .synthgen import DEFAULT_COEFFICIENTS


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    users: int = 2000
    days: int = 30
    zips: int = 60
    seed: int = 42
    mood_ar: float = 0.8
    mood_sd: float = 0.4
    bias_sd: float = 1.3
    context_carry: float = 0.6
    carry_decay: float = 0.5
    missingness_rate: float = 0.0
    contamination: float = 0.0005
    coef: dict = field(default_factory=lambda: dict(DEFAULT_COEFFICIENTS))


@dataclass
class PipelineSection:
    ratio_eps: float = 1.0
    target_eps: float = 0.05
    trim_quantile: float = 0.999
    max_len: int = 25
    split_fractions: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    extended_schema: bool = False
    include_momentary_context: bool = True


@dataclass
class TrainingSection:
    model: int = 7
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_train: int = 10_000
    n_val: int = 2_000
    n_test: int = 4_000
    data_seed: int = 0
    seed: int = 0


@dataclass
class TunerSection:
    budget: int = 15
    n_init: int = 3
    max_epochs: int = 20


@dataclass
class BenchSection:
    models: tuple = (1, 2, 3, 4, 5, 6, 7)
    cross_models: tuple = (8, 9)
    repetitions: int = 5
    lengths: tuple = (1, 5, 10, 25)
    channels: tuple = ("behavioral", "context")
    preset: str = "paper"
    paper_scale: bool = False
    seed: int = 0


@dataclass
class ExplainSection:
    mode: str = "sampled"
    n_permutations: int = 500
    n_samples: int = 100
    background: int = 100
    model: int = 9
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = ""
    root: str = "runs"


@dataclass
class RunConfig:
    synthgen: SynthSection = field(default_factory=SynthSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    tuner: TunerSection = field(default_factory=TunerSection)
    bench: BenchSection = field(default_factory=BenchSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> None:
        s = self.synthgen
        if s.users < 1 or s.days < 1 or s.zips < 1:
            raise ConfigError(f"synthgen.users/days/zips must be >= 1 (got {s.users}/{s.days}/{s.zips})")
        if not 0 <= s.missingness_rate < 1:
            raise ConfigError("synthgen.missingness_rate must be in [0, 1)")
        p = self.pipeline
        if len(p.split_fractions) != 3 or abs(sum(p.split_fractions) - 1) > 1e-9 or min(p.split_fractions) <= 0:
            raise ConfigError(f"pipeline.split_fractions must be 3 positive values summing to 1, got {p.split_fractions}")
        if p.max_len < 1:
            raise ConfigError("pipeline.max_len must be >= 1")
        if not 0.5 < p.trim_quantile <= 1:
            raise ConfigError("pipeline.trim_quantile must be in (0.5, 1]")
        t = self.training
        if t.model not in range(1, 10):
            raise ConfigError("training.model must be in 1..9")
        if t.batch_size < 1 or t.patience < 1 or t.max_epochs < 0:
            raise ConfigError("training.batch_size/patience must be >= 1")
        b = self.bench
        if any(m not in range(1, 10) for m in b.models + b.cross_models):
            raise ConfigError("bench model ids must be in 1..9")
        if b.repetitions < 1:
            raise ConfigError("bench.repetitions must be >= 1")
        if any(L < 1 for L in b.lengths):
            raise ConfigError("bench.lengths must be >= 1")
        if any(c not in ("behavioral", "context") for c in b.channels):
            raise ConfigError("bench.channels must be behavioral and/or context")
        if b.preset not in ("paper", "desk"):
            raise ConfigError("bench.preset must be 'paper' or 'desk'")
        e = self.explain
        if e.mode not in ("exact", "sampled"):
            raise ConfigError("explain.mode must be 'exact' or 'sampled'")
        if e.n_permutations < 1 or e.n_samples < 1 or e.background < 1:
            raise ConfigError("explain budgets must be >= 1")
        if self.tuner.budget < 0 or self.tuner.n_init < 1:
            raise ConfigError("tuner.budget must be >= 0 and tuner.n_init >= 1")


FULL_SCALE = {
    "pipeline.max_len": "100",
    "training.batch_size": "2048",
    "training.n_train": "0",
    "training.n_val": "0",
    "training.n_test": "0",
    "tuner.budget": "100",
    "tuner.max_epochs": "50",
    "bench.repetitions": "10",
    "bench.lengths": "1,5,10,25,50,100",
    "bench.paper_scale": "true",
    "bench.preset": "paper",
    "explain.n_samples": "20000",
}


def _parse_value(raw: str, typ, where: str):
    raw = raw.strip()
    origin = typing.get_origin(typ) or typ
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        if typ is str or typ == "str":
            return raw
        if origin is tuple or typ == "tuple":
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            out = []
            for p in parts:
                try:
                    out.append(int(p))
                except ValueError:
                    try:
                        out.append(float(p))
                    except ValueError:
                        out.append(p)
            return tuple(out)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported type {typ}")


def apply(cfg: RunConfig, key: str, raw: str, where: str = "--set") -> None:
    key = key.strip()
    parts = key.split(".")
    if len(parts) < 2:
        raise ConfigError(f"{where}: key {key!r} must look like section.key")
    section = parts[0]
    names = {f.name for f in fields(RunConfig)}
    if section not in names:
        raise ConfigError(f"{where}: unknown section {section!r} (known: {sorted(names)})")
    sec = getattr(cfg, section)
    if section == "synthgen" and parts[1] == "coef" and len(parts) == 3:
        if parts[2] not in sec.coef:
            raise ConfigError(f"{where}: unknown coefficient {parts[2]!r}")
        sec.coef[parts[2]] = _parse_value(raw, float, where)
        return
    if len(parts) != 2:
        raise ConfigError(f"{where}: unknown key {key!r}")
    ftypes = {f.name: f.type for f in fields(sec)}
    if parts[1] not in ftypes or parts[1] == "coef":
        raise ConfigError(f"{where}: unknown key {key!r}")
    setattr(sec, parts[1], _parse_value(raw, ftypes[parts[1]], where))


def parse_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        k, v = line.split("=", 1)
        apply(cfg, k, v, f"{source}:{lineno}")
    return cfg


def load(path=None, overrides=(), paper_scale: bool = False) -> RunConfig:
    """Defaults, then the paper-scale preset, then the file, then ``--set`` overrides."""
    cfg = RunConfig()
    if paper_scale:
        for k, v in FULL_SCALE.items():
            apply(cfg, k, v, "--paper-scale")
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        parse_text(p.read_text(), cfg, str(p))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        k, v = item.split("=", 1)
        apply(cfg, k, v)
    cfg.validate()
    return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump(cfg: RunConfig) -> str:
    lines = []
    for sf in fields(RunConfig):
        sec = getattr(cfg, sf.name)
        for f in fields(sec):
            v = getattr(sec, f.name)
            if f.name == "coef":
                lines += [f"{sf.name}.coef.{k} = {_fmt(float(c))}" for k, c in sorted(v.items())]
            else:
                lines.append(f"{sf.name}.{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig, exclude_output: bool = True) -> str:
    text = "\n".join(l for l in dump(cfg).splitlines() if not (exclude_output and l.startswith("output.")))
    return hashlib.sha256(text.encode()).hexdigest()


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
