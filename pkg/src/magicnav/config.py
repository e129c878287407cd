"""Experiment configuration: an INI document with fixed sections.

Every section maps onto a dataclass; unknown sections or keys are rejected
with the line they appear on, and :meth:`ExperimentConfig.to_dict` resolves
every default so a saved manifest holds the complete effective setup.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import asdict, dataclass, field, fields, replace

from .icod import ChainSpec, ChainStages, EnvConfig, StageConfig
from .makd import DistillConfig
from .model import ABILITIES, SIZE_LADDER, ModelConfig
from .weighting import STRATEGIES, WeightingStrategy

KINDS = ("attention", "feature", "logit")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    teacher: str = "L"
    student: str = "S"
    chain: str = "L,M,S"


@dataclass(frozen=True)
class ModelSection:
    text_layers: int = 2
    pano_layers: int = 1
    cross_layers: int = 2
    heads: int = 4
    max_len: int = 32
    ffn_mult: int = 4
    L: int = SIZE_LADDER["L"]
    B: int = SIZE_LADDER["B"]
    M: int = SIZE_LADDER["M"]
    S: int = SIZE_LADDER["S"]


@dataclass(frozen=True)
class DistillSection:
    tau_logit: float = 2.0
    abilities: str = ",".join(ABILITIES)
    kinds: str = ",".join(KINDS)


@dataclass(frozen=True)
class WeightingSection:
    variant: str = "mkrw"
    K: float = 5.0
    tau: float = 4.0


def _stage_defaults():
    d = ChainStages()
    return d.s1, d.s2, d.s3


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelSection = field(default_factory=ModelSection)
    distill: DistillSection = field(default_factory=DistillSection)
    weighting: WeightingSection = field(default_factory=WeightingSection)
    S1: StageConfig = field(default_factory=lambda: _stage_defaults()[0])
    S2: StageConfig = field(default_factory=lambda: _stage_defaults()[1])
    S3: StageConfig = field(default_factory=lambda: _stage_defaults()[2])

    def __post_init__(self):
        for name in [self.run.teacher, self.run.student, *self.chain_sizes()]:
            if name not in SIZE_LADDER:
                raise ConfigError(f"unknown model size {name!r}; choose from {sorted(SIZE_LADDER)}")
        hs = [getattr(self.model, n) for n in self.chain_sizes()]
        if not hs or any(a <= b for a, b in zip(hs, hs[1:])):
            raise ConfigError(f"[run] chain: hidden sizes must strictly decrease, got {self.run.chain!r} -> {hs}")
        if self.weighting.variant not in STRATEGIES:
            raise ConfigError(f"[weighting] variant: {self.weighting.variant!r} not one of {STRATEGIES}")
        for what, allowed in (("abilities", ABILITIES), ("kinds", KINDS)):
            bad = set(_csv(getattr(self.distill, what))) - set(allowed)
            if bad:
                raise ConfigError(f"[distill] {what}: unknown entries {sorted(bad)}")

    # -- derived objects --------------------------------------------------
    def chain_sizes(self):
        return _csv(self.run.chain)

    def model_config(self, size, vocab_size=None):
        m = self.model
        kw = {k: getattr(m, k) for k in ("text_layers", "pano_layers", "cross_layers", "heads", "max_len",
                                         "ffn_mult")}
        if vocab_size is not None:
            kw["vocab_size"] = vocab_size
        return ModelConfig(hidden=getattr(m, size), **kw)

    def chain_spec(self, vocab_size=None):
        return ChainSpec(tuple(self.model_config(s, vocab_size) for s in self.chain_sizes()))

    def distill_config(self, alpha=0.5):
        on = set(_csv(self.distill.abilities))
        kinds = set(_csv(self.distill.kinds))
        return DistillConfig(alpha=alpha, tau_logit=self.distill.tau_logit,
                             abilities={a: a in on for a in ABILITIES}, kinds={k: k in kinds for k in KINDS})

    def weighting_strategy(self):
        w = self.weighting
        return WeightingStrategy(w.variant, K=w.K, tau=w.tau)

    def stages(self):
        return ChainStages(self.S1, self.S2, self.S3)

    def with_seed(self, seed):
        return replace(self, run=replace(self.run, seed=seed))

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self):
        lines = []
        for name, section in self.to_dict().items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in section.items())
            lines.append("")
        return "\n".join(lines)


SECTIONS = {
    "run": RunSection, "env": EnvConfig, "model": ModelSection, "distill": DistillSection,
    "weighting": WeightingSection, "S1": StageConfig, "S2": StageConfig, "S3": StageConfig,
}


def _csv(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _coerce(raw, default, where):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw.strip()


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _locate(text):
    """(section, key) -> 1-based line number, plus section -> line."""
    keys, sections, current = {}, {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            current = m.group(1).strip()
            sections.setdefault(current, no)
            continue
        m = _KEY_RE.match(line)
        if m and current is not None and not line[:1].isspace():
            keys.setdefault((current, m.group(1).strip()), no)
    return keys, sections


def _line_of(msg):
    m = re.search(r":(\d+):", msg)
    return int(m.group(1)) if m else 0


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    keys, sections = _locate(text)
    base = ExperimentConfig()
    built = {}
    problems = []
    for name in parser.sections():
        if name not in SECTIONS:
            problems.append(f"{source}:{sections.get(name, '?')}: unknown section [{name}]")
    for name, cls in SECTIONS.items():
        current = getattr(base, name)
        if not parser.has_section(name):
            built[name] = current
            continue
        known = {f.name for f in fields(cls)}
        updates = {}
        for key, raw in parser.items(name):
            line = keys.get((name, key), "?")
            if cls is StageConfig and key == "stage":
                if raw.strip() != name:
                    problems.append(f"{source}:{line}: [{name}] declares stage {raw.strip()!r}")
                continue
            if key not in known:
                problems.append(f"{source}:{line}: unknown key {key!r} in [{name}]")
                continue
            try:
                updates[key] = _coerce(raw, getattr(current, key), f"{source}:{line}")
            except ConfigError as exc:
                problems.append(str(exc))
        if problems:
            continue
        try:
            built[name] = replace(current, **updates)
        except (ValueError, TypeError) as exc:
            problems.append(f"{source}:{sections.get(name, '?')}: [{name}] {exc}")
    if problems:
        raise ConfigError("\n".join(sorted(problems, key=_line_of)))
    return ExperimentConfig(**built)


def load_config(path=None):
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))
