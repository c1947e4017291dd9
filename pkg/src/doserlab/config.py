"""Run configuration: an INI file with one section per pipeline stage.

Every key must be known; a typo is an error rather than a silently ignored
setting. ``DOSER_ARTIFACTS`` in the environment overrides ``[paths] artifacts``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .agent import AgentConfig
from .diffusion import NoiseSchedule
from .errors import PersistenceError, RejectedInput

ARTIFACTS_ENV = "DOSER_ARTIFACTS"


def _positive(obj, *names):
    for n in names:
        if getattr(obj, n) <= 0:
            raise RejectedInput(f"{n} must be positive, got {getattr(obj, n)}")


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class EnvSection:
    kind: str = "medium"
    n: int = 50_000
    horizon: int = 50

    def __post_init__(self):
        if self.kind not in ("expert", "medium"):
            raise RejectedInput(f"env.kind must be expert or medium, got {self.kind!r}")
        _positive(self, "n", "horizon")


@dataclass
class DiffusionSection:
    sigma_data: float = 0.5
    sigma_min: float = 0.02
    sigma_max: float = 80.0
    scale: float = 1.0
    c_in_mode: str = "sqrt"
    embedding: str = "scalar"
    hidden: tuple = (64, 64)
    steps: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    m_draws: int = 10
    sampler_steps: int = 18

    def __post_init__(self):
        self.schedule()  # validates the schedule fields
        if self.embedding not in ("scalar", "sinusoidal"):
            raise RejectedInput(f"unknown embedding {self.embedding!r}")
        _positive(self, "steps", "batch_size", "lr", "m_draws", "sampler_steps")

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_data, self.sigma_min, self.sigma_max, self.scale, self.c_in_mode)


@dataclass
class DynamicsSection:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple = (64, 64)

    def __post_init__(self):
        _positive(self, "steps", "batch_size", "lr")


@dataclass
class OodSection:
    percentile_a: float = 99.0
    percentile_s: float = 99.0
    gating: bool = False
    calibration_subsample: int = 10_000  # 0 scores every row
    ensemble_members: int = 5
    ensemble_steps: int = 3000

    def __post_init__(self):
        for p in (self.percentile_a, self.percentile_s):
            if not 0 < p <= 100:
                raise RejectedInput(f"percentiles must be in (0, 100], got {p}")
        if self.calibration_subsample < 0 or self.ensemble_members < 2 or self.ensemble_steps < 1:
            raise RejectedInput("bad ood section counts")


# AgentConfig keys owned by other sections
_AGENT_EXTERNAL = ("gating", "m_draws", "sampler_steps")


@dataclass
class PathsSection:
    artifacts: str = "artifacts"
    data: str = ""  # optional existing dataset file; generated when empty


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSection = field(default_factory=EnvSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    ood: OodSection = field(default_factory=OodSection)
    agent: AgentConfig = field(default_factory=AgentConfig)
    paths: PathsSection = field(default_factory=PathsSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def agent_config(self) -> AgentConfig:
        """The agent section with the keys that live in other sections filled in."""
        kw = asdict(self.agent)
        kw.update(gating=self.ood.gating, m_draws=self.diffusion.m_draws,
                  sampler_steps=self.diffusion.sampler_steps)
        return AgentConfig(**kw)

    def artifact_dir(self) -> Path:
        return Path(os.environ.get(ARTIFACTS_ENV) or self.paths.artifacts)

    def as_dict(self) -> dict:
        """Plain nested dict (lists for tuples), the input to the config hash."""
        out = {}
        for f in fields(self):
            sec = asdict(getattr(self, f.name))
            if f.name == "agent":
                for k in _AGENT_EXTERNAL:
                    sec.pop(k)
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out


def _section_keys(name: str, cls) -> dict:
    keys = {f.name: f for f in fields(cls)}
    if name == "agent":
        for k in _AGENT_EXTERNAL:
            keys.pop(k)
    return keys


def _coerce(section: str, key: str, raw: str, default):
    where = f"[{section}] {key}"
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or (default is None and key == "q_min"):
            return None if text.lower() == "none" else float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        return text
    except ValueError:
        raise RejectedInput(f"{where}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source)
    except configparser.Error as exc:
        raise RejectedInput(f"{source}: {exc}") from exc
    sections = {f.name: f.default_factory for f in fields(RunConfig)}
    unknown = set(cp.sections()) - set(sections)
    if unknown:
        raise RejectedInput(f"{source}: unknown section(s) {sorted(unknown)}")
    built = {}
    for name, factory in sections.items():
        cls = type(factory())
        known = _section_keys(name, cls)
        defaults = cls()
        kw = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in known:
                    raise RejectedInput(f"{source}: unknown key {key!r} in [{name}]")
                kw[key] = _coerce(name, key, raw, getattr(defaults, key))
        built[name] = cls(**kw)
    return RunConfig(**built)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise PersistenceError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, str(path))


def config_text(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    lines = []
    for name, sec in cfg.as_dict().items():
        lines.append(f"[{name}]")
        for k, v in sec.items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
