"""Run configuration: one JSON document with a block per stage.

Every tunable default of the library is surfaced here; command-line flags
override the file. Unknown keys are rejected so typos never pass silently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .artifact import DEFAULT_REJECT_GRID
from .forest import ForestParams
from .spectral import DEFAULT_BANDS, TASKS, BandScheme
from .synth import SynthSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    notch_hz: float = 60.0
    notch_q: float = 30.0
    band: tuple = (0.1, 45.0)
    order: int = 4


@dataclass(frozen=True)
class RejectConfig:
    epoch_seconds: float = 2.0
    grid: tuple = DEFAULT_REJECT_GRID
    folds: int = 10


@dataclass(frozen=True)
class ASRConfig:
    cutoff: float = 20.0
    window: float = 0.5
    max_dims: float = 0.66


@dataclass(frozen=True)
class EpochConfig:
    length: float = 1.0
    gate_uv: float = 100.0
    inclusion_cutoff: float = 0.60
    merge_gap: float = 1.0


@dataclass(frozen=True)
class SpectralConfig:
    nw: float = 2.5
    n_tapers: int = 4
    floor: float = 1e-20
    fuse: str = "band"


@dataclass(frozen=True)
class CVConfig:
    mode: str = "within"
    iterations: int = 1000
    test_fraction: float = 0.2
    balance: str = "global"
    n_jobs: int = 1


@dataclass(frozen=True)
class StaircaseConfig:
    skills: tuple = (1000.0, 1400.0, 1800.0)
    sessions: int = 100
    rounds: int = 6
    per_round: int = 30
    bank_per_bin: int = 40


@dataclass(frozen=True)
class InputConfig:
    manifest: str | None = None
    puzzles: str | None = None
    features: str | None = None


_BLOCKS = {
    "inputs": InputConfig,
    "filter": FilterConfig,
    "reject": RejectConfig,
    "asr": ASRConfig,
    "epoch": EpochConfig,
    "spectral": SpectralConfig,
    "cv": CVConfig,
    "staircase": StaircaseConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    out: str = "eegworkload-out"
    bands: BandScheme = DEFAULT_BANDS
    inputs: InputConfig = InputConfig()
    synth: SynthSpec = field(default_factory=SynthSpec)
    filter: FilterConfig = FilterConfig()
    reject: RejectConfig = RejectConfig()
    asr: ASRConfig = ASRConfig()
    epoch: EpochConfig = EpochConfig()
    spectral: SpectralConfig = SpectralConfig()
    cv: CVConfig = CVConfig()
    forest: ForestParams = ForestParams()
    staircase: StaircaseConfig = StaircaseConfig()

    def require_seed(self, stage: str) -> int:
        if self.seed is None:
            raise ConfigError(f"stage {stage!r} needs a master seed (config 'seed' or --seed)")
        return int(self.seed)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "out": self.out,
             "bands": [[n, lo, hi] for n, lo, hi in self.bands.bands],
             "synth": {k: v for k, v in self.synth.to_dict().items() if k != "seed"},
             "forest": {k: v for k, v in asdict(self.forest).items() if k != "seed"}}
        for name in _BLOCKS:
            d[name] = _jsonable(asdict(getattr(self, name)))
        return d


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _block(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    values = {}
    for k, v in raw.items():
        default = getattr(cls(), k) if k != "seed" else None
        values[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(doc: dict, where: str = "config") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: top level must be an object")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    if "seed" in doc and doc["seed"] is not None:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool) or doc["seed"] < 0:
            raise ConfigError(f"{where}.seed: must be a non-negative integer")
        kw["seed"] = doc["seed"]
    if "out" in doc:
        kw["out"] = str(doc["out"])
    if "bands" in doc:
        try:
            kw["bands"] = BandScheme.from_mapping(doc["bands"])
        except (TypeError, ValueError, IndexError, AttributeError) as exc:
            raise ConfigError(f"{where}.bands: {exc}") from exc
    for name, cls in _BLOCKS.items():
        if name in doc:
            kw[name] = _block(cls, doc[name], f"{where}.{name}")
    if "forest" in doc:
        if "seed" in (doc["forest"] or {}):
            raise ConfigError(f"{where}.forest: the forest seed derives from the master seed")
        kw["forest"] = _block(ForestParams, doc["forest"], f"{where}.forest")
    if "synth" in doc:
        raw = dict(doc["synth"])
        if "seed" in raw:
            raise ConfigError(f"{where}.synth: the synth seed derives from the master seed")
        unknown = sorted(set(raw) - {f.name for f in fields(SynthSpec)})
        if unknown:
            raise ConfigError(f"{where}.synth: unknown keys {unknown}")
        try:
            kw["synth"] = SynthSpec.from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.synth: {exc}") from exc
    cfg = RunConfig(**kw)
    _validate(cfg, where)
    return cfg


def _validate(cfg: RunConfig, where: str) -> None:
    checks = [
        (cfg.cv.mode in ("within", "cross") + tuple(f"within:{t}" for t in TASKS),
         "cv.mode must be 'within', 'within:<task>' or 'cross'"),
        (cfg.cv.iterations >= 1, "cv.iterations must be >= 1"),
        (0 < cfg.cv.test_fraction < 1, "cv.test_fraction must lie in (0, 1)"),
        (cfg.cv.balance in ("global", "participant"), "cv.balance must be 'global' or 'participant'"),
        (cfg.cv.n_jobs >= 1, "cv.n_jobs must be >= 1"),
        (cfg.epoch.gate_uv > 0, "epoch.gate_uv must be positive"),
        (0 < cfg.epoch.inclusion_cutoff <= 1, "epoch.inclusion_cutoff must lie in (0, 1]"),
        (cfg.spectral.fuse in ("band", "bin"), "spectral.fuse must be 'band' or 'bin'"),
        (cfg.reject.folds >= 2, "reject.folds must be >= 2"),
        (len(cfg.filter.band) == 2 and cfg.filter.band[0] < cfg.filter.band[1],
         "filter.band must be [low, high]"),
        (cfg.staircase.sessions >= 1, "staircase.sessions must be >= 1"),
        (all(400 <= s <= 2600 for s in cfg.staircase.skills), "staircase.skills must lie in [400, 2600]"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(f"{where}: {msg}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(doc, str(path))


def override(cfg: RunConfig, seed=None, out=None, mode=None, iterations=None) -> RunConfig:
    """Apply command-line overrides."""
    if seed is not None:
        if seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = replace(cfg, seed=int(seed))
    if out is not None:
        cfg = replace(cfg, out=str(out))
    cv = cfg.cv
    if mode is not None:
        cv = replace(cv, mode=mode)
    if iterations is not None:
        cv = replace(cv, iterations=int(iterations))
    cfg = replace(cfg, cv=cv)
    _validate(cfg, "command line")
    return cfg
