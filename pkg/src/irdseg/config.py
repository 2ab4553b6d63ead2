"""Run configuration: one TOML document for every subcommand.

Top-level ``seed`` feeds the scene generator, weight init and batch
shuffling. Tables ``scene``, ``network``, ``train``, ``preprocess`` and
``fill`` map onto the dataclasses of the owning modules. Unknown keys are
rejected by name.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from irdseg import tomlio
from irdseg.network import CONV_MODES, SCHEDULES, NetworkConfig, PreprocessConfig
from irdseg.synth import SceneConfig

CONFIG_ECHO = "config.toml"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 8
    lambda_depth: float = 1.0
    schedule: str = "cosine"
    flip: bool = True
    # median-frequency class weights in the segmentation loss
    balance: bool = True
    # empty means just network.conv_mode; several entries run a sweep
    modes: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")
        if self.lambda_depth < 0:
            raise ValueError("lambda_depth must be nonnegative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        bad = [m for m in self.modes if m not in CONV_MODES]
        if bad:
            raise ValueError(f"unknown conv modes {bad}")


@dataclass
class FillConfig:
    tol: float = 1e-10
    neighbors: int = 4
    jacobi: bool = False

    def __post_init__(self):
        if self.neighbors not in (4, 8):
            raise ValueError("neighbors must be 4 or 8")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    fill: FillConfig = field(default_factory=FillConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _TABLES:
            table = dataclasses.asdict(getattr(self, name))
            table.pop("seed", None)
            if name == "network":
                table.pop("n_classes", None)
            out[name] = table
        return out

    def dumps(self) -> str:
        return tomlio.dumps(self.to_dict())

    def modes(self) -> list[str]:
        return list(self.train.modes) or [self.network.conv_mode]


_TABLES = {
    "scene": SceneConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "preprocess": PreprocessConfig,
    "fill": FillConfig,
}
# the run seed and the scene's class count are shared, so tables may not set them
_DERIVED = {"scene": {"seed"}, "network": {"seed", "n_classes"}}


def _build(name: str, cls, table, seed: int, n_classes: int | None):
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(name, set())
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key '{name}.{key}'")
    kwargs = dict(table)
    if name in _DERIVED:
        kwargs["seed"] = seed
    if name == "network":
        kwargs["n_classes"] = n_classes
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def from_dict(doc: dict) -> RunConfig:
    for key in doc:
        if key != "seed" and key not in _TABLES:
            raise ConfigError(f"unknown key '{key}'")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    scene = _build("scene", SceneConfig, doc.get("scene", {}), seed, None)
    parts = {"scene": scene}
    for name, cls in _TABLES.items():
        if name != "scene":
            parts[name] = _build(name, cls, doc.get(name, {}), seed, scene.n_classes)
    return RunConfig(seed=seed, **parts)


def loads(text: str) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_dict(doc)


def load(path) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def echo(config: RunConfig, out_dir) -> Path:
    """Write the effective config next to a run's outputs."""
    path = Path(out_dir) / CONFIG_ECHO
    path.write_text(config.dumps(), encoding="utf-8")
    return path
