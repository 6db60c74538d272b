"""Scenario files: YAML documents with a versioned schema.

A scenario names a reference trajectory, timing, one or more disturbance
cases, the controllers to compare and their configurations.  See
``data/scenarios/`` for annotated examples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..baselines import L1Config, PidConfig
from ..learner import LearnerConfig
from ..mpc import MpcConfig
from ..vessel import DisturbanceSpec, wind

SCHEMA = "scenario/1"
CONTROLLERS = ("pid", "mpc", "l1-mpc", "online-mpc")


@dataclass(frozen=True)
class DisturbanceCase:
    label: str
    spec: DisturbanceSpec
    source: dict = field(default_factory=dict, compare=False)


def parse_disturbance(doc: dict | None, index: int = 0) -> DisturbanceCase:
    """``kind: wind`` is a shorthand for a uniform wind field given by
    ``speed`` (m/s), ``direction`` and ``drag_gain``; other kinds map directly
    onto :class:`DisturbanceSpec`."""
    doc = dict(doc or {"kind": "none"})
    source = dict(doc)
    label = str(doc.pop("label", ""))
    if doc.get("kind") == "wind":
        doc.pop("kind")
        speed = float(doc.pop("speed"))
        spec = wind(speed, **doc)
        label = label or f"wind {speed:g} m/s"
    else:
        spec = DisturbanceSpec.from_dict(doc)
        label = label or (spec.kind if index == 0 else f"{spec.kind} {index}")
    return DisturbanceCase(label, spec, source)


@dataclass
class Scenario:
    name: str = "scenario"
    trajectory: str = "zigzag"
    trajectory_options: dict = field(default_factory=dict)
    duration: float = 128.0
    control_rate: float = 50.0
    plant_dt: float = 0.01
    disturbances: list = field(default_factory=lambda: [parse_disturbance(None)])
    controllers: list = field(default_factory=lambda: list(CONTROLLERS))
    trials: int = 10
    seed: int = 0
    initial_offset: bool = True
    offset_radius: float = 1.0
    measurement_noise: float = 0.0
    vessel: str | None = None
    feature_map: str | None = None
    mpc: MpcConfig = field(default_factory=MpcConfig)
    pid: PidConfig = field(default_factory=PidConfig)
    l1: L1Config = field(default_factory=L1Config)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.control_rate <= 0 or self.plant_dt <= 0:
            raise ValueError("control rate and plant dt must be positive")
        ratio = self.control_dt / self.plant_dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("control period must be a whole number of plant steps")
        if abs(self.mpc.dt - self.control_dt) > 1e-12:
            raise ValueError("mpc.dt must equal the control period")
        for c in self.controllers:
            if c not in CONTROLLERS:
                raise ValueError(f"unknown controller {c!r}; expected one of {CONTROLLERS}")
        if len(set(self.controllers)) != len(self.controllers):
            raise ValueError("controllers must be unique")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.measurement_noise < 0:
            raise ValueError("measurement noise must be non-negative")

    @property
    def control_dt(self) -> float:
        return 1.0 / self.control_rate

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.plant_dt))

    @property
    def cycles(self) -> int:
        return int(round(self.duration * self.control_rate))

    def resolve(self, path) -> Path | None:
        if path is None:
            return None
        path = Path(path)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "Scenario":
        doc = dict(doc)
        schema = doc.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ValueError(f"unsupported scenario schema {schema!r}; expected {SCHEMA!r}")
        traj = doc.pop("trajectory", {"kind": "zigzag"})
        if isinstance(traj, str):
            traj = {"kind": traj}
        traj = dict(traj)
        kwargs = {"trajectory": traj.pop("kind", "zigzag")}
        if "duration" in traj:
            kwargs["duration"] = float(traj.pop("duration"))
        kwargs["trajectory_options"] = traj
        if "disturbance" in doc and "disturbances" in doc:
            raise ValueError("give either 'disturbance' or 'disturbances', not both")
        if "disturbance" in doc:
            kwargs["disturbances"] = [parse_disturbance(doc.pop("disturbance"))]
        elif "disturbances" in doc:
            kwargs["disturbances"] = [parse_disturbance(d, i)
                                      for i, d in enumerate(doc.pop("disturbances"))]
        configs = {"mpc": MpcConfig, "pid": PidConfig, "l1": L1Config,
                   "learner": LearnerConfig}
        for key, klass in configs.items():
            if key in doc:
                kwargs[key] = klass.from_dict(doc.pop(key))
        rate = float(doc.get("control_rate", 50.0))
        if "mpc" not in kwargs:
            kwargs["mpc"] = MpcConfig(dt=1.0 / rate)
        known = {"name", "duration", "control_rate", "plant_dt", "controllers", "trials",
                 "seed", "initial_offset", "offset_radius", "measurement_noise", "vessel",
                 "feature_map"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        kwargs.update(doc)
        if "controllers" in kwargs:
            kwargs["controllers"] = list(kwargs["controllers"])
        return cls(base_dir=None if base_dir is None else Path(base_dir), **kwargs)

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        with open(path) as fh:
            doc = yaml.safe_load(fh)
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        traj = {"kind": self.trajectory, "duration": self.duration, **self.trajectory_options}
        return {
            "schema": SCHEMA, "name": self.name, "trajectory": traj,
            "control_rate": self.control_rate, "plant_dt": self.plant_dt,
            "disturbances": [dict(c.source) or {"label": c.label, **c.spec.to_dict()}
                             for c in self.disturbances],
            "controllers": list(self.controllers), "trials": self.trials,
            "seed": self.seed, "initial_offset": self.initial_offset,
            "offset_radius": self.offset_radius,
            "measurement_noise": self.measurement_noise, "vessel": self.vessel,
            "feature_map": self.feature_map, "mpc": self.mpc.to_dict(),
            "pid": self.pid.to_dict(), "l1": self.l1.to_dict(),
            "learner": self.learner.to_dict(),
        }

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def shipped_scenario(name: str) -> Path:
    from importlib.resources import files
    return Path(str(files("asvctl") / "data" / "scenarios" / f"{name}.yaml"))
