"""Flat ``key = value`` configuration files and the resolved run configuration."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .control import ControllerGains, VehicleParams
from .executor import POLICY_TYPES, ConfigurationError, Deadline, Fifo, Other, RoundRobin, TaskSpec
from .stress import StressProfile, full_profile

OUTPUT_ENV = "FCSBENCH_OUTPUT"

_VEC_KEYS = {"J", "tau_max", "kp", "kd", "kp_att", "kd_att"}


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fp:
        for lineno, raw in enumerate(fp, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq or not key.strip():
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _parse_value(key: str, text: str, kind):
    try:
        if key in _VEC_KEYS:
            parts = [float(x) for x in text.split(",")]
            if len(parts) != 3:
                raise ValueError("expected three comma-separated numbers")
            return tuple(parts)
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        return kind(text)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key!r}: {text!r} ({exc})") from exc


def vehicle_from_kv(kv: dict[str, str], prefix: str = "vehicle.") -> VehicleParams:
    base = VehicleParams()
    updates = {}
    for f in fields(VehicleParams):
        key = prefix + f.name
        if key in kv:
            updates[f.name] = _parse_value(f.name, kv[key], float)
    try:
        return replace(base, **updates)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def gains_from_kv(kv: dict[str, str], prefix: str = "gains.") -> ControllerGains:
    updates = {}
    for f in fields(ControllerGains):
        key = prefix + f.name
        if key in kv:
            updates[f.name] = _parse_value(f.name, kv[key], float)
    try:
        return ControllerGains(**updates)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def default_core() -> int:
    """Core 2 when present, otherwise the highest online CPU."""
    n = os.cpu_count() or 1
    return 2 if n > 2 else n - 1


@dataclass
class RunConfig:
    policy: str = "other"
    nice: int = 0
    prio: int = 50
    runtime_us: int = 400
    deadline_us: int = 4000
    period_us: int = 4000
    core: int | None = None
    iterations: int = 10_000
    warmup: int = 0
    memlock: bool = True
    stress: str = "off"
    vm_fraction: float = 0.75
    output: str | None = None
    label: str | None = None
    simulate: bool = False
    vehicle: dict = field(default_factory=dict)
    gains: dict = field(default_factory=dict)

    def __post_init__(self):
        self.policy = self.policy.lower()
        if self.policy not in POLICY_TYPES:
            raise ConfigurationError(f"unknown policy {self.policy!r}; choose from {sorted(POLICY_TYPES)}")
        if self.stress not in ("off", "full"):
            raise ConfigurationError(f"stress must be 'off' or 'full', got {self.stress!r}")
        if self.warmup < 0 or self.iterations < 0:
            raise ConfigurationError("iterations and warmup must be >= 0")
        if self.core is None:
            self.core = default_core()

    def sched_policy(self):
        if self.policy == "other":
            return Other(self.nice)
        if self.policy == "fifo":
            return Fifo(self.prio)
        if self.policy == "rr":
            return RoundRobin(self.prio)
        return Deadline(self.runtime_us, self.deadline_us, self.period_us)

    def task_spec(self) -> TaskSpec:
        policy = self.sched_policy()
        deadline = self.deadline_us if self.policy == "deadline" else self.period_us
        return TaskSpec(
            policy=policy,
            T_us=self.period_us,
            D_us=deadline,
            core=self.core,
            iterations=self.iterations,
            memlock=self.memlock,
        )

    def stress_profile(self) -> StressProfile | None:
        if self.stress == "off":
            return None
        return full_profile(measurement_core=self.core, vm_fraction=self.vm_fraction)

    def vehicle_params(self) -> VehicleParams:
        return vehicle_from_kv({f"vehicle.{k}": str(v) for k, v in self.vehicle.items()})

    def controller_gains(self) -> ControllerGains:
        return gains_from_kv({f"gains.{k}": str(v) for k, v in self.gains.items()})

    @property
    def resolved_label(self) -> str:
        if self.label:
            return self.label
        params = self.sched_policy().parameters.replace(", ", "-").replace(" ", "")
        return f"{self.policy}-{params}-{'stress' if self.stress != 'off' else 'idle'}".lower()

    def output_dir(self) -> Path:
        if self.output:
            return Path(self.output)
        root = os.environ.get(OUTPUT_ENV, "results")
        return Path(root) / self.resolved_label

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.resolved_label
        d["output"] = str(self.output_dir())
        return d

    @classmethod
    def from_kv(cls, kv: dict[str, str], **overrides) -> "RunConfig":
        """Build from a config mapping; non-None ``overrides`` win."""
        values: dict = {}
        types = {f.name: f.type for f in fields(cls)}
        casts = {"int": int, "int | None": int, "bool": bool, "float": float, "str": str, "str | None": str}
        for key, text in kv.items():
            if key.startswith("vehicle."):
                values.setdefault("vehicle", {})[key.split(".", 1)[1]] = text
            elif key.startswith("gains."):
                values.setdefault("gains", {})[key.split(".", 1)[1]] = text
            elif key in types and key not in ("vehicle", "gains"):
                values[key] = _parse_value(key, text, casts.get(types[key], str))
        for key, val in overrides.items():
            if val is not None:
                values[key] = val
        return cls(**values)


# -- experiment matrix ------------------------------------------------------

MATRIX_DEFAULTS = {
    "policies": "other,fifo,rr,deadline",
    "nice": "0,-19",
    "prio": "50,99",
    "runtime_us": "400,800",
    "stress": "off,on",
}


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def matrix_cells(kv: dict[str, str] | None = None) -> list[RunConfig]:
    """Enumerate the experiment matrix in table order.

    List keys (``policies``, ``nice``, ``prio``, ``runtime_us``, ``stress``)
    select cells; every other key is a shared :class:`RunConfig` setting.
    """
    kv = dict(kv or {})
    spec = {k: kv.pop(k, v) for k, v in MATRIX_DEFAULTS.items()}
    for k in ("cooldown_s", "shuffle_seed"):
        kv.pop(k, None)
    try:
        policies = [p.strip().lower() for p in spec["policies"].split(",") if p.strip()]
        stresses = [s.strip().lower() for s in spec["stress"].split(",") if s.strip()]
        params = {
            "other": [("nice", v) for v in _ints(spec["nice"])],
            "fifo": [("prio", v) for v in _ints(spec["prio"])],
            "rr": [("prio", v) for v in _ints(spec["prio"])],
            "deadline": [("runtime_us", v) for v in _ints(spec["runtime_us"])],
        }
    except ValueError as exc:
        raise ConfigurationError(f"bad matrix list: {exc}") from exc
    cells = []
    for policy in policies:
        if policy not in params:
            raise ConfigurationError(f"unknown policy {policy!r} in matrix")
        for key, value in params[policy]:
            for s in stresses:
                if s not in ("off", "on"):
                    raise ConfigurationError(f"matrix stress values are off/on, got {s!r}")
                cells.append(
                    RunConfig.from_kv(
                        kv, policy=policy, stress="full" if s == "on" else "off", **{key: value}
                    )
                )
    return cells
