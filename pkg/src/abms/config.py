"""JSON run configurations for the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conditions import LinearInverseTask, Restricted, operator_from_spec, squared_distance
from .diffusion import NoiseSchedule
from .evaluation import SWEEP_T, inverse_operator
from .guidance import GuidanceConfig
from .prior import GaussianMixture, canonical_prior


@dataclass
class PriorSpec:
    name: str = "gmm2d_2"
    seed: int = 0
    #: a saved mixture (JSON) overrides name/seed
    path: str | None = None

    def build(self) -> GaussianMixture:
        if self.path:
            return GaussianMixture.load(self.path)
        return canonical_prior(self.name, self.seed)


@dataclass
class ScheduleSpec:
    kind: str = "linear"
    T: int = SWEEP_T
    sigma_kind: str = "posterior"

    def build(self) -> NoiseSchedule:
        if self.kind == "linear":
            return NoiseSchedule.linear(self.T, sigma_kind=self.sigma_kind)
        if self.kind == "cosine":
            return NoiseSchedule.cosine(self.T, sigma_kind=self.sigma_kind)
        raise ValueError(f"unknown schedule kind {self.kind!r}")


@dataclass
class TaskSpec:
    """``inpaint``/``superres``/``deblur`` (canonical operators), ``operator``
    (explicit operator spec) or ``target`` (squared distance on ``idx``)."""

    kind: str = "inpaint"
    operator: dict | None = None
    noise_std: float = 0.0
    #: for kind="target": coordinates to guide and the target values
    idx: list | None = None
    target: list | None = None

    def build(self, prior: GaussianMixture, n_chains: int, seed: int):
        if self.kind == "target":
            idx = np.arange(prior.n) if self.idx is None else np.asarray(self.idx)
            tgt = np.zeros(len(idx)) if self.target is None else np.asarray(self.target, dtype=np.float64)
            return Restricted(squared_distance(tgt), idx, prior.n)
        A = operator_from_spec(self.operator, prior.n) if self.kind == "operator" else inverse_operator(self.kind, prior.n)
        rng = np.random.default_rng([seed, 0x67])
        return LinearInverseTask.generate(A, prior.sample(rng, n_chains), rng, self.noise_std)


@dataclass
class RunConfig:
    prior: PriorSpec = field(default_factory=PriorSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    guidance: GuidanceConfig | None = field(default_factory=GuidanceConfig)
    chains: int = 100
    seed: int = 0
    #: sweep-only settings
    methods: list = field(default_factory=lambda: ["dsg", "abms"])
    M_list: list = field(default_factory=lambda: [3])
    scales: dict = field(default_factory=dict)
    instances: list | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        out = cls()
        for key, value in d.items():
            if key == "prior":
                value = PriorSpec(**value)
            elif key == "schedule":
                value = ScheduleSpec(**value)
            elif key == "task":
                value = TaskSpec(**value)
            elif key == "guidance":
                value = None if value is None else GuidanceConfig.from_dict(value)
            setattr(out, key, value)
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance"] = None if self.guidance is None else self.guidance.to_dict()
        return d
