"""Declarative run configuration.

Every knob of a benchmark run lives here so a campaign is fully described by
one JSON file. The models validate the invariants the estimators rely on; the
CLI reports a ``ValidationError`` as a configuration error.
"""

import hashlib
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, model_validator

Method = Literal["BP", "jEKF", "jUKF"]


class WeightDistribution(BaseModel):
    """Generator of ground-truth Hopfield networks ``W tanh(x) + D * x + c``."""

    w_variance_scale: float = Field(0.25, gt=0, description="W entries ~ N(0, scale / n)")
    d_low: float = Field(0.1, description="D entries ~ U(d_low, d_high)")
    d_high: float = 0.5
    c_std: float = Field(0.1, ge=0, description="c entries ~ N(0, c_std^2)")

    @model_validator(mode="after")
    def check_range(self):
        if self.d_high < self.d_low:
            raise ValueError("d_high must be >= d_low")
        return self


class SimulationSpec(BaseModel):
    n_nodes: int = Field(10, ge=1)
    measurement_fraction: float = Field(0.4, gt=0, le=1)
    sparsity_fraction: float = Field(0.4, ge=0, lt=1)
    horizon: int = Field(5000, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    process_std: float = Field(0.1, ge=0)
    measurement_std: float = Field(0.1, ge=0)
    weight_distribution: WeightDistribution = Field(default_factory=WeightDistribution)
    singular_value_mean: float = 2.0
    singular_value_spread: float = Field(0.25, gt=0)
    spread_is_variance: bool = Field(
        True, description="Read the 1/4 of |N(2, 1/4)| as a variance (True) or a std"
    )
    burn_in: int = Field(200, ge=0)
    x0_std: float = Field(0.1, ge=0)
    saturation_threshold: float = Field(2.0, gt=0)
    saturation_max_fraction: float = Field(0.9, gt=0, le=1)
    max_redraws: int = Field(
        20, ge=0, description="Fresh networks drawn when a generated one fails the dynamic-range screen"
    )

    @property
    def n_measurements(self) -> int:
        return max(1, int(np.floor(self.measurement_fraction * self.n_nodes + 0.5)))


class FilterInit(BaseModel):
    p0_scale: float = Field(1.0, gt=0, description="P_0 = p0_scale * I")
    x0_std: float = Field(0.1, ge=0, description="x_0 ~ N(0, x0_std^2 I) per segment")


class TrainConfig(BaseModel):
    n_iterations: int = Field(20_000, ge=0)
    segment_length: int = Field(16, ge=1)
    warmup: int = Field(5, ge=0)
    batch_size: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    rate: float = Field(0.001, gt=0)
    rate_decay: float = Field(
        1.0, gt=0, le=1, description="Geometric per-iteration decay; 1.0 keeps the rate constant"
    )
    beta1: float = Field(0.98, ge=0, lt=1)
    beta2: float = Field(0.95, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    init_scale: float = Field(0.01, ge=0, description="Free B entries ~ N(0, init_scale / n)")
    trainable: tuple[str, ...] = ("B.free",)
    gradient_path: Literal["auto", "network", "general"] = "auto"
    checkpoint_every: int | None = Field(None, ge=1)
    jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def check_warmup(self):
        if self.warmup >= self.segment_length:
            raise ValueError("warmup must be smaller than segment_length")
        return self


class JointTuning(BaseModel):
    param_init_var: float = Field(0.01, gt=0)
    param_process_var: float = Field(1e-5, ge=0)
    anneal_every: int = Field(50, ge=1)
    anneal_factor: float = Field(0.995, gt=0, le=1)
    resym_every: int = Field(50, ge=1)
    horizon: int = Field(3000, ge=1)
    alpha: float = Field(1.0, gt=0)
    beta: float = 2.0
    kappa: float = 0.0


class ExperimentConfig(BaseModel):
    sizes: list[int] = Field(default_factory=lambda: [10])
    replicates: int | dict[int, int] = 3
    methods: list[Method] = Field(default_factory=lambda: ["BP", "jEKF", "jUKF"])
    simulation: SimulationSpec = Field(default_factory=SimulationSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    joint: JointTuning = Field(default_factory=JointTuning)
    filter_init: FilterInit = Field(default_factory=FilterInit)
    crossval_horizon: int = Field(600, ge=1)
    crossval_estimator: Literal["EKF", "UKF"] = "EKF"
    trace_steps: int = Field(30, ge=1)
    output_dir: str = "results"
    master_seed: int = Field(0, ge=0, lt=2**64)
    jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def check_sizes(self):
        if not self.sizes or any(n < 1 for n in self.sizes):
            raise ValueError("sizes must be a non-empty list of positive integers")
        if not self.methods:
            raise ValueError("at least one method is required")
        return self

    def replicates_for(self, n: int) -> int:
        if isinstance(self.replicates, dict):
            return self.replicates.get(n, 1)
        return self.replicates

    def config_hash(self) -> str:
        payload = self.model_dump_json(exclude={"output_dir", "jobs"})
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def derive_seed(self, *keys: int) -> int:
        """Sub-seed for a (size, replicate, purpose) key, fixed by ``master_seed``."""
        sequence = np.random.SeedSequence(self.master_seed, spawn_key=tuple(keys))
        return int(sequence.generate_state(1, dtype=np.uint64)[0])

    @classmethod
    def paper_scale(cls, **overrides) -> "ExperimentConfig":
        """Budgets used for the published benchmark (hours to days of compute)."""
        values = {
            "sizes": [10, 20, 30, 40, 50, 60],
            "replicates": {10: 300, 20: 150, 30: 75, 40: 63, 50: 33, 60: 48},
            "train": TrainConfig(n_iterations=125_000),
            "joint": JointTuning(horizon=30_000),
            "simulation": SimulationSpec(horizon=30_000),
        }
        values.update(overrides)
        return cls(**values)
