"""Training hyperparameters and the named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError
from .field import GridSpec, MlpSpec
from .guidance import DEFAULT_T_RANGE


@dataclass(frozen=True)
class RegWeights:
    """Weights of the mask binary-entropy and L1 sparsity terms."""

    lambda1: float = 0.5
    lambda2: float = 0.05

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("regularization weights must be non-negative", key="reg")


@dataclass(frozen=True)
class TermWeights:
    """Per-term multipliers of the dual cloth loss (all 1 reproduces the plain sum)."""

    sds_composed: float = 1.0
    reg_composed: float = 1.0
    sds_cloth: float = 1.0
    reg_cloth: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-15
    grad_clip: float | None = 1.0
    # (last iteration, side length) pairs; iteration i renders at the first
    # entry whose bound is >= i
    resolution_schedule: tuple[tuple[int, int], ...] = ((500, 64), (1000, 128))
    th: float = 0.5
    reg: RegWeights = RegWeights()
    terms: TermWeights = TermWeights()
    t_range: tuple[float, float] = DEFAULT_T_RANGE
    n_samples: int = 64
    jitter: bool = True
    patch: int | None = None
    seed: int = 0
    grid: GridSpec = GridSpec()
    mlp: MlpSpec = MlpSpec()
    transfer_iterations: int = 250
    deform_max_offset: float = 0.15

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("must be >= 0", key="iterations")
        if not 0.0 < self.th < 1.0:
            raise ConfigError("must lie in (0, 1)", key="th")
        if self.n_samples < 2:
            raise ConfigError("must be >= 2", key="n_samples")
        bounds = [b for b, _ in self.resolution_schedule]
        if not self.resolution_schedule or any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ConfigError("bounds must be strictly increasing", key="resolution_schedule")
        if bounds[-1] < self.iterations:
            raise ConfigError(f"schedule ends at {bounds[-1]} but training runs {self.iterations}",
                              key="resolution_schedule")
        if any(r <= 0 for _, r in self.resolution_schedule):
            raise ConfigError("resolutions must be positive", key="resolution_schedule")
        if self.patch is not None and self.patch <= 0:
            raise ConfigError("must be positive", key="patch")

    def resolution_at(self, iteration: int) -> int:
        for bound, res in self.resolution_schedule:
            if iteration <= bound:
                return res
        return self.resolution_schedule[-1][1]

    def with_iterations(self, iterations: int) -> "TrainConfig":
        """Same config with the schedule rescaled to ``iterations``."""
        old = self.resolution_schedule[-1][0] or 1
        sched = []
        for bound, res in self.resolution_schedule:
            sched.append((max(1, round(bound * iterations / old)), res))
        sched[-1] = (max(iterations, 1), sched[-1][1])
        dedup = []
        for bound, res in sched:
            if dedup and bound <= dedup[-1][0]:
                dedup[-1] = (dedup[-1][0], res)
            else:
                dedup.append((bound, res))
        return replace(self, iterations=iterations, resolution_schedule=tuple(dedup))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        d["t_range"] = tuple(d["t_range"])
        d["resolution_schedule"] = tuple(tuple(x) for x in d["resolution_schedule"])
        d["reg"] = RegWeights(**d["reg"])
        d["terms"] = TermWeights(**d["terms"])
        d["grid"] = GridSpec(**d["grid"])
        d["mlp"] = MlpSpec(hidden=tuple(d["mlp"]["hidden"]))
        return cls(**d)


def preset(name: str) -> TrainConfig:
    """``desk`` (CPU-scale defaults) or ``paper`` (10k iterations, 256 then 512 pixels)."""
    if name == "desk":
        return TrainConfig()
    if name == "paper":
        return TrainConfig(
            iterations=10_000,
            resolution_schedule=((5_000, 256), (10_000, 512)),
            n_samples=128,
            grid=GridSpec(table_size=2**19),
            transfer_iterations=2_500,
        )
    raise ConfigError(f"unknown preset {name!r}; expected 'desk' or 'paper'", key="preset")
