"""Run configuration shared by the pipeline, CLI, and reports."""

import math
from dataclasses import asdict, dataclass, field, replace

from .confidence import resolve_variant


@dataclass(frozen=True)
class AblationFlags:
    """Runtime toggles for the attention refinements and their supervision."""

    bias: bool = True
    rescale: bool = True
    supervise_confidence: bool = True

    def tag(self):
        return (
            f"bias_{'on' if self.bias else 'off'}"
            f"-rescale_{'on' if self.rescale else 'off'}"
        )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    coarse_channels: int = 256
    fine_channels: int = 128
    gamma: float | None = None  # correlation temperature; None -> sqrt(C_d)
    lam: float = 0.1            # coarse similarity temperature
    theta_c: float = 0.2        # coarse match threshold
    eta: float = 0.0            # bias strength exponent, alpha = e^eta
    beta: float = 1.0           # confidence-loss weight
    epsilon: float = 1.0        # subpixel-loss mask radius, fine units
    pool: int = 2
    t_blocks: int = 2
    heads: int = 1
    window: int = 8
    conf_variant: str = "v"
    flags: AblationFlags = field(default_factory=AblationFlags)

    def validate(self):
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.coarse_channels % 4 or self.coarse_channels < 4:
            raise ValueError("coarse_channels must be a positive multiple of 4")
        if self.fine_channels < 1:
            raise ValueError("fine_channels must be >= 1")
        if self.coarse_channels % self.heads:
            raise ValueError("heads must divide coarse_channels")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if not 0.0 <= self.theta_c < 1.0:
            raise ValueError("theta_c must be in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.pool < 1:
            raise ValueError("pool must be >= 1")
        if self.t_blocks < 1:
            raise ValueError("t_blocks must be >= 1")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.window < 2 or self.window % 2:
            raise ValueError("window must be an even integer >= 2")
        resolve_variant(self.conf_variant)
        return self

    def resolved_gamma(self) -> float:
        return math.sqrt(self.coarse_channels) if self.gamma is None else self.gamma

    @property
    def alpha(self) -> float:
        return math.exp(self.eta)

    def with_flags(self, **kwargs) -> "RunConfig":
        return replace(self, flags=replace(self.flags, **kwargs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["flags"] = AblationFlags(**d.get("flags", {}))
        return cls(**d).validate()
