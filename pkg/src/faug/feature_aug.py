"""Random-noise augmentation of a named intermediate activation.

A hook replaces the output ``f`` of one layer by ``f + eta`` (normal or
uniform ``eta`` with the resolution of ``f``) or by ``f * mask`` (inverted
dropout). The noise is drawn fresh on every forward call and is a constant
with respect to differentiation: gradients flow through ``f`` only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidNoiseParams, UnknownArchitecture

KINDS = ("normal", "uniform", "dropout")


@dataclass(frozen=True)
class HookConfig:
    layer: str
    kind: str = "normal"
    mu: float = 0.0
    sigma: float = 0.0
    low: float = 0.0
    high: float = 0.0
    p: float = 0.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise InvalidNoiseParams(f"unknown noise kind {self.kind!r}")
        if self.kind == "normal" and not (self.sigma >= 0 and np.isfinite(self.mu)):
            raise InvalidNoiseParams(f"sigma must be >= 0, got {self.sigma}")
        if self.kind == "uniform" and not self.low <= self.high:
            raise InvalidNoiseParams(f"uniform bounds inverted: [{self.low}, {self.high}]")
        if self.kind == "dropout" and not 0 <= self.p < 1:
            raise InvalidNoiseParams(f"dropout p must lie in [0, 1), got {self.p}")

    @property
    def is_identity(self) -> bool:
        if self.kind == "normal":
            return self.mu == 0 and self.sigma == 0
        if self.kind == "uniform":
            return self.low == 0 and self.high == 0
        return self.p == 0

    def noise_params(self) -> dict:
        if self.kind == "normal":
            return {"mu": self.mu, "sigma": self.sigma}
        if self.kind == "uniform":
            return {"low": self.low, "high": self.high}
        return {"p": self.p}

    def to_dict(self) -> dict:
        return {"layer": self.layer, "kind": self.kind, **self.noise_params()}

    @classmethod
    def from_dict(cls, d: dict) -> "HookConfig":
        d = dict(d)
        fields = set(cls.__dataclass_fields__)
        extra = set(d) - fields
        if extra:
            raise InvalidNoiseParams(f"unknown hook keys: {sorted(extra)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def describe(self) -> str:
        params = ",".join(f"{k}={v:g}" for k, v in self.noise_params().items())
        return f"{self.layer}:{self.kind}({params})"


def apply_hook(activation: T.Tensor, cfg: HookConfig, rng) -> T.Tensor:
    """Augment ``activation`` with noise drawn from ``rng``.

    The stream always advances by one draw of the activation's shape, so a
    zero-strength hook leaves downstream randomness where a real one would.
    """
    cfg.validate()
    if rng is None:
        raise InvalidNoiseParams("apply_hook needs an rng stream")
    kind = "dropout-mask" if cfg.kind == "dropout" else cfg.kind
    noise = T.sample_noise(kind, cfg.noise_params(), activation.shape, rng)
    if cfg.is_identity:
        return activation
    if cfg.kind == "dropout":
        return T.mul(activation, noise)
    return T.add(activation, noise)


_DEFAULTS = {
    "mlp": HookConfig("fc1", "normal", sigma=0.3),
    "cnn_a": HookConfig("conv1", "normal", sigma=0.3),
    "cnn_b": HookConfig("conv1", "normal", sigma=0.3),
    "tiny_attn": HookConfig("attn_block", "normal", sigma=0.6),
}


def default_hook_for(architecture: str) -> HookConfig:
    try:
        return _DEFAULTS[architecture]
    except KeyError:
        raise UnknownArchitecture(architecture) from None


def hook_registry() -> dict:
    return {k: asdict(v) for k, v in _DEFAULTS.items()}
