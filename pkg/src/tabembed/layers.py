"""Feed-forward stacks of affine + ExU layers used by the deep embedders."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ParameterError

DEFAULT_CAP = 1.0
EXU_SCALE_INIT = 0.0  # mean of the log-slope w; slope ~1 at init


@dataclass
class ExULayer:
    """``exu(W h + c, w, b)``, or plain ``W h + c`` when ``activation`` is off."""

    weight: Tensor
    bias: Tensor
    exu_w: Tensor | None = None
    exu_b: Tensor | None = None
    cap: float = DEFAULT_CAP

    @classmethod
    def create(
        cls,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        activation: bool = True,
        cap: float = DEFAULT_CAP,
        prefix: str = "",
    ) -> "ExULayer":
        if d_in < 1 or d_out < 1:
            raise ConfigError(f"layer widths must be positive, got {d_in}->{d_out}")
        if not cap > 0:
            raise ParameterError(f"exu cap must be positive, got {cap}")
        weight = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_out, d_in)), True, prefix + "W")
        bias = Tensor(np.zeros(d_out), True, prefix + "c")
        if not activation:
            return cls(weight, bias, cap=cap)
        # thresholds spread over the typical pre-activation range give
        # every unit a different kink location
        exu_w = Tensor(rng.normal(EXU_SCALE_INIT, 0.5, d_out), True, prefix + "exu_w")
        exu_b = Tensor(rng.uniform(-0.5, 0.5, d_out), True, prefix + "exu_b")
        return cls(weight, bias, exu_w, exu_b, cap)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def activated(self) -> bool:
        return self.exu_w is not None

    def __call__(self, h: Tensor) -> Tensor:
        z = dc.affine(h, self.weight, self.bias)
        if self.exu_w is None:
            return z
        return dc.exu(z, self.exu_w, self.exu_b, self.cap)

    def parameters(self) -> list[Tensor]:
        ps = [self.weight, self.bias]
        if self.exu_w is not None:
            ps += [self.exu_w, self.exu_b]
        return ps


def layer_param_count(d_in: int, d_out: int, activation: bool = True) -> int:
    """Affine weights and biases, plus per-unit ExU ``w`` and ``b``."""
    return d_in * d_out + d_out + (2 * d_out if activation else 0)


@dataclass
class FFN:
    layers: list[ExULayer] = field(default_factory=list)

    def __call__(self, h: Tensor) -> Tensor:
        for layer in self.layers:
            h = layer(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def widths(self) -> list[int]:
        if not self.layers:
            return []
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]


def build_ffn(
    widths: list[int],
    rng: np.random.Generator,
    linear_output: bool = False,
    cap: float = DEFAULT_CAP,
    prefix: str = "",
) -> FFN:
    """Stack layers along ``widths`` (``[d_in, h1, ..., d_out]``)."""
    if len(widths) < 2:
        raise ConfigError(f"an FFN needs at least input and output widths, got {widths}")
    layers = []
    n = len(widths) - 1
    for i in range(n):
        act = not (linear_output and i == n - 1)
        layers.append(
            ExULayer.create(widths[i], widths[i + 1], rng, act, cap, f"{prefix}l{i}.")
        )
    return FFN(layers)


def ffn_param_count(widths: list[int], linear_output: bool = False) -> int:
    n = len(widths) - 1
    return sum(
        layer_param_count(widths[i], widths[i + 1], not (linear_output and i == n - 1))
        for i in range(n)
    )
