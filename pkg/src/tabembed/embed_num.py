"""Numerical feature embeddings.

Five methods map one normalized scalar to a vector:

``none``         the scalar itself, width 1, no parameters
``handcrafted``  fixed functions of x cycled to width d, no parameters
``linear``       x * e with a learned e in R^d
``discretize``   softmax over v bucket scores, averaging v meta-embeddings
``deep``         feature expansion x * gamma + beta, then a residual ExU FFN

Every function accepts a scalar or an array of scalars; outputs gain a
trailing embedding axis.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DataError, DimensionError, ParameterError
from .layers import DEFAULT_CAP, FFN, build_ffn, ffn_param_count


class NumMethod(str, enum.Enum):
    NONE = "none"
    HANDCRAFTED = "handcrafted"
    LINEAR = "linear"
    DISCRETIZE = "discretize"
    DEEP = "deep"

    @classmethod
    def parse(cls, value) -> "NumMethod":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown numerical embedding method {value!r}") from None


DEFAULT_DEPTH = 2
DEFAULT_WIDTH = 500
DEFAULT_BUCKETS = 20
DEFAULT_TEMPERATURE = 1.0


@dataclass
class NumExpansionParams:
    gamma: Tensor  # embedding sensitivity
    beta: Tensor  # embedding bias

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.data.ndim != 1 or self.gamma.size < 1:
            raise DimensionError(
                f"gamma {self.gamma.shape} and beta {self.beta.shape} must be equal-length vectors"
            )

    @classmethod
    def create(cls, d: int, prefix: str = "") -> "NumExpansionParams":
        return cls(Tensor(np.ones(d), True, prefix + "gamma"), Tensor(np.zeros(d), True, prefix + "beta"))

    @property
    def d(self) -> int:
        return self.gamma.size

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


@dataclass
class NumDeepParams:
    ffn: FFN
    layer_width: int
    residual: bool = True

    @classmethod
    def create(
        cls,
        d: int,
        depth: int,
        width: int,
        rng: np.random.Generator,
        cap: float = DEFAULT_CAP,
        prefix: str = "",
    ) -> "NumDeepParams":
        return cls(build_ffn(deep_widths(d, depth, width), rng, cap=cap, prefix=prefix), width)

    @property
    def depth(self) -> int:
        return len(self.ffn.layers)

    def parameters(self) -> list[Tensor]:
        return self.ffn.parameters()


def deep_widths(d: int, depth: int, width: int) -> list[int]:
    """Layer widths of the residual FFN: d -> width x (depth-1) -> d."""
    if d < 1 or depth < 1 or width < 1:
        raise ConfigError(f"need positive d, depth, width; got {d}, {depth}, {width}")
    return [d] + [width] * (depth - 1) + [d]


@dataclass
class DiscretizationParams:
    meta_embeddings: Tensor  # (v, d)
    scorer_w: Tensor  # (v,)
    scorer_b: Tensor  # (v,)
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")

    @classmethod
    def create(
        cls,
        d: int,
        v: int,
        rng: np.random.Generator,
        temperature: float = DEFAULT_TEMPERATURE,
        prefix: str = "",
    ) -> "DiscretizationParams":
        meta = Tensor(rng.normal(0.0, 0.1, (v, d)), True, prefix + "meta")
        # bucket scores peak at evenly spaced points of [0, 1]
        centers = (np.arange(v) + 0.5) / v
        sw = Tensor(rng.normal(0.0, 1.0, v) + 2.0 * v * centers, True, prefix + "scorer_w")
        sb = Tensor(-v * centers**2, True, prefix + "scorer_b")
        return cls(meta, sw, sb, temperature)

    @property
    def buckets(self) -> int:
        return self.meta_embeddings.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.meta_embeddings, self.scorer_w, self.scorer_b]


def _as_input(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if not np.all(np.isfinite(t.data)):
        raise DataError("numerical input contains non-finite values")
    return t


def _lift(x: Tensor) -> Tensor:
    return dc.reshape(x, x.shape + (1,))


def expand(x, params: NumExpansionParams) -> Tensor:
    """Scale and shift ``x`` into d dimensions: ``x * gamma + beta``."""
    return _lift(_as_input(x)) * params.gamma + params.beta


def deep_transform_num(xhat: Tensor, params: NumDeepParams) -> Tensor:
    """Residual FFN refinement ``xhat + ffn(xhat)``."""
    xhat = xhat if isinstance(xhat, Tensor) else Tensor(xhat)
    widths = params.ffn.widths()
    if xhat.shape[-1:] != (widths[0],) or widths[-1] != widths[0]:
        raise ConfigError(f"deep transform expects width {widths[0]} in/out, got input {xhat.shape}")
    out = params.ffn(xhat)
    return xhat + out if params.residual else out


def handcrafted(x, d: int) -> Tensor:
    """``[x, x^2, sqrt(x), log(1+x)]`` repeated to length ``d``.

    Requires ``x >= 0`` because of the root and log components.
    """
    xv = _as_input(x).data
    if np.any(xv < 0):
        raise DataError("handcrafted embedding needs non-negative (min-max normalized) input")
    basis = np.stack([xv, xv * xv, np.sqrt(xv), np.log1p(xv)], axis=-1)
    idx = np.arange(d) % 4
    return Tensor(basis[..., idx])


def discretize_embed(x, params: DiscretizationParams) -> Tensor:
    if not params.temperature > 0:
        raise ParameterError(f"temperature must be positive, got {params.temperature}")
    logits = _lift(_as_input(x)) * params.scorer_w + params.scorer_b
    weights = dc.softmax(logits * (1.0 / params.temperature), axis=-1)
    if weights.data.ndim == 1:
        return dc.matmul(weights, params.meta_embeddings)
    flat = dc.reshape(weights, (-1, params.buckets))
    out = dc.matmul(flat, params.meta_embeddings)
    return dc.reshape(out, weights.shape[:-1] + (params.meta_embeddings.shape[1],))


def param_count_numerical(
    method,
    d: int,
    l: int = DEFAULT_DEPTH,
    width: int = DEFAULT_WIDTH,
    v: int = DEFAULT_BUCKETS,
) -> int:
    """Table-formula parameter count for one numerical field.

    The discretization scorer (2v) is not part of the formula; see
    :func:`numerical_param_extras`.
    """
    method = NumMethod.parse(method)
    if min(d, l, width, v) < 1:
        raise ConfigError("parameter counts need positive dimensions")
    if method in (NumMethod.NONE, NumMethod.HANDCRAFTED):
        return 0
    if method is NumMethod.LINEAR:
        return d
    if method is NumMethod.DISCRETIZE:
        return v * d
    return 2 * d + ffn_param_count(deep_widths(d, l, width))


def numerical_param_extras(method, d: int, v: int = DEFAULT_BUCKETS) -> dict[str, int]:
    method = NumMethod.parse(method)
    if method is NumMethod.DISCRETIZE:
        return {"scorer": 2 * v}
    return {}


class NumericalEmbedder:
    """Embeds one numerical field with a chosen method."""

    def __init__(
        self,
        method,
        d: int,
        rng: np.random.Generator | None = None,
        depth: int = DEFAULT_DEPTH,
        width: int = DEFAULT_WIDTH,
        buckets: int = DEFAULT_BUCKETS,
        temperature: float = DEFAULT_TEMPERATURE,
        cap: float = DEFAULT_CAP,
        prefix: str = "",
    ):
        self.method = NumMethod.parse(method)
        if d < 1:
            raise ConfigError(f"embedding size d must be positive, got {d}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.depth, self.width, self.buckets = d, depth, width, buckets
        self.expansion: NumExpansionParams | None = None
        self.deep: NumDeepParams | None = None
        self.linear: Tensor | None = None
        self.discretization: DiscretizationParams | None = None
        m = self.method
        if m is NumMethod.LINEAR:
            self.linear = Tensor(rng.normal(0.0, 1.0, d), True, prefix + "e")
        elif m is NumMethod.DISCRETIZE:
            self.discretization = DiscretizationParams.create(d, buckets, rng, temperature, prefix)
        elif m is NumMethod.DEEP:
            self.expansion = NumExpansionParams.create(d, prefix)
            self.deep = NumDeepParams.create(d, depth, width, rng, cap, prefix)

    @property
    def dim(self) -> int:
        return 1 if self.method is NumMethod.NONE else self.d

    def __call__(self, x) -> Tensor:
        m = self.method
        if m is NumMethod.NONE:
            return _lift(_as_input(x))
        if m is NumMethod.HANDCRAFTED:
            return handcrafted(x, self.d)
        if m is NumMethod.LINEAR:
            return _lift(_as_input(x)) * self.linear
        if m is NumMethod.DISCRETIZE:
            return discretize_embed(x, self.discretization)
        return deep_transform_num(expand(x, self.expansion), self.deep)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        ps: list[Tensor] = []
        if self.linear is not None:
            ps.append(self.linear)
        if self.discretization is not None:
            ps += self.discretization.parameters()
        if self.expansion is not None:
            ps += self.expansion.parameters() + self.deep.parameters()
        return [(p.name, p) for p in ps]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return param_count_numerical(self.method, self.d, self.depth, self.width, self.buckets)

    def param_extras(self) -> dict[str, int]:
        return numerical_param_extras(self.method, self.d, self.buckets)


def embed_numerical(x, embedder: NumericalEmbedder) -> Tensor:
    return embedder(x)
