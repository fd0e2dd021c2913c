"""Functional neural networks applied against explicit parameter sets.

Two architectures:

* ``conv4``, the few-shot image classifier: four blocks of 3x3 conv (32
  filters), batch norm, ReLU and 2x2 max pooling, then a linear head.
* ``mlp``, linear/ReLU stacks over feature vectors, used for fast
  synthetic experiments on the exact same training code paths.

Models never own their weights: ``forward`` looks parameters up by name
in a :class:`ParamSet`, so the same network can be evaluated at updated
parameters while still differentiating with respect to the originals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import GradMap, Tensor
from .errors import ContractError, ParameterError

__all__ = [
    "ModelSpec",
    "ParamSet",
    "init_params",
    "forward",
    "param_grads",
    "conv_feature_dim",
]

CONV_FILTERS = 32


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: what to build, not the weights themselves."""

    kind: str
    ways: int
    channels: int = 0
    height: int = 0
    width: int = 0
    dim: int = 0
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("conv4", "mlp"):
            raise ContractError(f"unknown model kind {self.kind!r}")
        if self.ways < 2:
            raise ContractError(f"need at least 2 ways, got {self.ways}")
        if self.kind == "conv4" and min(self.channels, self.height, self.width) < 1:
            raise ContractError("conv4 requires positive channels/height/width")
        if self.kind == "mlp" and self.dim < 1:
            raise ContractError("mlp requires a positive feature dim")

    @classmethod
    def conv4(cls, ways: int, channels: int, height: int, width: int) -> "ModelSpec":
        return cls(kind="conv4", ways=ways, channels=channels, height=height, width=width)

    @classmethod
    def mlp(cls, ways: int, dim: int, hidden: Iterable[int] = ()) -> "ModelSpec":
        return cls(kind="mlp", ways=ways, dim=dim, hidden=tuple(int(h) for h in hidden))

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.kind == "conv4":
            return (self.channels, self.height, self.width)
        return (self.dim,)


def conv_feature_dim(spec: ModelSpec) -> int:
    """Flattened feature count after the four conv blocks (floored pooling)."""
    h, w = spec.height, spec.width
    for _ in range(4):
        # Pooling is skipped once a spatial extent degenerates to 1 pixel
        # (tiny test inputs); mirrors forward().
        if h >= 2 and w >= 2:
            h //= 2
            w //= 2
    return CONV_FILTERS * h * w


class ParamSet:
    """Ordered, named collection of parameter tensors.

    Updates are pure: ``step`` returns a new ParamSet built from graph
    operations, leaving the original untouched. That lets one base set and
    several adapted variants coexist inside a single differentiable graph.
    """

    __slots__ = ("_items",)

    def __init__(self, items: Iterable[tuple[str, Tensor]]):
        self._items: dict[str, Tensor] = {}
        for name, value in items:
            if name in self._items:
                raise ParameterError(f"duplicate parameter name {name!r}")
            if not isinstance(value, Tensor):
                raise ParameterError(f"parameter {name!r} is not a Tensor")
            self._items[name] = value

    def names(self) -> list[str]:
        return list(self._items)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._items[name]
        except KeyError:
            raise ParameterError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        total = sum(t.size for t in self._items.values())
        return f"ParamSet({len(self._items)} tensors, {total} scalars)"

    def step(self, grads: Mapping[str, Tensor], lr: float) -> "ParamSet":
        """Gradient-descent update ``value - lr * grad`` as a new ParamSet."""
        updated = []
        for name, value in self._items.items():
            g = grads.get(name)
            if g is None:
                updated.append((name, value))
                continue
            if g.shape != value.shape:
                raise ParameterError(
                    f"gradient for {name!r} has shape {g.shape}, expected {value.shape}"
                )
            rate = Tensor(np.asarray(lr, dtype=value.data.dtype))
            updated.append((name, ad.sub(value, ad.mul(rate, g))))
        return ParamSet(updated)

    def detached(self) -> "ParamSet":
        """Fresh differentiable leaves with copies of the current values."""
        return ParamSet(
            (name, Tensor(t.data.copy(), requires_grad=True))
            for name, t in self._items.items()
        )


def _truncated_normal(rng: np.random.Generator, shape, sigma: float, dtype) -> np.ndarray:
    """Normal draws with |x| > 2*sigma redrawn until none remain."""
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > 2.0 * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * sigma
    return out.astype(dtype)


def _param_schema(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    schema: list[tuple[str, tuple[int, ...]]] = []
    if spec.kind == "conv4":
        cin = spec.channels
        for i in range(1, 5):
            schema.append((f"conv{i}.w", (CONV_FILTERS, cin, 3, 3)))
            schema.append((f"conv{i}.b", (CONV_FILTERS,)))
            schema.append((f"bn{i}.gamma", (CONV_FILTERS,)))
            schema.append((f"bn{i}.beta", (CONV_FILTERS,)))
            cin = CONV_FILTERS
        schema.append(("head.w", (conv_feature_dim(spec), spec.ways)))
        schema.append(("head.b", (spec.ways,)))
    else:
        width = spec.dim
        for i, h in enumerate(spec.hidden, start=1):
            schema.append((f"fc{i}.w", (width, h)))
            schema.append((f"fc{i}.b", (h,)))
            width = h
        schema.append(("head.w", (width, spec.ways)))
        schema.append(("head.b", (spec.ways,)))
    return schema


def init_params(spec: ModelSpec, seed: int, dtype=np.float64) -> ParamSet:
    """Random initialization: truncated-normal weights (sigma 0.02, cut at
    2 sigma), zero biases, unit batch-norm gains."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dtype = np.dtype(dtype)
    params = []
    for name, shape in _param_schema(spec):
        if name.endswith(".w"):
            value = _truncated_normal(rng, shape, 0.02, dtype)
        elif name.endswith(".gamma"):
            value = np.ones(shape, dtype=dtype)
        else:
            value = np.zeros(shape, dtype=dtype)
        params.append((name, Tensor(value, requires_grad=True)))
    return ParamSet(params)


def _check_schema(spec: ModelSpec, params: ParamSet) -> None:
    expected = _param_schema(spec)
    for name, shape in expected:
        if name not in params:
            raise ParameterError(f"missing parameter {name!r} for {spec.kind}")
        got = params[name].shape
        if got != shape:
            raise ParameterError(
                f"parameter {name!r} has shape {got}, expected {shape}"
            )
    if len(params) != len(expected):
        extra = set(params.names()) - {n for n, _ in expected}
        raise ParameterError(f"unexpected parameters: {sorted(extra)}")


def forward(spec: ModelSpec, params: ParamSet, x: Tensor) -> Tensor:
    """Logits for a batch; differentiable w.r.t. both parameters and input."""
    _check_schema(spec, params)
    if spec.kind == "conv4":
        if x.ndim != 4 or x.shape[1:] != spec.input_shape:
            raise ParameterError(
                f"conv4 input must be [B, {spec.channels}, {spec.height}, "
                f"{spec.width}], got {x.shape}"
            )
        h = x
        for i in range(1, 5):
            h = ad.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
            h = ad.batch_norm(h, params[f"bn{i}.gamma"], params[f"bn{i}.beta"])
            h = ad.relu(h)
            if h.shape[2] >= 2 and h.shape[3] >= 2:
                h = ad.max_pool2x2(h)
        h = ad.flatten(h)
    else:
        if x.ndim > 2:
            x = ad.flatten(x)
        if x.ndim != 2 or x.shape[1] != spec.dim:
            raise ParameterError(f"mlp input must be [B, {spec.dim}], got {x.shape}")
        h = x
        for i in range(1, len(spec.hidden) + 1):
            h = ad.relu(ad.add(ad.matmul(h, params[f"fc{i}.w"]), params[f"fc{i}.b"]))
    return ad.add(ad.matmul(h, params["head.w"]), params["head.b"])


def param_grads(loss: Tensor, params: ParamSet, create_graph: bool = False) -> GradMap:
    """Gradients of a scalar loss for every parameter, keyed by name."""
    names = params.names()
    grads = ad.backward(loss, [params[n] for n in names], create_graph=create_graph)
    return dict(zip(names, grads))
