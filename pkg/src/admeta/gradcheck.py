"""Gradient verification: finite differences plus closed-form oracles.

Every differentiable op is checked against central finite differences
(h=1e-5 in double precision), and the meta-learning chain is checked
against hand-derived closed forms on a scalar quadratic. The suite backs
both the test-suite assertions and the ``gradcheck`` CLI command.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .adversarial import AttackConfig
from .autodiff import Tensor
from .metalearn import (
    MetaConfig,
    adml_episode_update,
    inner_adapt,
    maml_episode_update,
)
from .models import ParamSet
from .tasks import Episode

__all__ = ["CheckResult", "run_checks", "FD_TOL", "CLOSED_FORM_TOL"]

FD_STEP = 1e-5
FD_TOL = 1e-4
CLOSED_FORM_TOL = 1e-10


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tol


def _fd_max_err(fn: Callable[..., Tensor], arrays: list[np.ndarray]) -> float:
    """Worst relative disagreement between backward and central differences."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    grads = ad.backward(fn(*leaves), leaves)

    def value() -> float:
        with ad.no_record():
            return float(fn(*[Tensor(a) for a in arrays]).data)

    worst = 0.0
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = grad.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = value()
            flat[i] = orig - FD_STEP
            down = value()
            flat[i] = orig
            fd = (up - down) / (2 * FD_STEP)
            worst = max(worst, abs(gflat[i] - fd) / (1.0 + abs(fd)))
    return worst


def _away_from_zero(arr: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push values out of the +-margin band so kinks stay FD-safe."""
    small = np.abs(arr) < margin
    return arr + np.where(small, np.where(arr >= 0, margin, -margin), 0.0)


def _weights(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _scalarize(t: Tensor, w: Tensor) -> Tensor:
    return ad.reduce_sum(ad.mul(t, w))


# -- finite-difference checks, one per op -----------------------------------


def _check_add(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    w = _weights(rng, (3, 4))
    return _fd_max_err(lambda x, y: _scalarize(ad.add(x, y), w), [a, b])


def _check_add_broadcast(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((1, 4))
    w = _weights(rng, (3, 4))
    return _fd_max_err(lambda x, y: _scalarize(ad.add(x, y), w), [a, b])


def _check_sub(rng):
    a = rng.standard_normal((2, 5))
    b = rng.standard_normal((2, 5))
    w = _weights(rng, (2, 5))
    return _fd_max_err(lambda x, y: _scalarize(ad.sub(x, y), w), [a, b])


def _check_mul(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((4, 3))
    w = _weights(rng, (4, 3))
    return _fd_max_err(lambda x, y: _scalarize(ad.mul(x, y), w), [a, b])


def _check_div(rng):
    a = rng.standard_normal((3, 3))
    b = _away_from_zero(rng.standard_normal((3, 3)), margin=0.5)
    w = _weights(rng, (3, 3))
    return _fd_max_err(lambda x, y: _scalarize(x / y, w), [a, b])


def _check_pow(rng):
    a = rng.uniform(0.5, 2.0, (3, 4))
    w = _weights(rng, (3, 4))
    return _fd_max_err(lambda x: _scalarize(ad.pow_s(x, 2.5), w), [a])


def _check_exp(rng):
    a = rng.standard_normal((3, 4))
    w = _weights(rng, (3, 4))
    return _fd_max_err(lambda x: _scalarize(ad.exp(x), w), [a])


def _check_log(rng):
    a = rng.uniform(0.5, 3.0, (3, 4))
    w = _weights(rng, (3, 4))
    return _fd_max_err(lambda x: _scalarize(ad.log(x), w), [a])


def _check_matmul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    w = _weights(rng, (3, 2))
    return _fd_max_err(lambda x, y: _scalarize(ad.matmul(x, y), w), [a, b])


def _check_relu(rng):
    a = _away_from_zero(rng.standard_normal((4, 4)))
    w = _weights(rng, (4, 4))
    return _fd_max_err(lambda x: _scalarize(ad.relu(x), w), [a])


def _check_reduce_sum(rng):
    a = rng.standard_normal((3, 4, 2))
    w = _weights(rng, (3, 2))
    return _fd_max_err(lambda x: _scalarize(ad.reduce_sum(x, axis=1), w), [a])


def _check_reduce_mean(rng):
    a = rng.standard_normal((3, 4, 2))
    w = _weights(rng, (4, 2))
    return _fd_max_err(lambda x: _scalarize(ad.reduce_mean(x, axis=0), w), [a])


def _check_reduce_max(rng):
    a = rng.standard_normal((3, 5))
    w = _weights(rng, (3,))
    return _fd_max_err(lambda x: _scalarize(ad.reduce_max(x, axis=1), w), [a])


def _check_permute(rng):
    a = rng.standard_normal((2, 3, 4))
    w = _weights(rng, (4, 2, 3))
    return _fd_max_err(lambda x: _scalarize(ad.permute(x, (2, 0, 1)), w), [a])


def _check_reshape(rng):
    a = rng.standard_normal((3, 4))
    w = _weights(rng, (2, 6))
    return _fd_max_err(lambda x: _scalarize(ad.reshape(x, (2, 6)), w), [a])


def _check_take_scatter(rng):
    a = rng.standard_normal(10)
    idx = np.array([0, 3, 3, 7, 9])
    w = _weights(rng, (5,))
    return _fd_max_err(lambda x: _scalarize(ad.take_flat(x, idx), w), [a])


def _check_pad_crop(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    w = _weights(rng, (2, 3, 6, 6))
    return _fd_max_err(lambda x: _scalarize(ad.pad2d(x, 1), w), [a])


def _check_cross_entropy(rng):
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 2, 4, 1])
    return _fd_max_err(lambda x: ad.cross_entropy(x, labels), [logits])


def _check_conv2d(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    k = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4)
    w = _weights(rng, (2, 4, 5, 5))
    return _fd_max_err(
        lambda xx, kk, bb: _scalarize(ad.conv2d(xx, kk, bb), w), [x, k, b]
    )


def _check_max_pool(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    w = _weights(rng, (2, 2, 2, 2))
    return _fd_max_err(lambda xx: _scalarize(ad.max_pool2x2(xx), w), [x])


def _check_batch_norm(rng):
    x = rng.standard_normal((4, 3, 2, 2))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    w = _weights(rng, (4, 3, 2, 2))
    return _fd_max_err(
        lambda xx, gg, bb: _scalarize(ad.batch_norm(xx, gg, bb), w), [x, gamma, beta]
    )


# -- closed-form oracles ----------------------------------------------------

QUAD_A = 2.0


def _quad_loss(params: ParamSet, x, y) -> Tensor:
    theta = params["theta"]
    return ad.mul(Tensor(np.float64(0.5 * QUAD_A)), ad.mul(theta, theta))


def _quad_setup() -> tuple[ParamSet, Episode]:
    theta = ParamSet([("theta", Tensor(np.float64(1.0), requires_grad=True))])
    dummy = np.zeros((1, 1))
    labels = np.zeros(1, dtype=np.int64)
    ep = Episode(
        support_x=dummy, support_y=labels, query_x=dummy, query_y=labels,
        ways=2, shots=1,
    )
    return theta, ep


def _quad_cfg(order: str = "full", beta2: float = 0.1) -> MetaConfig:
    return MetaConfig(
        alpha1=0.1, alpha2=0.1, beta1=0.1, beta2=beta2,
        inner_steps_train=1, meta_batch=1, order=order,
        attack=AttackConfig(epsilon=0.0, value_range=(-1.0, 1.0)),
    )


def _check_inner_quadratic(rng):
    theta, ep = _quad_setup()
    one = inner_adapt(
        None, theta, ep.support_x, ep.support_y, 0.1, 1, loss_fn=_quad_loss
    )
    two = inner_adapt(
        None, theta, ep.support_x, ep.support_y, 0.1, 2, loss_fn=_quad_loss
    )
    return max(abs(float(one["theta"].data) - 0.8), abs(float(two["theta"].data) - 0.64))


def _check_meta_quadratic_full(rng):
    theta, ep = _quad_setup()
    new = maml_episode_update(None, theta, [ep], _quad_cfg("full"), loss_fn=_quad_loss)
    return abs(float(new["theta"].data) - (1.0 - 0.1 * 1.28))


def _check_meta_quadratic_first(rng):
    theta, ep = _quad_setup()
    new = maml_episode_update(None, theta, [ep], _quad_cfg("first"), loss_fn=_quad_loss)
    return abs(float(new["theta"].data) - (1.0 - 0.1 * 1.6))


def _check_adml_quadratic(rng):
    theta, ep = _quad_setup()
    new = adml_episode_update(None, theta, [ep], _quad_cfg("full"), loss_fn=_quad_loss)
    return abs(float(new["theta"].data) - 0.744)


def _check_second_order_cube(rng):
    x = Tensor(np.float64(2.0), requires_grad=True)
    y = ad.mul(ad.mul(x, x), x)
    (first,) = ad.backward(y, [x], create_graph=True)
    (second,) = ad.backward(first, [x])
    return abs(float(second.data) - 12.0)


_FD_CHECKS = [
    ("add", _check_add),
    ("add_broadcast", _check_add_broadcast),
    ("sub", _check_sub),
    ("mul", _check_mul),
    ("div", _check_div),
    ("pow", _check_pow),
    ("exp", _check_exp),
    ("log", _check_log),
    ("matmul", _check_matmul),
    ("relu", _check_relu),
    ("reduce_sum", _check_reduce_sum),
    ("reduce_mean", _check_reduce_mean),
    ("reduce_max", _check_reduce_max),
    ("permute", _check_permute),
    ("reshape", _check_reshape),
    ("take_flat", _check_take_scatter),
    ("pad2d", _check_pad_crop),
    ("cross_entropy", _check_cross_entropy),
    ("conv2d", _check_conv2d),
    ("max_pool2x2", _check_max_pool),
    ("batch_norm", _check_batch_norm),
]

_CLOSED_CHECKS = [
    ("second_order_cube", _check_second_order_cube),
    ("inner_quadratic", _check_inner_quadratic),
    ("meta_quadratic_full", _check_meta_quadratic_full),
    ("meta_quadratic_first", _check_meta_quadratic_first),
    ("adml_quadratic", _check_adml_quadratic),
]


@contextmanager
def _corrupted_relu():
    """Swap in a relu whose backward rule is off by 0.1% (fault fixture)."""
    orig = ad.relu

    def bad_relu(a):
        t = ad.as_tensor(a)
        mask = (t.data > 0).astype(t.data.dtype) * 1.001

        def vjp(g):
            return ad.mul(g, Tensor(mask))

        return ad._make(t.data * (t.data > 0), (t,), (vjp,))

    ad.relu = bad_relu
    try:
        yield
    finally:
        ad.relu = orig


def run_checks(fault: Optional[str] = None, seed: int = 0) -> list[CheckResult]:
    """Run every oracle check; ``fault`` injects a known-bad relu rule.

    Returns one result per check. All finite-difference checks share the
    1e-4 relative tolerance, closed forms use 1e-10 absolute.
    """
    results = []
    for i, (name, fn) in enumerate(_FD_CHECKS):
        rng = np.random.Generator(np.random.PCG64(seed + i))
        if fault == name:
            with _corrupted_relu():
                err = fn(rng)
        else:
            err = fn(rng)
        results.append(CheckResult(name=name, max_err=float(err), tol=FD_TOL))
    for i, (name, fn) in enumerate(_CLOSED_CHECKS):
        rng = np.random.Generator(np.random.PCG64(seed + 1000 + i))
        results.append(
            CheckResult(name=name, max_err=float(fn(rng)), tol=CLOSED_FORM_TOL)
        )
    return results
