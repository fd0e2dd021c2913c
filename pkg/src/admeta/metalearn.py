"""Meta-trainers: MAML, MAML-AD, and the adversarial cross-trainer ADML.

All three share the same skeleton: adapt a task-specific copy of the
shared initialization on the support set (the inner loop), score the
adapted copy on the query set, and push the query-loss gradient back into
the initialization (the meta-update). They differ in where adversarial
samples enter:

* MAML: nowhere; clean support and query.
* MAML-AD: 50/50 clean+adversarial mixtures for both support and query,
  then the plain MAML update.
* ADML: dual inner updates (one on adversarial support, one on clean
  support) scored crosswise (adversarially-adapted parameters on the
  clean query and vice versa), giving two meta-gradients applied in
  sequence.

Meta-gradients are full second-order by default: the inner gradient
steps stay on the graph and are differentiated through. First-order mode
treats the adapted parameters as constants with respect to the
initialization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .adversarial import AttackConfig, fgsm
from .autodiff import GradMap, Tensor
from .errors import ContractError
from .models import ModelSpec, ParamSet, forward, init_params, param_grads
from .tasks import Episode, TaskSource, sample_episode

__all__ = [
    "MetaConfig",
    "TrainerKind",
    "inner_adapt",
    "maml_episode_update",
    "mamlad_episode_update",
    "adml_episode_update",
    "adml_meta_grads",
    "meta_train",
]

LossFn = Callable[[ParamSet, Tensor, np.ndarray], Tensor]

SinkFn = Callable[[int, ParamSet, float], None]


class TrainerKind(enum.Enum):
    MAML = "maml"
    MAML_AD = "maml-ad"
    ADML = "adml"

    @classmethod
    def from_name(cls, name: str) -> "TrainerKind":
        key = name.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ContractError(f"unknown trainer {name!r}")


@dataclass(frozen=True)
class MetaConfig:
    """Step sizes, loop lengths, and attack budget for meta-training.

    ``alpha*`` are inner (task-adaptation) step sizes, ``beta*`` the meta
    step sizes; the second of each pair only matters to ADML.
    ``second_grad_at_updated`` switches ADML's second meta-gradient from
    the episode-start parameters to the once-updated ones.
    """

    alpha1: float = 0.01
    alpha2: float = 0.01
    beta1: float = 0.001
    beta2: float = 0.001
    inner_steps_train: int = 5
    inner_steps_test: int = 10
    meta_batch: int = 4
    order: str = "full"
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.0))
    episodes: int = 2000
    shots: int = 5
    query_per_class: int = 15
    second_grad_at_updated: bool = False

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.inner_steps_train < 1 or self.inner_steps_test < 1:
            raise ContractError("inner step counts must be >= 1")
        if self.meta_batch < 1:
            raise ContractError("meta_batch must be >= 1")
        if self.episodes < 0:
            raise ContractError("episodes must be >= 0")
        if self.shots < 1 or self.query_per_class < 1:
            raise ContractError("shots and query_per_class must be >= 1")
        if self.order not in ("full", "first"):
            raise ContractError(f"order must be 'full' or 'first', got {self.order!r}")


def _batch_loss(
    spec: ModelSpec,
    params: ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    loss_fn: Optional[LossFn],
) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if loss_fn is not None:
        return loss_fn(params, xt, y)
    return ad.cross_entropy(forward(spec, params, xt), y)


def inner_adapt(
    spec: ModelSpec,
    params: ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    steps: int,
    create_graph: bool = False,
    loss_fn: Optional[LossFn] = None,
    losses_out: Optional[list] = None,
) -> ParamSet:
    """Task adaptation: ``steps`` full-batch gradient-descent steps.

    With ``create_graph`` the returned parameters stay differentiable
    with respect to the input parameters, which is what the second-order
    meta-update differentiates through. ``losses_out`` collects the
    support loss seen before each step.
    """
    if steps < 1:
        raise ContractError("inner_adapt needs steps >= 1")
    for _ in range(steps):
        loss = _batch_loss(spec, params, x, y, loss_fn)
        if losses_out is not None:
            losses_out.append(float(loss.data))
        grads = param_grads(loss, params, create_graph=create_graph)
        params = params.step(grads, alpha)
    return params


def _zero_grads(theta: ParamSet) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t.data) for name, t in theta.items()}


def _accumulate(total: dict[str, np.ndarray], grads: GradMap) -> None:
    for name, g in grads.items():
        total[name] += g.data


def _as_gradmap(total: dict[str, np.ndarray]) -> GradMap:
    return {name: Tensor(arr) for name, arr in total.items()}


def _task_meta_grad(
    spec: ModelSpec,
    theta: ParamSet,
    support_x,
    support_y,
    query_x,
    query_y,
    alpha: float,
    cfg: MetaConfig,
    loss_fn: Optional[LossFn],
    losses_out: Optional[list],
) -> GradMap:
    """Gradient w.r.t. theta of the query loss of the adapted parameters."""
    adapted = inner_adapt(
        spec,
        theta,
        support_x,
        support_y,
        alpha,
        cfg.inner_steps_train,
        create_graph=(cfg.order == "full"),
        loss_fn=loss_fn,
        losses_out=losses_out,
    )
    query_loss = _batch_loss(spec, adapted, query_x, query_y, loss_fn)
    return param_grads(query_loss, theta)


def maml_episode_update(
    spec: ModelSpec,
    theta: ParamSet,
    tasks: list[Episode],
    cfg: MetaConfig,
    loss_fn: Optional[LossFn] = None,
    losses_out: Optional[list] = None,
) -> ParamSet:
    """One meta-update from clean episodes; returns fresh parameters."""
    if not tasks:
        raise ContractError("episode update needs at least one task")
    total = _zero_grads(theta)
    for ep in tasks:
        g = _task_meta_grad(
            spec, theta, ep.support_x, ep.support_y, ep.query_x, ep.query_y,
            cfg.alpha1, cfg, loss_fn, losses_out,
        )
        _accumulate(total, g)
    return theta.step(_as_gradmap(total), cfg.beta1).detached()


def _mixed_episode(
    spec: ModelSpec,
    theta: ParamSet,
    ep: Episode,
    cfg: MetaConfig,
    loss_fn: Optional[LossFn],
) -> Episode:
    """Clean + adversarial 50/50 mixture of both episode halves."""
    adv_sup = fgsm(spec, theta, Tensor(ep.support_x), ep.support_y, cfg.attack, loss_fn)
    adv_qry = fgsm(spec, theta, Tensor(ep.query_x), ep.query_y, cfg.attack, loss_fn)
    return Episode(
        support_x=np.concatenate([ep.support_x, adv_sup.data], axis=0),
        support_y=np.concatenate([ep.support_y, ep.support_y], axis=0),
        query_x=np.concatenate([ep.query_x, adv_qry.data], axis=0),
        query_y=np.concatenate([ep.query_y, ep.query_y], axis=0),
        ways=ep.ways,
        shots=2 * ep.shots,
    )


def mamlad_episode_update(
    spec: ModelSpec,
    theta: ParamSet,
    tasks: list[Episode],
    cfg: MetaConfig,
    loss_fn: Optional[LossFn] = None,
    losses_out: Optional[list] = None,
) -> ParamSet:
    """MAML over clean+adversarial mixtures (adversarial share generated
    at the current initialization)."""
    if not tasks:
        raise ContractError("episode update needs at least one task")
    mixed = [_mixed_episode(spec, theta, ep, cfg, loss_fn) for ep in tasks]
    return maml_episode_update(spec, theta, mixed, cfg, loss_fn, losses_out)


def adml_meta_grads(
    spec: ModelSpec,
    theta: ParamSet,
    tasks: list[Episode],
    cfg: MetaConfig,
    loss_fn: Optional[LossFn] = None,
    losses_out: Optional[list] = None,
) -> tuple[GradMap, GradMap]:
    """The two cross meta-gradients, both evaluated at ``theta``.

    g1 flows through the adversarially-adapted parameters scored on the
    clean query; g2 through the cleanly-adapted parameters scored on the
    adversarial query.
    """
    if not tasks:
        raise ContractError("episode update needs at least one task")
    g1_total = _zero_grads(theta)
    g2_total = _zero_grads(theta)
    for ep in tasks:
        adv_sup = fgsm(
            spec, theta, Tensor(ep.support_x), ep.support_y, cfg.attack, loss_fn
        )
        adv_qry = fgsm(
            spec, theta, Tensor(ep.query_x), ep.query_y, cfg.attack, loss_fn
        )
        g1 = _task_meta_grad(
            spec, theta, adv_sup.data, ep.support_y, ep.query_x, ep.query_y,
            cfg.alpha1, cfg, loss_fn, losses_out,
        )
        g2 = _task_meta_grad(
            spec, theta, ep.support_x, ep.support_y, adv_qry.data, ep.query_y,
            cfg.alpha2, cfg, loss_fn, losses_out,
        )
        _accumulate(g1_total, g1)
        _accumulate(g2_total, g2)
    return _as_gradmap(g1_total), _as_gradmap(g2_total)


def adml_episode_update(
    spec: ModelSpec,
    theta: ParamSet,
    tasks: list[Episode],
    cfg: MetaConfig,
    loss_fn: Optional[LossFn] = None,
    losses_out: Optional[list] = None,
) -> ParamSet:
    """Sequential cross meta-update.

    Both gradients are evaluated at the episode-start parameters and
    applied one after the other, unless ``cfg.second_grad_at_updated``
    asks for the second gradient to be recomputed (adversarial query
    regenerated, clean adaptation rerun) at the once-updated point.
    """
    g1, g2 = adml_meta_grads(spec, theta, tasks, cfg, loss_fn, losses_out)
    theta1 = theta.step(g1, cfg.beta1).detached()
    if cfg.second_grad_at_updated:
        g2_total = _zero_grads(theta1)
        for ep in tasks:
            adv_qry = fgsm(
                spec, theta1, Tensor(ep.query_x), ep.query_y, cfg.attack, loss_fn
            )
            g2_i = _task_meta_grad(
                spec, theta1, ep.support_x, ep.support_y, adv_qry.data, ep.query_y,
                cfg.alpha2, cfg, loss_fn, None,
            )
            _accumulate(g2_total, g2_i)
        g2 = _as_gradmap(g2_total)
    return theta1.step(g2, cfg.beta2).detached()


_UPDATES = {
    TrainerKind.MAML: maml_episode_update,
    TrainerKind.MAML_AD: mamlad_episode_update,
    TrainerKind.ADML: adml_episode_update,
}


def meta_train(
    kind: TrainerKind,
    spec: ModelSpec,
    source: TaskSource,
    cfg: MetaConfig,
    rng: np.random.Generator,
    sink: Optional[SinkFn] = None,
    theta0: Optional[ParamSet] = None,
    dtype=np.float64,
) -> ParamSet:
    """Outer training loop over a fixed episode budget.

    Each iteration samples ``cfg.meta_batch`` episodes and applies one
    episode update. ``sink`` is called after every episode with the
    episode index, the current parameters, and the mean inner-loop
    support loss; checkpoint cadence is the sink's business.
    """
    update = _UPDATES[kind]
    if theta0 is not None:
        theta = theta0.detached()
    else:
        theta = init_params(spec, seed=int(rng.integers(2**63)), dtype=dtype)
    for episode in range(cfg.episodes):
        tasks = [
            sample_episode(source, spec.ways, cfg.shots, cfg.query_per_class, rng)
            for _ in range(cfg.meta_batch)
        ]
        losses: list[float] = []
        theta = update(spec, theta, tasks, cfg, losses_out=losses)
        if sink is not None:
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            sink(episode, theta, mean_loss)
    return theta
