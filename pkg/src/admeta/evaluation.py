"""Meta-testing: scenario construction, adaptation curves, and the
robustness grid.

A scenario decides what the model under test sees: clean, partially
adversarial (40% of each class), or fully adversarial support, crossed
with a clean or adversarial query. Every report carries per-step loss
and top-1 curves so the adaptation trajectory itself can be inspected,
not just the endpoint.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .adversarial import AttackConfig, fgsm
from .autodiff import Tensor
from .errors import ContractError
from .metalearn import LossFn, MetaConfig, inner_adapt
from .models import ModelSpec, ParamSet, forward
from .tasks import Episode, TaskSource, sample_episode

__all__ = [
    "SUPPORT_MODES",
    "QUERY_MODES",
    "Scenario",
    "EvalReport",
    "confidence_halfwidth",
    "query_metrics",
    "build_scenario_episode",
    "meta_test",
    "scenario_grid",
]

SUPPORT_MODES = ("clean", "mixed40", "adversarial")
QUERY_MODES = ("clean", "adversarial")

MIXED_FRACTION = 0.4


@dataclass(frozen=True)
class Scenario:
    """One cell family of the robustness grid."""

    support_mode: str
    query_mode: str
    epsilon_test: float

    def __post_init__(self):
        if self.support_mode not in SUPPORT_MODES:
            raise ContractError(f"unknown support mode {self.support_mode!r}")
        if self.query_mode not in QUERY_MODES:
            raise ContractError(f"unknown query mode {self.query_mode!r}")
        if self.epsilon_test < 0:
            raise ContractError("epsilon_test must be >= 0")


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Aggregate meta-test outcome over ``num_tasks`` episodes.

    Curves have ``inner_steps_test + 1`` entries; index 0 is the
    unadapted model. ``mean_accuracy`` is the final-step query top-1,
    ``ci_halfwidth`` its normal-approximation 95% interval.
    """

    mean_accuracy: float
    ci_halfwidth: float
    loss_curve: np.ndarray
    top1_curve: np.ndarray
    num_tasks: int

    def __post_init__(self):
        if not 0.0 <= self.mean_accuracy <= 1.0:
            raise ContractError("mean accuracy must lie in [0, 1]")
        if self.loss_curve.shape != self.top1_curve.shape:
            raise ContractError("curve lengths differ")
        if self.num_tasks < 1:
            raise ContractError("report needs at least one task")


def confidence_halfwidth(values) -> float:
    """Normal-approximation 95% halfwidth, 1.96 * sample std / sqrt(n).

    A single value has no sample spread; the halfwidth is 0 by convention.
    """
    arr = np.asarray(values, dtype=np.float64)
    n = arr.size
    if n <= 1:
        return 0.0
    return float(1.96 * arr.std(ddof=1) / np.sqrt(n))


def query_metrics(
    spec: ModelSpec,
    params: ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    loss_fn: Optional[LossFn] = None,
) -> tuple[float, float]:
    """Query loss and top-1 accuracy without touching the graph."""
    with ad.no_record():
        xt = Tensor(x)
        if loss_fn is not None:
            loss = loss_fn(params, xt, y)
            return float(loss.data), float("nan")
        logits = forward(spec, params, xt)
        loss = ad.cross_entropy(logits, y)
    pred = np.argmax(logits.data, axis=1)
    return float(loss.data), float(np.mean(pred == y))


def build_scenario_episode(
    episode: Episode,
    scenario: Scenario,
    spec: ModelSpec,
    params: ParamSet,
    attack: AttackConfig,
    rng: np.random.Generator,
) -> Episode:
    """Apply a scenario's perturbations to a sampled episode.

    Adversarial replacements are generated against ``params`` (the model
    under test, before any adaptation) and keep their labels. The mixed
    mode swaps floor(0.4 * shots) support samples per class, positions
    drawn from ``rng``. Clean-clean returns the episode untouched.
    """
    if scenario.support_mode == "clean" and scenario.query_mode == "clean":
        return episode
    eff = attack.with_epsilon(scenario.epsilon_test)
    support_x = episode.support_x
    if scenario.support_mode == "adversarial":
        support_x = fgsm(
            spec, params, Tensor(episode.support_x), episode.support_y, eff
        ).data
    elif scenario.support_mode == "mixed40":
        if episode.shots < 2:
            raise ContractError("mixed40 support needs shots >= 2")
        swaps = int(MIXED_FRACTION * episode.shots)
        support_x = episode.support_x.copy()
        if swaps > 0:
            adv = fgsm(
                spec, params, Tensor(episode.support_x), episode.support_y, eff
            ).data
            for c in range(episode.ways):
                rows = c * episode.shots + rng.choice(
                    episode.shots, size=swaps, replace=False
                )
                support_x[rows] = adv[rows]
    query_x = episode.query_x
    if scenario.query_mode == "adversarial":
        query_x = fgsm(
            spec, params, Tensor(episode.query_x), episode.query_y, eff
        ).data
    return episode.replaced(support_x=support_x, query_x=query_x)


def _episode_curves(
    spec: ModelSpec,
    theta: ParamSet,
    source: TaskSource,
    scenario: Scenario,
    shots: int,
    cfg: MetaConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    episode = sample_episode(source, spec.ways, shots, cfg.query_per_class, rng)
    episode = build_scenario_episode(episode, scenario, spec, theta, cfg.attack, rng)
    params = theta.detached()
    losses = np.empty(cfg.inner_steps_test + 1)
    accs = np.empty(cfg.inner_steps_test + 1)
    losses[0], accs[0] = query_metrics(spec, params, episode.query_x, episode.query_y)
    for step in range(1, cfg.inner_steps_test + 1):
        params = inner_adapt(
            spec, params, episode.support_x, episode.support_y, cfg.alpha1, 1
        ).detached()
        losses[step], accs[step] = query_metrics(
            spec, params, episode.query_x, episode.query_y
        )
    return losses, accs


def meta_test(
    spec: ModelSpec,
    theta: ParamSet,
    source: TaskSource,
    scenario: Scenario,
    shots: int,
    cfg: MetaConfig,
    num_tasks: int,
    rng: np.random.Generator,
    workers: int = 1,
) -> EvalReport:
    """Evaluate the initialization ``theta`` on fresh scenario episodes.

    Each episode adapts a detached copy for ``cfg.inner_steps_test``
    steps with step size ``cfg.alpha1``; ``theta`` itself is never
    written to. Episodes get independent generators spawned from ``rng``,
    so the result is identical for any worker count.
    """
    if num_tasks < 1:
        raise ContractError("meta_test needs num_tasks >= 1")
    root = np.random.SeedSequence(int(rng.integers(2**63)))
    children = root.spawn(num_tasks)

    def run(i: int) -> tuple[np.ndarray, np.ndarray]:
        child_rng = np.random.Generator(np.random.PCG64(children[i]))
        return _episode_curves(spec, theta, source, scenario, shots, cfg, child_rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(num_tasks)))
    else:
        results = [run(i) for i in range(num_tasks)]
    loss_mat = np.stack([r[0] for r in results])
    acc_mat = np.stack([r[1] for r in results])
    finals = acc_mat[:, -1]
    return EvalReport(
        mean_accuracy=float(finals.mean()),
        ci_halfwidth=confidence_halfwidth(finals),
        loss_curve=loss_mat.mean(axis=0),
        top1_curve=acc_mat.mean(axis=0),
        num_tasks=num_tasks,
    )


def scenario_grid(
    spec: ModelSpec,
    theta: ParamSet,
    source: TaskSource,
    shots: int,
    eps_list,
    cfg: MetaConfig,
    num_tasks: int,
    rng: np.random.Generator,
    workers: int = 1,
) -> list[tuple[Scenario, EvalReport]]:
    """All applicable scenarios crossed with every test budget.

    One-shot settings skip the mixed40 rows. Cell seeds depend on the
    scenario modes but not on epsilon, so clean-clean cells are identical
    across budgets and every budget sees the same episode stream.
    """
    root = int(rng.integers(2**63))
    support_modes = [m for m in SUPPORT_MODES if m != "mixed40" or shots >= 2]
    out = []
    for smode in support_modes:
        si = SUPPORT_MODES.index(smode)
        for qmode in QUERY_MODES:
            qi = QUERY_MODES.index(qmode)
            for eps in eps_list:
                cell_rng = np.random.Generator(
                    np.random.PCG64(np.random.SeedSequence([root, si, qi]))
                )
                scenario = Scenario(
                    support_mode=smode, query_mode=qmode, epsilon_test=float(eps)
                )
                report = meta_test(
                    spec, theta, source, scenario, shots, cfg, num_tasks,
                    cell_rng, workers=workers,
                )
                out.append((scenario, report))
    return out
