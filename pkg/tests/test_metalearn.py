"""Meta-trainer oracles: quadratic closed forms, a hand-rolled mixture
oracle, finite-difference meta-gradients, and loop mechanics."""

import dataclasses

import numpy as np
import pytest

from admeta import autodiff as ad
from admeta.adversarial import AttackConfig
from admeta.autodiff import Tensor
from admeta.errors import ContractError
from admeta.metalearn import (
    MetaConfig,
    TrainerKind,
    adml_episode_update,
    adml_meta_grads,
    inner_adapt,
    maml_episode_update,
    mamlad_episode_update,
    meta_train,
)
from admeta.models import ModelSpec, ParamSet, forward, init_params
from admeta.tasks import Episode, sample_episode, synth_blob_source


def quad_loss(params, x, y):
    """L = theta^2, so dL/dtheta = 2 theta; data plays no role."""
    theta = params["theta"]
    return ad.mul(theta, theta)


def quad_setup():
    theta = ParamSet([("theta", Tensor(np.float64(1.0), requires_grad=True))])
    dummy = np.zeros((1, 1))
    labels = np.zeros(1, dtype=np.int64)
    ep = Episode(dummy, labels, dummy, labels, ways=2, shots=1)
    return theta, ep


def quad_cfg(**kw):
    base = dict(
        alpha1=0.1, alpha2=0.1, beta1=0.1, beta2=0.1,
        inner_steps_train=1, meta_batch=1, order="full",
        attack=AttackConfig(epsilon=0.0, value_range=(-1.0, 1.0)),
    )
    base.update(kw)
    return MetaConfig(**base)


def pull_loss(params, x, y):
    """L = 0.5 mean((theta - x)^2); the attack moves x away from theta."""
    d = ad.sub(params["theta"], x)
    return ad.mul(Tensor(np.float64(0.5)), ad.reduce_mean(ad.mul(d, d)))


class TestQuadraticClosedForms:
    # With L = a/2 theta^2 (a = 2) and alpha = 0.1 from theta = 1, each
    # inner step multiplies theta by (1 - alpha a) = 0.8.

    def test_inner_steps(self):
        theta, ep = quad_setup()
        one = inner_adapt(None, theta, ep.support_x, ep.support_y, 0.1, 1,
                          loss_fn=quad_loss)
        two = inner_adapt(None, theta, ep.support_x, ep.support_y, 0.1, 2,
                          loss_fn=quad_loss)
        assert abs(float(one["theta"].data) - 0.8) < 1e-12
        assert abs(float(two["theta"].data) - 0.64) < 1e-12

    def test_inner_losses_out(self):
        theta, ep = quad_setup()
        seen = []
        inner_adapt(None, theta, ep.support_x, ep.support_y, 0.1, 2,
                    loss_fn=quad_loss, losses_out=seen)
        assert seen == [pytest.approx(1.0), pytest.approx(0.64)]

    def test_full_order_meta_update(self):
        # L_meta(v) = (0.8 v)^2 so dL/dv = 1.28 v; beta = 0.1.
        theta, ep = quad_setup()
        new = maml_episode_update(None, theta, [ep], quad_cfg(), loss_fn=quad_loss)
        assert abs(float(new["theta"].data) - (1.0 - 0.1 * 1.28)) < 1e-12

    def test_first_order_meta_update(self):
        # Adapted point treated as constant: g = 2 * 0.8 = 1.6.
        theta, ep = quad_setup()
        new = maml_episode_update(None, theta, [ep], quad_cfg(order="first"),
                                  loss_fn=quad_loss)
        assert abs(float(new["theta"].data) - (1.0 - 0.1 * 1.6)) < 1e-12

    def test_adml_sequential_updates(self):
        # Both cross gradients equal 1.28 at the start point, applied in
        # sequence: 1 -> 0.872 -> 0.744.
        theta, ep = quad_setup()
        new = adml_episode_update(None, theta, [ep], quad_cfg(), loss_fn=quad_loss)
        assert abs(float(new["theta"].data) - 0.744) < 1e-12

    def test_adml_first_order(self):
        # g = 1.6 at both applications: 1 -> 0.84 -> 0.68.
        theta, ep = quad_setup()
        new = adml_episode_update(None, theta, [ep], quad_cfg(order="first"),
                                  loss_fn=quad_loss)
        assert abs(float(new["theta"].data) - 0.68) < 1e-12

    def test_adml_second_grad_at_updated_point(self):
        # After the first step theta1 = 0.872; recomputing the second
        # gradient there gives 1.28 * 0.872, hence 0.872 - 0.1116160.
        theta, ep = quad_setup()
        cfg = quad_cfg(second_grad_at_updated=True)
        new = adml_episode_update(None, theta, [ep], cfg, loss_fn=quad_loss)
        want = 0.872 - 0.1 * 1.28 * 0.872
        assert abs(float(new["theta"].data) - want) < 1e-12

    def test_meta_batch_sums_task_gradients(self):
        # Two identical tasks double the summed meta-gradient.
        theta, ep = quad_setup()
        new = maml_episode_update(None, theta, [ep, ep], quad_cfg(), loss_fn=quad_loss)
        assert abs(float(new["theta"].data) - (1.0 - 0.1 * 2 * 1.28)) < 1e-12


class TestMixtureOracle:
    """MAML-AD against a closed-form scalar model.

    With L = 0.5 mean((theta - x)^2) the adversarial half of the mixture
    is x + eps sign(x - theta0), the inner loop contracts theta toward
    the mixture mean by (1 - alpha) per step, and the meta-gradient
    chains through (1 - alpha)^steps in full order.
    """

    def episode(self):
        xs = np.array([[-1.3], [0.4], [2.1]])
        xq = np.array([[-0.7], [1.6], [2.4], [-2.2]])
        return Episode(xs, np.zeros(3, dtype=np.int64),
                       xq, np.zeros(4, dtype=np.int64), ways=2, shots=1)

    def oracle(self, theta0, ep, eps, alpha, steps, beta, order):
        adv_s = ep.support_x + eps * np.sign(ep.support_x - theta0)
        adv_q = ep.query_x + eps * np.sign(ep.query_x - theta0)
        ms = np.concatenate([ep.support_x, adv_s]).mean()
        mq = np.concatenate([ep.query_x, adv_q]).mean()
        t = theta0
        for _ in range(steps):
            t = t - alpha * (t - ms)
        mult = (1.0 - alpha) ** steps if order == "full" else 1.0
        return theta0 - beta * mult * (t - mq)

    @pytest.mark.parametrize("order", ["full", "first"])
    def test_matches_hand_computation(self, order):
        theta0, eps, alpha, steps, beta = 0.3, 0.25, 0.07, 3, 0.4
        ep = self.episode()
        cfg = MetaConfig(
            alpha1=alpha, beta1=beta, inner_steps_train=steps, meta_batch=1,
            order=order, attack=AttackConfig(epsilon=eps, value_range=(-100.0, 100.0)),
        )
        theta = ParamSet([("theta", Tensor(np.float64(theta0), requires_grad=True))])
        new = mamlad_episode_update(None, theta, [ep], cfg, loss_fn=pull_loss)
        want = self.oracle(theta0, ep, eps, alpha, steps, beta, order)
        assert abs(float(new["theta"].data) - want) < 1e-10

    def test_attack_moves_points_outward(self):
        # Sanity on the oracle itself: with eps = 0 it reduces to MAML.
        theta0, ep = 0.3, self.episode()
        cfg = MetaConfig(
            alpha1=0.07, beta1=0.4, inner_steps_train=3, meta_batch=1,
            attack=AttackConfig(epsilon=0.0, value_range=(-100.0, 100.0)),
        )
        theta = ParamSet([("theta", Tensor(np.float64(theta0), requires_grad=True))])
        mixed = mamlad_episode_update(None, theta, [ep], cfg, loss_fn=pull_loss)
        clean = maml_episode_update(None, theta, [ep], cfg, loss_fn=pull_loss)
        assert abs(float(mixed["theta"].data) - float(clean["theta"].data)) < 1e-12


class TestFiniteDifferenceMetaGradient:
    def setup_problem(self):
        spec = ModelSpec.mlp(ways=2, dim=2, hidden=(2,))
        source = synth_blob_source(dim=2, classes=5, samples_per_class=6,
                                   spread=0.3, seed=4)
        rng = np.random.default_rng(11)
        ep = sample_episode(source, ways=2, shots=2, query_per_class=3, rng=rng)
        theta = init_params(spec, seed=7)
        return spec, theta, ep

    def meta_objective(self, spec, theta, ep, alpha, steps):
        adapted = inner_adapt(spec, theta, ep.support_x, ep.support_y, alpha, steps)
        logits = forward(spec, adapted, Tensor(ep.query_x))
        return float(ad.cross_entropy(logits, ep.query_y).data)

    def test_full_order_gradient_matches_fd(self):
        spec, theta, ep = self.setup_problem()
        alpha, steps = 0.05, 2
        cfg = MetaConfig(alpha1=alpha, beta1=1.0, inner_steps_train=steps,
                         meta_batch=1)
        new = maml_episode_update(spec, theta, [ep], cfg)
        h = 1e-5
        for name, t in theta.items():
            analytic = t.data - new[name].data
            for idx in range(t.data.size):
                def shifted(delta, name=name, idx=idx):
                    items = []
                    for n, p in theta.items():
                        arr = p.data.copy()
                        if n == name:
                            arr.flat[idx] += delta
                        items.append((n, Tensor(arr, requires_grad=True)))
                    return ParamSet(items)
                hi = self.meta_objective(spec, shifted(+h), ep, alpha, steps)
                lo = self.meta_objective(spec, shifted(-h), ep, alpha, steps)
                fd = (hi - lo) / (2 * h)
                err = abs(analytic.flat[idx] - fd) / (1.0 + abs(fd))
                assert err < 1e-4, f"{name}[{idx}]: {analytic.flat[idx]} vs {fd}"


class TestTrainerEquivalences:
    def setup_problem(self):
        spec = ModelSpec.mlp(ways=2, dim=3, hidden=(4,))
        source = synth_blob_source(dim=3, classes=5, samples_per_class=6,
                                   spread=0.2, seed=2)
        rng = np.random.default_rng(5)
        tasks = [sample_episode(source, 2, 2, 3, rng) for _ in range(2)]
        theta = init_params(spec, seed=3)
        return spec, theta, tasks, source

    def test_adml_without_attack_or_second_step_is_maml(self):
        spec, theta, tasks, source = self.setup_problem()
        attack = AttackConfig(epsilon=0.0, value_range=source.value_range)
        cfg = MetaConfig(alpha1=0.05, alpha2=0.05, beta1=0.01, beta2=0.0,
                         inner_steps_train=2, meta_batch=2, attack=attack)
        a = adml_episode_update(spec, theta, tasks, cfg)
        m = maml_episode_update(spec, theta, tasks, cfg)
        for name in theta.names():
            np.testing.assert_array_equal(a[name].data, m[name].data)

    def test_adml_cross_grads_coincide_without_attack(self):
        spec, theta, tasks, source = self.setup_problem()
        attack = AttackConfig(epsilon=0.0, value_range=source.value_range)
        cfg = MetaConfig(alpha1=0.05, alpha2=0.05, beta1=0.01, beta2=0.01,
                         inner_steps_train=2, meta_batch=2, attack=attack)
        g1, g2 = adml_meta_grads(spec, theta, tasks, cfg)
        assert set(g1) == set(theta.names()) == set(g2)
        for name in g1:
            np.testing.assert_array_equal(g1[name].data, g2[name].data)

    def test_adml_attack_changes_the_update(self):
        spec, theta, tasks, source = self.setup_problem()
        attack = AttackConfig(epsilon=0.5, value_range=source.value_range)
        cfg = MetaConfig(alpha1=0.05, alpha2=0.05, beta1=0.01, beta2=0.01,
                         inner_steps_train=2, meta_batch=2, attack=attack)
        zero = dataclasses.replace(cfg, attack=AttackConfig(
            epsilon=0.0, value_range=source.value_range))
        a = adml_episode_update(spec, theta, tasks, cfg)
        b = adml_episode_update(spec, theta, tasks, zero)
        diff = max(np.abs(a[n].data - b[n].data).max() for n in theta.names())
        assert diff > 1e-9

    def test_mamlad_without_attack_is_maml(self):
        # Duplicating every sample leaves mean losses unchanged.
        spec, theta, tasks, source = self.setup_problem()
        attack = AttackConfig(epsilon=0.0, value_range=source.value_range)
        cfg = MetaConfig(alpha1=0.05, beta1=0.01, inner_steps_train=2,
                         meta_batch=2, attack=attack)
        a = mamlad_episode_update(spec, theta, tasks, cfg)
        m = maml_episode_update(spec, theta, tasks, cfg)
        for name in theta.names():
            np.testing.assert_allclose(a[name].data, m[name].data,
                                       rtol=0.0, atol=1e-12)

    def test_zero_inner_rate_is_identity_adaptation(self):
        spec, theta, tasks, _ = self.setup_problem()
        ep = tasks[0]
        out = inner_adapt(spec, theta, ep.support_x, ep.support_y, 0.0, 3)
        for name in theta.names():
            np.testing.assert_array_equal(out[name].data, theta[name].data)

    def test_zero_meta_rate_keeps_parameters(self):
        spec, theta, tasks, _ = self.setup_problem()
        cfg = MetaConfig(alpha1=0.05, beta1=0.0, inner_steps_train=2, meta_batch=2)
        new = maml_episode_update(spec, theta, tasks, cfg)
        for name in theta.names():
            np.testing.assert_array_equal(new[name].data, theta[name].data)


class TestMetaTrainLoop:
    def setup_run(self):
        source = synth_blob_source(dim=4, classes=6, samples_per_class=8,
                                   spread=0.1, seed=0)
        spec = ModelSpec.mlp(ways=2, dim=4, hidden=(4,))
        attack = AttackConfig(epsilon=0.1, value_range=source.value_range)
        cfg = MetaConfig(alpha1=0.05, alpha2=0.05, beta1=0.01, beta2=0.01,
                         inner_steps_train=2, meta_batch=2, episodes=3,
                         shots=1, query_per_class=2, attack=attack)
        return source, spec, cfg

    def test_deterministic_given_rng_seed(self):
        source, spec, cfg = self.setup_run()
        a = meta_train(TrainerKind.MAML, spec, source, cfg,
                       np.random.default_rng(0))
        b = meta_train(TrainerKind.MAML, spec, source, cfg,
                       np.random.default_rng(0))
        for name in a.names():
            assert a[name].data.tobytes() == b[name].data.tobytes()

    def test_zero_episode_budget_returns_start(self):
        source, spec, cfg = self.setup_run()
        cfg = dataclasses.replace(cfg, episodes=0)
        theta0 = init_params(spec, seed=9)
        calls = []
        out = meta_train(TrainerKind.ADML, spec, source, cfg,
                         np.random.default_rng(0), sink=calls.append,
                         theta0=theta0)
        assert calls == []
        for name in theta0.names():
            np.testing.assert_array_equal(out[name].data, theta0[name].data)

    def test_sink_sees_every_episode(self):
        source, spec, cfg = self.setup_run()
        seen = []
        meta_train(TrainerKind.MAML_AD, spec, source, cfg,
                   np.random.default_rng(1),
                   sink=lambda e, th, l: seen.append((e, l)))
        assert [e for e, _ in seen] == [0, 1, 2]
        assert all(np.isfinite(l) for _, l in seen)

    def test_start_parameters_not_mutated(self):
        source, spec, cfg = self.setup_run()
        theta0 = init_params(spec, seed=9)
        before = {n: t.data.tobytes() for n, t in theta0.items()}
        out = meta_train(TrainerKind.ADML, spec, source, cfg,
                         np.random.default_rng(2), theta0=theta0)
        for name, blob in before.items():
            assert theta0[name].data.tobytes() == blob
        moved = max(np.abs(out[n].data - theta0[n].data).max()
                    for n in theta0.names())
        assert moved > 0.0

    def test_result_parameters_are_fresh_leaves(self):
        source, spec, cfg = self.setup_run()
        out = meta_train(TrainerKind.MAML, spec, source, cfg,
                         np.random.default_rng(3))
        for _, t in out.items():
            assert t.requires_grad
            assert t._parents == ()


class TestValidation:
    def test_trainer_kind_normalization(self):
        assert TrainerKind.from_name("ADML") is TrainerKind.ADML
        assert TrainerKind.from_name("maml_ad") is TrainerKind.MAML_AD
        assert TrainerKind.from_name(" Maml ") is TrainerKind.MAML
        with pytest.raises(ContractError):
            TrainerKind.from_name("reptile")

    @pytest.mark.parametrize("kw", [
        dict(alpha1=-0.1),
        dict(beta2=-1e-9),
        dict(inner_steps_train=0),
        dict(inner_steps_test=0),
        dict(meta_batch=0),
        dict(episodes=-1),
        dict(shots=0),
        dict(query_per_class=0),
        dict(order="second"),
    ])
    def test_config_rejects_bad_values(self, kw):
        with pytest.raises(ContractError):
            MetaConfig(**kw)

    def test_zero_step_sizes_are_legal(self):
        MetaConfig(alpha1=0.0, alpha2=0.0, beta1=0.0, beta2=0.0)

    def test_empty_task_list_rejected(self):
        theta, _ = quad_setup()
        with pytest.raises(ContractError):
            maml_episode_update(None, theta, [], quad_cfg(), loss_fn=quad_loss)
        with pytest.raises(ContractError):
            adml_meta_grads(None, theta, [], quad_cfg(), loss_fn=quad_loss)

    def test_inner_adapt_needs_a_step(self):
        theta, ep = quad_setup()
        with pytest.raises(ContractError):
            inner_adapt(None, theta, ep.support_x, ep.support_y, 0.1, 0,
                        loss_fn=quad_loss)
