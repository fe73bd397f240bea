import json

import numpy as np
import pytest

from scrubkit.config import builtin_config, parse_config
from scrubkit.data import ClusterSpec, Dataset, ExplicitIndices, WholeClass, gen_clusters, make_split
from scrubkit.errors import ConvergenceFailure, DegenerateFit, InvalidSpec, NoiselessMethod
from scrubkit.infobound import (
    N_ENTROPY_BINS,
    InfoBoundReport,
    RelearnConfig,
    empirical_weight_kl,
    fit_gaussian,
    forgetting_lagrangian,
    local_bound,
    monotone_within_tolerance,
    optimal_noise_check,
    population_kl,
    quadratic_lagrangian,
    readout,
    weight_populations,
)
from scrubkit.models import LogisticModel, MLPModel, QuadraticModel
from scrubkit.scrub import ScrubConfig, ScrubResult, baseline_scrub
from scrubkit.training import TrainConfig, sgd_train

from _fixtures import random_spd


def inert_forget_split():
    """Forget samples at the origin of a bias-free linear model: zero gradient
    and zero curvature, so training with or without them is identical."""
    X = np.array([[1.0, 0.2], [0.3, 1.0], [-1.0, -0.1], [-0.2, -1.0], [1.2, 0.8], [-0.9, -0.7],
                  [0.0, 0.0], [0.0, 0.0]])
    y = np.array([1, 1, 0, 0, 1, 0, 0, 1])
    return make_split(Dataset(X, y, 2), ExplicitIndices((6, 7)))


def test_inert_forget_set_gives_zero_bound():
    split = inert_forget_split()
    spec = LogisticModel(2, 2, bias=False)
    cfg = TrainConfig(learning_rate=0.1, batch_size=3, epochs=5)
    for method in ("robust", "newton", "fisher"):
        rep = local_bound(spec, split, cfg, ScrubConfig(method=method, lam=1e-3), seeds=[0, 1, 2])
        assert rep.mean_nats == pytest.approx(0.0, abs=1e-9)
        assert len(rep.per_seed_nats) == 3


def test_bound_positive_when_forget_set_matters():
    ds = gen_clusters([ClusterSpec((-1.0, 0.0), 0.5, 20, 0), ClusterSpec((1.0, 0.0), 0.5, 20, 1)], seed=0)
    split = make_split(ds, ExplicitIndices(tuple(range(10))))
    rep = local_bound(LogisticModel(2, 2), split, TrainConfig(learning_rate=0.05, epochs=5),
                      ScrubConfig(method="fisher", lam=1e-3), seeds=[0, 1])
    assert rep.mean_nats > 0


def test_noiseless_method_rejected():
    with pytest.raises(NoiselessMethod):
        local_bound(LogisticModel(2, 2), inert_forget_split(), TrainConfig(), ScrubConfig(method="hiding"), [0])


def test_report_sorted_by_seed():
    rep = InfoBoundReport([3.0, 1.0, 2.0], [2, 0, 1], "fisher", 0.1)
    assert rep.seeds == [0, 1, 2] and rep.per_seed_nats == [1.0, 2.0, 3.0]
    assert rep.mean_nats == pytest.approx(2.0)
    with pytest.raises(ValueError):
        InfoBoundReport([-1.0], [0], "fisher", 0.1)


class TestEmpiricalKL:
    cfg = parse_config(builtin_config("fig1_logistic"))

    def test_identity_scrub_keeps_kl(self):
        kl = empirical_weight_kl(self.cfg.model, self.cfg.split, self.cfg.train, None, 20)
        assert kl.kl_after == kl.kl_before
        assert kl.kl_before > 0

    def test_self_consistency_and_bound_direction(self):
        c = self.cfg
        a = weight_populations(c.model, c.split, c.train, c.scrub, range(0, 60))
        b = weight_populations(c.model, c.split, c.train, c.scrub, range(1000, 1060))
        floor = population_kl(a.scrubbed_reference, b.scrubbed_reference)
        assert floor < 0.5
        marginal = population_kl(a.scrubbed, a.scrubbed_reference)
        per_seed = local_bound(c.model, c.split, c.train, c.scrub, list(range(0, 60))).mean_nats
        assert marginal <= per_seed + floor

    def test_guards(self):
        with pytest.raises(InvalidSpec):
            empirical_weight_kl(self.cfg.model, self.cfg.split, self.cfg.train, None, 5)
        big = MLPModel(2, (30,), 2)
        with pytest.raises(InvalidSpec):
            empirical_weight_kl(big, self.cfg.split, self.cfg.train, None, 20)

    def test_fit_gaussian(self):
        with pytest.raises(DegenerateFit):
            fit_gaussian(np.ones((1, 2)))
        with pytest.raises(DegenerateFit):
            fit_gaussian(np.ones((5, 2)))
        W = np.random.default_rng(0).standard_normal((4000, 2)) * [1.0, 3.0]
        g = fit_gaussian(W)
        np.testing.assert_allclose(np.diag(g.cov), [1.0, 9.0], rtol=0.1)


class TestLagrangian:
    spec = QuadraticModel(np.diag([1.0, 4.0]), np.zeros(2))

    def test_no_noise_no_lambda(self):
        res = ScrubResult(np.array([1.0, 1.0]), None, "newton")
        assert forgetting_lagrangian(self.spec, None, res, 0.0, 3.0) == self.spec.loss(np.ones(2))

    def test_expected_loss_under_noise(self):
        cov = np.array([0.3, 0.1])
        res = ScrubResult(np.array([1.0, -1.0]), cov, "fisher", center=np.array([1.0, -1.0]))
        expected = self.spec.loss(res.center) + 0.5 * float(np.diag(self.spec.A) @ cov)
        value = forgetting_lagrangian(self.spec, None, res, 0.0, 0.0, n_noise_draws=40_000)
        # Monte Carlo stddev of the mean is about 0.003 here
        assert value == pytest.approx(expected, abs=0.015)

    def test_full_covariance_draws(self):
        cov = np.array([[0.2, 0.05], [0.05, 0.1]])
        res = ScrubResult(np.zeros(2), cov, "robust")
        value = forgetting_lagrangian(self.spec, None, res, 0.0, 0.0, n_noise_draws=40_000)
        assert value == pytest.approx(0.5 * np.trace(self.spec.A @ cov), abs=0.01)

    def test_affine_in_lambda(self):
        res = ScrubResult(np.ones(2), np.array([0.1, 0.1]), "fisher")
        vals = [forgetting_lagrangian(self.spec, None, res, lam, 2.0, seed=1) for lam in (0.0, 0.5, 1.0)]
        assert vals[0] < vals[1] < vals[2]
        assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0])

    def test_bad_draw_count(self):
        with pytest.raises(InvalidSpec):
            forgetting_lagrangian(self.spec, None, ScrubResult(np.ones(2), None, "x"), 0.0, 0.0, 0)


class TestOptimalNoise:
    def test_scalar(self):
        np.testing.assert_allclose(optimal_noise_check(np.eye(3), 2.0, 1.0), 2 * np.eye(3), atol=1e-12)

    def test_diagonal(self):
        S = optimal_noise_check(np.diag([4.0, 1.0]), 1.0, 1.0)
        np.testing.assert_allclose(S, np.diag([0.5, 1.0]), atol=1e-12)
        np.testing.assert_allclose(S @ np.diag([4.0, 1.0]) @ S, np.eye(2), atol=1e-12)

    def test_minimises_quadratic_lagrangian_on_grid(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            b = rng.uniform(0.2, 5.0, 3)
            lam, sh = 0.3, 1.5
            S = np.diag(optimal_noise_check(np.diag(b), sh, lam))
            grid = np.geomspace(1e-3, 10.0, 20001)
            for i in range(3):
                per_coord = 0.5 * b[i] * grid + 0.5 * lam * sh**2 / grid
                assert S[i] == pytest.approx(grid[np.argmin(per_coord)], rel=1e-3)
            assert quadratic_lagrangian(np.diag(b), S, lam, sh) <= quadratic_lagrangian(np.diag(b), 1.1 * S, lam, sh)

    def test_rejects_indefinite(self):
        with pytest.raises(InvalidSpec):
            optimal_noise_check(np.diag([1.0, -1.0]), 1.0, 1.0)
        with pytest.raises(ConvergenceFailure):
            optimal_noise_check(random_spd(np.random.default_rng(3), 3, 1e-14, 1e10), 1.0, 1.0, tol=1e-30)


class TestReadout:
    ds = gen_clusters(
        [ClusterSpec((-2.0, 0.0), 0.3, 20, 0), ClusterSpec((2.0, 0.0), 0.3, 20, 1), ClusterSpec((0.0, 2.5), 0.3, 20, 2)],
        seed=0,
    )
    test = gen_clusters(
        [ClusterSpec((-2.0, 0.0), 0.3, 20, 0), ClusterSpec((2.0, 0.0), 0.3, 20, 1), ClusterSpec((0.0, 2.5), 0.3, 20, 2)],
        seed=1,
    )
    spec = LogisticModel(2, 3)
    cfg = TrainConfig(learning_rate=0.1, batch_size=5, epochs=20)

    def test_original_model_fits(self):
        split = make_split(self.ds, WholeClass(2))
        w = sgd_train(self.spec, split, self.cfg).final_weights
        rep = readout(self.spec, ScrubResult(w, None, "none"), split, self.test, None)
        assert rep.err_retain == 0.0 and rep.err_forget == 0.0
        assert rep.relearn_epochs is None

    def test_hiding_and_retrain_fail_on_forget_class(self):
        split = make_split(self.ds, WholeClass(2))
        w = sgd_train(self.spec, split, self.cfg).final_weights
        hidden = readout(self.spec, baseline_scrub("hiding", self.spec, w, split), split, self.test, None)
        assert hidden.err_forget == 100.0
        w_r = sgd_train(self.spec, split, self.cfg, retain_only=True).final_weights
        retrained = readout(self.spec, ScrubResult(w_r, None, "retrain"), split, self.test, None)
        assert retrained.err_forget == 100.0
        assert retrained.err_retain == 0.0

    def test_histograms_and_serialisation(self):
        split = make_split(self.ds, WholeClass(2))
        w = np.zeros(self.spec.n_params)
        rep = readout(self.spec, ScrubResult(w, None, "none"), split, self.test, RelearnConfig(max_epochs=2, threshold=0.0))
        assert len(rep.bin_edges) == N_ENTROPY_BINS + 1
        assert rep.bin_edges[0] == 0.0 and rep.bin_edges[-1] == pytest.approx(np.log(3))
        assert sum(rep.entropy_histograms["retain"]) == 40
        assert sum(rep.entropy_histograms["test"]) == 60
        # uniform predictions sit in the top bin
        assert rep.entropy_histograms["forget"][-1] == 20
        assert json.loads(rep.to_json())["relearn_epochs"] == "not_reached"
        lines = rep.histogram_csv().splitlines()
        assert lines[0].startswith("bin_left") and len(lines) == N_ENTROPY_BINS + 1

    @pytest.mark.parametrize("kwargs", [dict(learning_rate=0.0), dict(max_epochs=0), dict(batch_size=0), dict(threshold=-1.0)])
    def test_relearn_config_validation(self, kwargs):
        with pytest.raises(InvalidSpec):
            RelearnConfig(**kwargs)


@pytest.mark.parametrize(
    "values, increasing, expected",
    [
        ([1, 2, 3], True, True),
        ([3, 2, 1], False, True),
        ([1, 2, 1.98, 3], True, True),  # one small inversion
        ([1, 2, 1.5, 3], True, False),  # too large
        ([1, 2, 1.99, 3, 2.99], True, False),  # too many
        ([5.0], True, True),
    ],
)
def test_monotone_within_tolerance(values, increasing, expected):
    assert monotone_within_tolerance(values, increasing) is expected
