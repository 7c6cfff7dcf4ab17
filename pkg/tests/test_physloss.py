"""Physics-informed loss: measurement models, loss values, gradient pieces, rank guard."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedtse import ctm
from fedtse.ctm import Cell, Edge, FundamentalDiagram, Network
from fedtse.nn import HostModel, init
from fedtse.physloss import (
    GUEST_DENSITY,
    GUEST_SPEED,
    HOST_FLOW,
    MeasurementModel,
    MeasurementTerm,
    NoiseSpec,
    PairBatch,
    PhysicsLossError,
    QuerySet,
    guard_queries,
    loss_cotangent,
    measure,
    measurement_jacobian,
    physics_gradients,
    physics_loss,
    rank_guard,
)

FD = FundamentalDiagram(50.0, 150.0, 1800.0, 20.0)


def chain(n: int) -> Network:
    cells = [Cell(f"c{i}", 0.15, FD, is_source=i == 0, is_sink=i == n - 1) for i in range(n)]
    return Network(cells, [Edge(f"c{i}", f"c{i + 1}") for i in range(n - 1)], 10.0)


def const_attempt(net: Network, rate: float):
    def attempt_of(points):
        a = np.zeros((len(points), net.n_cells))
        a[:, net.is_source] = rate
        return a

    return attempt_of


class TestMeasurement:
    def test_host_selector(self):
        m = MeasurementModel.build(HOST_FLOW, [1, 7], 50.0, 9)
        y = np.arange(18.0)
        np.testing.assert_array_equal(measure(m, y), [10.0, 16.0])
        jac = measurement_jacobian(m, y)
        assert set(np.unique(jac)) == {0.0, 1.0} and np.all(jac.sum(axis=1) == 1.0)

    def test_speed_oracle(self):
        m = MeasurementModel.build(GUEST_SPEED, [0], 3.0, 1)
        y = np.array([50.0, 900.0])
        assert measure(m, y)[0] == pytest.approx(18.0)
        np.testing.assert_allclose(measurement_jacobian(m, y)[0], [-0.36, 0.02])

    def test_speed_floor(self):
        m = MeasurementModel.build(GUEST_SPEED, [0], 3.0, 1, floor=0.5)
        assert measure(m, np.array([0.0, 10.0]))[0] == pytest.approx(20.0)
        np.testing.assert_allclose(measurement_jacobian(m, np.array([0.0, 10.0]))[0], [0.0, 2.0])

    def test_density_selector(self):
        m = MeasurementModel.build(GUEST_DENSITY, [2, 0], 1.0, 3)
        np.testing.assert_array_equal(measure(m, np.arange(6.0)), [2.0, 0.0])

    @given(st.integers(0, 10_000))
    def test_speed_jacobian_fd(self, seed):
        rng = np.random.default_rng(seed)
        m = MeasurementModel.build(GUEST_SPEED, [0, 2], 3.0, 3)
        y = np.concatenate([rng.uniform(1.0, 140.0, 3), rng.uniform(0.0, 1800.0, 3)])
        h = 1e-6
        fd = np.stack([(m.measure(y + h * e) - m.measure(y - h * e)) / (2 * h) for e in np.eye(6)], axis=1)
        np.testing.assert_allclose(m.jacobian(y), fd, rtol=1e-5, atol=1e-9)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(kind="bogus", cells=[0], sigma=1.0),
            dict(kind=GUEST_SPEED, cells=[5], sigma=1.0),
            dict(kind=GUEST_SPEED, cells=[0], sigma=0.0),
            dict(kind=GUEST_SPEED, cells=[0], sigma=1.0, weight=-1.0),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(PhysicsLossError):
            MeasurementModel.build(n_cells=3, **kw)

    def test_noise_spec(self):
        ns = NoiseSpec.build(2, 2.0, 10.0)
        np.testing.assert_allclose(ns.inv_var, [0.25, 0.25, 0.01, 0.01])
        with pytest.raises(PhysicsLossError):
            NoiseSpec((1.0, 0.0))


def ctm_trajectory(net: Network, k0: np.ndarray, length: int, rate: float) -> np.ndarray:
    """Noiseless states y_t = g(y_{t-1}) starting from densities ``k0``."""
    att = const_attempt(net, rate)
    y = np.zeros((length, 2 * net.n_cells))
    y[0, : net.n_cells] = k0
    for t in range(length - 1):
        y[t + 1], _ = ctm.model_step(net, y[t : t + 1, : net.n_cells], [t], att([t]), att([t + 1]))
    return y


class TestLoss:
    def test_exact_fit_is_zero(self):
        net = chain(3)
        y = ctm_trajectory(net, np.array([20.0, 40.0, 10.0]), 8, 900.0)
        batch = PairBatch.from_steps(range(7), const_attempt(net, 900.0))
        speed = MeasurementModel.build(GUEST_SPEED, [0, 1, 2], 3.0, 3)
        dens = MeasurementModel.build(GUEST_DENSITY, [1], 2.0, 3)
        y_t = y[batch.first]
        terms = [
            MeasurementTerm(speed, speed.measure(y_t), np.ones((7, 3), bool)),
            MeasurementTerm(dens, dens.measure(y_t), np.ones((7, 1), bool)),
        ]
        noise = NoiseSpec.build(3, 2.0, 60.0)
        assert physics_loss(net, y, batch, terms, noise) == pytest.approx(0.0, abs=1e-18)
        np.testing.assert_allclose(loss_cotangent(net, y, batch, terms, noise), 0.0, atol=1e-12)

    def test_hand_value(self):
        net = chain(2)
        batch = PairBatch.from_steps([0], const_attempt(net, 0.0))
        y = np.zeros((2, 4))
        y[0, :2] = [20.0, 0.0]
        g, _ = ctm.model_step(net, y[:1, :2], [0], np.zeros((1, 2)), np.zeros((1, 2)))
        y[1] = g[0] + np.array([1.0, 0.0, 0.0, 0.0])
        dens = MeasurementModel.build(GUEST_DENSITY, [0], 1.0, 2)
        term = MeasurementTerm(dens, np.array([[23.0]]), np.ones((1, 1), bool))
        # model term 0.5 * 1 / 2^2, measurement term 0.5 * 3^2 / 1
        assert physics_loss(net, y, batch, [term], NoiseSpec.build(2, 2.0, 60.0)) == pytest.approx(4.625)
        np.testing.assert_allclose(g[0, :2], [20.0 - 1000.0 / 54.0, 1000.0 / 54.0])

    def test_masked_entries_skipped(self):
        net = chain(2)
        batch = PairBatch.from_steps([0], const_attempt(net, 0.0))
        y = ctm_trajectory(net, np.array([20.0, 0.0]), 2, 0.0)
        dens = MeasurementModel.build(GUEST_DENSITY, [0], 1.0, 2)
        term = MeasurementTerm(dens, np.array([[999.0]]), np.zeros((1, 1), bool))
        assert physics_loss(net, y, batch, [term], NoiseSpec.build(2, 2.0, 60.0)) == pytest.approx(0.0, abs=1e-18)

    def test_process_weight_linear(self):
        net = chain(3)
        rng = np.random.default_rng(0)
        batch = PairBatch.from_steps([0, 1, 2], const_attempt(net, 600.0))
        y = np.concatenate([rng.uniform(5, 100, (4, 3)), rng.uniform(0, 1500, (4, 3))], axis=1)
        a = physics_loss(net, y, batch, [], NoiseSpec.build(3, 2.0, 60.0))
        b = physics_loss(net, y, batch, [], NoiseSpec.build(3, 1.0, 30.0))  # inverse variance x4
        assert b == pytest.approx(4.0 * a, rel=1e-12)

    def test_misaligned(self):
        net = chain(2)
        batch = PairBatch.from_steps([0, 1], const_attempt(net, 0.0))
        with pytest.raises(PhysicsLossError):
            physics_loss(net, np.zeros((2, 4)), batch, [], NoiseSpec.build(2, 1.0, 1.0))
        dens = MeasurementModel.build(GUEST_DENSITY, [0], 1.0, 2)
        term = MeasurementTerm(dens, np.zeros((1, 1)), np.ones((1, 1), bool))
        with pytest.raises(PhysicsLossError):
            physics_loss(net, np.zeros((3, 4)), batch, [term], NoiseSpec.build(2, 1.0, 1.0))

    def test_pairs_share_points(self):
        batch = PairBatch.from_steps([4, 2, 3], lambda p: np.zeros((len(p), 1)))
        np.testing.assert_array_equal(batch.points, [2, 3, 4, 5])
        np.testing.assert_array_equal(batch.steps, [2, 3, 4])


class Instance:
    """Host model over one guest's outputs feeding a small physics batch."""

    def __init__(self, seed: int, n_cells: int, n_steps: int):
        rng = np.random.default_rng(seed)
        self.net = chain(n_cells)
        n = n_cells
        steps = sorted(rng.choice(20, size=n_steps, replace=False).tolist())
        self.batch = PairBatch.from_steps(steps, const_attempt(self.net, 700.0))
        p = len(self.batch.points)
        self.x0 = rng.normal(size=(p, 2))
        self.z = rng.normal(size=(p, 3))
        scale = np.concatenate([np.full(n, 40.0), np.full(n, 900.0)])
        top = init([5, 6, 2 * n], seed=int(seed))
        top.biases[-1][:] = 1.0  # keeps the estimates in the interior of the diagram
        self.model = HostModel(None, top, scale, [3])
        self.noise = NoiseSpec.build(n, 4.0, 120.0)
        b = len(self.batch.first)
        cells = list(range(n))
        self.host_terms = [MeasurementTerm(MeasurementModel.build(HOST_FLOW, [0], 50.0, n), rng.uniform(0, 1500, (b, 1)), np.ones((b, 1), bool))]
        self.guest_terms = [[
            MeasurementTerm(MeasurementModel.build(GUEST_SPEED, cells, 5.0, n), rng.uniform(10, 50, (b, n)), rng.random((b, n)) < 0.7),
            MeasurementTerm(MeasurementModel.build(GUEST_DENSITY, cells, 3.0, n), rng.uniform(0, 80, (b, n)), np.ones((b, n), bool)),
        ]]

    def y(self, theta=None, z=None):
        m = self.model if theta is None else self.model.with_flat(theta)
        return m.forward(self.x0, [self.z if z is None else z])

    def loss(self, theta=None, z=None):
        terms = self.host_terms + self.guest_terms[0]
        return physics_loss(self.net, self.y(theta, z), self.batch, terms, self.noise)

    def vjp(self, cot):
        _, cache = self.model.forward_cache(self.x0, [self.z])
        g = self.model.backward(cache, cot)
        return g.flat(), g.z

    def jacobians(self):
        return self.model.param_jacobian(self.x0, [self.z])

    def gradients(self, **kw):
        return physics_gradients(self.net, self.y(), self.batch, self.host_terms, self.guest_terms, self.noise, self.vjp, jacobians=self.jacobians, **kw)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        inst = Instance(seed, n_cells=2 + seed % 3, n_steps=1 + seed % 8)
        theta, z = inst.model.flat(), inst.z
        h = 1e-6
        fd_t = np.array([(inst.loss(theta + h * e) - inst.loss(theta - h * e)) / (2 * h) for e in np.eye(len(theta))])
        fd_z = np.zeros_like(z)
        for idx in np.ndindex(*z.shape):
            d = np.zeros_like(z)
            d[idx] = h
            fd_z[idx] = (inst.loss(z=z + d) - inst.loss(z=z - d)) / (2 * h)
        g_t, g_z = inst.gradients().total()
        assert rel_err(g_t, fd_t) < 1e-4
        assert rel_err(g_z[0], fd_z) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_decomposition_matches_monolithic(self, seed):
        inst = Instance(seed, 3, 4)
        terms = inst.host_terms + inst.guest_terms[0]
        mono = inst.vjp(loss_cotangent(inst.net, inst.y(), inst.batch, terms, inst.noise))
        g_t, g_z = inst.gradients().total()
        np.testing.assert_allclose(g_t, mono[0], rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(g_z[0], mono[1][0], rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_query_matrix_matches_backward(self, seed):
        inst = Instance(seed, 3, 5)
        terms = inst.guest_terms[0]
        qs = QuerySet(inst.y(), inst.batch, [t.model for t in terms], [t.mask for t in terms], inst.vjp, inst.jacobians)
        u = qs.pack([t.u for t in terms])
        assert len(u) == sum(qs.block_dims()) == qs.dim
        theta_q, zq = qs.queries()
        want_t, want_z = qs.rmatvec(u)
        np.testing.assert_allclose(theta_q @ u, want_t, rtol=1e-10, atol=1e-9)
        got_z = np.zeros_like(want_z[0])
        for b, c, a in zq[0]:
            got_z[inst.batch.first[b], c] += a @ u
        np.testing.assert_allclose(got_z, want_z[0], rtol=1e-10, atol=1e-9)
        for x, t in zip(qs.unpack(u), terms):
            np.testing.assert_array_equal(x, np.where(t.mask, t.u, 0.0))

    def test_refusal_drops_guest_terms(self):
        inst = Instance(1, 3, 3)
        full = inst.gradients().total()[0]
        refused = inst.gradients(inner_products=lambda k, qs: None)
        host_only = physics_gradients(inst.net, inst.y(), inst.batch, inst.host_terms, [[]], inst.noise, inst.vjp)
        np.testing.assert_allclose(refused.total()[0], host_only.total()[0], rtol=1e-12)
        assert not np.allclose(full, refused.total()[0])


class TestRankGuard:
    def test_single_step_refused(self):
        assert not guard_queries([3], 9, [0], 18).ok

    def test_large_batch_ok(self):
        assert rank_guard(128 * 3, 50).ok

    def test_zero_rank_ok(self):
        assert rank_guard(1, 0).ok

    def test_equal_refused(self):
        d = rank_guard(5, 5)
        assert not d.ok and "does not exceed" in d.reason

    def test_empty_batch_refused(self):
        assert not guard_queries([0, 0], 4, [0, 0], 6).ok

    def test_z_block_condition(self):
        # four steps of three entries each against eight outputs per step: blocks saturate
        assert not guard_queries([3, 3, 3, 3], 0, [8, 8, 8, 8], 18).ok
        assert guard_queries([3, 3, 3, 3], 0, [2, 2, 2, 2], 18).ok
