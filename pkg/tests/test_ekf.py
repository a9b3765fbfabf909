import numpy as np
import pytest

from estimation.ekf import ObservationSetup, filter_segment, mahalanobis, trajectory_frame
from estimation.errors import InvalidInputError, SingularInnovationError
from estimation.model import NetworkModel, Nonlinearity


def textbook_ekf(a, b, offset, gain, h, q, r, y, x0, p0, linear=False):
    """Independent EKF for x' = A x + B phi(gain * x + offset)."""
    x, p = x0.copy(), p0.copy()
    means, covs = [], []
    for obs in y:
        arg = gain * x + offset
        if linear:
            value, slope = arg, np.ones_like(arg)
        else:
            value, slope = np.tanh(arg), 1.0 / np.cosh(arg) ** 2
        f_jac = a + b @ np.diag(slope * gain)
        x = a @ x + b @ value
        p = f_jac @ p @ f_jac.T + q
        s = h @ p @ h.T + r
        k = np.linalg.solve(s, h @ p).T
        x = x + k @ (obs - h @ x)
        p = (np.eye(len(x)) - k @ h) @ p
        means.append(x)
        covs.append(p)
    return np.array(means), np.array(covs)


class TestObservationSetup:
    def test_m_is_inverse_predicted_covariance(self, rng):
        h = rng.standard_normal((2, 4))
        obs = ObservationSetup(h, 0.1 * np.eye(4), 0.2 * np.eye(2))
        np.testing.assert_allclose(obs.m @ (h @ obs.q @ h.T + obs.r), np.eye(2), atol=1e-12)

    def test_rejects_bad_shapes(self):
        with pytest.raises(InvalidInputError):
            ObservationSetup(np.ones((2, 3)), np.eye(2), np.eye(2))

    def test_rejects_asymmetric_noise(self):
        with pytest.raises(InvalidInputError):
            ObservationSetup(np.eye(2), np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(2))


class TestMahalanobis:
    def test_zero(self):
        assert mahalanobis(np.zeros(3), np.eye(3)) == 0.0

    def test_squared_norm(self):
        assert mahalanobis(np.array([3.0, 4.0]), np.eye(2)) == 25.0

    def test_matches_linear_solve(self, rng):
        h = rng.standard_normal((3, 5))
        q = rng.standard_normal((5, 5))
        q = q @ q.T
        r = np.diag(rng.uniform(0.5, 1.0, size=3))
        obs = ObservationSetup(h, q, r)
        z = rng.standard_normal(3)
        u = np.linalg.solve(h @ q @ h.T + r, z)
        np.testing.assert_allclose(mahalanobis(z, obs.m), z @ u, rtol=1e-10)


class TestFilterSegment:
    def test_hand_computed_scalar_filter(self):
        model = NetworkModel(np.array([[0.5]]), np.zeros((1, 1)), np.zeros(1),
                             nonlinearity=Nonlinearity.IDENTITY)
        obs = ObservationSetup(np.eye(1), np.eye(1), np.eye(1))
        y = np.array([[1.0], [0.2]])
        traj, objective = filter_segment(model, obs, y, np.zeros(1), np.eye(1))

        x1, p1 = 5.0 / 9.0, 5.0 / 9.0
        p_pred2 = 0.25 * p1 + 1.0
        gain2 = p_pred2 / (p_pred2 + 1.0)
        x2 = 0.5 * x1 + gain2 * (0.2 - 0.5 * x1)
        np.testing.assert_allclose(traj.p_pred[:, 0, 0], [1.25, p_pred2], rtol=1e-14)
        np.testing.assert_allclose(traj.x_post[:, 0], [x1, x2], rtol=1e-14)
        np.testing.assert_allclose(traj.p_post[:, 0, 0], [p1, (1 - gain2) * p_pred2], rtol=1e-14)
        # M = 1 / (H Q H^T + R) = 1/2
        expected = 0.5 * (1.0**2 + (0.2 - 0.5 * x1) ** 2) / 2
        np.testing.assert_allclose(objective, expected, rtol=1e-14)

    def test_matches_textbook_ekf(self, rng, make_obs):
        for _ in range(20):
            n = int(rng.integers(2, 6))
            a = 0.5 * np.eye(n) + 0.1 * rng.standard_normal((n, n))
            b = rng.normal(0.0, 0.5, size=(n, n))
            offset, gain = rng.normal(0.0, 0.3, size=n), rng.uniform(0.5, 1.5, size=n)
            model = NetworkModel(a, b, offset, gain=gain)
            obs = make_obs(rng, n)
            y = rng.standard_normal((15, obs.n_measurements))
            x0 = rng.normal(0.0, 0.1, size=n)
            traj, _ = filter_segment(model, obs, y, x0, np.eye(n))
            means, covs = textbook_ekf(a, b, offset, gain, obs.h, obs.q, obs.r, y, x0, np.eye(n))
            np.testing.assert_allclose(traj.x_post, means, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(traj.p_post, covs, rtol=1e-10, atol=1e-12)

    def test_linear_model_matches_kalman_filter(self, rng, make_obs):
        n = 3
        a, b = 0.4 * rng.standard_normal((n, n)), 0.4 * rng.standard_normal((n, n))
        model = NetworkModel(a, b, np.zeros(n), nonlinearity=Nonlinearity.IDENTITY)
        obs = make_obs(rng, n)
        y = rng.standard_normal((25, obs.n_measurements))
        traj, _ = filter_segment(model, obs, y, np.zeros(n), np.eye(n))
        means, _ = textbook_ekf(a + b, np.zeros((n, n)), np.zeros(n), np.ones(n), obs.h, obs.q, obs.r, y,
                                np.zeros(n), np.eye(n), linear=True)
        np.testing.assert_allclose(traj.x_post, means, rtol=1e-10, atol=1e-12)

    def test_infinite_measurement_noise_is_open_loop(self, rng, make_network):
        model = make_network(rng, 3)
        obs = ObservationSetup(rng.standard_normal((2, 3)), 0.01 * np.eye(3), 1e12 * np.eye(2))
        y = rng.standard_normal((10, 2))
        x0 = rng.normal(0.0, 0.1, size=3)
        traj, _ = filter_segment(model, obs, y, x0, np.eye(3))
        x = x0
        for t in range(10):
            x = model.step(x)
            np.testing.assert_allclose(traj.x_post[t], x, atol=1e-6)

    def test_perfect_measurement(self, rng, make_network):
        model = make_network(rng, 3)
        obs = ObservationSetup(np.eye(3), 0.1 * np.eye(3), 1e-12 * np.eye(3))
        y = rng.standard_normal((8, 3))
        traj, _ = filter_segment(model, obs, y, np.zeros(3), np.eye(3))
        np.testing.assert_allclose(traj.x_post, y, atol=1e-6)

    def test_covariances_are_symmetric(self, rng, make_network, make_obs, make_segment):
        model = make_network(rng, 4)
        obs = make_obs(rng, 4)
        traj, objective = filter_segment(model, obs, make_segment(rng, model, obs, 12), np.zeros(4), np.eye(4), 3)
        for p in np.concatenate([traj.p_pred, traj.p_post]):
            np.testing.assert_array_equal(p, p.T)
            assert np.all(np.diag(p) >= 0)
        assert objective >= 0

    def test_warmup_steps_are_not_scored(self, rng, make_network, make_obs):
        model = make_network(rng, 3)
        obs = make_obs(rng, 3)
        y = rng.standard_normal((10, obs.n_measurements))
        traj, objective = filter_segment(model, obs, y, np.zeros(3), np.eye(3), warmup=4)
        z = traj.innovation[4:]
        expected = np.mean([zt @ obs.m @ zt for zt in z])
        np.testing.assert_allclose(objective, expected, rtol=1e-13)

    def test_singular_innovation(self):
        model = NetworkModel(np.eye(2), np.zeros((2, 2)), np.zeros(2))
        obs = ObservationSetup(np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(SingularInnovationError) as info:
            filter_segment(model, obs, np.zeros((3, 2)), np.zeros(2), np.zeros((2, 2)), score=False)
        assert info.value.step == 1

    def test_rejects_warmup_covering_segment(self, rng, make_network, make_obs):
        model = make_network(rng, 3)
        obs = make_obs(rng, 3)
        with pytest.raises(InvalidInputError):
            filter_segment(model, obs, np.zeros((4, obs.n_measurements)), np.zeros(3), np.eye(3), warmup=4)

    def test_trajectory_frame(self, rng, make_network, make_obs):
        model = make_network(rng, 3)
        obs = make_obs(rng, 3)
        traj, _ = filter_segment(model, obs, np.zeros((5, obs.n_measurements)), np.zeros(3), np.eye(3))
        frame = trajectory_frame(traj)
        assert len(frame) == 5
        assert list(frame["step"]) == [1, 2, 3, 4, 5]
        assert "p_diag_2" in frame.columns

    @pytest.mark.parametrize("seed", range(5))
    def test_objective_invariant_to_state_relabeling(self, seed, make_network, make_segment):
        rng = np.random.default_rng(seed)
        n, p = 5, 3
        model = make_network(rng, n)
        root = 0.1 * rng.standard_normal((n, n))
        obs = ObservationSetup(rng.standard_normal((p, n)), root @ root.T + 0.01 * np.eye(n), 0.04 * np.eye(p))
        y = make_segment(rng, model, obs, 20)
        x0 = rng.normal(0.0, 0.1, size=n)

        perm = rng.permutation(n)
        swap = np.eye(n)[perm]
        relabeled = NetworkModel(
            a_matrix=swap @ model.a_matrix @ swap.T,
            b_matrix=swap @ model.b_matrix @ swap.T,
            offset=model.offset[perm],
            gain=model.gain[perm],
            nonlinearity=model.nonlinearity,
            free_mask=model.free_mask[np.ix_(perm, perm)],
            bias=model.bias[perm],
            trainable=model.trainable,
        )
        relabeled_obs = ObservationSetup(obs.h @ swap.T, swap @ obs.q @ swap.T, obs.r)

        traj, objective = filter_segment(model, obs, y, x0, np.eye(n), warmup=3)
        relabeled_traj, relabeled_objective = filter_segment(relabeled, relabeled_obs, y, x0[perm], np.eye(n), warmup=3)
        assert relabeled_objective == pytest.approx(objective, rel=1e-10)
        np.testing.assert_allclose(relabeled_traj.x_post, traj.x_post[:, perm], rtol=1e-10, atol=1e-12)
