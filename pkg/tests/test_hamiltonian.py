import numpy as np
import pytest

from mechreg import errors, hamiltonian, kernels, optim


def cloud(seed, n, d, scale=1.0):
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal((n, d))


def spiral_points(n_per_class=100, turns=1.5, seed=0, jitter=0.03):
    rng = np.random.default_rng(seed)
    theta = np.linspace(0.5 * np.pi, (0.5 + 2 * turns) * np.pi, n_per_class)
    r = 0.5 * theta
    base = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    other = -base  # rotation by pi
    pts = np.concatenate([base, other]) + jitter * rng.standard_normal((2 * n_per_class, 2))
    return pts


GAUSS = kernels.gaussian_kernel(bandwidth=1.5, nugget=0.1)
ACT = kernels.activation_kernel(kernels.ActivationSpec("tanh"), nugget=0.1)


class TestEnergy:
    def test_zero_momentum(self):
        state = hamiltonian.PhaseState(q=cloud(0, 4, 2), p=np.zeros((4, 2)))
        assert hamiltonian.energy(GAUSS, state) == 0.0

    def test_single_point_hand_value(self):
        k = kernels.gaussian_kernel(bandwidth=1.0, nugget=0.1)
        state = hamiltonian.PhaseState(q=np.zeros((1, 1)), p=np.full((1, 1), 2.0))
        assert hamiltonian.energy(k, state) == pytest.approx(2.2)

    def test_matches_matrix_oracle(self):
        q = cloud(1, 3, 2)
        p = cloud(2, 3, 2)
        state = hamiltonian.PhaseState(q=q, p=p)
        block = kernels.gaussian_kernel(bandwidth=1.5, nugget=0.1, output_dim=2)
        kk = kernels.gram(block, q)
        expected = 0.5 * float(p.reshape(-1) @ kk @ p.reshape(-1))
        assert hamiltonian.energy(GAUSS, state) == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(errors.DimensionMismatch):
            hamiltonian.PhaseState(q=np.zeros((3, 2)), p=np.zeros((2, 2)))


class TestLeapfrogStep:
    def test_zero_momentum_fixed_point(self):
        state = hamiltonian.PhaseState(q=cloud(3, 5, 2), p=np.zeros((5, 2)))
        after = hamiltonian.leapfrog_step(GAUSS, state, 0.1)
        assert np.array_equal(after.q, state.q)
        assert np.array_equal(after.p, state.p)

    def test_free_particle(self):
        # one Gaussian point: K_r(q,q) = 1 + r for every q, zero position gradient
        k = kernels.gaussian_kernel(bandwidth=1.0, nugget=0.25)
        state = hamiltonian.PhaseState(q=np.array([[0.5, -1.0]]), p=np.array([[2.0, 1.0]]))
        after = hamiltonian.leapfrog_step(k, state, 0.3)
        assert np.allclose(after.q, state.q + 0.3 * 1.25 * state.p, atol=1e-12)
        assert np.allclose(after.p, state.p, atol=1e-12)

    @pytest.mark.parametrize("kernel", [GAUSS, ACT], ids=["gaussian", "activation"])
    def test_time_reversal(self, kernel):
        state = hamiltonian.PhaseState(q=cloud(4, 8, 2), p=0.4 * cloud(5, 8, 2))
        forward = hamiltonian.leapfrog_step(kernel, state, 0.15)
        back = hamiltonian.leapfrog_step(kernel, forward, -0.15)
        assert np.max(np.abs(back.q - state.q)) < 1e-12
        assert np.max(np.abs(back.p - state.p)) < 1e-12

    def test_energy_drift_is_second_order(self):
        pts = spiral_points(25, seed=6)
        p0 = 0.3 * cloud(7, 50, 2)
        k = kernels.gaussian_kernel(bandwidth=5.0, nugget=0.1)

        def max_drift(h):
            steps = round(1.0 / h)
            traj = hamiltonian.integrate(
                k, hamiltonian.PhaseState(q=pts, p=p0), h, steps
            )
            e = traj.energies()
            return np.max(np.abs(e - e[0]) / abs(e[0]))

        ratio = max_drift(0.2) / max_drift(0.1)
        assert 2.5 <= ratio <= 6.0

    def test_momentum_zero_persistence(self):
        p = 0.5 * cloud(8, 6, 2)
        p[2] = 0.0
        traj = hamiltonian.integrate(
            GAUSS, hamiltonian.PhaseState(q=cloud(9, 6, 2), p=p), 0.1, 10
        )
        for state in traj.states:
            assert np.max(np.abs(state.p[2])) < 1e-10


class TestIntegrate:
    def test_zero_steps(self):
        state = hamiltonian.PhaseState(q=cloud(10, 3, 2), p=cloud(11, 3, 2))
        traj = hamiltonian.integrate(GAUSS, state, 0.1, 0)
        assert len(traj.states) == 1
        assert traj.states[0] is state

    def test_free_particle_exact(self):
        k = kernels.gaussian_kernel(bandwidth=1.0, nugget=0.5)
        q0 = np.array([[1.0, 2.0]])
        p0 = np.array([[-0.5, 0.25]])
        traj = hamiltonian.integrate(k, hamiltonian.PhaseState(q=q0, p=p0), 0.1, 10)
        assert np.allclose(traj.final.q, q0 + 1.0 * 1.5 * p0, atol=1e-10)

    def test_richardson_self_convergence(self):
        state = hamiltonian.PhaseState(q=cloud(12, 6, 2), p=0.5 * cloud(13, 6, 2))

        def terminal(h):
            return hamiltonian.integrate(GAUSS, state, h, round(1.0 / h)).final.q

        gap1 = np.linalg.norm(terminal(0.2) - terminal(0.1))
        gap2 = np.linalg.norm(terminal(0.1) - terminal(0.05))
        assert 2.8 <= gap1 / gap2 <= 5.2

    def test_records_times(self):
        state = hamiltonian.PhaseState(q=cloud(14, 2, 2), p=cloud(15, 2, 2))
        traj = hamiltonian.integrate(GAUSS, state, 0.25, 4)
        assert [s.t for s in traj.states] == pytest.approx([0.0, 0.25, 0.5, 0.75, 1.0])


class TestAdjoint:
    def test_zero_terminal_grad(self):
        g = hamiltonian.adjoint_grad_p0(
            GAUSS, cloud(16, 4, 2), cloud(17, 4, 2), 0.1, 5, np.zeros((4, 2))
        )
        assert np.allclose(g, 0.0)

    def test_free_particle_linear_map(self):
        k = kernels.gaussian_kernel(bandwidth=1.0, nugget=0.3)
        g = np.array([[1.0, -2.0]])
        out = hamiltonian.adjoint_grad_p0(
            k, np.zeros((1, 2)), np.array([[0.4, 0.1]]), 0.2, 5, g
        )
        assert np.allclose(out, 1.0 * 1.3 * g, atol=1e-10)

    @pytest.mark.parametrize("kernel", [GAUSS, ACT], ids=["gaussian", "activation"])
    def test_matches_finite_differences(self, kernel):
        x = cloud(18, 3, 2)
        p0 = 0.5 * cloud(19, 3, 2)
        weights = cloud(20, 3, 2)
        h, steps = 0.1, 5

        def scalar(p):
            traj = hamiltonian.integrate(
                kernel, hamiltonian.PhaseState(q=x, p=p.reshape(3, 2)), h, steps
            )
            return float(np.sum(weights * traj.final.q))

        grad = hamiltonian.adjoint_grad_p0(kernel, x, p0, h, steps, weights)
        flat = p0.reshape(-1)
        fd = np.zeros_like(flat)
        eps = 1e-6
        for i in range(flat.size):
            bump = np.zeros_like(flat)
            bump[i] = eps
            fd[i] = (scalar(flat + bump) - scalar(flat - bump)) / (2 * eps)
        rel = np.max(np.abs(grad.reshape(-1) - fd)) / max(np.max(np.abs(fd)), 1e-12)
        assert rel < 1e-6

    def test_sweep_returns_position_cotangent_too(self):
        x = cloud(21, 3, 2)
        p0 = 0.5 * cloud(22, 3, 2)
        weights = cloud(23, 3, 2)
        traj = hamiltonian.integrate(GAUSS, hamiltonian.PhaseState(q=x, p=p0), 0.1, 4)
        q_bar, _ = hamiltonian.adjoint_sweep(traj, weights)

        def scalar(q):
            t = hamiltonian.integrate(
                GAUSS, hamiltonian.PhaseState(q=q.reshape(3, 2), p=p0), 0.1, 4
            )
            return float(np.sum(weights * t.final.q))

        flat = x.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            bump = np.zeros_like(flat)
            bump[i] = 1e-6
            fd[i] = (scalar(flat + bump) - scalar(flat - bump)) / 2e-6
        assert np.max(np.abs(q_bar.reshape(-1) - fd)) < 1e-6


def quadratic_end_loss(target):
    def loss(q):
        diff = q - target
        return float(np.sum(diff**2)), 2.0 * diff

    return loss


class TestTrajectoryObjective:
    def test_constant_trajectory_zero_action(self):
        x = cloud(24, 4, 2)
        value, grads = hamiltonian.trajectory_objective(GAUSS, [x, x, x], nu=0.7)
        assert value == 0.0
        assert all(np.allclose(g, 0.0) for g in grads)

    def test_single_segment_free_particle(self):
        k = kernels.gaussian_kernel(bandwidth=1.0, nugget=0.5)
        x = np.array([[0.0, 0.0]])
        q1 = np.array([[0.6, -0.2]])
        nu = 0.8
        value, _ = hamiltonian.trajectory_objective(k, [x, q1], nu=nu)
        expected = (nu / 2.0) * float(np.sum(q1**2)) / 1.5
        assert value == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        x = cloud(25, 2, 2)
        qs = [x] + [x + 0.2 * cloud(26 + s, 2, 2) for s in range(3)]
        end = quadratic_end_loss(cloud(30, 2, 2))
        nu = 0.4
        _, grads = hamiltonian.trajectory_objective(GAUSS, qs, nu, end)
        eps = 1e-6
        for s in range(1, 4):
            fd = np.zeros_like(qs[s])
            for i in range(2):
                for j in range(2):
                    qp = [q.copy() for q in qs]
                    qm = [q.copy() for q in qs]
                    qp[s][i, j] += eps
                    qm[s][i, j] -= eps
                    vp, _ = hamiltonian.trajectory_objective(GAUSS, qp, nu, end)
                    vm, _ = hamiltonian.trajectory_objective(GAUSS, qm, nu, end)
                    fd[i, j] = (vp - vm) / (2 * eps)
            rel = np.max(np.abs(grads[s] - fd)) / max(np.max(np.abs(fd)), 1e-12)
            assert rel < 1e-5, f"layer {s}"


class TestMinimizeTrajectory:
    def test_no_end_loss_constant_optimum(self):
        fit = hamiltonian.minimize_trajectory(GAUSS, cloud(31, 3, 2), 3, nu=0.5)
        assert fit.value == pytest.approx(0.0, abs=1e-12)
        assert fit.converged

    def test_rigidity_limit(self):
        x = cloud(32, 3, 2)
        end = quadratic_end_loss(x + 1.0)
        fit = hamiltonian.minimize_trajectory(GAUSS, x, 2, nu=1e9, end_loss=end)
        base = end(x)[0]
        assert abs(fit.value - base) / base < 1e-3
        for q in fit.qs[1:]:
            assert np.max(np.abs(q - x)) < 1e-4

    def test_moves_toward_target_and_energies_level(self):
        x = cloud(33, 4, 2)
        target = x + np.array([1.0, 0.0])
        end = quadratic_end_loss(target)
        fit = hamiltonian.minimize_trajectory(
            GAUSS, x, 4, nu=0.05, end_loss=end, tol=1e-8
        )
        assert fit.value < end(x)[0]
        energies = hamiltonian.trajectory_energies(GAUSS, fit.qs)
        assert energies.max() - energies.min() < 0.2 * max(energies.mean(), 1e-12)


class TestOptimizer:
    def test_quadratic_bowl(self):
        target = np.array([1.0, -2.0, 3.0])

        def f(x):
            d = x - target
            return float(d @ d), 2 * d

        res = optim.minimize_gd(f, np.zeros(3), tol=1e-10)
        assert res.converged
        assert np.max(np.abs(res.x - target)) < 1e-9

    def test_unbounded_objective_raises_divergence(self):
        def f(x):
            return float(-np.sum(x**2)), -2 * x

        with pytest.raises(errors.Divergence) as exc:
            optim.minimize_gd(f, np.ones(2), max_iter=100000)
        assert exc.value.iterate is not None
