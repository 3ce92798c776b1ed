import numpy as np
import pytest

from stabledyn.field import eval_target, eval_velocity
from stabledyn.integrate import (
    NoisePath,
    TimeGrid,
    Trajectory,
    euler_maruyama,
    finite_diff,
    noise_path,
    read_trajectories_csv,
    rk4_solve,
    rk4_solve_batch,
    rk4_solve_unrolled_grad,
    write_trajectories_csv,
)
from stabledyn.nnet import NonFiniteError
from util import assert_close, central_diff_grad, make_field

NO_U = np.zeros(0)


def decay_rhs(x, u):
    return -x


class TestRk4:
    def test_exponential_decay(self):
        traj = rk4_solve(decay_rhs, [1.0], NO_U, TimeGrid(0.0, 1.0, 100))
        assert abs(traj.states[-1, 0] - np.exp(-1.0)) <= 1e-9

    def test_zero_rhs_constant(self):
        traj = rk4_solve(lambda x, u: np.zeros_like(x), [0.3, -2.0], NO_U, TimeGrid(0, 5, 20))
        assert np.all(traj.states == traj.states[0])

    def test_fourth_order_convergence(self):
        # halving h cuts the error on dx=-x by roughly 2^4
        errs = []
        for n in (25, 50):
            traj = rk4_solve(decay_rhs, [1.0], NO_U, TimeGrid(0.0, 1.0, n))
            errs.append(abs(traj.states[-1, 0] - np.exp(-1.0)))
        ratio = errs[0] / errs[1]
        assert 12.0 <= ratio <= 20.0

    def test_batch_solve_matches_single(self):
        grid = TimeGrid(0.0, 1.0, 17)
        x0s = np.array([[1.0], [2.0], [-0.5]])
        batch = rk4_solve_batch(decay_rhs, x0s, np.zeros((3, 0)), grid)
        for i, x0 in enumerate(x0s):
            single = rk4_solve(decay_rhs, x0, NO_U, grid)
            assert_close(batch[i], single.states, rtol=1e-13, floor=1e-13)

    def test_nonfinite_state_reports_step(self):
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="step"):
            rk4_solve(lambda x, u: x * x, [5.0], NO_U, TimeGrid(0, 10, 100))


class TestUnrolledGrad:
    def test_zero_cotangents(self):
        fld = make_field(dim=1, control_dim=1, seed=0)
        grid = TimeGrid(0, 0.5, 5)
        cots = np.zeros((2, 6, 1))
        states, grad = rk4_solve_unrolled_grad(
            fld, np.array([[0.1], [0.4]]), np.array([[0.0], [0.2]]), grid, cots
        )
        assert not grad.any()
        ref = rk4_solve_batch(lambda x, u: eval_velocity(fld, x, u),
                              np.array([[0.1], [0.4]]), np.array([[0.0], [0.2]]), grid)
        assert_close(states, ref, rtol=1e-13, floor=1e-14)

    @pytest.mark.parametrize("n_steps", [1, 7])
    def test_grad_matches_finite_differences(self, n_steps):
        fld = make_field(dim=1, control_dim=1, seed=1, hidden=(4,))
        grid = TimeGrid(0.0, 0.25, n_steps)
        rng = np.random.default_rng(2)
        x0 = rng.uniform(-1, 1, size=(3, 1))
        u = rng.uniform(-1, 1, size=(3, 1))
        cots = rng.normal(size=(3, n_steps + 1, 1))
        _, grad = rk4_solve_unrolled_grad(fld, x0, u, grid, cots)

        def objective(p):
            states = rk4_solve_batch(
                lambda x, uu: eval_velocity(fld.with_params(p), x, uu), x0, u, grid
            )
            return float(np.sum(cots * states))

        fd = central_diff_grad(objective, fld.params)
        assert_close(grad, fd, rtol=1e-3, floor=1e-5, label="unrolled")

    def test_grad_matches_fd_2d_states(self):
        fld = make_field(dim=2, control_dim=2, seed=4, hidden=(4,),
                         decay_bounds=(-1.0, 0.0), target_bounds=(0.0, 1.0))
        grid = TimeGrid(0.0, 0.5, 4)
        rng = np.random.default_rng(5)
        x0 = rng.uniform(0, 1, size=(2, 2))
        u = rng.uniform(0, 1, size=(2, 2))
        cots = rng.normal(size=(2, 5, 2))
        _, grad = rk4_solve_unrolled_grad(fld, x0, u, grid, cots)

        def objective(p):
            states = rk4_solve_batch(
                lambda x, uu: eval_velocity(fld.with_params(p), x, uu), x0, u, grid
            )
            return float(np.sum(cots * states))

        assert_close(grad, central_diff_grad(objective, fld.params), rtol=1e-3, floor=1e-5)


class TestEulerMaruyama:
    def test_zero_diffusion_equals_euler(self):
        grid = TimeGrid(0.0, 1.0, 40)
        noise = noise_path(grid, 1, seed=0)
        traj = euler_maruyama(lambda x: -x, lambda x: np.zeros_like(x), [1.0], grid, noise)
        x = np.array([1.0])
        for n in range(grid.n_steps):
            x = x + grid.h * (-x)
        assert traj.states[-1, 0] == x[0]  # bitwise

    def test_single_step_formula(self):
        grid = TimeGrid(0.0, 0.25, 1)
        noise = NoisePath(np.array([[1.7]]))
        traj = euler_maruyama(lambda x: np.zeros_like(x), lambda x: np.full_like(x, 0.3),
                              [2.0], grid, noise)
        assert_close(traj.states[-1], [2.0 + np.sqrt(0.25) * 0.3 * 1.7], rtol=1e-15)

    def test_seeded_paths_reproducible(self):
        grid = TimeGrid(0.0, 1.0, 10)
        a = euler_maruyama(lambda x: -x, lambda x: 0.1 * np.sqrt(np.abs(x)), [1.0],
                           grid, noise_path(grid, 1, seed=[7, 3]))
        b = euler_maruyama(lambda x: -x, lambda x: 0.1 * np.sqrt(np.abs(x)), [1.0],
                           grid, noise_path(grid, 1, seed=[7, 3]))
        assert np.array_equal(a.states, b.states)

    def test_increment_variance(self):
        # drift 0, diffusion c: Var[x_1 - x_0] = h * c^2 within 10% over 1e4 paths
        grid = TimeGrid(0.0, 0.1, 1)
        c = 0.7
        rng = np.random.default_rng(11)
        incs = []
        for i in range(10000):
            noise = NoisePath(rng.standard_normal((1, 1)))
            traj = euler_maruyama(lambda x: np.zeros_like(x), lambda x: np.full_like(x, c),
                                  [0.0], grid, noise)
            incs.append(traj.states[1, 0])
        var = np.var(incs)
        assert abs(var - grid.h * c * c) <= 0.1 * grid.h * c * c


class TestFiniteDiff:
    def test_constant(self):
        traj = Trajectory(np.linspace(0, 1, 11), np.full((11, 2), 3.3), NO_U)
        assert not finite_diff(traj).any()

    def test_quadratic_exact_inside(self):
        t = np.linspace(0, 2, 21)
        traj = Trajectory(t, t**2, NO_U)
        d = finite_diff(traj)
        assert_close(d[1:-1, 0], 2 * t[1:-1], rtol=1e-12)

    def test_linear_exact_everywhere(self):
        t = np.linspace(0, 5, 26)
        traj = Trajectory(t, 4.0 * t - 1.0, NO_U)
        assert_close(finite_diff(traj)[:, 0], np.ones(26) * 4.0, rtol=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            finite_diff(Trajectory(np.array([0.0]), np.array([[1.0]]), NO_U))


class TestTrajectoryCsv:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(13)
        trajs = [
            Trajectory(
                np.sort(rng.uniform(0, 10, 5)),
                rng.normal(size=(5, 2)) * np.pi,
                rng.normal(size=3),
                traj_id=i,
            )
            for i in range(4)
        ]
        path = tmp_path / "t.csv"
        write_trajectories_csv(path, trajs)
        back = read_trajectories_csv(path)
        assert len(back) == 4
        for a, b in zip(trajs, back):
            assert a.traj_id == b.traj_id
            assert np.array_equal(a.times, b.times)
            assert np.array_equal(a.states, b.states)
            assert np.array_equal(a.control, b.control)

    def test_header_shape(self, tmp_path):
        traj = Trajectory(np.array([0.0, 1.0]), np.zeros((2, 2)), np.zeros(4))
        path = tmp_path / "t.csv"
        write_trajectories_csv(path, [traj])
        header = path.read_text().splitlines()[0]
        assert header == "traj_id,t,x_0,x_1,u_0,u_1,u_2,u_3"


class TestForwardInvariance:
    def test_random_fields_stay_in_hull(self):
        # decay < 0 pulls each coordinate toward the bounded target box, so
        # trajectories never leave hull({x0} U target-bounds box)
        rng = np.random.default_rng(17)
        for trial in range(20):
            dim = int(rng.integers(1, 3))
            fld = make_field(
                dim=dim,
                control_dim=1,
                seed=int(rng.integers(1e6)),
                weight_scale=rng.uniform(0.3, 2.0),
                decay_bounds=(-2.0, -0.05),
                target_bounds=(-1.0, 1.0),
            )
            x0 = rng.uniform(-3, 3, size=(1, dim))
            u = rng.uniform(-1, 1, size=(1, 1))
            states = rk4_solve_batch(
                lambda x, uu: eval_velocity(fld, x, uu), x0, u, TimeGrid(0, 20, 400)
            )[0]
            lo = np.minimum(x0[0], -1.0) - 1e-6
            hi = np.maximum(x0[0], 1.0) + 1e-6
            assert np.all(states >= lo) and np.all(states <= hi)
