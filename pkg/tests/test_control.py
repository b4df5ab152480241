import itertools
import math

import numpy as np
import pytest

from hcqsim.control import (
    COST_TIE_ABS,
    COST_TIE_REL,
    BoxBounds,
    ControlBounds,
    ControlDecision,
    CostWeights,
    ExcitationController,
    IdentifiabilityError,
    InfeasibleControlSetError,
    StateSpaceModel,
    allocate_control,
    check_stability,
    evaluate_cost,
    identify_model,
    load_model_csv,
    save_model_csv,
    spectral_radius,
    step_state,
)

# ---------------------------------------------------------------- oracles


def naive_matmul_step(A, B, x, u):
    """Independent plain-python A x + B u."""
    n = len(A)
    out = []
    for i in range(n):
        acc = 0.0
        for j in range(len(x)):
            acc += A[i][j] * x[j]
        for j in range(len(u)):
            acc += B[i][j] * u[j]
        out.append(acc)
    return out


def cost_term_by_term(Q, R, x_ref, trajectory, horizon):
    """Independent summation oracle for the quadratic criterion."""
    total = 0.0
    for t in range(horizon):
        x, u = trajectory[t]
        d = [x[i] - x_ref[i] for i in range(len(x_ref))]
        for i in range(len(d)):
            for j in range(len(d)):
                total += d[i] * Q[i][j] * d[j]
        for i in range(len(u)):
            for j in range(len(u)):
                total += u[i] * R[i][j] * u[j]
    return total


def brute_force_allocate(model, weights, x, horizon, grid):
    """Exhaustive plain-python enumeration over the share grid; same
    documented tie-break (tolerance band, lexicographic smallest)."""
    m = model.m
    denom = grid - 1
    A = model.A.tolist()
    B = model.B.tolist()
    Q = weights.Q.tolist()
    R = weights.R.tolist()
    x_ref = weights.x_ref.tolist()
    lo, hi = model.control_bounds.lo, model.control_bounds.hi
    candidates = []
    for levels in itertools.product(range(grid), repeat=m):
        if sum(levels) > denom:
            continue
        u = [lv / denom for lv in levels]
        if any(u[i] < lo[i] - 1e-12 or u[i] > hi[i] + 1e-12 for i in range(m)):
            continue
        xs = list(x)
        total = 0.0
        for _ in range(horizon):
            d = [xs[i] - x_ref[i] for i in range(len(xs))]
            for i in range(len(d)):
                for j in range(len(d)):
                    total += d[i] * Q[i][j] * d[j]
            for i in range(m):
                for j in range(m):
                    total += u[i] * R[i][j] * u[j]
            xs = naive_matmul_step(A, B, xs, u)
        candidates.append((levels, u, total))
    if not candidates:
        raise ValueError("infeasible")
    c_min = min(c[2] for c in candidates)
    tol = COST_TIE_ABS + COST_TIE_REL * abs(c_min)
    ties = [c for c in candidates if c[2] <= c_min + tol]
    best = min(ties, key=lambda c: c[0])
    return tuple(best[1])


def eigval_oracle(M):
    """Characteristic-roots oracle via numpy's QR-based eigvals."""
    return float(np.abs(np.linalg.eigvals(M)).max())


def random_weights(rng, n, m):
    Mq = rng.standard_normal((n, n))
    Q = Mq.T @ Mq
    Mr = rng.standard_normal((m, m))
    R = Mr.T @ Mr + 0.1 * np.eye(m)
    x_ref = rng.standard_normal(n)
    return CostWeights(Q=Q, R=R, x_ref=x_ref)


def random_stable_model(rng, n, m, radius=0.9):
    A = rng.standard_normal((n, n))
    rho = eigval_oracle(A)
    if rho > 0:
        A *= radius / rho
    B = rng.standard_normal((n, m))
    return StateSpaceModel(A, B, state_bounds=BoxBounds((-1e9,) * n, (1e9,) * n))


# ---------------------------------------------------------------- step_state


class TestStepState:
    def test_identity_dynamics(self):
        model = StateSpaceModel(np.eye(2), np.zeros((2, 2)))
        out = step_state(model, [1.0, 2.0], [0.3, 0.4])
        assert out.tolist() == [1.0, 2.0]

    def test_hand_arithmetic(self):
        model = StateSpaceModel(0.5 * np.eye(2), np.eye(2))
        out = step_state(model, [2.0, 0.0], [1.0, 1.0])
        assert out.tolist() == [2.0, 1.0]

    def test_matches_naive_matmul_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            A = rng.standard_normal((3, 3))
            B = rng.standard_normal((3, 2))
            model = StateSpaceModel(A, B)
            x = rng.standard_normal(3)
            u = rng.standard_normal(2)
            got = step_state(model, x, u)
            want = naive_matmul_step(A.tolist(), B.tolist(), x.tolist(), u.tolist())
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)

    def test_dimension_mismatch(self):
        model = StateSpaceModel(np.eye(2), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            step_state(model, [1.0, 2.0, 3.0], [0.0])
        with pytest.raises(ValueError):
            step_state(model, [1.0, 2.0], [0.0, 0.0])

    def test_linearity(self):
        rng = np.random.default_rng(2)
        model = StateSpaceModel(rng.standard_normal((4, 4)), rng.standard_normal((4, 3)))
        for _ in range(10):
            x1, x2 = rng.standard_normal(4), rng.standard_normal(4)
            u1, u2 = rng.standard_normal(3), rng.standard_normal(3)
            lhs = step_state(model, x1 + x2, u1 + u2)
            rhs = step_state(model, x1, u1) + step_state(model, x2, u2) - step_state(
                model, np.zeros(4), np.zeros(3)
            )
            np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)
        assert step_state(model, np.zeros(4), np.zeros(3)).tolist() == [0.0] * 4


# ---------------------------------------------------------------- identify


def simulate_pairs(model, T, rng, noise=0.0):
    x = rng.standard_normal(model.n) * 0.1
    pairs = []
    for _ in range(T):
        u = rng.uniform(-1.0, 1.0, model.m)
        pairs.append((x.copy(), u.copy()))
        x = model.A @ x + model.B @ u
        if noise:
            x = x + rng.normal(0.0, noise, model.n)
    return pairs


class TestIdentify:
    def test_generate_then_recover(self):
        rng = np.random.default_rng(3)
        for n, m in ((2, 1), (3, 2), (4, 4)):
            true = random_stable_model(rng, n, m)
            pairs = simulate_pairs(true, 10 * (n + m), rng)
            model, residual = identify_model(pairs, n, m)
            assert np.abs(model.A - true.A).max() < 1e-8
            assert np.abs(model.B - true.B).max() < 1e-8
            assert residual < 1e-8

    def test_zero_trace_not_identifiable(self):
        pairs = [(np.zeros(2), np.zeros(1))] * 20
        with pytest.raises(IdentifiabilityError) as err:
            identify_model(pairs, 2, 1)
        assert "x0" in str(err.value)

    def test_deficient_columns_named(self):
        # u0 is always zero: only that column should be reported.
        rng = np.random.default_rng(4)
        true = random_stable_model(rng, 2, 2)
        pairs = []
        x = rng.standard_normal(2)
        for _ in range(30):
            u = np.array([0.0, rng.uniform(-1, 1)])
            pairs.append((x.copy(), u.copy()))
            x = true.A @ x + true.B @ u
        with pytest.raises(IdentifiabilityError) as err:
            identify_model(pairs, 2, 2)
        assert err.value.deficient_columns == ("u0",)

    def test_noise_residual_calibrated(self):
        # Monte-Carlo residual check: RMS residual must sit near the
        # injected noise level.
        rng = np.random.default_rng(5)
        sigma = 0.01
        true = random_stable_model(rng, 3, 2)
        pairs = simulate_pairs(true, 1000, rng, noise=sigma)
        _, residual = identify_model(pairs, 3, 2)
        assert 0.5 * sigma <= residual <= 2.0 * sigma

    def test_too_short_trace(self):
        rng = np.random.default_rng(6)
        true = random_stable_model(rng, 2, 2)
        pairs = simulate_pairs(true, 4, rng)
        with pytest.raises(ValueError):
            identify_model(pairs, 2, 2)


# ---------------------------------------------------------------- cost


class TestEvaluateCost:
    def test_reference_trajectory_is_free(self):
        w = CostWeights(Q=np.eye(2), R=np.eye(2), x_ref=np.array([0.5, 0.5]))
        traj = [(np.array([0.5, 0.5]), np.zeros(2))] * 5
        assert evaluate_cost(w, traj, 5) == 0.0

    def test_hand_arithmetic(self):
        w = CostWeights(Q=np.eye(2), R=np.eye(2), x_ref=np.zeros(2))
        traj = [(np.array([1.0, 0.0]), np.array([0.0, 1.0]))]
        assert evaluate_cost(w, traj, 1) == pytest.approx(2.0)

    def test_matches_term_by_term_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            w = random_weights(rng, 3, 2)
            traj = [(rng.standard_normal(3), rng.standard_normal(2)) for _ in range(6)]
            got = evaluate_cost(w, traj, 6)
            want = cost_term_by_term(
                w.Q.tolist(), w.R.tolist(), w.x_ref.tolist(),
                [(x.tolist(), u.tolist()) for x, u in traj], 6,
            )
            assert got == pytest.approx(want, rel=1e-12)

    def test_nonnegative_and_positive_off_reference(self):
        rng = np.random.default_rng(8)
        w = CostWeights(Q=np.eye(2), R=np.eye(2), x_ref=np.zeros(2))
        for _ in range(20):
            traj = [(rng.standard_normal(2), rng.standard_normal(2))]
            c = evaluate_cost(w, traj, 1)
            assert c >= 0.0
            if np.any(traj[0][1] != 0.0):
                assert c > 0.0

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            CostWeights(Q=np.array([[0.0, 1.0], [0.0, 0.0]]), R=np.eye(2), x_ref=np.zeros(2))
        with pytest.raises(ValueError):
            CostWeights(Q=np.eye(2), R=-np.eye(2), x_ref=np.zeros(2))
        with pytest.raises(ValueError):
            CostWeights(Q=-np.eye(2), R=np.eye(2), x_ref=np.zeros(2))


# ---------------------------------------------------------------- allocate


class TestAllocateControl:
    def test_useless_control_stays_zero(self):
        # B = 0: shares cannot move the state, PD R forces zero effort.
        model = StateSpaceModel(0.5 * np.eye(4), np.zeros((4, 2)))
        w = CostWeights(Q=np.eye(4), R=np.eye(2), x_ref=np.array([0.0, 0.0, 0.4, 0.4]))
        d = allocate_control(model, w, np.array([0.5, 0.5, 0.2, 0.2]), horizon=3, grid=11)
        assert d.u == (0.0, 0.0)

    def test_symmetric_instance_symmetric_shares(self):
        # Constructed so the unconstrained optimum (0.3, 0.3) is a grid
        # point: cost = const + u'(2R + Q)u - 2 x_ref' Q u with A = 0,
        # B = I, horizon 2.
        model = StateSpaceModel(np.zeros((2, 2)), np.eye(2))
        w = CostWeights(Q=np.eye(2), R=0.5 * np.eye(2), x_ref=np.array([0.6, 0.6]))
        d = allocate_control(model, w, np.zeros(2), horizon=2, grid=11)
        assert d.u[0] == d.u[1] == pytest.approx(0.3)

    def test_equals_brute_force_on_toy_model(self):
        rng = np.random.default_rng(9)
        model = random_stable_model(rng, 2, 2)
        w = random_weights(rng, 2, 2)
        x = rng.standard_normal(2)
        d = allocate_control(model, w, x, horizon=3, grid=11)
        assert d.u == brute_force_allocate(model, w, x, horizon=3, grid=11)

    def test_feasible_on_every_call(self):
        rng = np.random.default_rng(10)
        for _ in range(25):
            n, m = 4, 2
            model = random_stable_model(rng, n, m)
            w = random_weights(rng, n, m)
            d = allocate_control(model, w, rng.standard_normal(n), horizon=2, grid=7)
            assert all(0.0 <= v <= 1.0 for v in d.u)
            assert sum(d.u) <= 1.0 + 1e-12
            assert sorted(d.priority_order) == list(range(m))

    def test_scale_invariance_of_argmin(self):
        rng = np.random.default_rng(11)
        for lam in (0.5, 3.0, 1e3):
            model = random_stable_model(rng, 2, 2)
            w = random_weights(rng, 2, 2)
            scaled = CostWeights(Q=lam * w.Q, R=lam * w.R, x_ref=w.x_ref)
            x = rng.standard_normal(2)
            assert allocate_control(model, w, x, 3, 11).u == \
                allocate_control(model, scaled, x, 3, 11).u

    def test_priority_sorts_by_predicted_backlog(self):
        # Identity dynamics, no control effect: backlog order is just the
        # initial backlog order.
        model = StateSpaceModel(np.eye(4), np.zeros((4, 2)))
        w = CostWeights(Q=np.eye(4), R=np.eye(2), x_ref=np.zeros(4))
        d = allocate_control(model, w, np.array([0.2, 0.9, 0.0, 0.0]), horizon=2, grid=5)
        assert d.priority_order == (1, 0)
        # ties broken by class index
        d = allocate_control(model, w, np.array([0.4, 0.4, 0.0, 0.0]), horizon=2, grid=5)
        assert d.priority_order == (0, 1)

    def test_infeasible_control_set(self):
        bounds = ControlBounds((0.8, 0.8), (1.0, 1.0))  # lo sums above 1
        model = StateSpaceModel(np.eye(2), np.eye(2), control_bounds=bounds)
        w = CostWeights(Q=np.eye(2), R=np.eye(2), x_ref=np.zeros(2))
        with pytest.raises(InfeasibleControlSetError):
            allocate_control(model, w, np.zeros(2), horizon=1, grid=11)

    def test_bad_arguments(self):
        model = StateSpaceModel(np.eye(2), np.eye(2))
        w = CostWeights(Q=np.eye(2), R=np.eye(2), x_ref=np.zeros(2))
        with pytest.raises(ValueError):
            allocate_control(model, w, np.zeros(2), horizon=0, grid=11)
        with pytest.raises(ValueError):
            allocate_control(model, w, np.zeros(2), horizon=1, grid=1)


# ---------------------------------------------------------------- stability


class TestStability:
    def test_half_identity(self):
        model = StateSpaceModel(0.5 * np.eye(3), np.zeros((3, 1)))
        res = check_stability(model)
        assert abs(res.spectral_radius - 0.5) < 1e-10
        assert res.stable

    def test_identity_marginal(self):
        model = StateSpaceModel(np.eye(3), np.zeros((3, 1)))
        res = check_stability(model)
        assert res.spectral_radius == pytest.approx(1.0, abs=1e-9)
        assert not res.stable

    def test_rotation_complex_pair(self):
        A = np.array([[0.0, -0.9], [0.9, 0.0]])
        rho, _ = spectral_radius(A)
        assert rho == pytest.approx(0.9, abs=1e-8)

    def test_nilpotent(self):
        rho, _ = spectral_radius(np.array([[0.0, 1.0], [0.0, 0.0]]))
        assert rho == pytest.approx(0.0, abs=1e-10)

    def test_matches_eigvals_oracle_random(self):
        rng = np.random.default_rng(12)
        for _ in range(15):
            A = rng.standard_normal((4, 4))
            rho, _ = spectral_radius(A)
            assert rho == pytest.approx(eigval_oracle(A), abs=1e-6, rel=1e-6)

    def test_gain_closes_the_loop(self):
        A = np.array([[1.2, 0.0], [0.0, 0.3]])
        B = np.eye(2)
        model = StateSpaceModel(A, B, state_bounds=BoxBounds((-10, -10), (10, 10)))
        K = np.array([[0.9, 0.0], [0.0, 0.0]])  # A - BK = diag(0.3, 0.3)
        res = check_stability(model, gain=K)
        assert res.spectral_radius == pytest.approx(0.3, abs=1e-8)
        assert res.stable
        assert not check_stability(model).stable

    def test_gain_shape_checked(self):
        model = StateSpaceModel(np.eye(2), np.ones((2, 1)))
        with pytest.raises(ValueError):
            check_stability(model, gain=np.ones((2, 2)))


# ---------------------------------------------------------------- misc


class TestModelCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        model = StateSpaceModel(rng.standard_normal((3, 3)), rng.standard_normal((3, 2)))
        path = tmp_path / "model.csv"
        save_model_csv(model, path)
        back = load_model_csv(path)
        np.testing.assert_array_equal(back.A, model.A)
        np.testing.assert_array_equal(back.B, model.B)

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("# A 2 x 2\n1,2\n")
        with pytest.raises(ValueError):
            load_model_csv(path)


class TestControllers:
    def test_excitation_feasible_and_deterministic(self):
        a = ExcitationController(3, seed=5)
        b = ExcitationController(3, seed=5)
        for e in range(20):
            da = a.decide(np.zeros(6), e)
            db = b.decide(np.zeros(6), e)
            assert da.u == db.u and da.priority_order == db.priority_order
            assert sum(da.u) <= 1.0 + 1e-12 and all(v >= 0 for v in da.u)

    def test_decision_validates_permutation(self):
        with pytest.raises(ValueError):
            ControlDecision(u=(0.5,), priority_order=(1,), epoch_index=0)
