import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import minimize

from services import aero, envelope, mpc, qp
from services.errors import ConfigError, DimensionMismatch
from services.linearize import linearize_at
from services.mpc import Controller, HorizonLayout, Measurement, MpcConfig, Strategy
from services.qp import QpSolution, QpStatus
from services.turbine import PlantState

V = 8.0


@pytest.fixture(scope="module")
def cfg(surface):
    return MpcConfig(horizon=4.0, sample_time=0.2).resolved(surface)


@pytest.fixture(scope="module")
def operating_point(params, surface, env):
    """Down-regulated equilibrium at 8 m/s and 70 % of the available power."""
    K = float(envelope.energy_from_lambda(params, 8.0, V))
    P_ref = 0.7 * envelope.max_available_power(env, V) * params.eta_g
    theta = mpc.pitch_command(surface, params, P_ref / params.eta_g, K, V)
    return K, theta, P_ref


# ---------------------------------------------------------------------------
# Strategies and configuration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name, expected", [
    ("MaxKineticEnergy", Strategy.MAX_KINETIC_ENERGY),
    ("MIN_THRUST", Strategy.MIN_THRUST),
    ("ctsr", Strategy.CONSTANT_TIP_SPEED_RATIO),
    (" CRS ", Strategy.CONSTANT_ROTOR_SPEED),
])
def test_strategy_parse(name, expected):
    assert Strategy.parse(name) is expected


def test_unknown_strategy_is_a_config_error():
    with pytest.raises(ConfigError):
        Strategy.parse("fastest")


@pytest.mark.parametrize("strategy, kept", [
    (Strategy.MAX_KINETIC_ENERGY, 4),
    (Strategy.CONSTANT_TIP_SPEED_RATIO, 5),
    (Strategy.CONSTANT_ROTOR_SPEED, 5),
    (Strategy.MIN_THRUST, 6),
])
def test_strategy_weights_keep_one_strategy_term(strategy, kept):
    alphas = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)
    weights = mpc.strategy_weights(strategy, alphas)
    assert weights[:4] == alphas[:4]
    assert [i for i in range(4, 7) if weights[i]] == [kept]


def test_strategy_weights_need_seven_entries():
    with pytest.raises(DimensionMismatch):
        mpc.strategy_weights(Strategy.MIN_THRUST, (1.0, 2.0))


def test_config_validation():
    assert MpcConfig().validate() == []
    assert MpcConfig().N == 100
    errors = MpcConfig(alphas=(0.0,) * 7, horizon=1.0, sample_time=0.3, delta=-1.0,
                       min_thrust_form="linear").validate()
    assert len(errors) == 4


def test_resolved_fills_lambda_opt(surface, lambda_opt):
    assert MpcConfig().resolved(surface).lambda_opt == pytest.approx(lambda_opt)
    assert MpcConfig(lambda_opt=7.0).resolved(surface).lambda_opt == 7.0


def test_kinetic_reference(params, cfg):
    crs = replace(cfg, strategy=Strategy.CONSTANT_ROTOR_SPEED)
    expected = 0.5 * params.J * (cfg.omega_ref_const * params.G_B) ** 2
    assert mpc.kinetic_reference(params, crs, 6.0) == pytest.approx(expected)
    assert mpc.kinetic_reference(params, crs, 10.0) == pytest.approx(expected)

    ctsr = replace(cfg, strategy=Strategy.CONSTANT_TIP_SPEED_RATIO)
    ratio = mpc.kinetic_reference(params, ctsr, 10.0) / mpc.kinetic_reference(params, ctsr, 5.0)
    assert ratio == pytest.approx(4.0)

    with pytest.raises(ConfigError):
        mpc.kinetic_reference(params, MpcConfig(strategy=Strategy.CONSTANT_TIP_SPEED_RATIO), 8.0)


# ---------------------------------------------------------------------------
# Problem layout and assembly
# ---------------------------------------------------------------------------

def test_layout_sizes(cfg):
    N = cfg.N
    assert HorizonLayout.for_config(cfg).n == 6 * N + 1
    minthrust = HorizonLayout.for_config(replace(cfg, strategy=Strategy.MIN_THRUST))
    assert minthrust.n == 7 * N + 1
    assert "fx" in minthrust
    quadratic = HorizonLayout.for_config(replace(cfg, strategy=Strategy.MIN_THRUST, min_thrust_form="quadratic"))
    assert "fx" not in quadratic
    no_stall = HorizonLayout.for_config(replace(cfg, stall_constraint=False))
    assert no_stall.n == 5 * N + 1
    assert no_stall.index("k", 3) == 2 * N + 3


def test_build_problem_shapes(params, surface, env, cfg, operating_point):
    K, theta, P_ref = operating_point
    lin = linearize_at(surface, params, V, K, theta)
    state = PlantState(omega_g=math.sqrt(2 * K / params.J), theta=theta)
    problem = mpc.build_problem(state, V, np.full(cfg.N, P_ref), cfg, env, lin, params)

    layout = HorizonLayout.for_config(cfg)
    assert problem.n == layout.n
    assert problem.A_eq.shape == (cfg.N + 1, layout.n)
    assert problem.b_eq[0] == pytest.approx(K / params.K_rated)
    assert problem.check() == []

    n_cuts = envelope.envelope_cuts(env, V).slopes.size + 8
    assert problem.A_in.shape[0] == cfg.N * (n_cuts + 3 + 1)

    no_models = mpc.build_problem(state, V, np.full(cfg.N, P_ref), cfg, env, None, params)
    assert no_models.A_in.shape[0] == cfg.N * (n_cuts + 3)


def test_build_problem_rejects_wrong_lengths(params, env, cfg, operating_point):
    K, theta, P_ref = operating_point
    state = PlantState(omega_g=math.sqrt(2 * K / params.J), theta=theta)
    with pytest.raises(DimensionMismatch):
        mpc.build_problem(state, V, np.full(cfg.N - 1, P_ref), cfg, env, None, params)
    with pytest.raises(DimensionMismatch):
        mpc.build_problem(state, np.full(3, V), np.full(cfg.N, P_ref), cfg, env, None, params)


@pytest.mark.parametrize("strategy", list(Strategy))
def test_solved_plan_is_feasible_and_consistent(params, surface, env, cfg, operating_point, strategy):
    K, theta, P_ref = operating_point
    run_cfg = replace(cfg, strategy=strategy)
    lin = linearize_at(surface, params, V, K, theta)
    state = PlantState(omega_g=math.sqrt(2 * K / params.J), theta=theta)
    problem = mpc.build_problem(state, V, np.full(cfg.N, P_ref), run_cfg, env, lin, params)
    solution = qp.solve(problem)

    assert solution.status == QpStatus.OPTIMAL
    assert qp.validate(problem, solution.z, tol=1e-7)["feasible"]

    plan = mpc.plan_from_solution(solution.z, HorizonLayout.for_config(run_cfg), run_cfg, params)
    assert plan.K[0] == pytest.approx(K, rel=1e-6)
    assert plan.dynamics_residual(params, run_cfg.sample_time) <= 1e-6 * params.K_rated
    assert np.all(plan.P_g <= params.P_g_rated * (1 + 1e-6))
    available = envelope.eval_envelope(env, V, np.clip(plan.K[:-1], *env.K_range))
    assert np.all(plan.P_r <= available + 1e-6 * params.P_g_rated)
    assert plan.P_g[0] == pytest.approx(P_ref, rel=0.02)


def test_maximum_energy_strategy_stores_more_than_tracking(params, surface, env, cfg, operating_point):
    K, theta, P_ref = operating_point
    lin = linearize_at(surface, params, V, K, theta)
    state = PlantState(omega_g=math.sqrt(2 * K / params.J), theta=theta)

    def final_energy(strategy):
        run_cfg = replace(cfg, strategy=strategy)
        problem = mpc.build_problem(state, V, np.full(cfg.N, P_ref), run_cfg, env, lin, params)
        z = qp.solve(problem).z
        return mpc.plan_from_solution(z, HorizonLayout.for_config(run_cfg), run_cfg, params).K[-1]

    assert final_energy(Strategy.MAX_KINETIC_ENERGY) >= final_energy(Strategy.CONSTANT_TIP_SPEED_RATIO)


def test_strategy_term_value_for_maximum_energy(params, cfg):
    layout = HorizonLayout.for_config(cfg)
    z = np.zeros(layout.n)
    z[layout["k"]] = 1.0
    value = mpc.strategy_term_value(z, cfg, params, V, None)
    assert value == pytest.approx(-cfg.alphas[4])


# ---------------------------------------------------------------------------
# Command recovery
# ---------------------------------------------------------------------------

def test_pitch_command_inverts_rotor_power(params, surface):
    K = float(envelope.energy_from_lambda(params, 8.0, V))
    P_r = 0.5 * params.rho * params.A_r * V ** 3 * aero.cp(surface, 8.0, 0.1)
    assert mpc.pitch_command(surface, params, P_r, K, V) == pytest.approx(0.1, abs=1e-6)


def test_pitch_command_falls_back_to_best_pitch(params, surface):
    K = float(envelope.energy_from_lambda(params, 8.0, V))
    _, best = aero.max_cp(surface, 8.0)
    assert mpc.pitch_command(surface, params, 1e9, K, V) == pytest.approx(float(best), abs=1e-9)


def test_torque_command_clamps(params):
    K = params.K_rated
    omega = math.sqrt(2 * K / params.J)
    assert mpc.torque_command(params, 2e6, K) == pytest.approx(2e6 / (params.eta_g * omega))
    assert mpc.torque_command(params, 1e9, K) == params.T_g_max
    assert mpc.torque_command(params, -5.0, K) == 0.0


def test_steady_state_energy(params, surface, env, cfg):
    P_g = 0.6 * envelope.max_available_power(env, V) * params.eta_g
    crs = replace(cfg, strategy=Strategy.CONSTANT_ROTOR_SPEED)
    expected = 0.5 * params.J * (cfg.omega_ref_const * params.G_B) ** 2
    assert mpc.steady_state_energy(params, surface, env, crs, V, P_g) == pytest.approx(expected)

    K_max_energy = mpc.steady_state_energy(params, surface, env, cfg, V, P_g)
    assert K_max_energy <= params.K_rated
    assert envelope.eval_envelope(env, V, K_max_energy) >= P_g / params.eta_g

    minthrust = replace(cfg, strategy=Strategy.MIN_THRUST)
    K_min_thrust = mpc.steady_state_energy(params, surface, env, minthrust, V, P_g)
    assert params.K_min <= K_min_thrust <= params.K_max


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

def test_controller_step_produces_a_valid_command(params, surface, env, cfg, operating_point):
    K, theta, P_ref = operating_point
    controller = Controller(params, surface, env, cfg)
    command = controller.step(Measurement(K=K, theta=theta, v=V), np.full(cfg.N, P_ref))

    assert command.validate(params) == []
    assert controller.degraded_steps == 0
    assert controller.diagnostics[-1].status == QpStatus.OPTIMAL.value
    assert controller.previous_inputs[1] == pytest.approx(P_ref, rel=0.02)

    again = controller.step(Measurement(K=K, theta=theta, v=V), np.full(cfg.N, P_ref))
    assert again.validate(params) == []
    assert len(controller.diagnostics) == 2


def test_controller_holds_command_when_solver_gives_up(params, surface, env, cfg, operating_point, monkeypatch):
    K, theta, P_ref = operating_point
    controller = Controller(params, surface, env, cfg)
    first = controller.step(Measurement(K=K, theta=theta, v=V), np.full(cfg.N, P_ref))

    def give_up(problem, warm_start=None, settings=None):
        return QpSolution(
            z=np.full(problem.n, np.nan), duals={}, status=QpStatus.MAX_ITER,
            kkt_residual=math.inf, primal_violation=math.inf, iterations=7, objective=math.nan,
        )

    monkeypatch.setattr(qp, "solve", give_up)
    held = controller.step(Measurement(K=K, theta=theta, v=V), np.full(cfg.N, P_ref))
    assert held == first
    assert controller.degraded_steps == 1
    assert controller.diagnostics[-1].degraded


def test_controller_without_history_falls_back_to_reference_torque(params, surface, env, cfg,
                                                                   operating_point, monkeypatch):
    K, theta, P_ref = operating_point
    controller = Controller(params, surface, env, cfg)

    def infeasible(problem, warm_start=None, settings=None):
        return QpSolution(
            z=np.full(problem.n, np.nan), duals={}, status=QpStatus.INFEASIBLE,
            kkt_residual=math.inf, primal_violation=math.inf, iterations=3, objective=math.nan,
        )

    monkeypatch.setattr(qp, "solve", infeasible)
    command = controller.step(Measurement(K=K, theta=theta, v=V), np.full(cfg.N, P_ref))
    assert command.theta_cmd == theta
    assert command.T_g == pytest.approx(mpc.torque_command(params, P_ref, K))


def test_controller_rejects_invalid_config(params, surface, env):
    with pytest.raises(ConfigError):
        Controller(params, surface, env, MpcConfig(horizon=0.1, sample_time=0.2))


def test_control_step_switches_strategy(params, surface, env, cfg, operating_point):
    K, theta, P_ref = operating_point
    controller = Controller(params, surface, env, cfg)
    controller.step(Measurement(K=K, theta=theta, v=V), np.full(cfg.N, P_ref))
    assert controller.previous_z is not None

    minthrust = replace(cfg, strategy=Strategy.MIN_THRUST, lambda_opt=None)
    command = mpc.control_step(controller, Measurement(K=K, theta=theta, v=V), np.full(cfg.N, P_ref), minthrust)
    assert controller.cfg.strategy == Strategy.MIN_THRUST
    assert controller.cfg.lambda_opt == cfg.lambda_opt
    assert command.validate(params) == []
    assert_allclose(controller.last_plan.K[0], K, rtol=1e-6)


# ---------------------------------------------------------------------------
# Small horizons against direct evaluation
# ---------------------------------------------------------------------------

def _direct_cost(z, layout, cfg, params, P_ref, previous):
    """MaxKineticEnergy cost written out term by term, without the constant."""
    P_n, K_n = params.P_g_rated, params.K_rated
    a1, a2, a3, a4, a5, _, _ = cfg.weights
    Ts, N = cfg.sample_time, cfg.N
    pr, pg, k = z[layout["pr"]], z[layout["pg"]], z[layout["k"]]
    pg_path = np.concatenate([[previous[1] / P_n], pg])
    pr_path = np.concatenate([[previous[0] / P_n], pr])
    return float(
        a1 * np.sum((pg - P_ref / P_n) ** 2)
        + a2 / Ts ** 2 * np.sum(np.diff(pg_path) ** 2)
        + a3 / Ts ** 2 * np.sum(np.diff(pr_path) ** 2)
        + a4 / N * np.sum(z[layout["sk"]])
        + np.sum(z[layout["sw"]])
        + np.sum(z[layout["ss"]])
        - a5 / N * np.sum(k[1:])
        + cfg.regularization * np.sum(z ** 2)
    )


def _steady_start(layout, params, K, P_ref):
    """Feasible point that holds K and tracks P_ref exactly."""
    z = np.zeros(layout.n)
    z[layout["k"]] = K / params.K_rated
    z[layout["pg"]] = P_ref / params.P_g_rated
    z[layout["pr"]] = P_ref / params.eta_g / params.P_g_rated
    z[layout["sk"]] = max(0.0, K / params.K_rated - 1.0)
    return z


@pytest.fixture(scope="module")
def short_cfg(surface):
    return MpcConfig(horizon=0.6, sample_time=0.2).resolved(surface)


def test_assembled_cost_matches_direct_evaluation(params, surface, env, short_cfg, operating_point):
    K, theta, P_ref = operating_point
    lin = linearize_at(surface, params, V, K, theta)
    state = PlantState(omega_g=math.sqrt(2 * K / params.J), theta=theta)
    reference = P_ref * np.array([1.0, 1.1, 0.9])
    previous = (P_ref / params.eta_g * 1.02, P_ref * 0.98)
    problem = mpc.build_problem(state, V, reference, short_cfg, env, lin, params, previous_inputs=previous)
    layout = HorizonLayout.for_config(short_cfg)

    rng = np.random.default_rng(5)
    z1, z2 = rng.uniform(0.0, 1.0, (2, layout.n))
    assembled = qp.objective(problem, z1) - qp.objective(problem, z2)
    direct = (_direct_cost(z1, layout, short_cfg, params, reference, previous)
              - _direct_cost(z2, layout, short_cfg, params, reference, previous))
    assert assembled == pytest.approx(direct, rel=1e-9, abs=1e-9)

    k, pr, pg = z1[layout["k"]], z1[layout["pr"]], z1[layout["pg"]]
    c = short_cfg.sample_time * params.P_g_rated / params.K_rated
    expected = np.concatenate([[k[0] - K / params.K_rated], k[1:] - k[:-1] - c * (pr - pg / params.eta_g)])
    assert_allclose(problem.A_eq @ z1 - problem.b_eq, expected, atol=1e-12)


def test_three_step_solution_is_no_worse_than_a_dense_solver(params, env, short_cfg, operating_point):
    K, theta, P_ref = operating_point
    state = PlantState(omega_g=math.sqrt(2 * K / params.J), theta=theta)
    problem = mpc.build_problem(state, V, np.full(short_cfg.N, P_ref), short_cfg, env, None, params)
    layout = HorizonLayout.for_config(short_cfg)
    start = _steady_start(layout, params, K, P_ref)
    assert qp.validate(problem, start, 1e-9)["feasible"]

    H, A_eq, A_in = problem.H.toarray(), problem.A_eq.toarray(), problem.A_in.toarray()
    dense = minimize(
        lambda z: 0.5 * z @ H @ z + problem.g @ z,
        start,
        jac=lambda z: H @ z + problem.g,
        method="SLSQP",
        bounds=list(zip(problem.lb, np.where(np.isfinite(problem.ub), problem.ub, None))),
        constraints=[
            {"type": "eq", "fun": lambda z: A_eq @ z - problem.b_eq, "jac": lambda z: A_eq},
            {"type": "ineq", "fun": lambda z: problem.b_in - A_in @ z, "jac": lambda z: -A_in},
        ],
        options={"ftol": 1e-14, "maxiter": 1000},
    )
    reference = dense.x if qp.validate(problem, dense.x, 1e-9)["feasible"] else start
    f_ref = min(qp.objective(problem, reference), qp.objective(problem, start))

    solution = qp.solve(problem)
    assert solution.status == QpStatus.OPTIMAL
    assert qp.validate(problem, solution.z, 1e-7)["feasible"]
    assert qp.objective(problem, solution.z) <= f_ref + 1e-5 * max(1.0, abs(f_ref))


def test_tracking_only_two_step_plan_follows_the_reference(params, surface, env, operating_point):
    K, theta, P_ref = operating_point
    cfg = MpcConfig(alphas=(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0), horizon=0.4, sample_time=0.2).resolved(surface)
    state = PlantState(omega_g=math.sqrt(2 * K / params.J), theta=theta)
    reference = P_ref * np.array([1.0, 0.95])
    problem = mpc.build_problem(state, V, reference, cfg, env, None, params)
    solution = qp.solve(problem)
    assert solution.status == QpStatus.OPTIMAL

    layout = HorizonLayout.for_config(cfg)
    plan = mpc.plan_from_solution(solution.z, layout, cfg, params)
    assert_allclose(plan.P_g, reference, rtol=1e-4)
    previous = (0.0, 0.0)
    assert _direct_cost(solution.z, layout, cfg, params, reference, previous) <= 1e-6


def test_scaling_every_weight_keeps_the_plan(params, surface, env, cfg, operating_point):
    K, theta, P_ref = operating_point
    lin = linearize_at(surface, params, V, K, theta)
    state = PlantState(omega_g=math.sqrt(2 * K / params.J), theta=theta)
    reference = np.full(cfg.N, P_ref)
    factor = 10.0
    scaled = replace(
        cfg,
        alphas=tuple(factor * a for a in cfg.alphas),
        stall_penalty=factor * cfg.stall_penalty,
        speed_penalty=factor * cfg.speed_penalty,
        regularization=factor * cfg.regularization,
    )

    plans = []
    for run_cfg in (cfg, scaled):
        problem = mpc.build_problem(state, V, reference, run_cfg, env, lin, params)
        solution = qp.solve(problem)
        assert solution.status == QpStatus.OPTIMAL
        plans.append(mpc.plan_from_solution(solution.z, HorizonLayout.for_config(run_cfg), run_cfg, params))

    base, other = plans
    assert other.P_g[0] == pytest.approx(base.P_g[0], rel=1e-3, abs=1e-4 * params.P_g_rated)
    assert other.P_r[0] == pytest.approx(base.P_r[0], rel=1e-3, abs=1e-4 * params.P_g_rated)
    assert_allclose(other.K, base.K, rtol=1e-4)


# ---------------------------------------------------------------------------
# Solver status handling and reference preview
# ---------------------------------------------------------------------------

def test_inaccurate_answer_outside_tolerance_is_degraded(params, surface, env, cfg, operating_point, monkeypatch):
    K, theta, P_ref = operating_point
    controller = Controller(params, surface, env, cfg)
    first = controller.step(Measurement(K=K, theta=theta, v=V), np.full(cfg.N, P_ref))

    def inaccurate(problem, warm_start=None, settings=None):
        return QpSolution(
            z=np.zeros(problem.n), duals={}, status=QpStatus.INACCURATE,
            kkt_residual=1e-3, primal_violation=1.0, iterations=4000, objective=0.0,
        )

    monkeypatch.setattr(qp, "solve", inaccurate)
    held = controller.step(Measurement(K=K, theta=theta, v=V), np.full(cfg.N, P_ref))
    assert held == first
    assert controller.degraded_steps == 1
    assert controller.diagnostics[-1].degraded
    assert controller.diagnostics[-1].status == QpStatus.INACCURATE.value


def test_inaccurate_answer_within_tolerance_is_applied(params, surface, env, cfg, operating_point, monkeypatch):
    K, theta, P_ref = operating_point
    measurement = Measurement(K=K, theta=theta, v=V)
    expected = Controller(params, surface, env, cfg).step(measurement, np.full(cfg.N, P_ref))

    exact = qp.solve

    def relabelled(problem, warm_start=None, settings=None):
        return replace(exact(problem, warm_start=warm_start, settings=settings), status=QpStatus.INACCURATE)

    monkeypatch.setattr(qp, "solve", relabelled)
    controller = Controller(params, surface, env, cfg)
    command = controller.step(measurement, np.full(cfg.N, P_ref))
    assert command == expected
    assert controller.degraded_steps == 0
    assert not controller.diagnostics[-1].degraded


def test_scheduled_step_in_the_horizon_changes_the_first_command(params, surface, env, cfg, operating_point):
    K, theta, P_ref = operating_point
    ctsr = replace(cfg, strategy=Strategy.CONSTANT_TIP_SPEED_RATIO)
    measurement = Measurement(K=K, theta=theta, v=V)
    held = np.full(cfg.N, P_ref)
    stepped = held.copy()
    stepped[cfg.N // 2:] = 1.4 * envelope.max_available_power(env, V) * params.eta_g

    def first_charging(horizon):
        controller = Controller(params, surface, env, ctsr)
        controller.step(measurement, horizon)
        assert controller.degraded_steps == 0
        P_r0, P_g0 = controller.previous_inputs
        return P_r0 - P_g0 / params.eta_g

    margin = 0.01 * envelope.max_available_power(env, V)
    assert first_charging(stepped) > first_charging(held) + margin
