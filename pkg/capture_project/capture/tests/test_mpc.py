import math
import time

import numpy as np
import pytest
from django.core.exceptions import ValidationError

from capture.dynamics import VesselParams, VesselState
from capture.evaluation import run_episode
from capture.mpc import (
    MpcController,
    MpcModel,
    MpcSolution,
    OcpConfig,
    cold_start,
    discretize,
    linearize,
    model_derivative,
    model_jacobians,
    rti_step,
    shift_solution,
)
from capture.task import EpisodeConfig, Goal

MODEL = MpcModel()
CONFIG = OcpConfig()


def _finite_difference(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    columns = []
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        columns.append((fn(x + step) - fn(x - step)) / (2 * eps))
    return np.stack(columns, axis=-1)


class TestModel:
    def test_full_forward_thrust(self):
        rates = model_derivative(np.zeros(6), np.array([1.0, 1.0]), MODEL)
        np.testing.assert_allclose(rates, [0.0, 0.0, 0.0, 44.2 / 35.82, 0.0, 0.0], atol=1e-12)

    def test_counter_rotating_thrust(self):
        rates = model_derivative(np.zeros(6), np.array([-1.0, 1.0]), MODEL)
        assert rates[3] == pytest.approx((22.1 - 13.26) / 35.82)
        assert rates[5] == pytest.approx(0.37 * (22.1 + 13.26) / 8.31)

    def test_linear_damping_jacobian(self):
        model = MpcModel(X_u=2.0)
        fq, _ = model_jacobians(np.zeros(6), np.zeros(2), model)
        assert fq[3, 3] == pytest.approx(-2.0 / 35.82)
        assert fq[5, 5] == pytest.approx(-5.83 / 8.31)

    def test_from_params_overrides_yaw_damping(self):
        model = MpcModel.from_params(VesselParams(mass=40.0), n_r=3.0)
        assert model.mass == 40.0
        assert model.N_r == 3.0
        assert MpcModel.from_params(VesselParams()).N_r == 5.83

    def test_validation(self):
        with pytest.raises(ValidationError) as excinfo:
            MpcModel(mass=0.0, N_r=-1.0)
        assert set(excinfo.value.message_dict) == {"mass", "N_r"}


class TestJacobians:
    point = np.array([0.4, -0.3, 0.7, 0.8, 0.1, -0.2])
    control = np.array([0.6, -0.4])

    def test_continuous_jacobians_match_finite_differences(self):
        model = MpcModel(X_u=3.0)
        fq, fu = model_jacobians(self.point, self.control, model)
        np.testing.assert_allclose(
            fq, _finite_difference(lambda q: model_derivative(q, self.control, model), self.point), rtol=1e-5, atol=1e-7
        )
        np.testing.assert_allclose(
            fu, _finite_difference(lambda u: model_derivative(self.point, u, model), self.control), rtol=1e-5, atol=1e-7
        )

    def test_discrete_jacobians_match_finite_differences(self):
        dt = CONFIG.node_dt
        a, b = linearize(self.point, self.control, MODEL, dt)
        np.testing.assert_allclose(
            a, _finite_difference(lambda q: discretize(q, self.control, MODEL, dt), self.point), rtol=1e-5, atol=1e-7
        )
        np.testing.assert_allclose(
            b, _finite_difference(lambda u: discretize(self.point, u, MODEL, dt), self.control), rtol=1e-5, atol=1e-7
        )

    def test_batched_linearization(self):
        rng = np.random.default_rng(0)
        q = rng.uniform(-1.0, 1.0, size=(5, 6))
        u = rng.uniform(0.1, 0.9, size=(5, 2))
        a, b = linearize(q, u, MODEL, 0.05)
        assert a.shape == (5, 6, 6) and b.shape == (5, 6, 2)
        single_a, single_b = linearize(q[3], u[3], MODEL, 0.05)
        np.testing.assert_allclose(a[3], single_a)
        np.testing.assert_allclose(b[3], single_b)

    def test_position_follows_surge_over_one_node(self):
        a, _ = linearize(np.zeros(6), np.zeros(2), MODEL, 0.05)
        assert a[0, 3] == pytest.approx(0.05, rel=1e-6)

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            linearize(np.zeros(6), np.zeros(2), MODEL, 0.0)


class TestRti:
    def test_fixed_point_at_the_target(self):
        q0 = np.array([2.0, 1.0, 0.3, 0.0, 0.0, 0.0])
        solution = rti_step(q0, (2.0, 1.0), None, CONFIG, MODEL)
        assert solution.residual <= 1e-8
        assert np.abs(solution.controls).max() <= 1e-8
        assert not solution.degraded

    def test_dead_ahead_target_drives_straight(self):
        solution = rti_step(np.zeros(6), (5.0, 0.0), None, CONFIG, MODEL)
        left, right = solution.first_control
        assert left > 0.0
        assert abs(left - right) < 1e-6

    def test_target_to_the_left_turns_left(self):
        q0 = np.array([0.0, 0.0, 0.0, 0.5, 0.0, 0.0])
        target = (5.0 * math.cos(math.pi / 4), 5.0 * math.sin(math.pi / 4))
        left, right = rti_step(q0, target, None, CONFIG, MODEL).first_control
        assert right > left

    def test_mirrored_problem_swaps_the_thrusters(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            u, v, r = rng.uniform(0.0, 1.0), rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.3)
            gx, gy = rng.uniform(3.0, 8.0), rng.uniform(-3.0, 3.0)
            original = rti_step(np.array([0, 0, 0, u, v, r]), (gx, gy), None, CONFIG, MODEL)
            mirrored = rti_step(np.array([0, 0, 0, u, -v, -r]), (gx, -gy), None, CONFIG, MODEL)
            np.testing.assert_allclose(mirrored.first_control, original.first_control[::-1], atol=1e-6)

    def test_shift_moves_every_node_forward(self):
        solution = rti_step(np.zeros(6), (4.0, 1.0), None, CONFIG, MODEL)
        shifted = shift_solution(solution)
        np.testing.assert_array_equal(shifted.controls[:-1], solution.controls[1:])
        np.testing.assert_array_equal(shifted.controls[-1], solution.controls[-1])
        np.testing.assert_array_equal(shifted.states[:-1], solution.states[1:])
        assert shifted.nodes == solution.nodes

    def test_repeated_iterations_converge_without_shift(self):
        config = CONFIG.replace(control_weight=5.0)
        q0 = np.array([0.0, 0.0, 0.0, 0.5, 0.0, 0.0])
        solution = rti_step(q0, (1.5, 0.2), None, config, MODEL)
        first = solution.residual
        for _ in range(40):
            solution = rti_step(q0, (1.5, 0.2), solution, config, MODEL, shift=False)
        assert solution.residual < 1e-3 * first

    def test_controls_respect_bounds(self):
        solution = rti_step(np.zeros(6), (9.0, -4.0), None, CONFIG, MODEL)
        assert np.all(np.abs(solution.controls) <= 1.0)
        assert solution.controls.shape == (60, 2)
        assert solution.states.shape == (61, 6)

    def test_overflow_falls_back_to_the_shifted_guess(self):
        previous = rti_step(np.zeros(6), (4.0, 0.0), None, CONFIG, MODEL)
        q0 = np.array([0.0, 0.0, 0.0, 1e308, 0.0, 0.0])
        solution = rti_step(q0, (4.0, 0.0), previous, CONFIG, MODEL)
        assert solution.degraded
        assert math.isnan(solution.residual)
        np.testing.assert_array_equal(solution.controls, shift_solution(previous).controls)

    def test_rejects_a_guess_of_the_wrong_length(self):
        previous = cold_start(np.zeros(6), CONFIG.replace(nodes=30), MODEL)
        with pytest.raises(ValueError):
            rti_step(np.zeros(6), (4.0, 0.0), previous, CONFIG, MODEL)

    def test_first_control_of_a_solution(self):
        controls = np.array([[0.1, 0.2], [0.3, 0.4]])
        assert MpcSolution(np.zeros((3, 6)), controls).first_control.tolist() == [0.1, 0.2]


class TestOcpConfig:
    def test_defaults_put_one_node_per_control_period(self):
        assert CONFIG.node_dt == pytest.approx(1.0 / CONFIG.control_rate)

    def test_stage_weights(self):
        state, control, terminal = CONFIG.stage_weights()
        np.testing.assert_array_equal(np.diag(state), [1.0, 1.0, 0.0, 0.1, 0.1, 0.1])
        np.testing.assert_array_equal(control, 0.05 * np.eye(2))
        np.testing.assert_array_equal(terminal, 10.0 * state)

    def test_validation(self):
        with pytest.raises(ValidationError) as excinfo:
            OcpConfig(nodes=0, position_weight=0.0)
        assert set(excinfo.value.message_dict) == {"nodes", "position_weight"}


class TestController:
    def test_counts_degraded_steps_and_resets(self):
        controller = MpcController(MODEL, CONFIG)
        controller(VesselState(), Goal(4.0, 0.0))
        action = controller(np.array([0.0, 0.0, 0.0, 1e308, 0.0, 0.0, 0.0, 0.0]), Goal(4.0, 0.0))
        assert controller.degraded_steps == 1
        assert -1.0 <= action.left <= 1.0
        controller.reset()
        assert controller.degraded_steps == 0 and controller.solution is None

    def test_captures_a_dead_ahead_goal_on_the_full_plant(self):
        # the plant adds quadratic drag the model leaves out
        params = VesselParams()
        record = run_episode(
            MpcController(MpcModel.from_params(params), CONFIG),
            "mpc",
            EpisodeConfig(goal_distance=5.0, goal_bearing_deg=0.0, initial_speed=0.0),
            params,
        )
        assert record.success
        assert record.solver_degraded_steps == 0
        assert np.abs(record.states[:, 1]).max() < 1e-3


@pytest.mark.slow
def test_iteration_latency_fits_the_control_period():
    controller = MpcController(MODEL, CONFIG)
    rng = np.random.default_rng(0)
    latencies = []
    state = np.zeros(8)
    for _ in range(400):
        state[3:6] = rng.uniform([-0.2, -0.2, -0.5], [1.5, 0.2, 0.5])
        started = time.perf_counter()
        controller(state, Goal(*rng.uniform([3.0, -4.0], [9.0, 4.0])))
        latencies.append(time.perf_counter() - started)
    assert np.percentile(latencies, 99) < 0.05
