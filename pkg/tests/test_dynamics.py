import math

import numpy as np
import pytest

from conftest import random_quats
from trdyn.dynamics import (DynamicsParams, RawCenterParams, RigidParticle, composite_velocity,
                            propagate_params, rk2_step, rollout, taylor_matrix, to_equivalent,
                            velocity_from_equivalent)
from trdyn.field import ParamTable


def params(v=(0, 0, 0), a=(0, 0, 0), w=(0, 0, 0), e=(0, 0, 0), j=None, ed=None):
    return DynamicsParams(np.array(v, float), np.array(a, float), np.array(w, float), np.array(e, float),
                          None if j is None else np.array(j, float), None if ed is None else np.array(ed, float))


def particle(x=(1.0, 0.0, 0.0)):
    return RigidParticle(np.array([x], float), np.array([[1.0, 0, 0, 0]]))


def raw_draw(rng, n, third=False):
    g = lambda: rng.normal(size=(n, 3))
    return RawCenterParams(g(), g(), g(), g(), g(), g() if third else None, g() if third else None)


class TestVelocity:
    def test_pure_translation(self, rng):
        raw = RawCenterParams(np.zeros(3), np.array([1.0, 2, 3]), np.zeros(3), np.zeros(3), np.zeros(3))
        for P in rng.normal(size=(5, 3)):
            assert np.array_equal(composite_velocity(P, raw), [1.0, 2, 3])

    def test_point_at_center(self, rng):
        raw = raw_draw(rng, 1)
        assert np.array_equal(composite_velocity(raw.P_c, raw), raw.v_c)

    def test_hand_cross_product(self):
        raw = RawCenterParams(np.zeros(3), np.zeros(3), np.zeros(3), np.array([0, 0, 2.0]), np.zeros(3))
        assert np.array_equal(composite_velocity([1.0, 0, 0], raw), [0, 2.0, 0])

    def test_both_forms_agree(self, rng):
        raw = raw_draw(rng, 10_000)
        P = rng.normal(size=(10_000, 3))
        left = composite_velocity(P, raw)
        right = np.cross(raw.w_p, P) + (raw.v_c - np.cross(raw.w_p, raw.P_c))
        assert np.max(np.abs(left - right)) < 1e-12


class TestEquivalent:
    def test_center_at_origin(self, rng):
        raw = raw_draw(rng, 4)
        raw.P_c = np.zeros((4, 3))
        eq = to_equivalent(raw)
        assert np.array_equal(eq.v_bar_c, raw.v_c) and np.array_equal(eq.a_bar_c, raw.a_c)

    def test_no_rotation(self, rng):
        raw = raw_draw(rng, 4)
        raw.w_p = np.zeros((4, 3))
        raw.eps_p = np.zeros((4, 3))
        eq = to_equivalent(raw)
        assert np.array_equal(eq.v_bar_c, raw.v_c) and np.array_equal(eq.a_bar_c, raw.a_c)

    def test_hand_example(self):
        raw = RawCenterParams(np.array([1.0, 0, 0]), np.zeros(3), np.zeros(3), np.array([0, 0, 1.0]), np.zeros(3))
        assert np.array_equal(to_equivalent(raw).v_bar_c, [0, -1.0, 0])

    def test_first_order_identity(self, rng):
        raw = raw_draw(rng, 10_000)
        P = rng.normal(size=(10_000, 3))
        diff = velocity_from_equivalent(P, to_equivalent(raw)) - composite_velocity(P, raw)
        assert np.max(np.abs(diff)) < 1e-12

    def test_second_order_identity(self, rng):
        raw = raw_draw(rng, 10_000)
        P = rng.normal(size=(10_000, 3))
        dt = rng.uniform(-1, 1, size=(10_000, 1))
        eq_shift = propagate_params(to_equivalent(raw), dt[:, 0], 2)
        moved = RawCenterParams(raw.P_c, raw.v_c + dt * raw.a_c, raw.a_c, raw.w_p + dt * raw.eps_p, raw.eps_p)
        diff = velocity_from_equivalent(P, eq_shift) - composite_velocity(P, moved)
        assert np.max(np.abs(diff)) < 1e-12

    def test_velocity_from_equivalent_trivial(self, rng):
        p = params(v=(1, 2, 3), w=(0, 0, 0))
        assert np.array_equal(velocity_from_equivalent(rng.normal(size=3), p), [1, 2, 3])
        p = params(v=(1, 2, 3), w=(4, 5, 6))
        assert np.array_equal(velocity_from_equivalent(np.zeros(3), p), [1, 2, 3])

    def test_third_order_terms_fold(self, rng):
        raw = raw_draw(rng, 3, third=True)
        eq = to_equivalent(raw)
        assert np.allclose(eq.j_bar_c, raw.j_c - np.cross(raw.eps_dot_p, raw.P_c))


class TestPropagate:
    def test_order_one_is_copy(self, rng):
        p = DynamicsParams.from_vector(rng.normal(size=12))
        out = propagate_params(p, 0.3, 1)
        assert np.array_equal(out.to_vector(), p.to_vector())

    def test_euler_shift(self):
        out = propagate_params(params(a=(0, 0, 1)), 0.1, 2)
        assert np.array_equal(out.v_bar_c, [0, 0, 0.1])

    def test_inverse(self, rng):
        for order in (1, 2):
            p = DynamicsParams.from_vector(rng.normal(size=(20, 12)))
            back = propagate_params(propagate_params(p, 0.37, order), -0.37, order)
            assert np.max(np.abs(back.to_vector() - p.to_vector())) < 1e-12

    def test_third_order(self):
        p = params(v=(1, 0, 0), a=(0, 1, 0), j=(0, 0, 2), ed=(0, 0, 4), w=(1, 1, 1), e=(0, 1, 0))
        out = propagate_params(p, 0.5, 3)
        assert np.allclose(out.v_bar_c, [1, 0.5, 0.25])
        assert np.allclose(out.a_bar_c, [0, 1, 1])
        assert np.allclose(out.w_p, [1, 1.5, 1.5])
        assert np.allclose(out.eps_p, [0, 1, 2])

    def test_third_order_requires_terms(self):
        with pytest.raises(ValueError):
            propagate_params(params(), 0.1, 3)

    def test_taylor_matrix(self):
        T = taylor_matrix(2.0, 3)
        assert np.array_equal(T, [[1, 2, 2], [0, 1, 2], [0, 0, 1]])
        assert np.array_equal(taylor_matrix(2.0, 1), np.eye(3))


class TestRK2:
    def test_translation(self):
        p0 = particle((0, 0, 0))
        out = rk2_step(p0, params(v=(1, 0, 0)), 0.5)
        assert np.array_equal(out.x, [[0.5, 0, 0]])
        assert np.array_equal(out.r, p0.r)

    def test_linear_velocity_midpoint(self):
        out = rk2_step(particle((0, 0, 0)), params(a=(0, 0, 2)), 1.0)
        assert np.array_equal(out.x, [[0, 0, 1.0]])

    def test_translation_exact_with_acceleration(self, rng):
        x0 = rng.normal(size=3)
        v, a = rng.normal(size=3), rng.normal(size=3)
        p = params(v=v, a=a)
        states = rollout(particle(x0), p, 0.0, 50, 0.02)
        t = 1.0
        assert np.max(np.abs(states[-1].x[0] - (x0 + v * t + 0.5 * a * t * t))) < 1e-12

    @staticmethod
    def _circle_err(dt, scheme="midpoint"):
        out = rk2_step(particle(), params(w=(0, 0, 1)), dt, scheme=scheme)
        return np.linalg.norm(out.x[0] - [math.cos(dt), math.sin(dt), 0.0])

    def test_circle_single_step(self):
        e1 = self._circle_err(0.01)
        e2 = self._circle_err(0.005)
        assert e1 < 1e-5
        assert 7.0 < e1 / e2 < 9.0

    def test_start_scheme_is_locally_second_order_only(self):
        # evaluating the rotation at the start position loses one order
        e1 = self._circle_err(0.01, "start")
        e2 = self._circle_err(0.005, "start")
        assert 3.5 < e1 / e2 < 4.5

    def test_rotation_angle_is_norm(self):
        w = np.array([0.3, -0.2, 0.5])
        out = rk2_step(particle(), params(w=w), 0.1)
        from trdyn.geometry import quat_angle
        assert abs(quat_angle(out.r, np.array([[1.0, 0, 0, 0]]))[0] - 0.1 * np.linalg.norm(w)) < 1e-12

    def test_zero_rotation_guard(self, rng):
        r = random_quats(rng, 1)
        p = RigidParticle(np.zeros((1, 3)), r)
        out = rk2_step(p, params(w=(1e-14, 0, 0)), 1.0)
        assert np.allclose(out.r, r, atol=1e-15)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            rk2_step(particle(), params(), 0.1, scheme="euler")


class TestRollout:
    def test_zero_steps(self):
        p = particle()
        states = rollout(p, params(v=(1, 0, 0)), 0.0, 0, 0.1)
        assert len(states) == 1 and states[0] is p

    def test_table_modes_identical(self, rng):
        n = 30
        table = ParamTable(n, 2, anchor_time=0.2, values=rng.normal(size=(n, 12)))
        p = RigidParticle(rng.normal(size=(n, 3)), random_quats(rng, n))
        ids = np.arange(n)
        a = rollout(p, table, 0.2, 20, 0.02, "derive", ids=ids)
        b = rollout(p, table, 0.2, 20, 0.02, "requery", ids=ids)
        for sa, sb in zip(a, b):
            assert np.max(np.abs(sa.x - sb.x)) < 1e-12
            assert np.max(np.abs(sa.r - sb.r)) < 1e-12

    def test_circle_long_rollout(self):
        states = rollout(particle(), params(w=(0, 0, 1)), 0.0, 100, 0.02)
        end = states[-1]
        assert np.linalg.norm(end.x[0] - [math.cos(2.0), math.sin(2.0), 0]) < 5e-4
        assert all(abs(np.linalg.norm(s.r) - 1.0) < 1e-9 for s in states)

    def test_global_second_order(self):
        def err(dt):
            n = int(round(1.0 / dt))
            end = rollout(particle(), params(w=(0, 0, 1)), 0.0, n, dt)[-1]
            return np.linalg.norm(end.x[0] - [math.cos(1.0), math.sin(1.0), 0])
        for dt in (0.02, 0.01):
            assert 3.5 <= err(dt) / err(dt / 2) <= 4.5

    def test_quaternion_drift(self, rng):
        p = RigidParticle(np.zeros((1, 3)), random_quats(rng, 1))
        cur = p
        prm = params(w=(0.7, -1.3, 2.1))
        for _ in range(10_000):
            cur = rk2_step(cur, prm, 0.01)
        assert abs(np.linalg.norm(cur.r) - 1.0) < 1e-9

    def test_render_attributes_bit_identical(self, rng):
        n = 5
        p = RigidParticle(rng.normal(size=(n, 3)), random_quats(rng, n), rng.uniform(0.01, 0.1, (n, 3)),
                          rng.uniform(size=(n, 3)), rng.uniform(size=n))
        prm = DynamicsParams.from_vector(rng.normal(size=(n, 12)))
        for s in rollout(p, prm, 0.0, 10, 0.05):
            assert np.array_equal(s.s, p.s) and np.array_equal(s.color, p.color)
            assert np.array_equal(s.opacity, p.opacity)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            rollout(particle(), params(), 0.0, -1, 0.1)
        with pytest.raises(ValueError):
            rollout(particle(), params(), 0.0, 1, 0.1, mode="sometimes")


class TestParticle:
    def test_defaults_and_validation(self):
        p = particle()
        p.validate()
        with pytest.raises(ValueError):
            RigidParticle(np.zeros((1, 3)), np.array([[2.0, 0, 0, 0]])).validate()
        with pytest.raises(ValueError):
            RigidParticle(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), s=np.zeros((1, 3))).validate()

    def test_params_vector_roundtrip(self, rng):
        v = rng.normal(size=(4, 18))
        assert np.array_equal(DynamicsParams.from_vector(v).to_vector(), v)
        with pytest.raises(ValueError):
            DynamicsParams.from_vector(np.zeros(13))
