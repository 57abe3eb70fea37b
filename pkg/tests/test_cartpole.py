import os
import sys
import unittest

import numpy as np

sys.path.insert(0, "..")

from phydrl.experiment import published
from phydrl.plant.calibrate import calibrate, relative_errors
from phydrl.plant.cartpole import (
    BoxRegion,
    EnvelopeRegion,
    PlantParams,
    PlantState,
    linearize,
    mechanical_energy,
    model_mismatch,
    sample_initial,
    step,
)
from phydrl.plant.linear import LinearPlant, advance
from phydrl.util.errors import DimensionMismatch, EmptyRegion


class CartPoleTest(unittest.TestCase):
    def test_equilibrium_is_fixed(self):
        result = step(np.zeros(4), 0.0, PlantParams())
        np.testing.assert_array_equal(result.state, np.zeros(4))
        self.assertFalse(result.clamped)

    def test_force_clamp(self):
        p = PlantParams()
        result = step(np.zeros(4), 100.0, p)
        self.assertEqual(result.force, p.force_limit)
        self.assertTrue(result.clamped)
        result = step(np.zeros(4), -100.0, p)
        self.assertEqual(result.force, -p.force_limit)
        self.assertTrue(step(np.zeros(4), 15.0 + 1e-9, p).clamped)
        self.assertFalse(step(np.zeros(4), 15.0, p).clamped)

    def test_deterministic(self):
        s = np.array([0.1, -0.2, 0.05, 0.3])
        first = step(s, 2.5, PlantParams())
        second = step(s, 2.5, PlantParams())
        np.testing.assert_array_equal(first.state, second.state)

    def test_linearization_matches_published_model(self):
        A, B = linearize(PlantParams())
        for got, want in ((A, published.A), (B, published.B)):
            for (i, j), value in np.ndenumerate(want):
                if value == 0.0:
                    self.assertLess(abs(got[i, j]), 1e-9, f"entry ({i},{j})")
                else:
                    self.assertLess(abs(got[i, j] - value) / abs(value), 0.02, f"entry ({i},{j})")

    def test_friction_opposes_motion(self):
        p = PlantParams(friction_scale=1000.0)
        moving = np.array([0.0, 1.0, 0.0, 0.0])
        slowed = step(moving, 0.0, p).state
        free = step(moving, 0.0, p.frictionless()).state
        self.assertLess(slowed[1], free[1])

    def test_upright_equilibrium_is_unstable(self):
        s = np.array([0.0, 0.0, 0.01, 0.0])
        thetas = [s[2]]
        for _ in range(30):
            s = step(s, 0.0, PlantParams()).state
            thetas.append(s[2])
        self.assertTrue(np.all(np.diff(thetas) > 0.0))
        self.assertGreater(thetas[-1], 0.1)

    def test_linearization_error_is_higher_order(self):
        p = PlantParams().frictionless()
        A, B = linearize(p)
        direction = np.array([0.1, 0.2, 0.1, -0.2])

        def error(scale: float) -> float:
            s, a = scale * direction, scale * 1.0
            return float(np.linalg.norm(step(s, a, p).state - A @ s - B[:, 0] * a))

        self.assertGreaterEqual(error(1.0) / error(0.5), 3.5)
        self.assertGreaterEqual(error(0.5) / error(0.25), 3.5)

    def test_energy_drift_is_small(self):
        # Around the hanging equilibrium, where the pole oscillates instead of falling.
        p = PlantParams(integrator="semi_implicit_euler").frictionless()
        s = np.array([0.0, 0.0, np.pi - 0.05, 0.0])
        energies = [mechanical_energy(s, p)]
        for _ in range(1_000):
            s = step(s, 0.0, p).state
            energies.append(mechanical_energy(s, p))
        self.assertLessEqual(float(np.max(np.abs(np.diff(energies)))), 1e-4 * abs(energies[0]))

    def test_explicit_euler_gains_energy(self):
        p = PlantParams(integrator="euler").frictionless()
        s = np.array([0.0, 0.0, np.pi - 0.05, 0.0])
        e0 = mechanical_energy(s, p)
        for _ in range(200):
            s = step(s, 0.0, p).state
        self.assertGreater(mechanical_energy(s, p) - e0, 0.01 * abs(e0))

    def test_state_tuple(self):
        state = PlantState(0.1, 0.2, 0.3, 0.4)
        self.assertEqual(PlantState.from_array(state.to_array()), state)

    def test_model_mismatch(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=(10, 4))
        a = rng.normal(size=(10, 1))
        s_next = s @ published.A.T + a @ published.B.T
        np.testing.assert_allclose(model_mismatch(s, a, s_next, published.A, published.B), 0.0, atol=1e-14)
        f = model_mismatch(np.zeros(4), 0.0, np.ones(4), published.A, published.B)
        np.testing.assert_array_equal(f, np.ones(4))
        with self.assertRaises(DimensionMismatch):
            model_mismatch(np.zeros(3), 0.0, np.zeros(4), published.A, published.B)


class InitialStateTest(unittest.TestCase):
    def test_box_sampling(self):
        region = BoxRegion(low=[-0.1] * 4, high=[0.1] * 4)
        rng = np.random.default_rng(1)
        samples = np.array([sample_initial(region, rng) for _ in range(200)])
        self.assertTrue(np.all(np.abs(samples) <= 0.1))
        np.testing.assert_array_equal(sample_initial(region, 5), sample_initial(region, 5))

    def test_envelope_sampling(self):
        region = EnvelopeRegion(P=published.P, c=0.5)
        rng = np.random.default_rng(2)
        for _ in range(100):
            s = sample_initial(region, rng)
            self.assertLessEqual(float(s @ published.P @ s), 0.5 + 1e-12)
        np.testing.assert_array_equal(sample_initial(EnvelopeRegion(P=published.P, c=0.0)), np.zeros(4))

    def test_empty_regions(self):
        with self.assertRaises(EmptyRegion):
            sample_initial(BoxRegion(low=[0.2] * 4, high=[0.1] * 4))
        with self.assertRaises(EmptyRegion):
            sample_initial(EnvelopeRegion(P=published.P, c=-1.0))


class LinearPlantTest(unittest.TestCase):
    def test_step(self):
        plant = LinearPlant(A=published.A, B=published.B, force_limit=15.0)
        s = np.array([0.1, 0.0, -0.05, 0.2])
        result = advance(plant, s, 2.0)
        np.testing.assert_allclose(result.state, published.A @ s + published.B[:, 0] * 2.0)
        self.assertTrue(advance(plant, s, 20.0).clamped)
        np.testing.assert_array_equal(advance(PlantParams(), s, 1.0).state, step(s, 1.0, PlantParams()).state)

    def test_shapes_checked(self):
        with self.assertRaises(DimensionMismatch):
            LinearPlant(A=np.eye(4), B=np.ones((3, 1)))


class CalibrationTest(unittest.TestCase):
    def test_defaults_are_close(self):
        errors = relative_errors(PlantParams(), published.A, published.B)
        self.assertLess(max(errors.values()), 0.02)

    @unittest.skipUnless(os.environ.get("PHYDRL_SLOW_TESTS") == "1", "slow")
    def test_calibrate(self):
        result = calibrate(published.A, published.B)
        self.assertLess(result.max_relative_error, 0.02)
        self.assertGreater(result.params.pole_mass, 0.0)


if __name__ == "__main__":
    unittest.main()
