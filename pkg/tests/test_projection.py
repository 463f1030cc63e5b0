"""
Tests for the stability and safety projections and their composition
"""

import os
import shutil
import tempfile
import unittest

import numpy as np
import torch

from safe_sde_control.core.autodiff import DTYPE
from safe_sde_control.core.config_manager import ConfigurationManager
from safe_sde_control.core.dynamics import SYSTEMS, SafeRegionSpec, SdeModel, box_sampler, make_system
from safe_sde_control.core.generator import TraceMode, apply_generator, generator_terms
from safe_sde_control.core.nets import ClassKNet, ControllerNet, PotentialNet
from safe_sde_control.core.precision_handler import residual_tolerance
from safe_sde_control.core.projection import (
    BarrierPotentialError,
    ProjectedController,
    QuadraticPotential,
    compose_safe_stable,
    potential_from_barrier,
    project_safe,
    project_stable,
    reference_halfspace_projection,
)

SLOW = os.environ.get("SAFE_SDE_CONTROL_SLOW") == "1"


def unstable_line():
    """dx = (x + u) dt, no noise"""
    return SdeModel("line", 1, 1, drift_fn=lambda x: x.clone(),
                    diffusion_fn=lambda x: torch.zeros_like(x).unsqueeze(-1))


def half_norm(x):
    return 0.5 * (x ** 2).sum(-1)


def unit_barrier(x):
    return 1.0 - (x ** 2).sum(-1)


def identity(s):
    return s


class TestStableProjection(unittest.TestCase):

    def test_one_dimensional_by_hand(self):
        model = unstable_line()
        u = project_stable(None, half_norm, -1.0, model, [2.0], TraceMode.exact())
        self.assertAlmostEqual(float(u[0]), -3.0, places=12)
        value = apply_generator(model, lambda z: u.expand_as(z), half_norm, [2.0], "exact")
        self.assertAlmostEqual(float(value), -2.0, places=12)

    def test_feasible_control_unchanged(self):
        model = unstable_line()
        base = lambda z: -5.0 * z
        u = project_stable(base, half_norm, -1.0, model, [2.0])
        self.assertEqual(float(u[0]), -10.0)

    def test_origin_guard(self):
        model, _ = make_system("bicycle")
        net = PotentialNet([4, 8, 8, 1], seed=0)
        u = project_stable(ControllerNet([4, 8, 4], seed=0), net, -0.5, model, torch.zeros(4, dtype=DTYPE))
        self.assertEqual(u.tolist(), [0.0] * 4)

    def test_rate_must_be_negative(self):
        with self.assertRaises(ValueError):
            project_stable(None, half_norm, 0.0, unstable_line(), [1.0])

    def test_constraint_holds_after_projection(self):
        model, _ = make_system("bicycle")
        potential = PotentialNet([4, 12, 12, 1], seed=1)
        controller = ControllerNet([4, 12, 12, 4], seed=2)
        x = 2 * torch.rand(64, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(3)) - 1
        u = project_stable(controller, potential, -0.5, model, x)
        lv = apply_generator(model, lambda z: u, potential, x, create_graph=False)
        cv = -0.5 * potential(x).detach()
        bound = torch.tensor([residual_tolerance(v) for v in cv.tolist()], dtype=DTYPE)
        self.assertTrue(bool((lv - cv <= bound).all()))

    def test_matches_reference_halfspace(self):
        model, _ = make_system("bicycle")
        potential = QuadraticPotential(4)
        controller = ControllerNet([4, 6, 4], seed=5)
        x = torch.randn(16, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(6))
        projected = project_stable(controller, potential, -0.5, model, x, TraceMode.exact())
        terms = generator_terms(model, potential, x, TraceMode.exact(), create_graph=False)
        offset = -0.5 * terms.values - (terms.uncontrolled)
        reference = reference_halfspace_projection(controller(x).detach(), terms.gradient, offset)
        torch.testing.assert_close(projected, reference, atol=1e-10, rtol=1e-10)


class TestSafeProjection(unittest.TestCase):

    def test_one_dimensional_by_hand(self):
        model = unstable_line()
        barrier = lambda x: 1.0 - x[:, 0] ** 2
        u = project_safe(None, barrier, identity, model, [0.9], TraceMode.exact())
        self.assertAlmostEqual(float(u[0]), -1.43 / 3.24 * 1.8, places=12)
        lh = apply_generator(model, lambda z: u.expand_as(z), barrier, [0.9], "exact")
        self.assertAlmostEqual(float(lh), -0.19, places=12)

    def test_idempotent(self):
        model = unstable_line()
        barrier = lambda x: 1.0 - x[:, 0] ** 2
        once = project_safe(None, barrier, identity, model, [0.9])
        twice = project_safe(lambda z: once.expand_as(z), barrier, identity, model, [0.9])
        self.assertAlmostEqual(float(twice[0]), float(once[0]), places=14)

    def test_satisfied_constraint_unchanged(self):
        model = unstable_line()
        base = lambda z: -3.0 * z
        u = project_safe(base, unit_barrier, identity, model, [0.5])
        self.assertEqual(float(u[0]), -1.5)

    def test_outside_region_logs_warning(self):
        model, region = make_system("bicycle")
        with self.assertLogs("safe_sde_control.core.projection", level="WARNING"):
            project_safe(None, region, identity, model, [3.0, 0.0, 0.0, 0.0])

    def test_constraint_holds_with_learned_classk(self):
        model, region = make_system("bicycle")
        classk = ClassKNet(seed=0)
        x = region.sample(64, torch.Generator().manual_seed(2))
        x = x[region.contains(x)]
        u = project_safe(ControllerNet([4, 8, 4], seed=1), region, classk, model, x)
        lh = apply_generator(model, lambda z: u, region.field, x, create_graph=False)
        alpha = classk(region.field(x)).detach()
        self.assertTrue(bool((lh + alpha >= -1e-8 * (1 + alpha.abs())).all()))


class TestBarrierPotential(unittest.TestCase):

    def test_unit_ball(self):
        region = SafeRegionSpec(unit_barrier, "unit ball", box_sampler([(-1.0, 1.0)] * 2), dim=2)
        potential = potential_from_barrier(region)
        x = torch.tensor([[0.3, -0.4], [0.0, 0.0]], dtype=DTYPE)
        torch.testing.assert_close(potential(x), (x ** 2).sum(-1))

    def test_off_center_maximum_rejected(self):
        shifted = lambda x: 1.0 - ((x - 0.5) ** 2).sum(-1)
        region = SafeRegionSpec(shifted, "shifted ball", box_sampler([(-0.5, 1.5)] * 2), dim=2)
        with self.assertRaises(BarrierPotentialError):
            potential_from_barrier(region)

    def test_quadratic_potential(self):
        potential = QuadraticPotential(2, [[2.0, 0.0], [0.0, 4.0]])
        self.assertEqual(potential(torch.tensor([[1.0, 1.0]], dtype=DTYPE)).tolist(), [3.0])
        with self.assertRaises(ValueError):
            QuadraticPotential(2, np.eye(3))


class TestProjectedController(unittest.TestCase):

    def setUp(self):
        self.model, self.region = make_system("bicycle")
        self.controller = ControllerNet([4, 12, 12, 4], seed=0)
        self.potential = QuadraticPotential(4)
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_zero_at_origin(self):
        projected = compose_safe_stable(self.controller, self.potential, self.region, identity, -0.5, self.model)
        self.assertEqual(projected(torch.zeros(4, dtype=DTYPE)).tolist(), [0.0] * 4)

    def test_identity_when_both_constraints_hold(self):
        model = unstable_line()
        base = lambda z: -5.0 * z
        region = SafeRegionSpec(unit_barrier, "unit ball", box_sampler([(-1.0, 1.0)]), dim=1)
        projected = ProjectedController(model, base, QuadraticPotential(1), region, identity, -1.0)
        x = torch.tensor([[0.5], [-0.25]], dtype=DTYPE)
        torch.testing.assert_close(projected(x), base(x), rtol=0, atol=0)

    def test_stability_before_measured_on_base_control(self):
        model = unstable_line()
        region = SafeRegionSpec(unit_barrier, "unit ball", box_sampler([(-1.0, 1.0)]), dim=1)
        projected = ProjectedController(model, None, QuadraticPotential(1), region, identity, -1.0,
                                        safe_mode=TraceMode.exact(), stable_mode=TraceMode.exact())
        _, diagnostics = projected.evaluate(torch.tensor([[0.9]], dtype=DTYPE))
        # base u = 0: 𝓛V - cV = 0.81 + 0.405; after the safety stage alone it would be 0.5
        self.assertAlmostEqual(float(diagnostics.stability_before[0]), 1.215, places=12)
        self.assertAlmostEqual(float(diagnostics.safety_before[0]), -1.43, places=12)
        self.assertGreater(float(diagnostics.safe_correction_norm[0]), 0.0)
        summary = diagnostics.summary()
        self.assertEqual(summary["stability_certified"], 1.0)
        self.assertEqual(summary["safety_certified"], 1.0)

    def test_stability_residual_after_composition(self):
        x = self.region.sample(200, torch.Generator().manual_seed(1))
        x = x[self.region.contains(x)]
        control, diagnostics = compose_safe_stable(
            self.controller, self.potential, self.region, identity, -0.5, self.model
        ).evaluate(x)
        self.assertEqual(control.shape, x.shape)
        cv = -0.5 * self.potential(x).numpy()
        self.assertTrue(np.all(diagnostics.stability_after <= 1e-8 * (1 + np.abs(cv))))
        self.assertTrue(np.all(diagnostics.safe_correction_norm >= 0))
        self.assertTrue(np.all(np.isfinite(diagnostics.safety_after)))

    def test_absent_stages_are_nan(self):
        projected = ProjectedController(self.model, self.controller, potential=self.potential)
        _, diagnostics = projected.evaluate(torch.randn(5, 4, dtype=DTYPE))
        self.assertTrue(np.all(np.isnan(diagnostics.safety_before)))
        self.assertTrue(np.all(diagnostics.safe_correction_norm == 0))
        summary = diagnostics.summary()
        self.assertEqual(summary["points"], 5)
        self.assertIsNone(summary["min_safety_before"])
        self.assertIsNone(summary["safety_certified"])
        self.assertIsNotNone(summary["stability_certified"])

    def test_diagnostics_csv(self):
        x = self.region.sample(10, torch.Generator().manual_seed(0))
        _, diagnostics = compose_safe_stable(
            self.controller, self.potential, self.region, identity, -0.5, self.model
        ).evaluate(x)
        path = os.path.join(self.test_dir, "diagnostics.csv")
        diagnostics.write_csv(path)
        with open(path) as f:
            header = f.readline().strip()
        self.assertEqual(header.split(","), ["x1", "x2", "x3", "x4"] + list(diagnostics.COLUMNS))
        table = np.loadtxt(path, delimiter=",", skiprows=1)
        self.assertEqual(table.shape, (10, 10))
        np.testing.assert_array_equal(table[:, :4], x.numpy())

    def test_invalid_construction(self):
        with self.assertRaises(ValueError):
            ProjectedController(self.model, self.controller, self.potential, stability_rate=0.1)
        with self.assertRaises(ValueError):
            ProjectedController(self.model, self.controller, region=self.region)
        with self.assertRaises(ValueError):
            ProjectedController(self.model, self.controller, self.potential, tolerance=0.0)

    def test_exposes_time_dependence(self):
        class Clocked:
            time_dependent = True

            def __call__(self, z, t):
                return torch.zeros_like(z)

        self.assertTrue(ProjectedController(self.model, Clocked(), self.potential).time_dependent)
        self.assertFalse(ProjectedController(self.model, self.controller, self.potential).time_dependent)

@unittest.skipUnless(SLOW, "set SAFE_SDE_CONTROL_SLOW=1 for 10⁴-point checks on every system")
class TestGuaranteesOnEverySystem(unittest.TestCase):
    POINTS = 10000

    def systems(self):
        for name in SYSTEMS:
            params = ConfigurationManager.PRESETS.get(name, {}).get("system_params")
            model, region = make_system(name, params)
            yield name, model, region

    def test_stability_residual_with_random_networks(self):
        generator = torch.Generator().manual_seed(0)
        for name, model, region in self.systems():
            with self.subTest(system=name):
                d = model.dim
                controller = ControllerNet([d, 2 * d, d], seed=1)
                potential = PotentialNet([d, 2 * d, 1], seed=2)
                x = region.sample(self.POINTS, generator)
                control, diagnostics = ProjectedController(model, controller, potential,
                                                           stability_rate=-0.5).evaluate(x)
                self.assertEqual(diagnostics.summary()["stability_certified"], 1.0)
                lv = apply_generator(model, lambda z: control, potential, x, create_graph=False)
                cv = (-0.5 * potential(x)).detach().numpy()
                self.assertTrue(np.all(lv.numpy() - cv <= residual_tolerance(cv)))

    def test_safety_residual_inside_region(self):
        generator = torch.Generator().manual_seed(1)
        for name, model, region in self.systems():
            with self.subTest(system=name):
                d = model.dim
                x = region.sample(self.POINTS, generator)
                x = x[region.contains(x)]
                projected = ProjectedController(model, ControllerNet([d, 2 * d, d], seed=3), region=region,
                                                classk=ClassKNet(seed=4))
                _, diagnostics = projected.evaluate(x)
                self.assertEqual(diagnostics.summary()["safety_certified"], 1.0)


if __name__ == "__main__":
    unittest.main()
