"""
Tests for the kernel controller and its projected wrapper
"""

import contextlib
import io
import json
import os
import shutil
import tempfile
import unittest

import numpy as np
import torch

from safe_sde_control.core.autodiff import DTYPE, DimensionMismatchError
from safe_sde_control.core.dynamics import make_system
from safe_sde_control.core.kernel import (
    MAX_FLOW_TIME,
    KernelController,
    build_kernel_controller,
    kernel_control,
    load_samples_csv,
    wrap_with_projection,
)
from safe_sde_control.core.projection import QuadraticPotential
from safe_sde_control.core.simulate import euler_maruyama
from safe_sde_control.main import EXIT_OK, main

SLOW = os.environ.get("SAFE_SDE_CONTROL_SLOW") == "1"


def identity(s):
    return s


class TestKernelController(unittest.TestCase):

    def setUp(self):
        self.gbm, _ = make_system("gbm", {"a": -1.0, "b": 1.0})

    def test_zero_at_origin_with_zero_targets(self):
        model, region = make_system("bicycle")
        controller = build_kernel_controller(model, region, n_samples=500, bandwidth=0.5,
                                             generator=torch.Generator().manual_seed(0))
        self.assertEqual(kernel_control(controller, torch.zeros(4, dtype=DTYPE), 0.0).tolist(), [0.0] * 4)

    def test_single_sample_by_hand(self):
        controller = KernelController(self.gbm, [[1.0]], bandwidth=1.0)
        u = kernel_control(controller, [0.5], 0.5)
        self.assertAlmostEqual(float(u[0]), (0.0 - 0.5) / 0.5 + 0.5, places=12)

    def test_weights_are_normalized(self):
        controller = KernelController(self.gbm, [[1.0], [-1.0], [0.5]], bandwidth=0.3)
        weights, fallback = controller.weights(torch.tensor([[0.2], [0.9]], dtype=DTYPE), 0.25)
        torch.testing.assert_close(weights.sum(-1), torch.ones(2, dtype=DTYPE))
        self.assertFalse(bool(fallback.any()))

    def test_uniform_fallback_when_weights_underflow(self):
        targets = [[2.0], [4.0]]
        controller = KernelController(self.gbm, [[1.0], [-1.0]], targets, bandwidth=1e-3)
        weights, fallback = controller.weights([[100.0]], 0.0)
        self.assertTrue(bool(fallback[0]))
        self.assertEqual(weights[0].tolist(), [0.5, 0.5])
        with self.assertLogs("safe_sde_control.core.kernel", level="WARNING"):
            u, flag = controller.control([100.0], 0.0)
        self.assertTrue(bool(flag))
        self.assertAlmostEqual(float(u[0]), (3.0 - 100.0) + 100.0, places=9)

    def test_flow_time_clamped(self):
        controller = KernelController(self.gbm, [[1.0]], flow_horizon=20.0)
        self.assertEqual(controller.flow_time(0.0), 0.0)
        self.assertEqual(controller.flow_time(10.0), 0.5)
        self.assertEqual(controller.flow_time(100.0), MAX_FLOW_TIME)
        self.assertEqual(controller.flow_time(-1.0), 0.0)

    def test_chunked_sums_match(self):
        gen = torch.Generator().manual_seed(1)
        sources = torch.randn(50, 1, dtype=DTYPE, generator=gen)
        targets = 0.1 * torch.randn(50, 1, dtype=DTYPE, generator=gen)
        whole = KernelController(self.gbm, sources, targets, bandwidth=0.5)
        chunked = KernelController(self.gbm, sources, targets, bandwidth=0.5, chunk_size=7)
        z = torch.linspace(-1, 1, 5, dtype=DTYPE).unsqueeze(-1)
        torch.testing.assert_close(kernel_control(whole, z, 0.3), kernel_control(chunked, z, 0.3))

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            KernelController(self.gbm, torch.zeros(0, 1, dtype=DTYPE))
        with self.assertRaises(ValueError):
            KernelController(self.gbm, [[1.0], [2.0]], [[0.0]])
        with self.assertRaises(ValueError):
            KernelController(self.gbm, [[1.0, 2.0]])
        with self.assertRaises(ValueError):
            KernelController(self.gbm, [[1.0]], bandwidth=0.0)
        with self.assertRaises(ValueError):
            KernelController(self.gbm, [[1.0]], flow_horizon=-1.0)
        with self.assertRaises(ValueError):
            kernel_control(KernelController(self.gbm, [[1.0]]), [0.5], 1.0)

    def test_drives_rollout_in_simulation_time(self):
        quiet, _ = make_system("gbm", {"a": -1.0, "b": 0.1})
        controller = KernelController(quiet, [[1.0]], bandwidth=1.0, flow_horizon=2.0)
        traj = euler_maruyama(quiet, controller, [1.0], dt=0.01, horizon=1.0, seed=0)
        self.assertTrue(np.all(np.isfinite(traj.states)))
        self.assertLess(abs(traj.states[-1, 0]), abs(traj.states[0, 0]))


class TestProjectedKernel(unittest.TestCase):

    def setUp(self):
        self.model, self.region = make_system("bicycle")
        self.kernel = build_kernel_controller(self.model, self.region, n_samples=200, bandwidth=0.5,
                                              generator=torch.Generator().manual_seed(0))
        self.projected = wrap_with_projection(self.kernel, QuadraticPotential(4), self.region, identity,
                                              -0.5, self.model)

    def test_zero_at_origin(self):
        self.assertEqual(self.projected(torch.zeros(4, dtype=DTYPE)).tolist(), [0.0] * 4)

    def test_time_dependence_carried(self):
        self.assertTrue(self.projected.time_dependent)

    def test_stability_after_projection(self):
        x = self.region.sample(20, torch.Generator().manual_seed(3))
        _, diagnostics = self.projected.evaluate(x, 4.0)
        cv = -0.5 * QuadraticPotential(4)(x).numpy()
        self.assertTrue(np.all(diagnostics.stability_after <= 1e-8 * (1 + np.abs(cv))))


class TestSamplesCsv(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_states_loaded_from_trajectory(self):
        model, _ = make_system("bicycle")
        traj = euler_maruyama(model, None, [1.0, 0.0, 0.0, 1.0], dt=0.01, horizon=0.05, seed=0)
        path = os.path.join(self.test_dir, "traj_0.csv")
        traj.to_csv(path)
        samples = load_samples_csv(path)
        self.assertEqual(samples.shape, (6, 4))
        np.testing.assert_array_equal(samples.numpy(), traj.states)
        torch.testing.assert_close(load_samples_csv(path, expected_dim=4), samples, rtol=0, atol=0)
        with self.assertRaises(DimensionMismatchError):
            load_samples_csv(path, expected_dim=2)

@unittest.skipUnless(SLOW, "set SAFE_SDE_CONTROL_SLOW=1 for three-link kernel runs")
class TestThreeLinkKernelWrapping(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        self.models = os.path.join(self.test_dir, "models")

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def run_cli(self, command, out, **params):
        path = os.path.join(self.test_dir, "config.json")
        with open(path, "w") as f:
            json.dump(dict(system="three_link", **params), f)
        argv = [command, "--config", path, "--out", out, "--models", self.models, "--seed", "1"]
        with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
            self.assertEqual(main(argv), EXIT_OK)
        return out

    def median_safety(self, base):
        out = self.run_cli("simulate", os.path.join(self.test_dir, base), base_controller=base, n_traj=10)
        with open(os.path.join(out, "metrics.json")) as f:
            return float(np.median([r["safety_rate"] for r in json.load(f)["per_trajectory"]]))

    def test_projection_keeps_kernel_at_least_as_safe(self):
        self.run_cli("train", self.models)
        self.assertGreaterEqual(self.median_safety("kernel_projected"), self.median_safety("kernel"))

        out = self.run_cli("project-check", os.path.join(self.test_dir, "check"), base_controller="kernel")
        with open(os.path.join(out, "project_check.json")) as f:
            self.assertEqual(json.load(f)["summary"]["stability_certified"], 1.0)


if __name__ == "__main__":
    unittest.main()
