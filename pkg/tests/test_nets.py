"""
Tests for controller, potential and class-K networks and their serialization
"""

import json
import os
import shutil
import tempfile
import unittest

import numpy as np
import torch

from safe_sde_control.core.autodiff import DTYPE, hessian_vector_product
from safe_sde_control.core.nets import (
    ClassKNet,
    ControllerNet,
    ModelFormatError,
    NonFiniteInputError,
    PotentialNet,
    classk_eval,
    controller_eval,
    estimate_spectral_norms,
    load_model,
    model_from_dict,
    model_to_dict,
    potential_eval,
    save_model,
    smooth_relu,
    spectral_normalize,
)


def top_singular_value(weight):
    return float(torch.linalg.svdvals(weight.detach())[0])


class TestControllerNet(unittest.TestCase):

    def test_zero_at_origin(self):
        net = ControllerNet([4, 12, 12, 4], seed=0)
        self.assertEqual(controller_eval(net, torch.zeros(4, dtype=DTYPE)).tolist(), [0.0] * 4)

    def test_mask_zeroes_position_rows(self):
        net = ControllerNet([6, 18, 18, 6], mask=[False, False, False, True, True, True], seed=0)
        u = controller_eval(net, torch.randn(5, 6, dtype=DTYPE))
        self.assertTrue(bool((u[:, :3] == 0).all()))
        self.assertFalse(bool((u[:, 3:] == 0).all()))

    def test_hand_forward_pass(self):
        net = ControllerNet([2, 2, 2], seed=0)
        with torch.no_grad():
            net.layers[0].weight.copy_(torch.eye(2, dtype=DTYPE))
            net.layers[0].bias.copy_(torch.tensor([0.5, -0.5], dtype=DTYPE))
            net.layers[1].weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 3.0]], dtype=DTYPE))
        x = torch.tensor([0.2, -0.4], dtype=DTYPE)
        expected = [0.2 * 2 * np.tanh(0.7), -0.4 * 3 * np.tanh(-0.9)]
        np.testing.assert_allclose(net(x).detach().numpy(), expected, atol=1e-12)

    def test_last_layer_has_no_bias(self):
        net = ControllerNet([3, 5, 3], seed=0)
        self.assertIsNone(net.layers[-1].bias)
        self.assertIsNotNone(net.layers[0].bias)

    def test_seeded_construction_is_reproducible(self):
        a, b = ControllerNet([4, 8, 4], seed=3), ControllerNet([4, 8, 4], seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            self.assertTrue(torch.equal(pa, pb))

    def test_invalid_widths_and_mask(self):
        with self.assertRaises(ValueError):
            ControllerNet([4, 8, 3])
        with self.assertRaises(ValueError):
            ControllerNet([4, 8, 4], mask=[True, False])
        with self.assertRaises(ValueError):
            ControllerNet([4, 8, 4], activation="sigmoid")

    def test_non_finite_input(self):
        with self.assertRaises(NonFiniteInputError):
            ControllerNet([2, 4, 2], seed=0)(torch.tensor([float("nan"), 0.0], dtype=DTYPE))


class TestSpectralNormalize(unittest.TestCase):

    def test_scaled_identity(self):
        net = ControllerNet([3, 3], seed=0)
        with torch.no_grad():
            net.layers[0].weight.copy_(3 * torch.eye(3, dtype=DTYPE))
        spectral_normalize(net, iterations=50)
        np.testing.assert_allclose(net.layers[0].weight.detach().numpy(), np.eye(3), atol=1e-6)
        self.assertEqual(net.lipschitz_bound(), 1.0)

    def test_zero_weight_unchanged(self):
        net = ControllerNet([3, 3], seed=0)
        with torch.no_grad():
            net.layers[0].weight.zero_()
        spectral_normalize(net, iterations=5)
        self.assertTrue(bool((net.layers[0].weight == 0).all()))
        self.assertEqual(net.lipschitz_bound(), 0.0)

    def test_random_weights_match_svd(self):
        net = ControllerNet([4, 4, 4], seed=1)
        spectral_normalize(net, iterations=500)
        for layer in net.layers:
            self.assertTrue(0.999 <= top_singular_value(layer.weight) <= 1.001)

    def test_known_singular_values(self):
        gen = torch.Generator().manual_seed(5)
        q1, _ = torch.linalg.qr(torch.randn(4, 4, dtype=DTYPE, generator=gen))
        q2, _ = torch.linalg.qr(torch.randn(4, 4, dtype=DTYPE, generator=gen))
        weight = q1 @ torch.diag(torch.tensor([4.0, 2.0, 1.0, 0.5], dtype=DTYPE)) @ q2.T
        net = ControllerNet([4, 4], seed=0)
        with torch.no_grad():
            net.layers[0].weight.copy_(weight)
        self.assertAlmostEqual(estimate_spectral_norms(net, 100)[0], 4.0, places=8)
        torch.testing.assert_close(net.layers[0].weight, weight)
        spectral_normalize(net, iterations=100)
        torch.testing.assert_close(net.layers[0].weight, weight / 4.0, atol=1e-8, rtol=0)

    def test_single_iteration_warm_start(self):
        net = ControllerNet([4, 12, 12, 4], seed=2)
        for _ in range(300):
            spectral_normalize(net, iterations=1)
        for layer in net.layers:
            self.assertAlmostEqual(top_singular_value(layer.weight), 1.0, places=3)

    def test_iterations_must_be_positive(self):
        with self.assertRaises(ValueError):
            spectral_normalize(ControllerNet([2, 2], seed=0), iterations=0)


class TestPotentialNet(unittest.TestCase):

    def test_zero_at_origin(self):
        net = PotentialNet([4, 12, 12, 1], seed=0)
        self.assertEqual(float(potential_eval(net, torch.zeros(4, dtype=DTYPE))), 0.0)

    def test_floor_bound(self):
        net = PotentialNet([2, 8, 8, 1], epsilon=1e-3, exponent=2.0, seed=0)
        self.assertGreaterEqual(float(potential_eval(net, [1.0, 1.0])), 2e-3)

    def test_positive_away_from_origin(self):
        net = PotentialNet([3, 8, 8, 1], seed=4)
        x = torch.randn(200, 3, dtype=DTYPE)
        values = net(x)
        self.assertTrue(bool((values >= 1e-3 * (x ** 2).sum(-1) - 1e-15).all()))

    def test_degenerate_network(self):
        net = PotentialNet([2, 4, 4, 1], epsilon=1e-3, seed=0)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        x = torch.tensor([[0.3, -2.0], [1.0, 1.0]], dtype=DTYPE)
        torch.testing.assert_close(net(x), 1e-3 * (x ** 2).sum(-1))

    def test_convex_core_is_convex(self):
        net = PotentialNet([2, 8, 8, 1], seed=6)
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(20, 2, dtype=DTYPE, generator=gen)
        v = torch.randn(20, 2, dtype=DTYPE, generator=gen)
        hv = hessian_vector_product(net.convex_core, x, v, create_graph=False)
        self.assertTrue(bool(((hv * v).sum(-1) >= -1e-12).all()))

    def test_clamp_convex_weights(self):
        net = PotentialNet([2, 6, 6, 1], seed=0)
        with torch.no_grad():
            net.convex_layers[0].weight.fill_(-1.0)
        net.clamp_convex_weights()
        self.assertTrue(bool((net.convex_layers[0].weight >= 0).all()))

    def test_non_quadratic_floor_is_differentiable_at_origin(self):
        net = PotentialNet([2, 4, 1], exponent=3.0, seed=0)
        x = torch.zeros(1, 2, dtype=DTYPE, requires_grad=True)
        (grad,) = torch.autograd.grad(net.floor(x).sum(), x)
        self.assertTrue(bool(torch.isfinite(grad).all()))
        self.assertAlmostEqual(float(net.floor(torch.tensor([[3.0, 4.0]], dtype=DTYPE))), 1e-3 * 125, places=12)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            PotentialNet([2, 4, 2])
        with self.assertRaises(ValueError):
            PotentialNet([2, 4, 1], epsilon=0.0)
        with self.assertRaises(ValueError):
            PotentialNet([2, 4, 1], activation="tanh")

    def test_smooth_relu(self):
        z = torch.tensor([-1.0, 0.0, 0.05, 0.1, 1.0], dtype=DTYPE)
        out = smooth_relu(z, 0.1)
        self.assertEqual(out[0].item(), 0.0)
        self.assertEqual(out[1].item(), 0.0)
        self.assertAlmostEqual(out[3].item(), 0.05, places=12)
        self.assertAlmostEqual(out[4].item(), 0.95, places=12)
        self.assertAlmostEqual(out[2].item(), 0.05 ** 3 / 0.01 - 0.05 ** 4 / 0.002, places=12)


class TestClassKNet(unittest.TestCase):

    def test_zero_at_zero(self):
        self.assertEqual(float(classk_eval(ClassKNet(seed=0), torch.zeros(1, dtype=DTYPE))[0]), 0.0)

    def test_constant_integrand(self):
        net = ClassKNet(integrand=lambda z: torch.ones_like(z))
        self.assertAlmostEqual(float(classk_eval(net, torch.tensor([2.0], dtype=DTYPE))[0]), 2.0, delta=1e-8)

    def test_linear_integrand(self):
        net = ClassKNet(integrand=lambda z: z + 1.0)
        self.assertAlmostEqual(float(classk_eval(net, torch.tensor([1.0], dtype=DTYPE))[0]), 1.5, delta=1e-8)

    def test_strictly_increasing(self):
        net = ClassKNet(seed=3)
        s = torch.linspace(0.0, 5.0, 101, dtype=DTYPE)
        values = classk_eval(net, s)
        self.assertTrue(bool((values[1:] > values[:-1]).all()))

    def test_negative_arguments(self):
        net = ClassKNet(seed=0)
        with self.assertRaises(ValueError):
            classk_eval(net, torch.tensor([-0.5], dtype=DTYPE))
        odd = ClassKNet(integrand=lambda z: torch.ones_like(z))
        self.assertAlmostEqual(float(odd(torch.tensor([-0.5], dtype=DTYPE))[0]), -0.5, places=12)


class TestSerialization(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_save_and_load_all_kinds(self):
        x = torch.randn(7, 3, dtype=DTYPE)
        s = torch.rand(7, dtype=DTYPE)
        nets = [
            (ControllerNet([3, 6, 3], mask=[True, False, True], seed=0), x),
            (PotentialNet([3, 6, 6, 1], epsilon=2e-3, seed=1), x),
            (ClassKNet(seed=2), s),
        ]
        for net, inputs in nets:
            with self.subTest(kind=net.kind):
                path = os.path.join(self.test_dir, f"{net.kind}.json")
                save_model(net, path, {"seed": 0})
                loaded = load_model(path, expected_kind=net.kind)
                self.assertEqual(loaded.hyperparameters(), net.hyperparameters())
                self.assertTrue(torch.equal(loaded(inputs), net(inputs)))

    def test_controller_metadata_records_lipschitz_bound(self):
        net = ControllerNet([2, 4, 2], seed=0)
        before = [p.clone() for p in net.parameters()]
        doc = model_to_dict(net, {"config_digest": "abc"})
        self.assertEqual(doc["metadata"]["config_digest"], "abc")
        self.assertEqual(len(doc["metadata"]["layer_spectral_norms"]), 2)
        self.assertAlmostEqual(doc["metadata"]["lipschitz_bound"],
                               float(np.prod(doc["metadata"]["layer_spectral_norms"])))
        for a, b in zip(before, net.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_document_is_json(self):
        doc = model_to_dict(PotentialNet([2, 4, 1], seed=0))
        self.assertEqual(json.loads(json.dumps(doc)), doc)

    def test_wrong_kind(self):
        doc = model_to_dict(PotentialNet([2, 4, 1], seed=0))
        with self.assertRaises(ModelFormatError):
            model_from_dict(doc, expected_kind="controller")

    def test_wrong_dimension(self):
        doc = model_to_dict(ControllerNet([2, 4, 2], seed=0))
        with self.assertRaises(ModelFormatError):
            model_from_dict(doc, expected_dim=4)

    def test_shape_and_version_mismatch(self):
        doc = model_to_dict(ControllerNet([2, 4, 2], seed=0))
        doc["tensors"]["layers.0.weight"]["shape"] = [4, 3]
        with self.assertRaises(ModelFormatError):
            model_from_dict(doc)
        doc = model_to_dict(ControllerNet([2, 4, 2], seed=0))
        doc["format_version"] = 99
        with self.assertRaises(ModelFormatError):
            model_from_dict(doc)
        with self.assertRaises(ModelFormatError):
            model_from_dict({"kind": "controller"})

    def test_missing_file(self):
        with self.assertRaises(ModelFormatError):
            load_model(os.path.join(self.test_dir, "absent.json"))


if __name__ == "__main__":
    unittest.main()
