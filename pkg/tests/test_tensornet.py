import math
import os
import struct
import tempfile
import unittest

import numpy as np

from src.vessel_refine.errors import DataError, ShapeError
from src.vessel_refine.tensornet import (
    Adam,
    Checkpoint,
    Tensor,
    bce_loss,
    build_discriminator,
    build_generator,
    concat,
    conv2d,
    instance_norm,
    leaky_relu,
    load_checkpoint,
    no_grad,
    relu,
    save_checkpoint,
    sigmoid,
    upsample_nearest,
)


def brute_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for s in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    total = b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                total += xp[s, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[s, oc, i, j] = total
    return out


def numeric_grad(loss_fn, arrays, index, h=1e-6):
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        saved = target[idx]
        target[idx] = saved + h
        plus = loss_fn(*arrays)
        target[idx] = saved - h
        minus = loss_fn(*arrays)
        target[idx] = saved
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.1, 1.0, shape)


class TestConv(unittest.TestCase):
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for stride in (1, 2):
            for pad in (0, 1):
                x = rng.integers(-3, 4, (2, 3, 7, 6)).astype(np.float64)
                w = rng.integers(-2, 3, (4, 3, 3, 3)).astype(np.float64)
                b = rng.integers(-2, 3, 4).astype(np.float64)
                out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
                np.testing.assert_allclose(out, brute_conv(x, w, b, stride, pad))

    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w)).data, x)

    def test_impulse_response(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_stride_two_halves(self):
        out = conv2d(Tensor(np.zeros((1, 2, 64, 64))), Tensor(np.zeros((5, 2, 4, 4))), stride=2, padding=1)
        self.assertEqual(out.shape, (1, 5, 32, 32))

    def test_shape_errors(self):
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((1, 3, 3, 3))))
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))))


class TestAutograd(unittest.TestCase):
    def test_sum_gradient(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_half_square_gradient(self):
        p = Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
        ((p ** 2).sum() / 2).backward()
        np.testing.assert_allclose(p.grad, p.data)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        self.assertFalse(y.requires_grad)
        with self.assertRaises(ShapeError):
            y.backward()

    def _check(self, build, arrays, trials_name):
        # build(*tensors) -> scalar Tensor; arrays are float64 inputs
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        build(*tensors).backward()

        def value(*raw):
            return build(*[Tensor(r) for r in raw]).item()

        for i, t in enumerate(tensors):
            num = numeric_grad(value, [a.copy() for a in arrays], i)
            err = relative_error(t.grad, num)
            self.assertLess(err, 1e-4, f"{trials_name} input {i}: relative error {err}")

    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        configs = 0
        for stride, pad in ((1, 0), (1, 1), (2, 1), (2, 0)):
            x = rng.normal(size=(2, 2, 6, 6))
            w = rng.normal(size=(3, 2, 3, 3))
            b = rng.normal(size=3)
            r = rng.normal(size=conv2d(Tensor(x), Tensor(w), None, stride, pad).shape)
            self._check(lambda x, w, b: (conv2d(x, w, b, stride, pad) * r).sum(), [x, w, b], f"conv {stride}/{pad}")
            configs += 1
        for slope in (0.0, 0.2, 0.5):
            x = away_from_zero(rng, (2, 3, 4, 4))
            r = rng.normal(size=x.shape)
            self._check(lambda x: (leaky_relu(x, slope) * r).sum(), [x], f"leaky {slope}")
            self._check(lambda x: (relu(x) * r).sum(), [x], "relu")
            configs += 2
        for scale in (0.5, 2.0, 5.0):
            x = rng.normal(scale=scale, size=(2, 2, 3, 3))
            r = rng.normal(size=x.shape)
            self._check(lambda x: (sigmoid(x) * r).sum(), [x], f"sigmoid {scale}")
            configs += 1
        for shape in ((1, 2, 4, 4), (2, 3, 3, 5), (2, 1, 6, 2)):
            x = rng.normal(size=shape)
            gamma = rng.normal(size=shape[1])
            beta = rng.normal(size=shape[1])
            r = rng.normal(size=shape)
            self._check(lambda x, g, b: (instance_norm(x, g, b) * r).sum(), [x, gamma, beta], f"norm {shape}")
            configs += 1
        for factor in (2, 3):
            x = rng.normal(size=(1, 2, 3, 3))
            r = rng.normal(size=(1, 2, 3 * factor, 3 * factor))
            self._check(lambda x: (upsample_nearest(x, factor) * r).sum(), [x], f"upsample {factor}")
            configs += 1
        a = rng.normal(size=(2, 1, 3, 3))
        b = rng.normal(size=(2, 2, 3, 3))
        r = rng.normal(size=(2, 3, 3, 3))
        self._check(lambda a, b: (concat([a, b], axis=1) * r).sum(), [a, b], "concat")
        configs += 1
        for size in (4, 9, 16):
            p = rng.uniform(0.05, 0.95, size)
            t = rng.uniform(0.0, 1.0, size)
            self._check(lambda p: bce_loss(p, t), [p], f"bce {size}")
            configs += 1
        self.assertGreaterEqual(configs, 20)


class TestBCE(unittest.TestCase):
    def test_confident_predictions(self):
        eps = 1e-7
        self.assertLessEqual(bce_loss(Tensor(np.array([1.0 - eps])), 1.0).item(), 1e-6)
        self.assertLessEqual(bce_loss(Tensor(np.array([eps])), 0.0).item(), 1e-6)
        self.assertTrue(math.isfinite(bce_loss(Tensor(np.array([0.0])), 1.0).item()))

    def test_half(self):
        self.assertAlmostEqual(bce_loss(Tensor(np.full(5, 0.5)), 1.0).item(), math.log(2.0), places=12)
        self.assertAlmostEqual(bce_loss(Tensor(np.full(5, 0.5)), 0.0).item(), math.log(2.0), places=12)

    def test_direct_formula(self):
        p = np.array([0.1, 0.2, 0.35, 0.5, 0.6, 0.75, 0.9, 0.99])
        t = np.array([0.0, 1.0, 0.3, 1.0, 0.0, 0.5, 1.0, 0.0])
        expected = -sum(ti * math.log(pi) + (1 - ti) * math.log(1 - pi) for pi, ti in zip(p, t)) / 8
        self.assertAlmostEqual(bce_loss(Tensor(p), t).item(), expected, delta=1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            bce_loss(Tensor(np.full(4, 0.5)), np.zeros(3))


class TestAdam(unittest.TestCase):
    def test_zero_gradient_keeps_parameters(self):
        p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
        opt = Adam([p])
        opt.zero_grad()
        opt.step()
        np.testing.assert_array_equal(p.data, [0.3, -1.2])
        self.assertEqual(opt.state.t, 1)

    def test_first_step_magnitude(self):
        p = Tensor(np.array([1.0, -1.0, 5.0]), requires_grad=True)
        opt = Adam([p], lr=1e-3)
        opt.zero_grad()
        (p * np.array([3.0, -0.5, 40.0])).sum().backward()
        before = p.data.copy()
        opt.step()
        np.testing.assert_allclose(np.abs(p.data - before), 1e-3, rtol=1e-4)

    def test_scalar_trajectory(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
        value, m, v = 2.0, 0.0, 0.0
        for t in range(1, 11):
            opt.zero_grad()
            (p ** 2).sum().backward()
            opt.step()
            g = 2.0 * value
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            value -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            self.assertAlmostEqual(p.data[0], value, delta=1e-10)


class TestNetworks(unittest.TestCase):
    def test_generator_output(self):
        gen = build_generator(depth=3, base_channels=4, seed=1)
        x = Tensor(np.random.default_rng(0).random((2, 4, 32, 32)))
        with no_grad():
            out = gen(x)
        self.assertEqual(out.shape, (2, 1, 32, 32))
        self.assertTrue(np.all((out.data > 0) & (out.data < 1)))
        with self.assertRaises(ShapeError):
            gen(Tensor(np.zeros((1, 4, 20, 20))))
        with self.assertRaises(ShapeError):
            gen(Tensor(np.zeros((1, 3, 32, 32))))

    def test_generator_parameter_count(self):
        gen = build_generator(depth=3, base_channels=8)
        stem = 4 * 8 * 9 + 8
        encoder = (2064 + 32) + (8224 + 64) + (32832 + 128)
        decoder = (27680 + 64) + (6928 + 32) + (1736 + 16)
        head = 8 + 1
        self.assertEqual(sum(p.data.size for p in gen.parameters()), stem + encoder + decoder + head)
        self.assertEqual(stem + encoder + decoder + head, 80105)

    def test_width_scales_with_base(self):
        narrow = [s for s in build_generator(3, 8).specs() if s.kind == "conv"]
        wide = [s for s in build_generator(3, 16).specs() if s.kind == "conv"]
        self.assertEqual(len(narrow), len(wide))
        for a, b in zip(narrow[:-1], wide[:-1]):
            self.assertEqual(b.out_channels, 2 * a.out_channels)
        self.assertEqual(narrow[-1].out_channels, wide[-1].out_channels)

    def test_generator_seeded(self):
        a = build_generator(2, 4, seed=5).parameters()
        b = build_generator(2, 4, seed=5).parameters()
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_discriminator_shape_and_layers(self):
        disc = build_discriminator(base_channels=4)
        with no_grad():
            out = disc(Tensor(np.zeros((1, 4, 64, 64))))
        self.assertEqual(out.shape, (1, 1, 6, 6))
        self.assertEqual(disc.score_shape(32, 32), (2, 2))
        convs = [s for s in disc.specs() if s.kind == "conv"]
        self.assertEqual(len(convs), 5)
        self.assertTrue(all(s.kernel == 4 for s in convs))
        self.assertEqual([s.stride for s in convs], [2, 2, 2, 1, 1])
        with self.assertRaises(ShapeError):
            disc(Tensor(np.zeros((1, 4, 16, 16))))

    def test_discriminator_constant_bias(self):
        disc = build_discriminator(base_channels=4)
        for p in disc.parameters():
            p.data[...] = 0.0
        disc.body.layers[-2].bias.data[...] = 0.3
        with no_grad():
            out = disc(Tensor(np.random.default_rng(2).random((2, 4, 64, 64))))
        np.testing.assert_allclose(out.data, 1.0 / (1.0 + math.exp(-0.3)))


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.lprf")

    def tearDown(self):
        self.tmp.cleanup()

    def _trained_pair(self):
        gen = build_generator(2, 4, seed=3)
        disc = build_discriminator(4, seed=4)
        opt = Adam(gen.parameters())
        opt.zero_grad()
        with no_grad():
            x = Tensor(np.random.default_rng(0).random((1, 4, 8, 8)))
        gen(x).mean().backward()
        opt.step()
        return gen, disc, opt

    def test_round_trip(self):
        gen, disc, opt = self._trained_pair()
        ckpt = Checkpoint({"generator": gen, "discriminator": disc}, {"generator": opt.state}, {"epoch": 2})
        save_checkpoint(self.path, ckpt)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.meta, {"epoch": 2})
        self.assertEqual(loaded.networks["generator"].config(), gen.config())
        self.assertEqual(loaded.networks["discriminator"].config(), disc.config())
        for name, net in (("generator", gen), ("discriminator", disc)):
            for a, b in zip(net.parameters(), loaded.networks[name].parameters()):
                np.testing.assert_array_equal(b.data, a.data.astype(np.float32))
        state = loaded.optimizers["generator"]
        self.assertEqual(state.t, 1)
        self.assertEqual(state.lr, opt.state.lr)
        for a, b in zip(opt.state.m, state.m):
            np.testing.assert_array_equal(b, a.astype(np.float32))

    def test_bad_magic(self):
        with open(self.path, "wb") as fh:
            fh.write(b"NOPE" + b"\0" * 16)
        with self.assertRaises(DataError):
            load_checkpoint(self.path)

    def test_trailing_bytes(self):
        gen, disc, _ = self._trained_pair()
        save_checkpoint(self.path, Checkpoint({"generator": gen}))
        with open(self.path, "ab") as fh:
            fh.write(b"\0\0\0\0")
        with self.assertRaises(DataError):
            load_checkpoint(self.path)

    def test_truncated(self):
        gen, _, _ = self._trained_pair()
        save_checkpoint(self.path, Checkpoint({"generator": gen}))
        with open(self.path, "rb") as fh:
            raw = fh.read()
        with open(self.path, "wb") as fh:
            fh.write(raw[:-8])
        with self.assertRaises(DataError):
            load_checkpoint(self.path)

    def _load_bytes(self, raw):
        with open(self.path, "wb") as fh:
            fh.write(raw)
        return load_checkpoint(self.path)

    def test_malformed_headers(self):
        def framed(desc, length=None):
            return b"LPRF" + struct.pack("<II", 1, len(desc) if length is None else length) + desc

        cases = [
            b"LPRF",
            b"LPRF\x01\x00\x00\x00",
            framed(b"{bad}"),
            framed(b"{}", length=64),
            framed(b"[]"),
            framed(b"{}"),
            framed(b"\xff\xfe"),
            framed(b'{"networks": [{}], "optimizers": []}'),
            framed(b'{"networks": [{"config": {"kind": "unet", "width": 3}}], "optimizers": []}'),
        ]
        for raw in cases:
            with self.assertRaises(DataError, msg=repr(raw)):
                self._load_bytes(raw)

    def test_float32_generator_reloads_exactly(self):
        gen = build_generator(2, 4, seed=5, precision="float32")
        save_checkpoint(self.path, Checkpoint({"generator": gen}))
        loaded = load_checkpoint(self.path).networks["generator"]
        x = Tensor(np.random.default_rng(1).random((1, 4, 8, 8)).astype(np.float32))
        with no_grad():
            np.testing.assert_array_equal(loaded(x).data, gen(x).data)
        for a, b in zip(gen.parameters(), loaded.parameters()):
            self.assertEqual(b.data.dtype, np.float32)
            np.testing.assert_array_equal(a.data, b.data)


if __name__ == "__main__":
    unittest.main()
