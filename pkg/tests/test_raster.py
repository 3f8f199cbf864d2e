import os
import tempfile
import unittest

import numpy as np
from PIL import Image

from src.vessel_refine.errors import RasterError
from src.vessel_refine.raster import (
    LabelMap,
    PatchRect,
    ProbMap,
    RasterImage,
    agreement_map,
    complement,
    crop,
    iou,
    load_raster,
    save_raster,
    to_rgb,
    vessel_ratio,
)


class TestRasterIO(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def _write_gray(self, name, arr):
        path = os.path.join(self.dir, name)
        Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
        return path

    def test_saturated_label(self):
        path = self._write_gray("full.png", np.full((6, 5), 255))
        label = load_raster(path, "label")
        self.assertTrue(np.all(label.data == 1))
        self.assertEqual((label.height, label.width), (6, 5))

    def test_checkerboard_label(self):
        board = (np.indices((8, 8)).sum(axis=0) % 2) * 255
        label = load_raster(self._write_gray("board.png", board), "label", 0.5)
        np.testing.assert_array_equal(label.data, board // 255)

    def test_127_is_below_half(self):
        label = load_raster(self._write_gray("mid.png", np.full((4, 4), 127)), "label", 0.5)
        self.assertFalse(label.data.any())

    def test_image_normalised(self):
        rgb = np.zeros((3, 4, 3), dtype=np.uint8)
        rgb[..., 0] = 255
        path = os.path.join(self.dir, "rgb.png")
        Image.fromarray(rgb).save(path)
        image = load_raster(path, "image")
        self.assertEqual(image.channels, 3)
        self.assertEqual(image.data[..., 0].min(), 1.0)
        self.assertEqual(image.data[..., 1].max(), 0.0)

    def test_round_trip_png_and_pnm(self):
        rng = np.random.default_rng(3)
        label = LabelMap(rng.integers(0, 2, (9, 7)))
        gray = RasterImage(rng.integers(0, 256, (9, 7)) / 255.0)
        color = RasterImage(rng.integers(0, 256, (9, 7, 3)) / 255.0)
        for ext in (".png", ".pgm"):
            path = os.path.join(self.dir, "label" + ext)
            save_raster(label, path)
            np.testing.assert_array_equal(load_raster(path, "label").data, label.data)
            path = os.path.join(self.dir, "gray" + ext)
            save_raster(gray, path)
            np.testing.assert_array_equal(load_raster(path, "image").data, gray.data)
        for ext in (".png", ".ppm"):
            path = os.path.join(self.dir, "color" + ext)
            save_raster(color, path)
            np.testing.assert_array_equal(load_raster(path, "image").data, color.data)

    def test_labels_stored_as_0_255(self):
        path = os.path.join(self.dir, "lab.png")
        save_raster(LabelMap(np.eye(3, dtype=np.uint8)), path)
        with Image.open(path) as img:
            self.assertEqual(img.mode, "L")
            self.assertEqual(sorted(np.unique(np.asarray(img))), [0, 255])

    def test_errors(self):
        with self.assertRaises(RasterError):
            load_raster(os.path.join(self.dir, "missing.png"))
        with self.assertRaises(RasterError):
            load_raster(os.path.join(self.dir, "image.tif"))
        jpeg_named_png = os.path.join(self.dir, "fake.png")
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(jpeg_named_png, format="JPEG")
        with self.assertRaises(RasterError):
            load_raster(jpeg_named_png)


class TestRasterTypes(unittest.TestCase):
    def test_invariants(self):
        with self.assertRaises(RasterError):
            LabelMap(np.array([[0, 2]]))
        with self.assertRaises(RasterError):
            ProbMap(np.array([[0.5, 1.5]]))
        with self.assertRaises(RasterError):
            RasterImage(np.zeros((0, 3)))
        self.assertEqual(RasterImage(np.zeros((2, 2))).channels, 1)

    def test_gray_to_rgb(self):
        gray = RasterImage(np.linspace(0, 1, 6).reshape(2, 3))
        rgb = to_rgb(gray)
        self.assertEqual(rgb.channels, 3)
        for c in range(3):
            np.testing.assert_array_equal(rgb.data[..., c], gray.data[..., 0])


class TestGeometry(unittest.TestCase):
    def test_identity_crop(self):
        label = LabelMap(np.random.default_rng(0).integers(0, 2, (5, 5)))
        np.testing.assert_array_equal(crop(label, PatchRect(0, 0, 5)).data, label.data)

    def test_central_block(self):
        src = RasterImage(np.arange(16).reshape(4, 4) / 15.0)
        out = crop(src, PatchRect(1, 1, 2))
        np.testing.assert_array_equal(out.data[..., 0], np.array([[5, 6], [9, 10]]) / 15.0)

    def test_out_of_bounds(self):
        with self.assertRaises(RasterError):
            crop(LabelMap(np.zeros((4, 4), dtype=np.uint8)), PatchRect(3, 0, 2))

    def test_crop_composition(self):
        rng = np.random.default_rng(11)
        label = LabelMap(rng.integers(0, 2, (40, 40)))
        for _ in range(50):
            side = int(rng.integers(2, 30))
            x0, y0 = (int(v) for v in rng.integers(0, 40 - side + 1, 2))
            inner = int(rng.integers(1, side + 1))
            ix, iy = (int(v) for v in rng.integers(0, side - inner + 1, 2))
            twice = crop(crop(label, PatchRect(x0, y0, side)), PatchRect(ix, iy, inner))
            once = crop(label, PatchRect(x0 + ix, y0 + iy, inner))
            np.testing.assert_array_equal(twice.data, once.data)


class TestAgreement(unittest.TestCase):
    def test_vessel_ratio(self):
        self.assertEqual(vessel_ratio(LabelMap(np.ones((3, 3), dtype=np.uint8))), 1.0)
        self.assertEqual(vessel_ratio(LabelMap(np.zeros((3, 3), dtype=np.uint8))), 0.0)
        data = np.zeros(256 * 256, dtype=np.uint8)
        data[:3277] = 1
        ratio = vessel_ratio(LabelMap(data.reshape(256, 256)))
        self.assertAlmostEqual(ratio, 3277 / 65536)
        self.assertGreater(ratio, 0.05)

    def test_iou_cases(self):
        a = np.zeros((3, 3), dtype=np.uint8)
        b = np.zeros((3, 3), dtype=np.uint8)
        a[0, :3] = 1
        b[0, 0] = b[2, 2] = 1
        self.assertAlmostEqual(iou(LabelMap(a), LabelMap(b)), 0.25)
        self.assertEqual(iou(LabelMap(a), LabelMap(a)), 1.0)
        self.assertEqual(iou(LabelMap(a), complement(LabelMap(a))), 0.0)
        empty = LabelMap(np.zeros((3, 3), dtype=np.uint8))
        self.assertEqual(iou(empty, empty), 1.0)
        with self.assertRaises(RasterError):
            iou(LabelMap(a), LabelMap(np.zeros((2, 3), dtype=np.uint8)))

    def test_iou_symmetric_and_complement_ratio(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = LabelMap(rng.integers(0, 2, (12, 12)))
            b = LabelMap(rng.integers(0, 2, (12, 12)))
            self.assertEqual(iou(a, b), iou(b, a))
            self.assertAlmostEqual(vessel_ratio(complement(a)), 1.0 - vessel_ratio(a))

    def test_agreement_colours(self):
        a = LabelMap(np.array([[1, 1, 0, 0]]))
        b = LabelMap(np.array([[1, 0, 1, 0]]))
        rgb = agreement_map(a, b).data[0]
        np.testing.assert_array_equal(rgb, [[1, 1, 1], [1, 0, 0], [0, 1, 0], [0, 0, 0]])


if __name__ == "__main__":
    unittest.main()
