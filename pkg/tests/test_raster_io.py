import json
import math
import shutil
import struct
import tempfile
import unittest
from pathlib import Path

import cv2
import numpy as np

from fisheye_plumb.errors import InputError
from fisheye_plumb.raster_io import (
    LMAP_ENDIAN_TAG,
    dumps_json,
    read_image,
    read_json,
    read_line_map,
    read_mask,
    read_remap_grid,
    write_image,
    write_json,
    write_line_map,
    write_mask,
    write_remap_grid,
)
from fisheye_plumb.rasters import ImageBuffer, LineMap
from fisheye_plumb.rectifier import RemapGrid


class RasterIOTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


class TestImages(RasterIOTestCase):
    def test_rgb_channel_order(self):
        data = np.zeros((4, 5, 3))
        data[1, 2] = (1.0, 0.0, 0.0)
        path = write_image(self.tmp / "red.png", ImageBuffer(data))

        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        np.testing.assert_array_equal(raw[1, 2], [0, 0, 255])
        np.testing.assert_array_equal(read_image(path).data, data)

    def test_quantisation(self):
        data = np.random.default_rng(1).uniform(size=(6, 6, 3))
        back = read_image(write_image(self.tmp / "noise.png", ImageBuffer(data)))
        self.assertLessEqual(np.max(np.abs(back.data - data)), 0.5 / 255 + 1e-12)

    def test_grayscale(self):
        data = np.linspace(0, 1, 12).reshape(3, 4)
        back = read_image(write_image(self.tmp / "gray.png", ImageBuffer(data)))
        self.assertEqual(back.channels, 1)

    def test_sixteen_bit(self):
        raw = np.full((2, 2), 65535, dtype=np.uint16)
        raw[0, 0] = 0
        cv2.imwrite(str(self.tmp / "deep.png"), raw)
        back = read_image(self.tmp / "deep.png")
        self.assertEqual(back.data[0, 0, 0], 0.0)
        self.assertEqual(back.data[1, 1, 0], 1.0)

    def test_mask(self):
        valid = np.zeros((5, 7), dtype=bool)
        valid[1:4, 2:6] = True
        np.testing.assert_array_equal(read_mask(write_mask(self.tmp / "m.png", valid)), valid)

    def test_missing_image(self):
        with self.assertRaises(InputError) as ctx:
            read_image(self.tmp / "nope.png")
        self.assertEqual(ctx.exception.path, str(self.tmp / "nope.png"))

    def test_undecodable_image(self):
        (self.tmp / "junk.png").write_bytes(b"not a png")
        with self.assertRaises(InputError):
            read_image(self.tmp / "junk.png")


class TestLineMapFiles(RasterIOTestCase):
    def test_header(self):
        path = write_line_map(self.tmp / "a.lmap", LineMap(np.arange(6.0).reshape(2, 3)))
        blob = path.read_bytes()
        self.assertEqual(blob[:4], b"LMAP")
        self.assertEqual(struct.unpack("<III", blob[4:16]), (2, 3, 0x01020304))
        self.assertEqual(len(blob), 16 + 6 * 4)

    def test_round_trip_values(self):
        data = np.array([[0.0, 12.5, 0.0], [140.25, 0.0, 3.0]])
        back = read_line_map(write_line_map(self.tmp / "b.lmap", LineMap(data)))
        np.testing.assert_array_equal(back.data, data)

    def test_big_endian_file(self):
        data = np.array([[1.5, 0.0], [0.0, 42.0]])
        blob = (
            b"LMAP"
            + np.array([2, 2, LMAP_ENDIAN_TAG], dtype=">u4").tobytes()
            + data.astype(">f4").tobytes()
        )
        (self.tmp / "be.lmap").write_bytes(blob)
        np.testing.assert_array_equal(read_line_map(self.tmp / "be.lmap").data, data)

    def test_bad_magic(self):
        (self.tmp / "bad.lmap").write_bytes(b"PAML" + bytes(12))
        with self.assertRaises(InputError) as ctx:
            read_line_map(self.tmp / "bad.lmap")
        self.assertIn("bad.lmap", str(ctx.exception))

    def test_truncated_payload(self):
        path = write_line_map(self.tmp / "c.lmap", LineMap(np.zeros((3, 3))))
        path.write_bytes(path.read_bytes()[:-4])
        with self.assertRaises(InputError):
            read_line_map(path)

    def test_missing_file(self):
        with self.assertRaises(InputError):
            read_line_map(self.tmp / "gone.lmap")


class TestRemapGridFiles(RasterIOTestCase):
    def test_round_trip(self):
        map_x = np.array([[0.5, 1.25, 3.0], [2.0, 9.5, 0.0]])
        map_y = np.array([[4.0, 0.75, 1.0], [7.5, 2.0, 20.0]])
        valid = np.array([[True, False, True], [True, True, True]])
        grid = RemapGrid(map_x, map_y, valid, (12, 10))
        back = read_remap_grid(write_remap_grid(self.tmp / "g.lmap", grid))

        np.testing.assert_array_equal(back.map_x, map_x)
        np.testing.assert_array_equal(back.map_y, map_y)
        # y = 20 lies outside the 12 x 10 source raster
        np.testing.assert_array_equal(back.valid, [[True, False, True], [True, True, False]])
        self.assertEqual(back.source_size, (12, 10))


class TestJson(RasterIOTestCase):
    def test_format(self):
        text = dumps_json({"b": 1.0, "a": [math.inf, 0.1]})
        self.assertEqual(text, '{\n  "a": [\n    "inf",\n    0.1\n  ],\n  "b": 1.0\n}\n')

    def test_exact_floats(self):
        value = 0.1 + 0.2
        path = write_json(self.tmp / "nested" / "v.json", {"value": value, "ninf": -math.inf})
        data = read_json(path)
        self.assertEqual(data["value"], value)
        self.assertEqual(data["ninf"], "-inf")

    def test_same_doubles_as_seventeen_digits(self):
        """Test that shortest-repr output reads back as the %.17g rendering would"""
        values = [1 / 3, 2.0**-40, 6.02214076e23, -0.1 - 0.2, 110.00000000000001, 5e-324]
        data = json.loads(dumps_json({"v": values}))
        self.assertEqual(data["v"], [float(f"{x:.17g}") for x in values])
        self.assertEqual(data["v"], values)

    def test_invalid_json(self):
        (self.tmp / "broken.json").write_text("{not json")
        with self.assertRaises(InputError) as ctx:
            read_json(self.tmp / "broken.json")
        self.assertIn("broken.json", str(ctx.exception))

    def test_missing_json(self):
        with self.assertRaises(InputError):
            read_json(self.tmp / "absent.json")


if __name__ == "__main__":
    unittest.main()
