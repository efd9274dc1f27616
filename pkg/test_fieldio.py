import json
import os
import shutil
import tempfile
import unittest

import numpy as np

from fieldio import HEADER_SIZE, TrajectoryCheckpoint, read_field, read_header, write_field
from spectral_core import GridSpec, SPECTRAL, TensorField, VectorField, curl, outer_product


class TestFieldContainer(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.temp_dir, "field.fld")
        self.grid = GridSpec(2, 32, 16.0)
        self.u = curl(self.grid, np.exp(-self.grid.radius ** 2 / 4))

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_physical_field(self):
        write_field(self.path, self.u, {"kind": "vortex"})
        field, metadata = read_field(self.path)
        self.assertIsInstance(field, VectorField)
        self.assertEqual(field.grid, self.grid)
        self.assertTrue(np.array_equal(field.data, self.u.data))
        self.assertEqual(metadata["kind"], "vortex")

    def test_compressed_spectral_tensor(self):
        f = outer_product(self.u, self.u)
        size = write_field(self.path, f, compressed=True)
        field, _ = read_field(self.path)
        self.assertIsInstance(field, TensorField)
        self.assertEqual(field.representation, SPECTRAL)
        self.assertTrue(np.array_equal(field.data, f.data))
        self.assertEqual(size, os.path.getsize(self.path))
        self.assertTrue(read_header(self.path)["flags"] & 0x04)

    def test_refuses_to_overwrite(self):
        write_field(self.path, self.u)
        with self.assertRaises(FileExistsError):
            write_field(self.path, self.u)
        write_field(self.path, self.u, overwrite=True)

    def test_corrupt_payload(self):
        write_field(self.path, self.u)
        with open(self.path, "r+b") as f:
            f.seek(HEADER_SIZE + 100)
            byte = f.read(1)
            f.seek(HEADER_SIZE + 100)
            f.write(bytes([byte[0] ^ 0xFF]))
        with self.assertRaises(ValueError):
            read_field(self.path)

    def test_corrupt_header(self):
        write_field(self.path, self.u)
        with open(self.path, "r+b") as f:
            f.seek(40)
            f.write(b"\x07")
        with self.assertRaises(ValueError):
            read_header(self.path)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            read_field(os.path.join(self.temp_dir, "absent.fld"))

    def test_sidecar_records_grid(self):
        write_field(self.path, self.u)
        with open(self.path + ".json") as f:
            sidecar = json.load(f)
        self.assertEqual(sidecar["grid"], self.grid.to_dict())
        self.assertEqual(sidecar["rank"], 1)


class TestTrajectoryCheckpoint(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.grid = GridSpec(2, 16, 8.0)
        self.u = curl(self.grid, np.exp(-self.grid.radius ** 2))

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_append_and_resume(self):
        path = os.path.join(self.temp_dir, "ckpt")
        with TrajectoryCheckpoint(path, self.grid) as ckpt:
            ckpt.append(0.0, self.u, {"l2": 1.0})
            ckpt.append(0.5, self.u * 0.5)
        resumed = TrajectoryCheckpoint(path, self.grid)
        self.assertEqual(len(resumed), 2)
        self.assertEqual(resumed.times(), [0.0, 0.5])
        nodes = resumed.load()
        self.assertTrue(np.array_equal(nodes[1][1].data, (self.u * 0.5).data))
        resumed.append(1.0, self.u)
        self.assertEqual(len(TrajectoryCheckpoint(path, self.grid)), 3)

    def test_times_must_increase(self):
        ckpt = TrajectoryCheckpoint(os.path.join(self.temp_dir, "ckpt"), self.grid)
        ckpt.append(1.0, self.u)
        with self.assertRaises(ValueError):
            ckpt.append(1.0, self.u)

    def test_grid_mismatch(self):
        path = os.path.join(self.temp_dir, "ckpt")
        TrajectoryCheckpoint(path, self.grid).append(0.0, self.u)
        with self.assertRaises(ValueError):
            TrajectoryCheckpoint(path, GridSpec(2, 32, 8.0))


if __name__ == '__main__':
    unittest.main()
