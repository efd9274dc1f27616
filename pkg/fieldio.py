""" Field containers and trajectory checkpoints

    A field container is a single file holding one VectorField or TensorField, plus a JSON sidecar
    (same name with ".json" appended) holding free-form metadata.

    HEADER (little endian), struct string "<32sIIIdIIIQ":

    Magic number 32 bytes (blake3 hash of "forcelab-field")
    Version number 4 bytes
    dim 4 bytes
    points per axis N 4 bytes
    box length L 8 bytes (float64)
    component count 4 bytes (n for vectors, n*n for tensors)
    representation 4 bytes (0 physical, 1 spectral)
    flags 4 bytes
    payload length 8 bytes (stored bytes, after compression)
    blake3 hash of the header 32 bytes

    PAYLOAD:

    the component arrays in row-major order as float64.  Physical fields are (components, N, ..., N).
    Spectral fields are stored in the real-to-complex layout (components, N, ..., N/2+1) with each
    complex value written as two float64 (real, imaginary).

    The flags are:
    0x04: compressed - the payload is compressed with zstandard
    0x08: blake3 - a blake3 hash of the stored payload follows it (always set when writing)

    A trajectory checkpoint is a directory of node_NNNNN.fld containers and an index.json listing
    the node times, file names and norms.  The index is rewritten atomically after every node so an
    interrupted run can be resumed from the last complete node.
"""

import json
import logging
import os
import struct
from typing import Dict, List, Optional, Tuple

import blake3
import numpy as np
import zstandard

from spectral_core import GridSpec, PHYSICAL, SPECTRAL, TensorField, VectorField
from utils import human_size

logger = logging.getLogger(__name__)

MAGIC = blake3.blake3(b"forcelab-field").digest()
VERSION = 1
HEADER_STRING = "<32sIIIdIIIQ"
HEADER_SIZE = struct.calcsize(HEADER_STRING) + 32
FLAGS = {
    'compressed': 0x04,
    'blake3': 0x08,
}
REPRESENTATIONS = {PHYSICAL: 0, SPECTRAL: 1}
INDEX_NAME = "index.json"


def _encode_payload(data: np.ndarray, representation: str) -> bytes:
    if representation == SPECTRAL:
        data = np.ascontiguousarray(data, dtype='<c16').view('<f8')
    return np.ascontiguousarray(data, dtype='<f8').tobytes()


def _decode_payload(payload: bytes, shape: Tuple[int, ...], representation: str) -> np.ndarray:
    values = np.frombuffer(payload, dtype='<f8')
    if representation == SPECTRAL:
        values = values.view('<c16')
    return values.reshape(shape).copy()


def write_field(path: str, field, metadata: Optional[dict] = None, compressed: bool = False,
                overwrite: bool = False) -> int:
    """Write a field container and its sidecar; returns the container size in bytes."""
    if os.path.exists(path) and not overwrite:
        raise FileExistsError(f"File {path} already exists")
    grid = field.grid
    components = grid.dim ** field.rank
    flags = FLAGS['blake3']
    payload = _encode_payload(field.data, field.representation)
    if compressed:
        flags |= FLAGS['compressed']
        payload = zstandard.compress(payload)
    header = struct.pack(HEADER_STRING, MAGIC, VERSION, grid.dim, grid.points_per_axis, float(grid.box_length),
                         components, REPRESENTATIONS[field.representation], flags, len(payload))
    header += blake3.blake3(header).digest()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(blake3.blake3(payload).digest())

    sidecar = dict(metadata or {})
    sidecar.update({"rank": field.rank, "representation": field.representation, "grid": grid.to_dict()})
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    size = len(header) + len(payload) + 32
    logger.debug(f"wrote {path} ({human_size(size)}, flags {flags:#x})")
    return size


def read_header(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"File {path} not found")
    with open(path, "rb") as f:
        raw = f.read(HEADER_SIZE)
    bare_header_size = struct.calcsize(HEADER_STRING)
    if len(raw) < HEADER_SIZE:
        raise ValueError(f"{path}: truncated header")
    header_data = raw[:bare_header_size]
    if blake3.blake3(header_data).digest() != raw[bare_header_size:]:
        raise ValueError(f"{path}: header digest mismatch")
    magic, version, dim, N, L, components, representation, flags, length = struct.unpack(HEADER_STRING, header_data)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a field container")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    return {
        "dim": dim, "points_per_axis": N, "box_length": L, "components": components,
        "representation": {v: k for k, v in REPRESENTATIONS.items()}[representation],
        "flags": flags, "payload_length": length,
    }


def read_field(path: str, dealias_fraction: float = 2.0 / 3.0):
    """Read a container; returns (field, metadata)."""
    header = read_header(path)
    with open(path, "rb") as f:
        f.seek(HEADER_SIZE)
        payload = f.read(header["payload_length"])
        digest = f.read(32)
    if header["flags"] & FLAGS['blake3'] and blake3.blake3(payload).digest() != digest:
        raise ValueError(f"{path}: payload digest mismatch")
    if header["flags"] & FLAGS['compressed']:
        payload = zstandard.decompress(payload)

    metadata = {}
    if os.path.exists(path + ".json"):
        with open(path + ".json") as f:
            metadata = json.load(f)
    fraction = metadata.get("grid", {}).get("dealias_fraction", dealias_fraction)
    grid = GridSpec(header["dim"], header["points_per_axis"], header["box_length"], fraction)
    if header["components"] == grid.dim:
        cls = VectorField
    elif header["components"] == grid.dim ** 2:
        cls = TensorField
    else:
        raise ValueError(f"{path}: component count {header['components']} does not fit dim {grid.dim}")
    spatial = grid.shape if header["representation"] == PHYSICAL else grid.spectral_shape
    shape = (grid.dim,) * cls.rank + spatial
    data = _decode_payload(payload, shape, header["representation"])
    return cls(grid, data, header["representation"]), metadata


class TrajectoryCheckpoint:
    """ Append-only directory of node containers with a JSON index.

        with TrajectoryCheckpoint(path, grid) as ckpt:
            ckpt.append(t, field, norms)
    """

    def __init__(self, path: str, grid: GridSpec, compressed: bool = True):
        self.path = path
        self.grid = grid
        self.compressed = compressed
        self.nodes: List[dict] = []
        os.makedirs(path, exist_ok=True)
        index_path = os.path.join(path, INDEX_NAME)
        if os.path.exists(index_path):
            with open(index_path) as f:
                index = json.load(f)
            stored = GridSpec(**index["grid"])
            if stored != grid:
                raise ValueError(f"checkpoint {path} was written for {stored}, not {grid}")
            self.nodes = index["nodes"]
            logger.info(f"checkpoint {path}: resuming after {len(self.nodes)} nodes")

    def __len__(self):
        return len(self.nodes)

    def times(self) -> List[float]:
        return [node["time"] for node in self.nodes]

    def append(self, t: float, field: VectorField, norms: Optional[Dict[str, float]] = None):
        if self.nodes and t <= self.nodes[-1]["time"]:
            raise ValueError(f"checkpoint times must increase: {t} after {self.nodes[-1]['time']}")
        name = f"node_{len(self.nodes):05d}.fld"
        write_field(os.path.join(self.path, name), field, {"time": t}, compressed=self.compressed, overwrite=True)
        self.nodes.append({"index": len(self.nodes), "time": t, "file": name, "norms": dict(norms or {})})
        self._write_index()

    def _write_index(self):
        index = {"grid": self.grid.to_dict(), "nodes": self.nodes}
        tmp = os.path.join(self.path, INDEX_NAME + ".tmp")
        with open(tmp, "w") as f:
            json.dump(index, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, os.path.join(self.path, INDEX_NAME))

    def load(self) -> List[Tuple[float, VectorField]]:
        out = []
        for node in self.nodes:
            field, _ = read_field(os.path.join(self.path, node["file"]), self.grid.dealias_fraction)
            out.append((node["time"], field))
        return out

    def close(self):
        if self.nodes:
            self._write_index()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
