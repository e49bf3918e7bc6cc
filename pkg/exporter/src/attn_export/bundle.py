"""Writers for the attention bundle file layout.

The exporter talks to the segmentation engine only through files, so this
module reimplements the small binary tensor format and the manifest schema
from their written contract rather than importing the engine.

Tensor files: magic "ATNB", u32 version, u8 dtype code (0 = float32),
u8 ndim, one u64 per dimension, then the row-major little-endian payload.
The manifest is a JSON object named manifest.json next to the tensors.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATNB"
FORMAT_VERSION = 1
DTYPE_F32 = 0
MANIFEST_NAME = "manifest.json"

_HEAD = struct.Struct("<4sIBB")


def write_tensor(path, values) -> None:
    """Serialize one array as float32 in the bundle tensor layout."""
    arr = np.asarray(values, dtype="<f4", order="C")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(arr.tobytes())


def tensor_name(kind: str, timestep: int, resolution: int, layer: int) -> str:
    return f"{kind}_t{timestep:04d}_r{resolution:03d}_l{layer:02d}.atnb"


def write_manifest(out_dir, manifest: dict) -> Path:
    """Write the bundle manifest with a stable key order."""
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path
