"""Attention-bundle interchange: tensor files, JSON manifests, fixtures.

Tensor files are a minimal binary layout: magic ``ATNB`` (4 bytes), format
version u32 LE, dtype code u8 (0 = float32 LE), ndim u8, each dim as u64 LE,
then the row-major payload. The manifest is JSON text naming every tensor
file with its timestep, resolution, kind and layer index, so a producer needs
nothing from this package to emit a loadable bundle.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .errors import BundleFormatError, BundleValidationError
from .maps import AttentionBundle, check_row_stochastic

MAGIC = b"ATNB"
FORMAT_VERSION = 1
DTYPE_F32 = 0
MANIFEST_NAME = "manifest.json"

_HEAD = struct.Struct("<4sIBB")


def write_tensor(path, values) -> None:
    """Write one array in the ATNB layout (float32 little-endian payload)."""
    # asarray with order="C" keeps 0-d inputs 0-d; ascontiguousarray would
    # floor them to shape (1,), breaking shape identity on round trip
    arr = np.asarray(values, dtype="<f4", order="C")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read an ATNB tensor; raises BundleFormatError with a byte offset."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise BundleFormatError(f"cannot read tensor file: {exc}", path=str(path))
    if len(raw) < _HEAD.size:
        raise BundleFormatError(f"file shorter than the {_HEAD.size}-byte header "
                                f"({len(raw)} bytes)", offset=len(raw), path=str(path))
    magic, version, dtype, ndim = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BundleFormatError(f"bad magic {magic!r}, expected {MAGIC!r}",
                                offset=0, path=str(path))
    if version != FORMAT_VERSION:
        raise BundleFormatError(f"unsupported format version {version}",
                                offset=4, path=str(path))
    if dtype != DTYPE_F32:
        raise BundleFormatError(f"unsupported dtype code {dtype}", offset=8, path=str(path))
    dims_end = _HEAD.size + 8 * ndim
    if len(raw) < dims_end:
        raise BundleFormatError(f"truncated dim list ({ndim} dims declared)",
                                offset=len(raw), path=str(path))
    dims = struct.unpack_from(f"<{ndim}Q", raw, _HEAD.size) if ndim else ()
    count = 1
    for d in dims:
        count *= d
    expected = dims_end + 4 * count
    if len(raw) < expected:
        raise BundleFormatError(f"truncated payload: expected {expected} bytes total, "
                                f"got {len(raw)}", offset=len(raw), path=str(path))
    if len(raw) > expected:
        raise BundleFormatError(f"{len(raw) - expected} trailing bytes after payload",
                                offset=expected, path=str(path))
    flat = np.frombuffer(raw, dtype="<f4", count=count, offset=dims_end)
    return flat.reshape(dims).astype(np.float32)


@dataclass(frozen=True)
class FixtureSpec:
    blobs: int = 2
    side: int = 32
    noise: float = 0.0
    seed: int = 8  # layout seed calibrated on the 32-side noise-0.3 fixture

    def __post_init__(self):
        if self.blobs < 2:
            raise ValueError("fixture needs at least 2 blobs")
        if self.side < 2:
            raise ValueError("fixture side must be >= 2")
        if self.noise < 0:
            raise ValueError("fixture noise must be >= 0")

    @property
    def class_names(self) -> tuple:
        return tuple(f"blob{i}" for i in range(self.blobs))


def parse_fixture_spec(text: str) -> FixtureSpec:
    """Parse "blobs=2,side=32,noise=0.3,seed=0"; every key optional."""
    kwargs = {}
    casts = {"blobs": int, "side": int, "noise": float, "seed": int}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"fixture spec entry {part!r} is not key=value")
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in casts:
            raise ValueError(f"unknown fixture key {key!r} "
                             f"(expected one of {sorted(casts)})")
        try:
            kwargs[key] = casts[key](value.strip())
        except ValueError:
            raise ValueError(f"fixture value for {key!r} is not a {casts[key].__name__}")
    return FixtureSpec(**kwargs)


def fixture_backend(spec: FixtureSpec, embed_dim: int = 16,
                    timestep_range=(5, 300), infer_timestep: int = 50):
    """Toy backend for a fixture spec (also the synth_fixture generator)."""
    from .backend import BackendConfig, ToyBackend

    config = BackendConfig(kind="toy", side=spec.side, embed_dim=embed_dim,
                           timestep_range=timestep_range,
                           infer_timestep=infer_timestep, seed=spec.seed)
    return ToyBackend(config, spec.class_names, noise=spec.noise)


def synth_fixture(blobs: int = 2, side: int = 32, noise: float = 0.0,
                  seed: int = 0, timestep: int = 50):
    """Deterministic attention bundle plus its nearest-blob label grid."""
    spec = FixtureSpec(blobs=blobs, side=side, noise=noise, seed=seed)
    backend = fixture_backend(spec)
    bundle = backend.forward(backend.init_params(), timestep, None)
    return bundle, backend.ground_truth()


# ---------------------------------------------------------------------------
# manifests


def _tensor_name(kind: str, timestep: int, resolution: int, layer: int) -> str:
    return f"{kind}_t{timestep:04d}_r{resolution:03d}_l{layer:02d}.atnb"


def write_bundle(out_dir, bundles: Mapping[int, AttentionBundle],
                 image_id: str = "fixture", image_size=None) -> Path:
    """Write {timestep: bundle} as manifest.json plus one file per tensor."""
    if not bundles:
        raise ValueError("need at least one timestep")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timesteps = sorted(bundles)
    ref = bundles[timesteps[0]]
    if image_size is None:
        side = max(ref.grid_sides.values())
        image_size = (side * 8, side * 8)
    tensors = []
    for t in timesteps:
        b = bundles[t]
        if b.tokens != ref.tokens or b.resolutions != ref.resolutions:
            raise ValueError("bundles across timesteps must share tokens and resolutions")
        for r in b.resolutions:
            for kind, layers in (("self", b.self_layers[r]), ("cross", b.cross_layers[r])):
                for i, layer in enumerate(layers):
                    name = _tensor_name(kind, t, r, i)
                    write_tensor(out_dir / name, ag.value_of(layer))
                    tensors.append({"kind": kind, "timestep": t, "resolution": r,
                                    "layer": i, "path": name})
    manifest = {
        "format_version": FORMAT_VERSION,
        "image_id": image_id,
        "image_size": list(image_size),
        "resolutions": list(ref.resolutions),
        "layer_counts": {str(r): len(ref.cross_layers[r]) for r in ref.resolutions},
        "timesteps": timesteps,
        "tokens": list(ref.tokens),
        "class_spans": [list(s) if s is not None else None for s in ref.class_spans],
        "background_class": ref.background_class,
        "class_names": list(ref.class_names),
        "tensors": tensors,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _read_manifest(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise BundleFormatError(f"cannot read manifest: {exc}", path=str(path))
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"manifest is not valid JSON: {exc}",
                                offset=exc.pos, path=str(path))
    if not isinstance(data, dict):
        raise BundleFormatError("manifest top level must be a JSON object", path=str(path))
    required = ("format_version", "resolutions", "timesteps", "tokens",
                "class_spans", "tensors")
    for key in required:
        if key not in data:
            raise BundleFormatError(f"manifest missing key {key!r}", path=str(path))
    if data["format_version"] != FORMAT_VERSION:
        raise BundleFormatError(f"unsupported manifest version {data['format_version']}",
                                path=str(path))
    return data


def _group_tensors(data: dict, manifest_path: Path):
    by_key = {}
    for entry in data["tensors"]:
        for field in ("kind", "timestep", "resolution", "layer", "path"):
            if field not in entry:
                raise BundleFormatError(f"tensor entry missing {field!r}: {entry}",
                                        path=str(manifest_path))
        if entry["kind"] not in ("self", "cross"):
            raise BundleFormatError(f"unknown tensor kind {entry['kind']!r}",
                                    path=str(manifest_path))
        key = (entry["timestep"], entry["resolution"], entry["kind"])
        by_key.setdefault(key, []).append(entry)
    for key, entries in by_key.items():
        entries.sort(key=lambda e: e["layer"])
        layers = [e["layer"] for e in entries]
        if layers != list(range(len(entries))):
            raise BundleFormatError(f"layer indices for {key} are {layers}, expected "
                                    f"0..{len(entries) - 1}", path=str(manifest_path))
    return by_key


def _load_layer(base: Path, entry: dict, tokens: int) -> np.ndarray:
    path = base / entry["path"]
    arr = read_tensor(path).astype(np.float64)
    r = entry["resolution"]
    hw = r * r
    want = (hw, hw) if entry["kind"] == "self" else (hw, tokens)
    if arr.shape != want:
        raise BundleValidationError(
            f"{path}: {entry['kind']} tensor at timestep {entry['timestep']} "
            f"resolution {r} layer {entry['layer']} has shape {arr.shape}, expected {want}")
    try:
        check_row_stochastic(arr, f"{path}: {entry['kind']} layer {entry['layer']}")
    except ValueError as exc:
        raise BundleValidationError(str(exc)) from None
    return arr


def load_bundle(manifest_path, timestep: int) -> AttentionBundle:
    """Load one timestep's AttentionBundle from a manifest."""
    manifest_path = Path(manifest_path)
    data = _read_manifest(manifest_path)
    if timestep not in data["timesteps"]:
        raise BundleValidationError(f"timestep {timestep} not in manifest "
                                    f"(has {data['timesteps']})")
    base = manifest_path.parent
    by_key = _group_tensors(data, manifest_path)
    tokens = list(data["tokens"])
    spans = [tuple(s) if s is not None else None for s in data["class_spans"]]
    resolutions = tuple(sorted(data["resolutions"]))
    self_layers = {}
    cross_layers = {}
    for r in resolutions:
        for kind, dest in (("self", self_layers), ("cross", cross_layers)):
            entries = by_key.get((timestep, r, kind), [])
            if not entries:
                raise BundleValidationError(f"no {kind} tensors for timestep {timestep} "
                                            f"resolution {r}")
            dest[r] = [_load_layer(base, e, len(tokens)) for e in entries]
    return AttentionBundle(
        resolutions=resolutions,
        self_layers=self_layers,
        cross_layers=cross_layers,
        tokens=tuple(tokens),
        class_spans=tuple(spans),
        background_class=data.get("background_class"),
        grid_sides={r: r for r in resolutions},
        class_names=tuple(data["class_names"]) if data.get("class_names") else None,
    )


def load_manifest(manifest_path) -> dict:
    """All timesteps: {timestep: AttentionBundle} ready for the static backend."""
    data = _read_manifest(Path(manifest_path))
    return {t: load_bundle(manifest_path, t) for t in data["timesteps"]}


def validate_manifest(manifest_path) -> list:
    """Full check of a manifest and every tensor it references.

    Returns a list of human-readable problem strings; empty means valid.
    """
    manifest_path = Path(manifest_path)
    problems = []
    try:
        data = _read_manifest(manifest_path)
        by_key = _group_tensors(data, manifest_path)
    except BundleFormatError as exc:
        return [str(exc)]
    base = manifest_path.parent
    tokens = len(data["tokens"])
    spans = data["class_spans"]
    flat = []
    for s in spans:
        if s is None:
            continue
        if (not isinstance(s, list) or len(s) != 2 or s[0] >= s[1]
                or s[0] < 0 or s[1] > tokens):
            problems.append(f"class span {s} invalid for {tokens} tokens")
            continue
        flat.extend(range(s[0], s[1]))
    if len(flat) != len(set(flat)):
        problems.append("class spans overlap")
    for t in data["timesteps"]:
        for r in data["resolutions"]:
            for kind in ("self", "cross"):
                if (t, r, kind) not in by_key:
                    problems.append(f"missing {kind} tensors for timestep {t} "
                                    f"resolution {r}")
    for entry in data["tensors"]:
        try:
            _load_layer(base, entry, tokens)
        except (BundleFormatError, BundleValidationError) as exc:
            problems.append(str(exc))
    return problems


# ---------------------------------------------------------------------------
# label grids and mask images


def mask_palette(num_colors: int = 256) -> bytes:
    """Deterministic indexed-color palette (bit-reversal color coding)."""
    out = bytearray()
    for i in range(num_colors):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        out.extend((r, g, b))
    return bytes(out)


def write_mask_png(path, labels: np.ndarray) -> None:
    from PIL import Image

    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label grid must be 2-D")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label indices must fit in a byte")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(mask_palette())
    img.save(Path(path), format="PNG")


def read_label_grid(path) -> np.ndarray:
    """Ground-truth labels from an indexed PNG or an ATNB integer grid."""
    path = Path(path)
    if path.suffix.lower() == ".atnb":
        arr = read_tensor(path)
        if arr.ndim != 2:
            raise BundleValidationError(f"{path}: label grid must be 2-D")
        grid = np.rint(arr).astype(np.int64)
        if not np.allclose(arr, grid, atol=1e-3):
            raise BundleValidationError(f"{path}: label grid has non-integer values")
        return grid
    from PIL import Image

    with Image.open(path) as img:
        if img.mode not in ("P", "L"):
            raise BundleValidationError(f"{path}: expected an indexed or grayscale "
                                        f"image, got mode {img.mode}")
        return np.asarray(img, dtype=np.int64)
