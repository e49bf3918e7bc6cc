"""Export job definition and the bundle export pipeline."""

import pickle
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import bundle
from .capture import AttentionStore
from .errors import ExportStartupError
from .model import (BOS, EOS, NUM_TIMESTEPS, SIDES, build_model, noisy_latent)

DEFAULT_TIMESTEPS = (50, 300)
DEFAULT_RESOLUTIONS = (16, 32)
WORKING_SIDE = 64


@dataclass
class ExportJob:
    """One image, one prompt, one output directory.

    The prompt is the class names joined by spaces; spans into the token
    list are computed per class so the engine can slice per-class columns.
    """

    image: Path
    class_names: Sequence[str]
    out_dir: Path
    timesteps: tuple = DEFAULT_TIMESTEPS
    resolutions: tuple = DEFAULT_RESOLUTIONS
    seed: int = 0
    weights: Optional[Path] = None

    def __post_init__(self):
        self.image = Path(self.image)
        self.out_dir = Path(self.out_dir)
        self.class_names = tuple(str(n).strip() for n in self.class_names)
        if not self.class_names:
            raise ValueError("class names must be non-empty")
        for name in self.class_names:
            if not name.split():
                raise ValueError(f"class name {name!r} has no tokens")
        self.timesteps = tuple(int(t) for t in self.timesteps)
        if not self.timesteps:
            raise ValueError("need at least one timestep")
        for t in self.timesteps:
            if not 0 <= t < NUM_TIMESTEPS:
                raise ValueError(f"timestep {t} outside the model schedule "
                                 f"[0, {NUM_TIMESTEPS})")
        self.resolutions = tuple(sorted(int(r) for r in self.resolutions))
        if not self.resolutions:
            raise ValueError("need at least one resolution")
        for r in self.resolutions:
            if r not in SIDES:
                raise ValueError(f"resolution {r} not offered by the model "
                                 f"(has {sorted(SIDES)})")
        self.seed = int(self.seed)
        if self.weights is not None:
            self.weights = Path(self.weights)


def tokenize(class_names):
    """Word tokens for the space-joined prompt plus per-class spans.

    Returns (sequence with start/end padding tokens, exported tokens,
    class spans). Spans index the exported token list, which excludes
    the padding tokens.
    """
    words, spans = [], []
    for name in class_names:
        parts = name.split()
        spans.append((len(words), len(words) + len(parts)))
        words.extend(parts)
    return [BOS, *words, EOS], words, spans


def load_image(path):
    """Image as a (1, 3, 64, 64) tensor in [-1, 1] plus the original size."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            size = (im.height, im.width)
            small = im.resize((WORKING_SIDE, WORKING_SIDE),
                              Image.Resampling.BILINEAR)
    except (OSError, ValueError) as exc:
        raise ExportStartupError(f"cannot read image {path}: {exc}") from None
    arr = np.asarray(small, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1)[None], size


def _restrict_cross(arr: np.ndarray, n_words: int) -> np.ndarray:
    """Drop the padding-token columns and renormalize rows.

    Raw cross attention distributes each pixel over every position in the
    sequence including start/end padding. The bundle keeps only the prompt
    token columns, so rows are rescaled to sum to 1 again (softmax output
    is strictly positive, which makes this safe).
    """
    kept = arr.astype(np.float64)[:, 1:1 + n_words]
    kept /= kept.sum(axis=1, keepdims=True)
    return kept.astype(np.float32)


def _load_weights(model_seed: int, weights):
    try:
        return build_model(model_seed, weights=weights)
    except FileNotFoundError as exc:
        raise ExportStartupError(f"model weights not found: {exc}") from None
    except (RuntimeError, ValueError, EOFError, pickle.UnpicklingError,
            zipfile.BadZipFile) as exc:
        raise ExportStartupError(f"cannot load model weights {weights}: {exc}") from None


def export_bundle(job: ExportJob) -> Path:
    """Run the UNet on the noised image at each requested timestep, capture
    head-averaged post-softmax attention, and write the bundle.

    Returns the manifest path. Tensors land next to it in job.out_dir.
    """
    torch.set_num_threads(1)
    x0, image_size = load_image(job.image)
    if job.weights is not None and not job.weights.is_file():
        raise ExportStartupError(f"model weights not found: {job.weights}")
    model = _load_weights(job.seed, job.weights)
    sequence, words, spans = tokenize(job.class_names)
    with torch.no_grad():
        ctx = model.text(sequence)

    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    layer_counts = {}
    for t in sorted(job.timesteps):
        x_t = noisy_latent(x0, t, job.seed)
        store = AttentionStore(job.resolutions, n_tokens=len(sequence))
        with torch.no_grad():
            model(x_t, t, ctx, store)
        for r in job.resolutions:
            for kind in ("self", "cross"):
                layers = store.take(kind, r)
                for i, (tag, arr) in enumerate(layers):
                    if kind == "cross":
                        arr = _restrict_cross(arr, len(words))
                    name = bundle.tensor_name(kind, t, r, i)
                    bundle.write_tensor(out_dir / name, arr)
                    entries.append({"kind": kind, "timestep": t, "resolution": r,
                                    "layer": i, "path": name, "source": tag})
            layer_counts[str(r)] = len(store.take("cross", r))

    manifest = {
        "format_version": bundle.FORMAT_VERSION,
        "image_id": job.image.stem,
        "image_size": list(image_size),
        "resolutions": list(job.resolutions),
        "layer_counts": layer_counts,
        "timesteps": sorted(job.timesteps),
        "tokens": list(words),
        "class_spans": [list(s) for s in spans],
        "background_class": None,
        "class_names": list(job.class_names),
        "tensors": entries,
        "exporter": {"tool": "attn-export", "prompt": " ".join(job.class_names),
                     "seed": job.seed},
    }
    return bundle.write_manifest(out_dir, manifest)
