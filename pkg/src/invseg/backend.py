"""Differentiable sources of attention bundles driven by learnable prompts.

Two backends share one contract: ``forward`` maps a flat parameter vector to
an :class:`~invseg.maps.AttentionBundle` (cross-attention entries carry the
gradient chain when the parameters are an autograd Tensor), and ``vjp`` pulls
an upstream attention-gradient back to the parameters.

* ToyBackend: a synthetic feature grid built from Gaussian blob patterns;
  parameters are unit-norm token embeddings and attention is the usual
  softmax(Q K^T / sqrt(d)).
* StaticBackend: attention loaded from files; parameters are per-class logit
  offsets added to the stored cross-attention logits, so zero offsets
  reproduce the stored maps exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import autograd as ag
from .errors import BackendStateError
from .loss import CropWindow
from .maps import AttentionBundle, bilinear_resize

GRID_SIDES = (8, 16, 32, 64)

# Toy feature-grid shape constants, calibrated once on the acceptance fixture
# (32-side, 2 blobs, feature noise 0.3) and frozen.
FEATURE_GAIN = 7.0          # feature row norm; sets self-attention sharpness
BLOB_SIGMA_FRAC = 0.11      # tail falloff width as a fraction of the grid side
CORE_RADIUS_FRAC = 0.25     # saturated blob core radius as a fraction of the side
INIT_JITTER = 2.0           # init embedding random-component magnitude
INIT_LEAK = 0.32            # init embedding leak toward competing classes
TIME_NOISE_SCALE = 0.05     # timestep perturbation per unit timestep/1000
MIN_CENTER_SEP_FRAC = 0.65  # minimum blob separation as a fraction of the side
CENTER_MARGIN_FRAC = 0.25   # keep blob centers this far inside the frame
POS_DIMS = 16               # random-Fourier positional feature count
POS_WEIGHT = 0.3            # positional share of the feature vector
POS_SCALE_FRAC = 0.15       # locality length scale as a fraction of the side

_STREAM_LAYOUT = 0
_STREAM_IMAGE = 1
_STREAM_TIME = 2
_STREAM_INIT = 3


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "toy"
    side: int = 64
    embed_dim: int = 32
    timestep_range: tuple = (5, 300)
    infer_timestep: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("toy", "static"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.side not in GRID_SIDES:
            raise ValueError(f"grid side must be one of {GRID_SIDES}, got {self.side}")
        lo, hi = self.timestep_range
        if lo > hi:
            raise ValueError(f"timestep range {self.timestep_range} has min > max")


@dataclass
class PromptParams:
    """Flat learnable parameter vector plus its logical shape."""

    values: np.ndarray
    shape: tuple
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != int(np.prod(self.shape)):
            raise ValueError(f"{self.values.size} values do not fill shape {self.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("prompt parameters must be finite")

    def copy(self) -> "PromptParams":
        return PromptParams(self.values.copy(), self.shape, self.kind)


def _flat_values(params, expected_size: int):
    if isinstance(params, PromptParams):
        flat = params.values
    elif isinstance(params, ag.Tensor):
        flat = params
    else:
        flat = np.asarray(params, dtype=np.float64).reshape(-1)
    if ag.value_of(flat).size != expected_size:
        raise ValueError(f"parameter vector has {ag.value_of(flat).size} entries, "
                         f"expected {expected_size}")
    return flat


def _square_window(win: CropWindow, side: int):
    if win.height != win.width:
        raise ValueError(f"backend crops must be square, got {win.height}x{win.width}")
    if win.top < 0 or win.left < 0 or win.top + win.height > side or win.left + win.width > side:
        raise ValueError(f"crop {win} outside {side}x{side} grid")
    return win


def _tokenize(class_names):
    """Split class names into tokens; spans map classes to token ranges."""
    tokens = []
    spans = []
    for name in class_names:
        words = name.split()
        if not words:
            raise ValueError("class names must be non-empty")
        spans.append((len(tokens), len(tokens) + len(words)))
        tokens.extend(words)
    return tuple(tokens), tuple(spans)


class ToyBackend:
    """Seed-deterministic Gaussian-blob feature grid with softmax attention."""

    def __init__(self, config: BackendConfig, class_names, noise: float = 0.0,
                 background_class: Optional[int] = None):
        if config.kind != "toy":
            raise ValueError("ToyBackend requires kind='toy'")
        if len(class_names) < 2:
            raise ValueError("need at least two classes")
        self.config = config
        self.class_names = tuple(class_names)
        self.noise = float(noise)
        self.background_class = background_class
        self.tokens, self.class_spans = _tokenize(self.class_names)
        side, d = config.side, config.embed_dim
        g = len(self.class_names)
        pos_dims = min(POS_DIMS, d // 2)
        content_dims = d - pos_dims
        if content_dims < g:
            raise ValueError(f"embed_dim {d} leaves {content_dims} content dims, "
                             f"need >= class count {g}")
        self.pos_dims = pos_dims
        self.content_dims = content_dims

        rng = np.random.default_rng((config.seed, _STREAM_LAYOUT))
        self.centers = _spread_centers(side, g, rng)
        q, _ = np.linalg.qr(rng.normal(size=(content_dims, content_dims)))
        content_dirs = q[:, :g].T  # (G, content) orthonormal class directions
        self.directions = np.zeros((g, d))
        self.directions[:, :content_dims] = content_dirs

        ys, xs = np.mgrid[0:side, 0:side]
        pts = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
        sigma = BLOB_SIGMA_FRAC * side
        core = CORE_RADIUS_FRAC * side
        d2 = ((pts[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        # saturated-core profile: flat 1 inside the core disk, Gaussian tail
        # outside; keeps near-peak pixels of every class inside any legal
        # crop window while the cores stay separated by an ambiguous bridge
        excess = np.maximum(0.0, np.sqrt(d2) - core)
        self.blob_patterns = np.exp(-(excess * excess) / (2.0 * sigma * sigma))  # (HW, G)

        content = self.blob_patterns @ content_dirs
        if self.noise > 0:
            # relative perturbation: each pixel's noise vector has norm
            # ~ noise * |signal|, so weak far-field rows stay directionally
            # clean instead of drowning once rows get normalized
            img_rng = np.random.default_rng((config.seed, _STREAM_IMAGE))
            mags = np.linalg.norm(content, axis=1, keepdims=True)
            content = content + ((self.noise / np.sqrt(content_dims)) * mags
                                 * img_rng.normal(size=content.shape))
        content = _row_normalize(content)

        # random Fourier positional features: their dot products approximate
        # a Gaussian kernel in pixel distance, giving self-attention the
        # spatial locality real attention has
        ell = POS_SCALE_FRAC * side
        omega = rng.normal(size=(2, pos_dims)) / ell
        phase = rng.uniform(0.0, 2.0 * np.pi, size=pos_dims)
        pos = np.sqrt(2.0 / pos_dims) * np.cos(pts @ omega + phase)
        self._base_features = _row_normalize(
            np.concatenate([content, POS_WEIGHT * pos], axis=1))

    @property
    def working_side(self) -> int:
        return self.config.side

    @property
    def resolutions(self) -> tuple:
        return (self.config.side,)

    @property
    def num_params(self) -> int:
        return len(self.tokens) * self.config.embed_dim

    def ground_truth(self) -> np.ndarray:
        """Nearest-blob label grid (the synthetic segmentation target)."""
        side = self.config.side
        ys, xs = np.mgrid[0:side, 0:side]
        pts = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
        d2 = ((pts[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1).reshape(side, side)

    def features(self, timestep: int) -> np.ndarray:
        """(HW, d) feature grid at one timestep; rows have norm FEATURE_GAIN."""
        f = self._base_features
        mag = TIME_NOISE_SCALE * timestep / 1000.0
        if mag > 0:
            rng = np.random.default_rng((self.config.seed, _STREAM_TIME, int(timestep)))
            f = _row_normalize(f + (mag / np.sqrt(f.shape[1])) * rng.normal(size=f.shape))
        return FEATURE_GAIN * f

    def init_params(self) -> PromptParams:
        """Unit-norm token embeddings perturbed away from the class directions.

        Each token starts as its class direction plus a leak toward the
        competing classes and a large random component. The random part
        couples the feature noise into the attention margins, which widens
        the ambiguous band around class boundaries; inversion is expected to
        shed it and recover clean margins.
        """
        rng = np.random.default_rng((self.config.seed, _STREAM_INIT))
        k, d = len(self.tokens), self.config.embed_dim
        g = len(self.class_spans)
        emb = np.empty((k, d))
        for c, (a, b) in enumerate(self.class_spans):
            others = [o for o in range(g) if o != c]
            for t in range(a, b):
                w = rng.uniform(0.5, 1.0, size=len(others))
                leak = (w / w.sum()) @ self.directions[others]
                v = (self.directions[c] + INIT_LEAK * leak
                     + INIT_JITTER * _unit(rng.normal(size=d)))
                emb[t] = _unit(v)
        return PromptParams(emb.reshape(-1), (k, d), "toy")

    def forward(self, params, timestep: int, crop: Optional[CropWindow] = None) -> AttentionBundle:
        side, d = self.config.side, self.config.embed_dim
        k = len(self.tokens)
        flat = _flat_values(params, k * d)
        feats = self.features(timestep)
        grid_side = side
        if crop is not None:
            win = _square_window(crop, side)
            grid = feats.reshape(side, side, d)
            feats = grid[win.top:win.top + win.height,
                         win.left:win.left + win.width].reshape(-1, d)
            grid_side = win.height
        scale = 1.0 / np.sqrt(d)
        a_self = _softmax_np(feats @ feats.T * scale)
        p = ag.reshape(flat, (k, d))
        cross_logits = ag.mul(ag.matmul(feats, ag.transpose(p)), scale)
        a_cross = ag.softmax_rows(cross_logits)
        return AttentionBundle(
            resolutions=(side,),
            self_layers={side: [a_self]},
            cross_layers={side: [a_cross]},
            tokens=self.tokens,
            class_spans=self.class_spans,
            background_class=self.background_class,
            grid_sides={side: grid_side},
            class_names=self.class_names,
        )

    def vjp(self, params, timestep: int, crop, upstream) -> np.ndarray:
        return _bundle_vjp(self, params, timestep, crop, upstream)


class StaticBackend:
    """File-backed attention with per-class logit offsets as the parameters."""

    def __init__(self, config: BackendConfig, bundles: Mapping[int, AttentionBundle]):
        if config.kind != "static":
            raise ValueError("StaticBackend requires kind='static'")
        if not bundles:
            raise BackendStateError("static backend needs at least one loaded bundle")
        self.config = config
        self.bundles = dict(bundles)
        self.timesteps = sorted(self.bundles)
        ref = self.bundles[self.timesteps[0]]
        self.tokens = ref.tokens
        self.class_spans = ref.class_spans
        self.class_names = ref.class_names
        self.background_class = ref.background_class
        k, c = len(self.tokens), len(self.class_spans)
        self._token_classes = np.zeros((k, c))
        for ci, span in enumerate(self.class_spans):
            if span is not None:
                self._token_classes[span[0]:span[1], ci] = 1.0

    @property
    def working_side(self) -> int:
        return self.config.side

    @property
    def resolutions(self) -> tuple:
        return self.bundles[self.timesteps[0]].resolutions

    @property
    def num_params(self) -> int:
        return len(self.class_spans) * self.config.side ** 2

    def snap_timestep(self, timestep: int) -> int:
        return min(self.timesteps, key=lambda t: (abs(t - timestep), t))

    def init_params(self) -> PromptParams:
        c, side = len(self.class_spans), self.config.side
        return PromptParams(np.zeros(c * side * side), (c, side, side), "static")

    def forward(self, params, timestep: int, crop: Optional[CropWindow] = None) -> AttentionBundle:
        side = self.config.side
        c = len(self.class_spans)
        flat = _flat_values(params, c * side * side)
        bundle = self.bundles.get(self.snap_timestep(timestep))
        if bundle is None:
            raise BackendStateError("no bundle loaded for requested timestep")

        plain = not isinstance(flat, ag.Tensor)
        if plain and not np.any(ag.value_of(flat)) and crop is None:
            return bundle  # zero offsets reproduce the stored maps bit-exactly

        win = _square_window(crop, side) if crop is not None else None
        offsets = ag.reshape(flat, (c, side, side))
        if win is not None:
            offsets = offsets[:, win.top:win.top + win.height,
                              win.left:win.left + win.width]

        self_layers = {}
        cross_layers = {}
        grid_sides = {}
        for r in bundle.resolutions:
            src_side = bundle.grid_sides[r]
            rwin = _scale_window(win, side, src_side) if win is not None else None
            out_side = rwin.height if rwin is not None else src_side
            grid_sides[r] = out_side
            self_layers[r] = [_crop_self(ag.value_of(layer), src_side, rwin)
                              for layer in bundle.self_layers[r]]
            offs_tok = _offsets_for_tokens(offsets, self._token_classes, out_side)
            cross_layers[r] = []
            for layer in bundle.cross_layers[r]:
                base = ag.value_of(layer)
                if rwin is not None:
                    k = base.shape[1]
                    base = base.reshape(src_side, src_side, k)[
                        rwin.top:rwin.top + rwin.height,
                        rwin.left:rwin.left + rwin.width].reshape(-1, k)
                logits = np.log(np.maximum(base, 1e-12))
                cross_layers[r].append(ag.softmax_rows(ag.add(logits, offs_tok)))
        return AttentionBundle(
            resolutions=bundle.resolutions,
            self_layers=self_layers,
            cross_layers=cross_layers,
            tokens=self.tokens,
            class_spans=self.class_spans,
            background_class=self.background_class,
            grid_sides=grid_sides,
            class_names=self.class_names,
        )

    def vjp(self, params, timestep: int, crop, upstream) -> np.ndarray:
        return _bundle_vjp(self, params, timestep, crop, upstream)


def _offsets_for_tokens(offsets, token_classes: np.ndarray, out_side: int):
    """(C, h, w) class offsets -> (out_side**2, K) token offsets."""
    v = ag.value_of(offsets)
    c, h, w = v.shape
    if (h, w) != (out_side, out_side):
        hwc = ag.transpose(offsets, (1, 2, 0))
        hwc = bilinear_resize(hwc, out_side, out_side)
        flat = ag.reshape(hwc, (out_side * out_side, c))
    else:
        flat = ag.reshape(ag.transpose(offsets, (1, 2, 0)), (h * w, c))
    return ag.matmul(flat, token_classes.T)


def _scale_window(win: CropWindow, from_side: int, to_side: int) -> CropWindow:
    if from_side == to_side:
        return win
    size = max(1, int(round(win.height * to_side / from_side)))
    size = min(size, to_side)
    top = min(int(round(win.top * to_side / from_side)), to_side - size)
    left = min(int(round(win.left * to_side / from_side)), to_side - size)
    return CropWindow(top, left, size, size)


def _crop_self(layer: np.ndarray, src_side: int, win: Optional[CropWindow]) -> np.ndarray:
    if win is None:
        return layer
    four = layer.reshape(src_side, src_side, src_side, src_side)
    sub = four[win.top:win.top + win.height, win.left:win.left + win.width,
               win.top:win.top + win.height, win.left:win.left + win.width]
    hw = win.height * win.width
    flat = sub.reshape(hw, hw)
    return flat / flat.sum(axis=1, keepdims=True)


def _bundle_vjp(backend, params, timestep, crop, upstream) -> np.ndarray:
    """Pull upstream attention gradients back to the flat parameter vector.

    ``upstream`` mirrors the bundle: {"cross": {res: [arrays]}, "self": ...}.
    Self-attention carries no parameter dependence in either backend, so its
    upstream only gets a shape check.
    """
    flat0 = params.values if isinstance(params, PromptParams) else np.asarray(params).reshape(-1)
    leaf = ag.Tensor(flat0)
    bundle = backend.forward(leaf, timestep, crop)
    terms = []
    for r in bundle.resolutions:
        for i, layer in enumerate(bundle.cross_layers[r]):
            up = upstream.get("cross", {}).get(r, [None] * (i + 1))[i]
            if up is None:
                continue
            up = np.asarray(up, dtype=np.float64)
            if up.shape != ag.value_of(layer).shape:
                raise ValueError(f"upstream cross res {r} layer {i}: shape {up.shape} "
                                 f"!= {ag.value_of(layer).shape}")
            if isinstance(layer, ag.Tensor):
                terms.append(ag.dot(layer, up))
        for i, layer in enumerate(bundle.self_layers[r]):
            up = upstream.get("self", {}).get(r, [None] * (i + 1))[i]
            if up is not None and np.asarray(up).shape != ag.value_of(layer).shape:
                raise ValueError(f"upstream self res {r} layer {i} has wrong shape")
    if not terms:
        return np.zeros_like(flat0)
    scalar = terms[0]
    for t in terms[1:]:
        scalar = ag.add(scalar, t)
    scalar.backward()
    return leaf.grad if leaf.grad is not None else np.zeros_like(flat0)


def _spread_centers(side: int, count: int, rng) -> np.ndarray:
    """Blob centers with pairwise separation; rejection with a relaxing radius."""
    margin = CENTER_MARGIN_FRAC * side
    min_sep = MIN_CENTER_SEP_FRAC * side
    while True:
        centers = []
        for _ in range(200):
            cand = rng.uniform(margin, side - margin, size=2)
            if all(np.linalg.norm(cand - c) >= min_sep for c in centers):
                centers.append(cand)
                if len(centers) == count:
                    return np.array(centers)
        min_sep *= 0.8


def _row_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-9)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(np.linalg.norm(v), 1e-12)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
