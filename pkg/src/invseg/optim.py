"""Adam and the per-image prompt inversion loop.

Each iteration samples a timestep, draws one square crop per view, runs the
backend forward per view, aggregates and refines the attention into class
maps, scores the coverage-weighted fusion with the cluster + entropy loss,
and pulls the gradient back to the prompt parameters through the backend's
vjp. A final pass at the inference timestep with no crop produces the maps
used for segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .distance import DistanceMatrix, skl_matrix
from .errors import NonFiniteLossError
from .loss import (DEFAULT_ALPHA, DEFAULT_ANCHOR_CENTER, DEFAULT_ANCHOR_SCALE,
                   DEFAULT_MIN_CROP, DEFAULT_VIEWS, random_augment_spec,
                   total_loss)
from .maps import (DEFAULT_WEIGHTS, AggregationWeights, AttentionBundle,
                   aggregate_attention)
from .refine import ClassMaps, class_maps, refine_cross

_STREAM_TIMESTEP = 10
_STREAM_CROPS = 11


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.m.shape != self.v.shape:
            raise ValueError("moment vectors must have matching shapes")
        if self.step < 0:
            raise ValueError("step counter must be >= 0")

    @classmethod
    def for_size(cls, n: int, lr: float = 0.01) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr)


def adam_step(state: AdamState, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state``, returns new values."""
    values = np.asarray(values, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != values.shape or grad.shape != state.m.shape:
        raise ValueError(f"shape mismatch: values {values.shape}, grad {grad.shape}, "
                         f"moments {state.m.shape}")
    bad = np.count_nonzero(~np.isfinite(grad))
    if bad:
        raise ValueError(f"non-finite gradient ({bad} of {grad.size} entries) "
                         f"at adam step {state.step + 1}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 15
    lr: float = 0.01
    alpha: float = DEFAULT_ALPHA
    anchor_scale: float = DEFAULT_ANCHOR_SCALE
    anchor_center: float = DEFAULT_ANCHOR_CENTER
    views: int = DEFAULT_VIEWS
    crop_min: float = DEFAULT_MIN_CROP
    seed: int = 0
    timestep_range: tuple = (5, 300)
    infer_timestep: int = 50
    weights: Optional[AggregationWeights] = None
    symmetric_inter: bool = False
    normalize_entropy_classes: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.anchor_scale <= 0:
            raise ValueError("anchor scale must be > 0")
        if self.views < 1:
            raise ValueError("need at least one view")
        lo, hi = self.timestep_range
        if lo > hi:
            raise ValueError(f"timestep range {self.timestep_range} has min > max")


@dataclass
class InversionResult:
    maps: ClassMaps
    params: "PromptParams"
    trace: tuple
    timesteps: tuple

    @property
    def totals(self):
        return [b.total for b in self.trace]


def resolve_weights(resolutions, weights: Optional[AggregationWeights]) -> AggregationWeights:
    """Default to the one-hot 16 weighting when a 16 grid exists, else uniform."""
    if weights is not None:
        return weights
    if 16 in resolutions:
        return DEFAULT_WEIGHTS
    return AggregationWeights.uniform(resolutions)


def moving_average(xs: Sequence[float], window: int = 5):
    xs = list(xs)
    if window < 1 or window > len(xs):
        return []
    return [sum(xs[i:i + window]) / window for i in range(len(xs) - window + 1)]


def _wrap_cross_leaves(bundle: AttentionBundle):
    """Rebuild the bundle with cross layers as autograd leaves.

    Returns (bundle_with_leaves, leaves) where leaves mirrors the cross layout.
    """
    leaves = {}
    cross = {}
    for r in bundle.resolutions:
        leaves[r] = [ag.Tensor(ag.value_of(x)) for x in bundle.cross_layers[r]]
        cross[r] = list(leaves[r])
    wrapped = AttentionBundle(
        resolutions=bundle.resolutions,
        self_layers={r: [ag.value_of(x) for x in bundle.self_layers[r]]
                     for r in bundle.resolutions},
        cross_layers=cross,
        tokens=bundle.tokens,
        class_spans=bundle.class_spans,
        background_class=bundle.background_class,
        grid_sides=bundle.grid_sides,
        class_names=bundle.class_names,
    )
    return wrapped, leaves


def _view_class_maps(bundle: AttentionBundle, weights: AggregationWeights,
                     side: int) -> ClassMaps:
    a_self, a_cross = aggregate_attention(bundle, weights, target_side=side)
    refined = refine_cross(ag.value_of(a_self), a_cross)
    return class_maps(refined, bundle.class_spans, bundle.background_class,
                      bundle.class_names)


def _plain_maps(maps: ClassMaps) -> ClassMaps:
    return ClassMaps(ag.value_of(maps.maps).copy(), maps.class_names)


def invert_prompt(backend, config: InversionConfig) -> InversionResult:
    """Run the test-time optimization loop and return final maps plus trace.

    Fully deterministic under ``config.seed``: timestep sampling, crop windows
    and the backend's own randomness all derive from fixed seed streams.
    """
    params = backend.init_params()
    state = AdamState.for_size(params.values.size, lr=config.lr)
    side = backend.working_side
    weights = resolve_weights(backend.resolutions, config.weights)
    rng_t = np.random.default_rng((config.seed, _STREAM_TIMESTEP))
    rng_crop = np.random.default_rng((config.seed, _STREAM_CROPS))
    lo, hi = config.timestep_range

    dist_cache = {}

    def dist_for(t: int) -> DistanceMatrix:
        got = dist_cache.get(t)
        if got is None:
            full = backend.forward(params, t, None)
            a_self, _ = aggregate_attention(full, weights, target_side=side)
            got = dist_cache[t] = skl_matrix(ag.value_of(a_self))
        return got

    trace = []
    timesteps = []
    for step in range(config.steps):
        t = int(rng_t.integers(lo, hi + 1))
        timesteps.append(t)
        spec = random_augment_spec(side, config.views, config.crop_min, rng_crop)
        dist = dist_for(t)

        view_maps = []
        view_leaves = []
        for v in range(spec.views):
            bundle = backend.forward(params, t, spec.windows[v])
            wrapped, leaves = _wrap_cross_leaves(bundle)
            view_maps.append(_view_class_maps(wrapped, weights, side))
            view_leaves.append(leaves)

        loss_node, breakdown = total_loss(
            dist, view_maps, spec,
            alpha=config.alpha, scale=config.anchor_scale,
            center=config.anchor_center, symmetric=config.symmetric_inter,
            normalize_classes=config.normalize_entropy_classes)
        trace.append(breakdown)
        if not np.isfinite(breakdown.total):
            raise NonFiniteLossError(step, [b.total for b in trace])
        if isinstance(loss_node, ag.Tensor):
            loss_node.backward()

        grad = np.zeros_like(params.values)
        for v in range(spec.views):
            upstream = {"cross": {
                r: [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
                    for leaf in view_leaves[v][r]]
                for r in view_leaves[v]}}
            grad += backend.vjp(params, t, spec.windows[v], upstream)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLossError(step, [b.total for b in trace])
        params.values = adam_step(state, params.values, grad)

    final = backend.forward(params, config.infer_timestep, None)
    maps = _plain_maps(_view_class_maps(final, weights, side))
    return InversionResult(maps=maps, params=params, trace=tuple(trace),
                           timesteps=tuple(timesteps))
