"""Shared fixtures: small deterministic backends, bundles and helpers."""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from invseg.backend import BackendConfig, StaticBackend, ToyBackend
from invseg.bundle_io import FixtureSpec, fixture_backend, synth_fixture
from invseg.metrics import ConfusionMatrix, accumulate, miou
from invseg.optim import InversionConfig, invert_prompt
from invseg.segment import predict_mask


def random_row_stochastic(rng, n, m=None):
    m = n if m is None else m
    raw = rng.gamma(2.0, size=(n, m)) + 1e-6
    return raw / raw.sum(axis=1, keepdims=True)


def random_maps(rng, c, side):
    return rng.uniform(0.0, 1.0, size=(c, side, side))


def grid_miou(class_maps, gt):
    """mIoU of the argmax mask against a label grid at the grid's own size."""
    seg = predict_mask(class_maps, gt.shape[0], gt.shape[1])
    conf = accumulate(ConfusionMatrix.empty(class_maps.num_classes), seg.labels, gt)
    return miou(conf)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy8():
    cfg = BackendConfig(kind="toy", side=8, embed_dim=16, seed=1)
    return ToyBackend(cfg, ("blob0", "blob1"), noise=0.2)


@pytest.fixture
def static8():
    bundle, gt = synth_fixture(blobs=2, side=8, noise=0.2, seed=1)
    cfg = BackendConfig(kind="static", side=8, seed=1)
    return StaticBackend(cfg, {50: bundle}), gt


# The quantitative fixture: two blobs on the 32 grid with feature noise 0.3,
# scored before and after the default 15-step inversion. Session-scoped so the
# efficacy, trace and segmentation tests share one run.
FIXTURE_SPEC = FixtureSpec(blobs=2, side=32, noise=0.3)
FIXTURE_INV_SEED = 8


@pytest.fixture(scope="session")
def fixture_run():
    spec = FIXTURE_SPEC
    start = time.perf_counter()
    backend = fixture_backend(spec)
    baseline = invert_prompt(backend, InversionConfig(steps=0, seed=FIXTURE_INV_SEED))
    tuned = invert_prompt(backend, InversionConfig(steps=15, seed=FIXTURE_INV_SEED))
    elapsed = time.perf_counter() - start
    gt = backend.ground_truth()
    return SimpleNamespace(
        spec=spec,
        backend=backend,
        baseline=baseline,
        tuned=tuned,
        gt=gt,
        miou_before=grid_miou(baseline.maps, gt),
        miou_after=grid_miou(tuned.maps, gt),
        elapsed=elapsed,
    )
