"""Toy and static backends: forward contracts, parameter init, vjp."""

import numpy as np
import pytest

from invseg import autograd as ag
from invseg.backend import (FEATURE_GAIN, BackendConfig, PromptParams,
                            StaticBackend, ToyBackend)
from invseg.bundle_io import synth_fixture
from invseg.errors import BackendStateError
from invseg.loss import CropWindow


def test_config_validation():
    with pytest.raises(ValueError, match="kind"):
        BackendConfig(kind="quantum")
    with pytest.raises(ValueError, match="side"):
        BackendConfig(side=17)
    with pytest.raises(ValueError, match="timestep"):
        BackendConfig(timestep_range=(300, 5))


def test_prompt_params_validation():
    with pytest.raises(ValueError):
        PromptParams(np.zeros(5), (2, 3), "toy")
    with pytest.raises(ValueError, match="finite"):
        PromptParams(np.array([1.0, np.inf]), (2,), "toy")
    p = PromptParams(np.arange(6.0), (2, 3), "toy")
    q = p.copy()
    q.values[0] = 99.0
    assert p.values[0] == 0.0


# ---------------------------------------------------------------------------
# toy backend


def test_toy_requires_toy_kind():
    with pytest.raises(ValueError):
        ToyBackend(BackendConfig(kind="static", side=8), ("a", "b"))
    with pytest.raises(ValueError, match="two classes"):
        ToyBackend(BackendConfig(kind="toy", side=8, embed_dim=16), ("solo",))


def test_toy_tokenization_multiword():
    b = ToyBackend(BackendConfig(kind="toy", side=8, embed_dim=16, seed=0),
                   ("fluffy cat", "sky"))
    assert b.tokens == ("fluffy", "cat", "sky")
    assert b.class_spans == ((0, 2), (2, 3))
    assert b.num_params == 3 * 16


def test_zero_params_give_uniform_cross(toy8):
    k = len(toy8.tokens)
    bundle = toy8.forward(np.zeros(toy8.num_params), 50, None)
    cross = ag.value_of(bundle.cross_layers[8][0])
    assert np.allclose(cross, 1.0 / k, atol=1e-12)


def test_forward_rows_stochastic_random_params(toy8, rng):
    params = PromptParams(rng.normal(size=toy8.num_params), (2, 16), "toy")
    bundle = toy8.forward(params, 120, None)
    cross = ag.value_of(bundle.cross_layers[8][0])
    a_self = ag.value_of(bundle.self_layers[8][0])
    assert np.abs(cross.sum(axis=1) - 1.0).max() < 1e-6
    assert np.abs(a_self.sum(axis=1) - 1.0).max() < 1e-6
    assert cross.min() >= 0.0 and a_self.min() >= 0.0


def test_init_embeddings_unit_norm(toy8):
    params = toy8.init_params()
    emb = params.values.reshape(len(toy8.tokens), toy8.config.embed_dim)
    assert np.abs(np.linalg.norm(emb, axis=1) - 1.0).max() < 1e-9


def test_init_deterministic_per_seed():
    cfg = BackendConfig(kind="toy", side=8, embed_dim=16, seed=7)
    a = ToyBackend(cfg, ("x", "y"), noise=0.1)
    b = ToyBackend(cfg, ("x", "y"), noise=0.1)
    assert np.array_equal(a.init_params().values, b.init_params().values)
    c = ToyBackend(BackendConfig(kind="toy", side=8, embed_dim=16, seed=8),
                   ("x", "y"), noise=0.1)
    assert not np.array_equal(a.init_params().values, c.init_params().values)


def test_features_deterministic_and_scaled(toy8):
    f1 = toy8.features(120)
    f2 = toy8.features(120)
    assert np.array_equal(f1, f2)
    assert np.allclose(np.linalg.norm(f1, axis=1), FEATURE_GAIN, atol=1e-9)
    assert not np.allclose(f1, toy8.features(280))
    # timestep 0 applies no perturbation
    assert np.array_equal(toy8.features(0), FEATURE_GAIN * toy8._base_features)


def test_ground_truth_labels(toy8):
    gt = toy8.ground_truth()
    assert gt.shape == (8, 8)
    assert set(np.unique(gt)) == {0, 1}


def test_crop_forward_shapes(toy8):
    win = CropWindow(1, 2, 5, 5)
    bundle = toy8.forward(toy8.init_params(), 50, win)
    assert bundle.grid_sides[8] == 5
    assert ag.value_of(bundle.self_layers[8][0]).shape == (25, 25)
    assert ag.value_of(bundle.cross_layers[8][0]).shape == (25, 2)


def test_crop_window_checked(toy8):
    with pytest.raises(ValueError, match="square"):
        toy8.forward(toy8.init_params(), 50, CropWindow(0, 0, 4, 5))
    with pytest.raises(ValueError, match="outside"):
        toy8.forward(toy8.init_params(), 50, CropWindow(6, 6, 4, 4))


def test_cropped_rows_match_full_grid(toy8):
    """A crop selects query pixels; their token distributions are unchanged."""
    params = toy8.init_params()
    full = ag.value_of(toy8.forward(params, 50, None).cross_layers[8][0])
    win = CropWindow(2, 1, 4, 4)
    cropped = ag.value_of(toy8.forward(params, 50, win).cross_layers[8][0])
    picked = full.reshape(8, 8, 2)[2:6, 1:5].reshape(16, 2)
    assert np.allclose(cropped, picked, atol=1e-12)


def test_param_size_checked(toy8):
    with pytest.raises(ValueError, match="entries"):
        toy8.forward(np.zeros(7), 50, None)


# ---------------------------------------------------------------------------
# vjp


def test_vjp_zero_upstream_zero_grad(toy8):
    up = {"cross": {8: [np.zeros((64, 2))]}}
    grad = toy8.vjp(toy8.init_params(), 50, None, up)
    assert np.array_equal(grad, np.zeros(toy8.num_params))
    assert np.array_equal(toy8.vjp(toy8.init_params(), 50, None, {}),
                          np.zeros(toy8.num_params))


def test_vjp_matches_softmax_jacobian_hand_formula(toy8):
    """One-hot upstream at (pixel, token) against the closed-form Jacobian."""
    params = toy8.init_params()
    t = 50
    a = ag.value_of(toy8.forward(params, t, None).cross_layers[8][0])
    feats = toy8.features(t)
    k, d = len(toy8.tokens), toy8.config.embed_dim
    scale = 1.0 / np.sqrt(d)
    for i, j in [(5, 1), (40, 0)]:
        up = np.zeros_like(a)
        up[i, j] = 1.0
        got = toy8.vjp(params, t, None, {"cross": {8: [up]}}).reshape(k, d)
        expected = np.zeros((k, d))
        for kk in range(k):
            delta = 1.0 if kk == j else 0.0
            expected[kk] = a[i, j] * (delta - a[i, kk]) * feats[i] * scale
        assert np.allclose(got, expected, atol=1e-12)


def test_vjp_matches_finite_differences(toy8):
    rng = np.random.default_rng(2)
    params = toy8.init_params()
    up = rng.normal(size=(64, 2))
    grad = toy8.vjp(params, 50, None, {"cross": {8: [up]}})

    def scalar(vec):
        cross = ag.value_of(toy8.forward(vec, 50, None).cross_layers[8][0])
        return float((cross * up).sum())

    h = 1e-5
    for i in rng.choice(params.values.size, size=8, replace=False):
        vp, vm = params.values.copy(), params.values.copy()
        vp[i] += h
        vm[i] -= h
        fd = (scalar(vp) - scalar(vm)) / (2.0 * h)
        assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_vjp_rejects_bad_upstream_shape(toy8):
    with pytest.raises(ValueError, match="shape"):
        toy8.vjp(toy8.init_params(), 50, None, {"cross": {8: [np.zeros((3, 3))]}})
    with pytest.raises(ValueError, match="self"):
        toy8.vjp(toy8.init_params(), 50, None,
                 {"self": {8: [np.zeros((2, 2))]}})


# ---------------------------------------------------------------------------
# static backend


def test_static_requires_static_kind(static8):
    backend, _ = static8
    with pytest.raises(ValueError):
        StaticBackend(BackendConfig(kind="toy", side=8), backend.bundles)
    with pytest.raises(BackendStateError):
        StaticBackend(BackendConfig(kind="static", side=8), {})


def test_static_zero_offsets_return_loaded_bundle(static8):
    backend, _ = static8
    out = backend.forward(backend.init_params(), 50, None)
    assert out is backend.bundles[50]


def test_static_zero_offset_tensor_path_matches_bundle(static8):
    """The differentiable path at zero offsets reproduces the stored maps."""
    backend, _ = static8
    leaf = ag.Tensor(np.zeros(backend.num_params))
    out = backend.forward(leaf, 50, None)
    got = ag.value_of(out.cross_layers[8][0])
    want = ag.value_of(backend.bundles[50].cross_layers[8][0])
    assert np.allclose(got, want, atol=1e-12)


def test_static_offsets_shift_mass(static8):
    backend, _ = static8
    vec = np.zeros((2, 8, 8))
    vec[0] = 2.0  # push every pixel toward class 0's token
    out = backend.forward(PromptParams(vec.reshape(-1), (2, 8, 8), "static"),
                          50, None)
    base = ag.value_of(backend.bundles[50].cross_layers[8][0])
    got = ag.value_of(out.cross_layers[8][0])
    assert np.all(got[:, 0] > base[:, 0])
    assert np.abs(got.sum(axis=1) - 1.0).max() < 1e-9


def test_static_snap_timestep():
    bundle, _ = synth_fixture(blobs=2, side=8, noise=0.0, seed=0)
    bundle2, _ = synth_fixture(blobs=2, side=8, noise=0.0, seed=0)
    backend = StaticBackend(BackendConfig(kind="static", side=8),
                            {50: bundle, 300: bundle2})
    assert backend.snap_timestep(10) == 50
    assert backend.snap_timestep(290) == 300
    assert backend.snap_timestep(175) == 50  # equidistant snaps low


def test_static_crop_forward(static8):
    backend, _ = static8
    win = CropWindow(0, 0, 5, 5)
    out = backend.forward(backend.init_params(), 50, win)
    assert out.grid_sides[8] == 5
    a_self = ag.value_of(out.self_layers[8][0])
    cross = ag.value_of(out.cross_layers[8][0])
    assert a_self.shape == (25, 25)
    assert np.abs(a_self.sum(axis=1) - 1.0).max() < 1e-9
    assert np.abs(cross.sum(axis=1) - 1.0).max() < 1e-9


def test_static_vjp_matches_finite_differences(static8):
    backend, _ = static8
    rng = np.random.default_rng(4)
    params = PromptParams(rng.normal(scale=0.1, size=backend.num_params),
                          (2, 8, 8), "static")
    up = rng.normal(size=(64, 2))
    grad = backend.vjp(params, 50, None, {"cross": {8: [up]}})

    def scalar(vec):
        cross = ag.value_of(backend.forward(vec, 50, None).cross_layers[8][0])
        return float((cross * up).sum())

    h = 1e-5
    for i in rng.choice(params.values.size, size=8, replace=False):
        vp, vm = params.values.copy(), params.values.copy()
        vp[i] += h
        vm[i] -= h
        fd = (scalar(vp) - scalar(vm)) / (2.0 * h)
        assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_static_working_side_resize_path():
    """Offsets defined on a 16 working grid drive an 8-resolution bundle."""
    bundle, _ = synth_fixture(blobs=2, side=8, noise=0.1, seed=3)
    backend = StaticBackend(BackendConfig(kind="static", side=16), {50: bundle})
    rng = np.random.default_rng(0)
    params = PromptParams(rng.normal(scale=0.3, size=backend.num_params),
                          (2, 16, 16), "static")
    out = backend.forward(params, 50, None)
    cross = ag.value_of(out.cross_layers[8][0])
    assert cross.shape == (64, 2)
    assert np.abs(cross.sum(axis=1) - 1.0).max() < 1e-9
