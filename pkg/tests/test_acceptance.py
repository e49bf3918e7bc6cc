"""Acceptance suite: one test per shipped guarantee.

Every tolerance and budget is stated inline next to its assertion, and each
criterion is a single test so `pytest -v` prints one verdict line per
guarantee. The quantitative fixture thresholds (mIoU floor and gain) were
calibrated once on the frozen two-blob fixture and are not tuned per run.
"""

import json
import struct
import subprocess
import sys
import time

import numpy as np
import pytest

from invseg import autograd as ag
from invseg import oracle
from invseg.backend import BackendConfig, PromptParams, StaticBackend
from invseg.bundle_io import (FixtureSpec, fixture_backend, load_bundle,
                              synth_fixture, write_bundle, write_mask_png,
                              write_tensor, read_tensor)
from invseg.distance import DistanceMatrix, skl_matrix, soft_anchors
from invseg.errors import BundleFormatError
from invseg.loss import (cluster_loss, d_inter, d_intra, entropy_loss,
                         full_frame_spec, random_augment_spec, total_loss)
from invseg.maps import aggregate_attention
from invseg.metrics import ConfusionMatrix, macc, miou
from invseg.optim import (InversionConfig, _wrap_cross_leaves, invert_prompt,
                          moving_average, resolve_weights)
from invseg.refine import class_maps, refine_cross
from invseg.segment import predict_mask

from conftest import (FIXTURE_INV_SEED, FIXTURE_SPEC, grid_miou, random_maps,
                      random_row_stochastic)


def rel_err(fast, loop):
    return abs(fast - loop) / max(abs(loop), 1e-12)


def test_oracle_equivalence():
    """Vectorized kernels match nested-loop references.

    skl_matrix, d_intra, d_inter, cluster_loss and entropy_loss each agree
    with an independent loop implementation within 1e-5 relative error on
    8x8 grids, C in {2, 3, 4}, 20 seeds, under 30 s total. The matrix
    comparison is Frobenius-norm relative; the scalar reductions consume the
    loop-built distance matrix so each kernel is isolated against its own
    reference.
    """
    start = time.perf_counter()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        c = (2, 3, 4)[seed % 3]
        a = random_row_stochastic(rng, 64)
        maps = random_maps(rng, c, 8)

        s_fast = skl_matrix(a).as_f64()
        s_loops = oracle.skl_matrix_loops(a)
        norm_rel = np.linalg.norm(s_fast - s_loops) / np.linalg.norm(s_loops)
        assert norm_rel < 1e-5

        dist = DistanceMatrix(s_loops)
        s_ref = dist.as_f64()
        flat = maps.reshape(c, -1)
        assert rel_err(float(ag.value_of(d_intra(dist, flat, 4.0, 0.5))),
                       oracle.d_intra_loops(s_ref, flat, 4.0, 0.5)) < 1e-5
        assert rel_err(float(ag.value_of(d_inter(dist, flat, 4.0, 0.5))),
                       oracle.d_inter_loops(s_ref, flat, 4.0, 0.5)) < 1e-5
        assert rel_err(float(ag.value_of(cluster_loss(dist, flat, 4.0, 0.5))),
                       oracle.cluster_loss_loops(s_ref, flat, 4.0, 0.5)) < 1e-5
        assert rel_err(float(ag.value_of(entropy_loss([maps], full_frame_spec(8)))),
                       oracle.entropy_loss_loops(maps)) < 1e-5
    assert time.perf_counter() - start < 30.0


def _production_grad(backend, params, t, spec, weights, dist):
    """Gradient exactly as the inversion loop computes it: autograd back to
    the per-view cross leaves, then the backend vjp to the parameters."""
    side = backend.working_side
    view_maps = []
    view_leaves = []
    for v in range(spec.views):
        bundle = backend.forward(params, t, spec.windows[v])
        wrapped, leaves = _wrap_cross_leaves(bundle)
        a_self, a_cross = aggregate_attention(wrapped, weights, target_side=side)
        refined = refine_cross(ag.value_of(a_self), a_cross)
        view_maps.append(class_maps(refined, wrapped.class_spans,
                                    wrapped.background_class))
        view_leaves.append(leaves)
    node, _ = total_loss(dist, view_maps, spec)
    node.backward()
    grad = np.zeros_like(params.values)
    for v in range(spec.views):
        upstream = {"cross": {
            r: [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
                for leaf in view_leaves[v][r]]
            for r in view_leaves[v]}}
        grad += backend.vjp(params, t, spec.windows[v], upstream)
    return grad


def _plain_loss(backend, values, template, t, spec, weights, dist):
    params = PromptParams(values, template.shape, template.kind)
    side = backend.working_side
    view_maps = []
    for v in range(spec.views):
        bundle = backend.forward(params, t, spec.windows[v])
        a_self, a_cross = aggregate_attention(bundle, weights, target_side=side)
        refined = refine_cross(ag.value_of(a_self), a_cross)
        view_maps.append(class_maps(refined, bundle.class_spans,
                                    bundle.background_class))
    _, breakdown = total_loss(dist, view_maps, spec)
    return breakdown.total


def _gradient_case(backend, params, seed):
    """Max relative error between the production gradient and central finite
    differences of the full loss at one (timestep, crop-pair) draw.

    The distance matrix is built once from the base parameters and held fixed
    in both paths; both backends derive self-attention from the image alone,
    so it genuinely does not depend on the prompt and the comparison is exact.

    The check runs on the canonical noise-0.3 fixture family at each
    backend's own starting point. That choice matters for the instrument, not
    the gradient: at low noise the refined-map column ranges shrink and the
    h^2 truncation error of the h = 1e-3 stencil exceeds the tolerance on its
    own (sweeping h shows the FD estimate converging to the production
    gradient as h^2, i.e. the analytic value is the limit).
    """
    weights = resolve_weights(backend.resolutions, None)
    side = backend.working_side
    t = 50 if seed % 2 == 0 else 77  # 77 exercises timestep snapping paths
    spec = random_augment_spec(side, 2, 0.6, np.random.default_rng(1000 + seed))

    full = backend.forward(params, t, None)
    a_self, _ = aggregate_attention(full, weights, target_side=side)
    dist = skl_matrix(ag.value_of(a_self))

    grad = _production_grad(backend, params, t, spec, weights, dist)
    h = 1e-3
    base = params.values
    worst = 0.0
    for i in range(base.size):
        up = base.copy()
        up[i] += h
        down = base.copy()
        down[i] -= h
        fd = (_plain_loss(backend, up, params, t, spec, weights, dist)
              - _plain_loss(backend, down, params, t, spec, weights, dist)) / (2 * h)
        denom = max(abs(grad[i]), abs(fd), 1e-8)
        worst = max(worst, abs(grad[i] - fd) / denom)
    return worst


def test_gradient_correctness():
    """End-to-end parameter gradients match central finite differences.

    Both backends on 8x8 grids, h = 1e-3 in double precision, max relative
    error < 1e-4 per coordinate over 10 seeds each, under 2 minutes total.
    """
    start = time.perf_counter()
    worst_toy = 0.0
    worst_static = 0.0
    for seed in range(10):
        toy = fixture_backend(FixtureSpec(blobs=2 + seed % 2, side=8,
                                          noise=0.3, seed=seed))
        worst_toy = max(worst_toy, _gradient_case(toy, toy.init_params(), seed))

        b50, _ = synth_fixture(blobs=2, side=8, noise=0.3, seed=seed, timestep=50)
        b120, _ = synth_fixture(blobs=2, side=8, noise=0.3, seed=seed, timestep=120)
        cfg = BackendConfig(kind="static", side=8, timestep_range=(50, 120),
                            infer_timestep=50, seed=seed)
        static = StaticBackend(cfg, {50: b50, 120: b120})
        sp = static.init_params()
        sp.values = 0.05 * np.random.default_rng(seed).standard_normal(sp.values.size)
        worst_static = max(worst_static, _gradient_case(static, sp, seed))
    assert worst_toy < 1e-4
    assert worst_static < 1e-4
    assert time.perf_counter() - start < 120.0


def test_hand_values():
    """Three closed-form checks pin the kernel conventions.

    Symmetric KL of (0.5, 0.5) vs (0.9, 0.1) is 0.8789 within 1e-4; the soft
    anchor sigma(4 * (1.0 - 0.5)) is 0.8808 within 1e-4; the entropy of
    uniform C = 4 maps is log 4 within 1e-9.
    """
    s = skl_matrix(np.array([[0.5, 0.5], [0.9, 0.1]])).as_f64()
    assert abs(s[0, 1] - 0.8789) < 1e-4
    assert abs(s[1, 0] - 0.8789) < 1e-4

    anchor = float(ag.value_of(soft_anchors(np.array([1.0]), 4.0, 0.5))[0])
    assert abs(anchor - 0.8808) < 1e-4

    uniform = np.full((4, 8, 8), 0.25)
    ent = float(ag.value_of(entropy_loss([uniform], full_frame_spec(8))))
    assert abs(ent - np.log(4.0)) < 1e-9


def test_inversion_efficacy(fixture_run):
    """The default 15-step inversion helps on the frozen two-blob fixture.

    Noise 0.3 at 32-side with all defaults (lr 0.01, alpha 1, scale 4,
    2 views, crop-min 0.6): the final total loss is below the initial one,
    the 5-step moving average never increases, and the tuned mIoU beats the
    step-0 mIoU by at least 3 absolute points while clearing 0.90. Both runs
    together finish inside 60 s.
    """
    totals = fixture_run.tuned.totals
    assert len(totals) == 15
    assert totals[-1] < totals[0]
    ma = moving_average(totals, window=5)
    assert all(later - earlier <= 1e-12 for earlier, later in zip(ma, ma[1:]))
    assert fixture_run.miou_after - fixture_run.miou_before >= 0.03
    assert fixture_run.miou_after >= 0.90
    assert fixture_run.elapsed < 60.0


def test_entropy_ablation():
    """Entropy term helps (or at least never hurts) on the fixture.

    Mean mIoU with alpha = 1 is >= the alpha = 0 mean across 10 fixture
    seeds, the inversion seeded by the fixture seed.
    """
    scores = {0.0: [], 1.0: []}
    for seed in range(10):
        backend = fixture_backend(FixtureSpec(blobs=2, side=32, noise=0.3,
                                              seed=seed))
        gt = backend.ground_truth()
        for alpha in (0.0, 1.0):
            result = invert_prompt(backend,
                                   InversionConfig(steps=15, alpha=alpha, seed=seed))
            scores[alpha].append(grid_miou(result.maps, gt))
    assert np.mean(scores[1.0]) - np.mean(scores[0.0]) >= 0.0


_PERF_SCRIPT = """
import json, resource, time
import numpy as np
from invseg.distance import skl_matrix

rng = np.random.default_rng(0)
a = rng.random((4096, 4096), dtype=np.float32)
a /= a.sum(axis=1, keepdims=True)
t0 = time.perf_counter()
s = skl_matrix(a)
elapsed = time.perf_counter() - t0
peak_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
print(json.dumps({"elapsed": elapsed, "peak_mb": peak_mb,
                  "mean": float(s.values.mean())}))
"""


def test_performance():
    """skl_matrix at HW = 4096 stays under 60 s and 512 MB peak memory.

    Measured in a subprocess so the peak-RSS number is the kernel's own
    footprint, not the test session's.
    """
    proc = subprocess.run([sys.executable, "-c", _PERF_SCRIPT],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    stats = json.loads(proc.stdout)
    assert stats["elapsed"] < 60.0
    assert stats["peak_mb"] < 512.0
    assert np.isfinite(stats["mean"]) and stats["mean"] > 0.0


def _trace_bytes(result):
    rows = [(b.cluster, b.entropy, b.total) for b in result.trace]
    return np.array(rows, dtype=np.float64).tobytes()


def test_determinism(fixture_run, tmp_path):
    """Identical seeds give byte-identical loss traces and masks.

    A fresh backend plus a fresh inversion under the session seed must
    reproduce the session run exactly: trace bytes, sampled timesteps, final
    parameters, and the PNG mask written to disk.
    """
    backend = fixture_backend(FIXTURE_SPEC)
    rerun = invert_prompt(backend, InversionConfig(steps=15, seed=FIXTURE_INV_SEED))
    first = fixture_run.tuned

    assert _trace_bytes(rerun) == _trace_bytes(first)
    assert rerun.timesteps == first.timesteps
    assert rerun.params.values.tobytes() == first.params.values.tobytes()
    assert ag.value_of(rerun.maps.maps).tobytes() == \
        ag.value_of(first.maps.maps).tobytes()

    side = FIXTURE_SPEC.side
    path_a = tmp_path / "a.png"
    path_b = tmp_path / "b.png"
    write_mask_png(path_a, predict_mask(first.maps, side, side).labels)
    write_mask_png(path_b, predict_mask(rerun.maps, side, side).labels)
    assert path_a.read_bytes() == path_b.read_bytes()


def _corrupt_tensor(raw, kind, rng):
    """One guaranteed-invalid mutation of a valid tensor file's bytes."""
    if kind == 0:            # truncate anywhere short of the full length
        return raw[:int(rng.integers(0, len(raw)))]
    if kind == 1:            # trailing garbage
        return raw + bytes(rng.integers(0, 256, size=int(rng.integers(1, 65)),
                                        dtype=np.uint8))
    if kind == 2:            # magic byte flip
        pos = int(rng.integers(0, 4))
        old = raw[pos]
        new = int(rng.integers(0, 256))
        if new == old:
            new = (new + 1) % 256
        return raw[:pos] + bytes([new]) + raw[pos + 1:]
    if kind == 3:            # unsupported version
        v = int(rng.integers(0, 2 ** 32))
        if v == 1:
            v = 2
        return raw[:4] + struct.pack("<I", v) + raw[8:]
    if kind == 4:            # unsupported dtype code
        d = int(rng.integers(1, 256))
        return raw[:8] + bytes([d]) + raw[9:]
    if kind == 5:            # ndim rewrite; any value but the true 2 breaks
        k = int(rng.choice([0, 1] + list(range(3, 61))))
        return raw[:9] + bytes([k]) + raw[10:]
    # kind == 6: first-dim rewrite to a wrong pixel count
    d0 = int(rng.choice([0, 12345, 2 ** 40]))
    return raw[:10] + struct.pack("<Q", d0) + raw[18:]


def _corrupt_manifest(text, kind, rng):
    """One guaranteed-invalid mutation of a valid manifest's JSON text."""
    if kind == 0:            # truncation: a strict prefix of an object
        return text[:int(rng.integers(0, len(text)))]
    data = json.loads(text)
    if kind == 1:            # drop a required key
        keys = ("format_version", "resolutions", "timesteps", "tokens",
                "class_spans", "tensors")
        del data[keys[int(rng.integers(0, len(keys)))]]
    else:                    # unsupported manifest version
        v = int(rng.integers(0, 2 ** 31))
        data["format_version"] = v if v != 1 else 2
    return json.dumps(data)


def test_format_rejection(tmp_path):
    """1000 corrupted bundle files are all rejected with structured errors,
    and valid files round-trip bit-exact.

    700 tensor-file corruptions (truncation, trailing bytes, bad magic,
    version, dtype, ndim, dim count) and 300 manifest corruptions (JSON
    truncation, missing keys, bad version), every one raising
    BundleFormatError carrying the offending path.
    """
    rng = np.random.default_rng(12345)
    base = rng.standard_normal((16, 16)).astype(np.float32)
    tensor_path = tmp_path / "case.atnb"
    write_tensor(tensor_path, base)
    tensor_raw = tensor_path.read_bytes()

    bundle, _ = synth_fixture(side=8, noise=0.1, seed=1)
    manifest = write_bundle(tmp_path / "bundle", {50: bundle})
    manifest_text = manifest.read_text()

    rejected = 0
    for case in range(1000):
        kind = case % 10
        if kind < 7:
            tensor_path.write_bytes(_corrupt_tensor(tensor_raw, kind, rng))
            with pytest.raises(BundleFormatError) as err:
                read_tensor(tensor_path)
            assert err.value.path == str(tensor_path)
        else:
            manifest.write_text(_corrupt_manifest(manifest_text, kind - 7, rng))
            with pytest.raises(BundleFormatError) as err:
                load_bundle(manifest, 50)
            assert err.value.path == str(manifest)
        assert str(err.value)
        rejected += 1
    assert rejected == 1000

    manifest.write_text(manifest_text)  # restored copy must load again
    assert load_bundle(manifest, 50) is not None

    for arr in (np.float32(2.25), np.arange(7, dtype=np.float32),
                base, rng.standard_normal((3, 4, 5)).astype(np.float32)):
        write_tensor(tensor_path, arr)
        back = read_tensor(tensor_path)
        assert back.shape == np.shape(arr)
        assert back.tobytes() == np.asarray(arr, dtype=np.float32).tobytes()


def test_metrics_oracle():
    """mIoU and mAcc match hand-computed values exactly on three matrices.

    The expected numbers are written as the same IEEE expressions the
    implementation evaluates, so equality is exact, not approximate.
    """
    a = ConfusionMatrix(np.array([[3, 1], [2, 4]], dtype=np.int64))
    assert miou(a) == (3 / 6 + 4 / 7) / 2
    assert macc(a) == (3 / 4 + 4 / 6) / 2

    b = ConfusionMatrix(np.array([[5, 0, 0], [0, 0, 0], [2, 0, 3]],
                                 dtype=np.int64))
    assert miou(b) == (5 / 7 + 3 / 5) / 2  # absent middle class excluded
    assert macc(b) == (5 / 5 + 3 / 5) / 2

    c = ConfusionMatrix(np.array([[2, 0], [0, 5]], dtype=np.int64))
    assert miou(c) == 1.0
    assert macc(c) == 1.0
