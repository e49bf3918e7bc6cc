import numpy as np
import pytest
from PIL import Image, ImageDraw

from attn_export import ExportJob, export_bundle

CLASSES = ("fluffy cat", "sky")
SEED = 3


@pytest.fixture(scope="session")
def scene_image(tmp_path_factory):
    """Small synthetic scene: sky gradient plus two colored shapes."""
    px = np.zeros((80, 96, 3), np.uint8)
    px[..., 2] = np.linspace(90, 200, 80, dtype=np.uint8)[:, None]
    px[..., 1] = 60
    im = Image.fromarray(px)
    draw = ImageDraw.Draw(im)
    draw.ellipse([12, 30, 50, 66], fill=(200, 120, 40))
    draw.rectangle([58, 44, 90, 76], fill=(40, 160, 70))
    path = tmp_path_factory.mktemp("scene") / "scene.png"
    im.save(path)
    return path


@pytest.fixture(scope="session")
def exported(scene_image, tmp_path_factory):
    """One export with the defaults, shared by the read-only tests."""
    out = tmp_path_factory.mktemp("bundle")
    job = ExportJob(image=scene_image, class_names=CLASSES, out_dir=out, seed=SEED)
    manifest = export_bundle(job)
    return manifest
