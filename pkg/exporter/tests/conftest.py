import numpy as np
import pytest
from PIL import Image

from vdx import ExportSpec, export_samples


def _make_image(path, seed, size=(64, 48)):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)
    return path


@pytest.fixture()
def image_factory():
    return _make_image


@pytest.fixture(scope="session")
def image_file(tmp_path_factory):
    return _make_image(tmp_path_factory.mktemp("images") / "scene.png", seed=7)


@pytest.fixture(scope="session")
def dump_336(image_file, tmp_path_factory):
    # One full-geometry export shared across tests; it is the slow one.
    out_dir = tmp_path_factory.mktemp("dump336")
    (path,) = export_samples(
        ExportSpec(images=(str(image_file),), prompt="describe the scene", out_dir=str(out_dir))
    )
    return path


@pytest.fixture()
def small_spec(image_file, tmp_path):
    return ExportSpec(
        images=(str(image_file),), prompt="what is shown?", out_dir=str(tmp_path / "out"), model="mini-112"
    )
