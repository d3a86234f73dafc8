import numpy as np
import pytest
from PIL import Image


def make_image_folder(root, per_class=4, classes=("class_a", "class_b"), seed=0):
    """Tiny ImageFolder tree of random RGB images."""
    rng = np.random.default_rng(seed)
    for label, name in enumerate(classes):
        d = root / name
        d.mkdir(parents=True)
        for i in range(per_class):
            pixels = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
            Image.fromarray(pixels).save(d / f"img_{i}.png")
    return root


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    return make_image_folder(tmp_path_factory.mktemp("images"), per_class=4)
