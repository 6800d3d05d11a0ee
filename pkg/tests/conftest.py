import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def mnist_subset_idx(tmp_path_factory):
    """The 5000-image MNIST sample bundled with mlxtend, written as IDX files."""
    data = pytest.importorskip("mlxtend.data")
    from otafl.data import write_idx_images, write_idx_labels

    X, y = data.mnist_data()
    d = tmp_path_factory.mktemp("mnist")
    images, labels = d / "images-idx3-ubyte", d / "labels-idx1-ubyte"
    write_idx_images(images, X.reshape(-1, 28, 28).astype(np.uint8))
    write_idx_labels(labels, y.astype(np.uint8))
    return str(images), str(labels), y.astype(int)


@pytest.fixture(scope="session")
def mnist_full_dir():
    """Directory holding the standard MNIST IDX files, from $MNIST_DIR."""
    d = os.environ.get("MNIST_DIR")
    if not d or not os.path.isfile(os.path.join(d, "train-images-idx3-ubyte")) and not os.path.isfile(
            os.path.join(d, "train-images-idx3-ubyte.gz")):
        pytest.skip("set MNIST_DIR to the standard MNIST IDX files")
    return d


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
