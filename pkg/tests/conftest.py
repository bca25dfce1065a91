import struct

import numpy as np
import pytest

from capesynth.accountant import PrivacyParams
from capesynth.data_io import Dataset, make_blobs


@pytest.fixture
def blobs() -> Dataset:
    """Three well separated classes, 40 rows each, 4 features"""
    return make_blobs(num_classes=3, per_class=40, num_features=4, cluster_spread=0.5, seed=7)


@pytest.fixture
def privacy_for():
    def build(ds: Dataset, l: int = 2, S: int = 1, T: int = None, epsilon: float = 10.0, alpha_max: int = 32):
        T = T or len(ds) - len(ds) % ds.num_classes
        return PrivacyParams(epsilon_target=epsilon, delta=1e-5, l=l, c=1.0, T=T, N=len(ds),
                             K=ds.num_classes, S=S, alpha_max=alpha_max)
    return build


def idx_bytes(magic: int, dims, payload: bytes) -> bytes:
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload


@pytest.fixture
def idx_pair(tmp_path):
    """Four 2x3 'images' with labels 0, 1, 1, 0"""
    pixels = np.arange(24, dtype=np.uint8)
    images = tmp_path / "images.idx3"
    labels = tmp_path / "labels.idx1"
    images.write_bytes(idx_bytes(0x00000803, (4, 2, 3), pixels.tobytes()))
    labels.write_bytes(idx_bytes(0x00000801, (4,), bytes([0, 1, 1, 0])))
    return images, labels
