import numpy as np
import pytest

from fedsim import data as datamod
from fedsim import nn


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1.0) -> float:
    """Coordinate-wise |a-b| / max(floor, |a|, |b|).

    The floor makes the comparison absolute for near-zero coordinates, where
    a pure relative error would amplify finite-difference noise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / denom).max())


def random_model_and_batch(seed: int, arch: nn.Architecture | None = None, batch: int = 6):
    rng = np.random.default_rng(seed)
    if arch is None:
        arch = nn.Architecture((4, 8, 3))
    model = nn.init_model(arch, rng)
    inputs = rng.normal(size=(batch, arch.input_dim))
    labels = rng.integers(0, arch.output_dim, size=batch)
    return model, nn.Batch(inputs, labels)


@pytest.fixture
def small_task():
    """A small, well-separated classification problem split for federation."""
    rng = np.random.default_rng(123)
    source = datamod.generate_synthetic(4, 8, 800, 0.5, rng)
    train_idx, val_idx, reh_idx = datamod.split_indices(
        len(source), 0.1, 0.1, np.random.default_rng(124)
    )
    return {
        "source": source,
        "train": source.take(train_idx),
        "validation": source.take(val_idx),
        "rehearsal": source.take(reh_idx),
    }
