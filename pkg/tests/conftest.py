import numpy as np
import pytest

from fedsim.core import Rng
from fedsim.data import Dataset, SyntheticSpec, generate_synthetic


def balanced_dataset(
    n_classes: int = 10,
    per_class: int = 100,
    n_features: int = 24,
    seed: int = 1234,
    test_per_class: int = 40,
) -> tuple[Dataset, Dataset]:
    spec = SyntheticSpec(
        n_classes=n_classes,
        n_features=n_features,
        train_per_class=per_class,
        test_per_class=test_per_class,
    )
    return generate_synthetic(spec, Rng(seed).substream("data"))


@pytest.fixture(scope="session")
def ten_class_data() -> tuple[Dataset, Dataset]:
    """Balanced 1000-sample 10-class set shared by partition tests."""
    return balanced_dataset()


def labels_only_dataset(labels: list[int], n_classes: int, n_features: int = 2) -> Dataset:
    """Dataset whose features are unused; handy for index bookkeeping tests."""
    labels_arr = np.asarray(labels, dtype=np.int64)
    feats = np.tile(np.linspace(0.1, 0.9, n_features), (len(labels), 1))
    return Dataset(feats, labels_arr, n_classes, "train")
