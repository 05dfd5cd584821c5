import pytest

from burnsight.imaging import SynthConfig, generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Small but full-size (224x224) three-class dataset shared across tests."""
    out = tmp_path_factory.mktemp("tinyset")
    cfg = SynthConfig(per_class_count=3, image_size=224, seed=21)
    generate_synthetic_dataset(cfg, str(out))
    return str(out)
