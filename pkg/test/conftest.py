import logging
import pytest
from pathlib import Path
from typing import Callable, Iterator
from duet.data import Dataset
from duet.synth import SyntheticDatasetSpec, synth_generate

f_dataset_t = Callable[..., Dataset]


@pytest.fixture(autouse=True)  # type: ignore
def restore_logging() -> Iterator[None]:
    yield
    root = logging.getLogger('duet')
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.propagate = True
    root.setLevel(logging.NOTSET)


@pytest.fixture  # type: ignore
def synthetic(tmp_path_factory: pytest.TempPathFactory) -> f_dataset_t:
    def _get_dataset(**fields: object) -> Dataset:
        spec = SyntheticDatasetSpec(**{'identities': 8, 'images_per_identity': 4,
                                       'cameras': 2, **fields})  # type: ignore
        root: Path = tmp_path_factory.mktemp('synthetic')
        synth_generate(spec, root)
        return Dataset.load(root)

    return _get_dataset
