import csv
import pytest
import numpy as np
from pathlib import Path
from duet.images import read_ppm
from duet.masks import RawParsingMap
from duet.modes import Split
from duet.synth import (FACE, MANIFEST_FIELDS, SynthError, SyntheticDatasetSpec, camera_tint,
                        label_path, plan, render, synth_generate)


def test_zero_noise_single_camera_images_repeat() -> None:
    spec = SyntheticDatasetSpec(identities=2, cameras=1, noise=0.0)
    first, first_labels = render(spec, 1, 0, 0)
    second, second_labels = render(spec, 1, 0, 7)
    assert np.array_equal(first, second)
    assert np.array_equal(first_labels.labels, second_labels.labels)
    other, _ = render(spec, 0, 0, 7)
    assert not np.array_equal(first, other)


def test_render_geometry() -> None:
    spec = SyntheticDatasetSpec(noise=0.0, accessories=False)
    pixels, labels = render(spec, 3, 1, 5)
    assert pixels.shape == (96, 32, 3) and pixels.dtype == np.uint8
    assert isinstance(labels, RawParsingMap)
    assert (labels.labels == FACE).any()
    assert labels.labels[0, 0] == 0
    assert not np.allclose(camera_tint(spec, 0), camera_tint(spec, 1))


def test_plan_splits() -> None:
    spec = SyntheticDatasetSpec(identities=10, images_per_identity=6, cameras=3)
    rows = plan(spec)
    assert len(rows) == 60
    assert spec.train_identities == 5
    assert {r.identity for r in rows if r.split is Split.TRAIN} == set(range(5))
    queries = [r for r in rows if r.split is Split.QUERY]
    assert queries and all(r.camera == 2 and r.identity >= 5 for r in queries)
    assert all(r.camera != 2 for r in rows if r.split is Split.GALLERY)
    assert rows[7].path == 'images/00007.ppm'
    assert label_path(rows[7].path) == 'labels/00007.pgm'


def test_spec_validation() -> None:
    with pytest.raises(SynthError):
        SyntheticDatasetSpec(cameras=0)
    with pytest.raises(SynthError):
        SyntheticDatasetSpec(height=8)
    with pytest.raises(SynthError):
        SyntheticDatasetSpec(test_fraction=1.5)


def test_generate_is_reproducible(tmp_path: Path) -> None:
    spec = SyntheticDatasetSpec(identities=3, images_per_identity=2, cameras=2, seed=4)
    manifest = synth_generate(spec, tmp_path / 'a')
    synth_generate(spec, tmp_path / 'b')
    with open(manifest, newline='') as stream:
        records = list(csv.DictReader(stream))
    assert tuple(records[0]) == MANIFEST_FIELDS
    assert len(records) == 6
    for record in records:
        a = (tmp_path / 'a' / record['path']).read_bytes()
        assert a == (tmp_path / 'b' / record['path']).read_bytes()
        label = label_path(record['path'])
        assert (tmp_path / 'a' / label).read_bytes() == (tmp_path / 'b' / label).read_bytes()
    assert read_ppm(tmp_path / 'a' / records[0]['path']).shape == (96, 32, 3)
    (tmp_path / 'file').write_text('')
    with pytest.raises(SynthError):
        synth_generate(spec, tmp_path / 'file')
