import json
import pytest
from pathlib import Path
from duet.config import (BackboneConfig, ConfigError, RunConfig, coerce, load_run_config,
                         save_run_config)
from duet.modes import LatentMask, Transform


def test_coerce_follows_the_default_type() -> None:
    assert coerce('epochs', 60, 12) == 12
    assert coerce('base_lr', 0.05, 1) == 1.0
    assert coerce('flip', True, False) is False
    assert coerce('widths', (16,), [8, 8]) == (8, 8)
    assert coerce('insertions', (), [[2, 1], [3, 2]]) == ((2, 1), (3, 2))
    assert coerce('latent_mask', LatentMask.NONE, 'KEEP_NONHUMAN_ONLY') is \
        LatentMask.KEEP_NONHUMAN_ONLY
    for name, default, value in (('epochs', 60, True), ('epochs', 60, '12'),
                                 ('flip', True, 1), ('widths', (16,), 16),
                                 ('g_transform', Transform.LINEAR, 'conv')):
        with pytest.raises(ConfigError, match=name):
            coerce(name, default, value)


def test_from_dict_and_back() -> None:
    backbone = BackboneConfig.from_dict({'insertions': [[2, 1]], 'parts': 2,
                                         'g_transform': 'identity'})
    assert backbone.insertions == ((2, 1),)
    assert backbone.g_transform is Transform.IDENTITY
    assert BackboneConfig.from_dict(backbone.to_dict()) == backbone
    with pytest.raises(ConfigError, match='Unknown BackboneConfig fields: depth'):
        BackboneConfig.from_dict({'depth': 50})
    with pytest.raises(ConfigError):
        RunConfig.from_dict([1, 2])


def test_backbone_validation() -> None:
    with pytest.raises(ConfigError, match='outside 1..4'):
        BackboneConfig(insertions=((5, 1),))
    with pytest.raises(ConfigError):
        BackboneConfig(insertions=((2, -1),))
    with pytest.raises(ConfigError):
        BackboneConfig(widths=(16, 32, 64))
    with pytest.raises(ConfigError):
        BackboneConfig(strides=(2, 2, 3, 1))
    with pytest.raises(ConfigError, match='parts'):
        BackboneConfig(parts=3)
    with pytest.raises(ConfigError, match='Stage 1 block'):
        BackboneConfig(insertions=((1, 1),), enable_human=False, enable_latent=False)
    BackboneConfig(parts=20, insertions=((4, 1),))


def test_stage_geometry() -> None:
    config = BackboneConfig(insertions=((2, 2), (3, 3)))
    assert config.feature_shape(0) == (48, 16)
    assert config.feature_shape(1) == (24, 8)
    assert config.feature_shape(2) == (12, 4)
    assert config.feature_shape(3) == (6, 2)
    assert config.feature_shape(4) == (6, 2)
    assert config.total_blocks() == 5
    assert config.inserted_stages() == (2, 3)
    assert config.blocks_at(3) == 3 and config.blocks_at(4) == 0
    assert config.dpb_config(3).channels == 64


def test_run_validation_and_schedule() -> None:
    assert RunConfig().batch_size == 64
    with pytest.raises(ConfigError):
        RunConfig(P=1)
    RunConfig(P=1, K=1, use_triplet=False)
    with pytest.raises(ConfigError):
        RunConfig(decay_epoch=-1)
    with pytest.raises(ConfigError):
        RunConfig(precision='float16')
    assert RunConfig(epochs=12, decay_epoch=100, scale_schedule=True).schedule().decay_epoch == 8
    assert RunConfig().schedule().lr_at(40) == pytest.approx(0.005)


def test_run_config_file(tmp_path: Path) -> None:
    path = tmp_path / 'run.json'
    backbone, run = BackboneConfig(insertions=((2, 1),)), RunConfig(epochs=3, decay_epoch=2)
    save_run_config(backbone, run, path)
    assert load_run_config(path) == (backbone, run)
    path.write_text(json.dumps({'run': {'epochs': 5, 'decay_epoch': 4}}))
    assert load_run_config(path) == (BackboneConfig(), RunConfig(epochs=5, decay_epoch=4))
    path.write_text(json.dumps({'model': {}}))
    with pytest.raises(ConfigError):
        load_run_config(path)
    path.write_text('{not json')
    with pytest.raises(ConfigError, match='malformed'):
        load_run_config(path)
