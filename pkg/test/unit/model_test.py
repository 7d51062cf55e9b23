import pytest
import numpy as np
from typing import Callable, List, Tuple
from duet.config import BackboneConfig
from duet.data import HarnessError
from duet.masks import RawParsingMap
from duet.model import Model, build_model
from duet.modes import LatentMask, NormMode
from duet.tensor import constant

Inputs_T = Tuple[np.ndarray, List[RawParsingMap]]
f1_t = Callable[..., Model]
f2_t = Callable[[int, int], Inputs_T]


@pytest.fixture  # type: ignore
def model() -> f1_t:
    def _get_model(**fields: object) -> Model:
        config = BackboneConfig(**{'widths': (4, 8, 8, 8), 'stem_width': 4,
                                   'embedding_dim': 8, 'num_identities': 3,
                                   **fields})  # type: ignore
        return build_model(config)

    return _get_model


@pytest.fixture  # type: ignore
def inputs() -> f2_t:
    def _get_inputs(seed: int, batch: int) -> Inputs_T:
        rng = np.random.default_rng(seed)
        images = rng.normal(size=(batch, 3, 96, 32))
        maps = [RawParsingMap(rng.integers(0, 20, size=(96, 32))) for _ in range(batch)]
        return images, maps

    return _get_inputs


def test_blocks_are_registered(model: f1_t) -> None:
    test = model(insertions=((2, 2), (3, 3)))
    assert len(test.dpb_params()) == 5
    assert sorted(test.blocks) == [2, 3]
    assert 'stage3.dpb2.proj_latent' in test.table
    assert 'stage2.dpb1.g.bn.running_mean' in test.table
    assert 'head.classifier.bias' in test.table
    assert len(model().dpb_params()) == 0


def test_output_shapes(model: f1_t, inputs: f2_t) -> None:
    images, maps = inputs(0, 2)
    out = model(insertions=((2, 1),))(constant(images), maps)
    assert out.embeddings.shape == (2, 8)
    assert out.logits.shape == (2, 3)
    assert (out.embeddings.data >= 0).all()


def test_fresh_blocks_leave_outputs_unchanged(model: f1_t, inputs: f2_t) -> None:
    images, maps = inputs(1, 2)
    reference = model()(constant(images))
    for fields in ({'insertions': ((2, 1),)},
                   {'insertions': ((2, 2), (3, 3))},
                   {'insertions': ((1, 1), (4, 1)), 'enable_human': False},
                   {'insertions': ((3, 1),), 'latent_mask': LatentMask.KEEP_NONHUMAN_ONLY}):
        out = model(**fields)(constant(images), maps)
        assert np.array_equal(out.embeddings.data, reference.embeddings.data)
        assert np.array_equal(out.logits.data, reference.logits.data)


def test_modes(model: f1_t, inputs: f2_t) -> None:
    test = model(insertions=((2, 1),))
    images, maps = inputs(2, 2)
    before = test.stem.state.running_mean.copy()
    first = test.embed(images, maps)
    assert np.array_equal(test.stem.state.running_mean, before)
    assert test.mode is NormMode.TRAIN
    assert np.array_equal(first, test.embed(images, maps))
    test(constant(images), maps)
    assert not np.array_equal(test.stem.state.running_mean, before)
    assert test.eval().mode is NormMode.EVAL


def test_stage_features(model: f1_t, inputs: f2_t) -> None:
    test = model(insertions=((2, 1),))
    images, maps = inputs(3, 1)
    features = test.stage_features(images[0], maps[0], 2)
    assert features.shape == (8, 12, 4)
    with pytest.raises(HarnessError, match='stage 1'):
        test.stage_features(images[0], maps[0], 1)


def test_input_checks(model: f1_t, inputs: f2_t) -> None:
    test = model(insertions=((2, 1),))
    images, maps = inputs(4, 2)
    with pytest.raises(HarnessError):
        test(constant(images[:, :, :64]), maps)
    with pytest.raises(HarnessError, match='1 label maps for 2 images'):
        test(constant(images), maps[:1])
    with pytest.raises(HarnessError, match='Label map 0'):
        test(constant(images), [RawParsingMap(np.zeros((48, 16), dtype=np.int64))] * 2)
