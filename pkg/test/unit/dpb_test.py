import pytest
import numpy as np
from pathlib import Path
from typing import Callable, Optional, Tuple
from duet.dpb import (DPBConfig, DPBError, DPBParams, attention_matrix, dpb_forward,
                      export_masks, human_branch, latent_branch, latent_branch_masked)
from duet.images import read_pgm
from duet.masks import PartLabelMap, binary_human_mask, build_confidence_maps
from duet.modes import LatentMask, NormMode, Transform
from duet.params import Initializer, Parameter_Table
from duet.tensor import Tensor, constant, precision

Instance_T = Tuple[Tensor, PartLabelMap]
f1_t = Callable[[int, int, int], Instance_T]
f2_t = Callable[..., DPBParams]


@pytest.fixture  # type: ignore
def instance() -> f1_t:
    def _get_instance(seed: int, channels: int, K: int) -> Instance_T:
        rng = np.random.default_rng(seed)
        x = constant(rng.normal(size=(channels, 4, 4)))
        labels = PartLabelMap(rng.integers(0, K, size=(4, 4)), K)
        return x, labels

    return _get_instance


@pytest.fixture  # type: ignore
def block() -> f2_t:
    def _get_block(seed: int = 0, **fields: object) -> DPBParams:
        config = DPBConfig(**{'channels': 4, **fields})  # type: ignore
        return DPBParams.initialize(config, Initializer(seed))

    return _get_block


def test_human_branch_is_piecewise_constant(instance: f1_t, block: f2_t) -> None:
    with precision('float64'):
        for seed in range(100):
            x, labels = instance(seed, 4, 5)
            params = block(seed, parts=5, enable_latent=False)
            out = human_branch(x, build_confidence_maps(labels), labels, params).data
            flat = out.reshape(4, -1)
            for k in range(5):
                members = flat[:, labels.flat == k]
                if members.size:
                    assert (members == members[:, :1]).all()


def test_single_part_pools_the_global_mean(instance: f1_t, block: f2_t) -> None:
    with precision('float64'):
        for seed in range(100):
            x, labels = instance(seed, 4, 1)
            params = block(seed, parts=1, enable_latent=False, g_transform=Transform.IDENTITY)
            out = human_branch(x, build_confidence_maps(labels), labels, params).data
            mean = x.data.mean(axis=(1, 2))
            np.testing.assert_allclose(out, np.broadcast_to(mean[:, None, None], out.shape),
                                       atol=1e-6)


def test_empty_parts_stay_finite(block: f2_t) -> None:
    labels = PartLabelMap(np.array([[0, 0], [4, 4]]), 5)
    params = block(parts=5, enable_latent=False)
    x = constant(np.random.default_rng(3).normal(size=(4, 2, 2)))
    out = human_branch(x, build_confidence_maps(labels), labels, params).data
    assert np.isfinite(out).all()


def test_fresh_block_is_identity(instance: f1_t, block: f2_t) -> None:
    x, labels = instance(0, 4, 5)
    for fields in ({}, {'enable_latent': False}, {'enable_human': False},
                   {'latent_mask': LatentMask.KEEP_HUMAN_ONLY}):
        params = block(1, **fields)
        assert np.array_equal(dpb_forward(x, labels, params).data, x.data)


def test_attention_rows_sum_to_one(block: f2_t) -> None:
    rng = np.random.default_rng(5)
    params = block(enable_human=False)
    with precision('float64'):
        for _ in range(1000):
            x = constant(rng.normal(size=(4, 3, 3)))
            rows = attention_matrix(x, params).data
            np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-6)


def test_masked_attention(instance: f1_t, block: f2_t) -> None:
    x, _ = instance(2, 4, 5)
    labels = PartLabelMap(np.array([[0, 1, 1, 0], [2, 2, 0, 3], [3, 3, 4, 4], [0, 4, 0, 1]]), 5)
    background = labels.flat == 0
    mask = binary_human_mask(labels)
    with precision('float64'):
        params = block(enable_human=False, latent_mask=LatentMask.KEEP_NONHUMAN_ONLY)
        rows = attention_matrix(x, params, mask).data
        assert not rows[~background].any()
        assert not rows[:, ~background].any()
        np.testing.assert_allclose(rows[background].sum(axis=-1), 1.0, atol=1e-6)

        keys_only = block(enable_human=False, latent_mask=LatentMask.KEEP_NONHUMAN_ONLY,
                          mask_queries=False)
        rows = attention_matrix(x, keys_only, mask).data
        np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-6)
        assert not rows[:, ~background].any()


def test_masked_branch_without_keys_outputs_zero(block: f2_t) -> None:
    params = block(enable_human=False, latent_mask=LatentMask.KEEP_NONHUMAN_ONLY)
    x = constant(np.ones((4, 2, 2)))
    out = latent_branch_masked(x, np.zeros(4, dtype=bool), params).data
    assert not out.any()
    assert latent_branch(x, params).shape == (4, 2, 2)


def test_batched_forward_matches_single(instance: f1_t, block: f2_t) -> None:
    (x1, l1), (x2, l2) = instance(7, 4, 5), instance(8, 4, 5)
    params = block(enable_latent=True, enable_human=False)
    with precision('float64'):
        batch = constant(np.stack([x1.data, x2.data]))
        together = latent_branch(batch, params, NormMode.EVAL).data
        single = latent_branch(x2, params, NormMode.EVAL).data
        np.testing.assert_allclose(together[1], single, atol=1e-12)


def test_config_errors() -> None:
    with pytest.raises(DPBError):
        DPBConfig(channels=6, reduction=4)
    with pytest.raises(DPBError):
        DPBConfig(channels=4, enable_human=False, enable_latent=False)
    with pytest.raises(DPBError):
        DPBConfig(channels=4, enable_latent=False, latent_mask=LatentMask.KEEP_HUMAN_ONLY)
    with pytest.raises(DPBError):
        DPBConfig(channels=4, attention_transform=Transform.LINEAR_BN_RELU)


def test_spatial_mismatch(block: f2_t) -> None:
    params = block(parts=5)
    labels = PartLabelMap(np.zeros((3, 3), dtype=np.int64), 5)
    with pytest.raises(DPBError):
        dpb_forward(constant(np.zeros((4, 4, 4))), labels, params)
    with pytest.raises(DPBError):
        dpb_forward(constant(np.zeros((4, 3, 3))), None, params)


def test_register_names(block: f2_t) -> None:
    table = Parameter_Table()
    block(parts=5).register(table)
    assert 'dpb.g.weight' in table and 'dpb.g.bn.running_var' in table
    assert 'dpb.proj_human' in table and 'dpb.proj_latent' in table
    assert table.get('dpb.g.bn.running_mean')[0] == 'buffer'


def test_export_masks(instance: f1_t, block: f2_t, tmp_path: Path) -> None:
    x, labels = instance(4, 4, 5)
    written = export_masks(x, labels, block(), tmp_path / 'masks', rows=[0, 5])
    names = sorted(path.name for path in written)
    assert names == ['attn_0.pgm', 'attn_5.pgm'] + [f'part_{k}.pgm' for k in range(5)]
    assert read_pgm(tmp_path / 'masks' / 'attn_5.pgm').shape == (4, 4)
    with pytest.raises(DPBError):
        export_masks(x, labels, block(), tmp_path / 'masks', rows=[16])


IDENTITIES = {'g_transform': Transform.IDENTITY, 'attention_transform': Transform.IDENTITY,
              'value_transform': Transform.IDENTITY, 'output_projection': False}


def attention_loop(rows: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """x^Latent_i = sum_j softmax_j(x_i . x_j) x_j over unmasked i and j."""
    out = np.zeros_like(rows)
    keep = np.ones(len(rows), dtype=bool) if mask is None else mask
    for i in range(len(rows)):
        if not keep[i]:
            continue
        logits = [float(rows[i] @ rows[j]) for j in range(len(rows)) if keep[j]]
        weights = np.exp(np.array(logits) - max(logits))
        weights /= weights.sum()
        for w, j in zip(weights, np.flatnonzero(keep)):
            out[i] += w * rows[j]
    return out


def pixel_rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1).T


def test_human_branch_per_part_mean(block: f2_t) -> None:
    rows = np.array([[1, 0], [3, 0], [0, 2], [0, 6]], dtype=np.float64)
    labels = PartLabelMap(np.array([[0, 0], [1, 1]]), 2)
    params = block(channels=2, parts=2, enable_latent=False, g_transform=Transform.IDENTITY)
    with precision('float64'):
        x = constant(rows.T.reshape(2, 2, 2))
        out = human_branch(x, build_confidence_maps(labels), labels, params).data
    assert pixel_rows(out).tolist() == [[2, 0], [2, 0], [0, 4], [0, 4]]


def test_single_present_part_trains(block: f2_t) -> None:
    x = constant(np.random.default_rng(0).normal(size=(4, 4, 4)))
    labels = PartLabelMap(np.zeros((4, 4), dtype=np.int64), 1)
    params = block(parts=1, enable_latent=False)
    with precision('float64'):
        z = dpb_forward(x, labels, params)
        out = human_branch(x, build_confidence_maps(labels), labels, params, NormMode.TRAIN)
    assert z.shape == (4, 4, 4)
    assert np.isfinite(out.data).all()
    assert params.g.state is not None and not params.g.state.running_mean.any()


def test_empty_parts_do_not_shift_present_parts(block: f2_t) -> None:
    rng = np.random.default_rng(11)
    raw = rng.integers(0, 2, size=(4, 4))
    raw[0, :2] = [0, 1]
    with precision('float64'):
        for seed in range(20):
            x = constant(rng.normal(size=(4, 4, 4)))
            outputs = []
            for K in (2, 5):
                labels = PartLabelMap(raw, K)
                params = block(seed, parts=K, enable_latent=False)
                outputs.append(
                    human_branch(x, build_confidence_maps(labels), labels, params).data)
            np.testing.assert_allclose(outputs[0], outputs[1], atol=1e-12)


def test_latent_branch_worked_example(block: f2_t) -> None:
    rows = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=np.float64)
    params = block(channels=2, enable_human=False, **IDENTITIES)
    with precision('float64'):
        x = constant(rows.T.reshape(2, 2, 2))
        weights = attention_matrix(x, params).data
        out = latent_branch(x, params).data
    e = np.e
    expected = np.array([e, e, 1, 1]) / (2 * e + 2)
    np.testing.assert_allclose(weights[0], expected, atol=1e-12)
    np.testing.assert_allclose(weights[1], expected, atol=1e-12)
    np.testing.assert_allclose(pixel_rows(out), attention_loop(rows), atol=1e-12)


def test_masked_latent_matches_loop(block: f2_t) -> None:
    rng = np.random.default_rng(9)
    params = block(channels=2, enable_human=False, latent_mask=LatentMask.KEEP_NONHUMAN_ONLY,
                   **IDENTITIES)
    mask = np.array([True, True, False])
    with precision('float64'):
        for _ in range(20):
            x = rng.normal(size=(2, 1, 3))
            out = pixel_rows(latent_branch_masked(constant(x), mask, params).data)
            np.testing.assert_allclose(out, attention_loop(pixel_rows(x), mask), atol=1e-12)
            assert not out[2].any()


def test_branches_are_permutation_equivariant(instance: f1_t, block: f2_t) -> None:
    rng = np.random.default_rng(4)
    with precision('float64'):
        for seed in range(10):
            x, labels = instance(seed, 4, 5)
            order = rng.permutation(16)
            moved = constant(x.data.reshape(4, 16)[:, order].reshape(4, 4, 4))
            moved_labels = PartLabelMap(labels.flat[order].reshape(4, 4), 5)

            params = block(seed, enable_human=False)
            out = latent_branch(x, params).data.reshape(4, 16)
            test = latent_branch(moved, params).data.reshape(4, 16)
            np.testing.assert_allclose(test, out[:, order], atol=1e-10)

            params = block(seed, enable_latent=False)
            out = human_branch(x, build_confidence_maps(labels), labels, params).data
            test = human_branch(moved, build_confidence_maps(moved_labels), moved_labels,
                                params).data
            np.testing.assert_allclose(test.reshape(4, 16), out.reshape(4, 16)[:, order],
                                       atol=1e-10)


def test_human_only_forward_adds_the_mean(block: f2_t) -> None:
    rng = np.random.default_rng(2)
    params = block(channels=2, parts=1, enable_latent=False, **IDENTITIES)
    labels = PartLabelMap(np.zeros((2, 2), dtype=np.int64), 1)
    with precision('float64'):
        for _ in range(20):
            x = rng.normal(size=(2, 2, 2))
            z = dpb_forward(constant(x), labels, params).data
            np.testing.assert_allclose(z, x + x.mean(axis=(1, 2))[:, None, None], atol=1e-12)


def test_forward_composes_both_branches(block: f2_t) -> None:
    rng = np.random.default_rng(6)
    params = block(channels=2, parts=2, **IDENTITIES)
    labels = PartLabelMap(np.array([[0, 1], [1, 0]]), 2)
    with precision('float64'):
        for _ in range(20):
            x = rng.normal(size=(2, 2, 2))
            rows = pixel_rows(x)
            means = np.stack([rows[labels.flat == k].mean(axis=0) for k in range(2)])
            expected = rows + means[labels.flat] + attention_loop(rows)
            z = dpb_forward(constant(x), labels, params).data
            np.testing.assert_allclose(pixel_rows(z), expected, atol=1e-12)
