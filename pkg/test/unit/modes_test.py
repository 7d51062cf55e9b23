import pytest
from duet.modes import Kind, LatentMask, Split, Transform


def test_values_are_lowercase_names() -> None:
    assert Kind.RELU.value == 'relu'
    assert LatentMask.KEEP_NONHUMAN_ONLY.value == 'keep_nonhuman_only'
    assert Transform('linear_bn_relu') is Transform.LINEAR_BN_RELU


def test_parse() -> None:
    assert Split.parse(' Query\n') is Split.QUERY
    assert LatentMask.parse('KEEP_HUMAN_ONLY') is LatentMask.KEEP_HUMAN_ONLY
    with pytest.raises(ValueError):
        Split.parse('validation')
