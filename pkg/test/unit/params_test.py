import pytest
import numpy as np
from pathlib import Path
from typing import Callable
from duet.params import (CheckpointError, Initializer, Parameter_Table, load_checkpoint,
                         save_checkpoint)
from duet.tensor import parameter

f1_t = Callable[[], Parameter_Table]


@pytest.fixture  # type: ignore
def table() -> f1_t:
    def _get_table() -> Parameter_Table:
        init = Initializer(7)
        test = Parameter_Table()
        test.set('conv.weight', 'parameter', init.he_normal('conv.weight', (4, 2, 3, 3), 18))
        test.set('conv.bn.gamma', 'parameter', init.ones('conv.bn.gamma', (4,)))
        test.set('conv.bn.running_mean', 'buffer', np.arange(4, dtype=np.float64))
        return test

    return _get_table


def test_initializer_is_keyed_by_name() -> None:
    a = Initializer(3).normal('stage2.conv0.weight', (5,), 1.0)
    b = Initializer(3).normal('stage2.conv0.weight', (5,), 1.0)
    c = Initializer(3).normal('stage3.conv0.weight', (5,), 1.0)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert a.name == 'stage2.conv0.weight' and a.requires_grad


def test_table_entries(table: f1_t) -> None:
    test = table()
    assert len(test) == 3
    assert 'conv.weight' in test
    assert [p.name for p in test.parameters()] == ['conv.weight', 'conv.bn.gamma']
    assert list(test.buffers()) == ['conv.bn.running_mean']
    with pytest.raises(CheckpointError):
        test.set('conv.weight', 'parameter', parameter(np.zeros(1)))
    with pytest.raises(CheckpointError):
        test.set('other', 'gradient', parameter(np.zeros(1)))


def test_checkpoint_restores_values(table: f1_t, tmp_path: Path) -> None:
    source = table()
    path = tmp_path / 'model.ckpt'
    save_checkpoint(source, path, {'backbone': {'parts': 5}})
    header, arrays = load_checkpoint(path)
    assert header['meta'] == {'backbone': {'parts': 5}}
    assert [e['name'] for e in header['entries']] == list(source.table)

    target = Parameter_Table()
    target.set('conv.weight', 'parameter', parameter(np.zeros((4, 2, 3, 3)), name='conv.weight'))
    target.set('conv.bn.gamma', 'parameter', parameter(np.zeros(4), name='conv.bn.gamma'))
    buffer = np.zeros(4)
    target.set('conv.bn.running_mean', 'buffer', buffer)
    target.load_state(arrays)
    for name, array in source.state().items():
        assert np.array_equal(target.state()[name], array)
    assert buffer.tolist() == [0.0, 1.0, 2.0, 3.0]


def test_checkpoint_mismatch(table: f1_t, tmp_path: Path) -> None:
    path = tmp_path / 'model.ckpt'
    save_checkpoint(table(), path)
    _, arrays = load_checkpoint(path)
    target = Parameter_Table()
    target.set('conv.weight', 'parameter', parameter(np.zeros((4, 2, 3, 3))))
    with pytest.raises(CheckpointError):
        target.load_state(arrays)


def test_checkpoint_corruption(table: f1_t, tmp_path: Path) -> None:
    path = tmp_path / 'model.ckpt'
    save_checkpoint(table(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(raw + b'\x00')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b'no header line')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
