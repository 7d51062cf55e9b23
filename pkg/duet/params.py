"""
Parameter table, deterministic initialisation and the checkpoint codec.

A checkpoint is a single file: one line of JSON header terminated by a
newline, followed by the raw little-endian payload of every entry in
header order.
"""

import json
import zlib
import logging
import numpy as np
from pathlib import Path
from mypy_extensions import TypedDict
from typing import Any, Dict, List, Optional, Tuple, Union
from duet.tensor import Array_T, Runtime, Shape_T, Tensor, parameter

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'duet-checkpoint/1'

Entry_T = Union[Tensor, Array_T]
TableField_T = Tuple[str, Entry_T]


class CheckpointError(Exception):
    pass


class checkpoint_entry_t(TypedDict):
    name: str
    kind: str
    dtype: str
    shape: List[int]


class checkpoint_header_t(TypedDict, total=False):
    format: str
    precision: str
    entries: List[checkpoint_entry_t]
    meta: Dict[str, Any]


class Parameter_Table:
    """Named learnable parameters and non-learnable buffers.

    Parameters are `Tensor`s updated by the optimizer through `assign`;
    buffers are plain arrays (normalization running statistics) that the
    layers owning them update in place, so loading a checkpoint copies
    into them rather than replacing them.
    """

    def __init__(self) -> None:
        self.table: Dict[str, TableField_T] = {}

    def set(self, name: str, kind: str, value: Entry_T) -> None:
        if kind not in ('parameter', 'buffer'):
            raise CheckpointError(f'Unknown entry kind "{kind}" for "{name}"')
        if name in self.table:
            raise CheckpointError(f'Duplicate entry "{name}"')
        self.table[name] = (kind, value)

    def get(self, name: str) -> TableField_T:
        return self.table[name]

    def __contains__(self, name: str) -> bool:
        return name in self.table

    def __len__(self) -> int:
        return len(self.table)

    def parameters(self) -> List[Tensor]:
        return [value for kind, value in self.table.values()
                if kind == 'parameter' and isinstance(value, Tensor)]

    def buffers(self) -> Dict[str, Array_T]:
        return {name: value for name, (kind, value) in self.table.items()
                if kind == 'buffer' and isinstance(value, np.ndarray)}

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state(self) -> Dict[str, Array_T]:
        """Snapshot of every entry as an independent array."""
        return {name: (value.numpy() if isinstance(value, Tensor) else value.copy())
                for name, (_, value) in self.table.items()}

    def load_state(self, arrays: Dict[str, Array_T]) -> None:
        missing = sorted(set(self.table) - set(arrays))
        unexpected = sorted(set(arrays) - set(self.table))
        if missing or unexpected:
            raise CheckpointError(f'Checkpoint does not match the model: '
                                  f'missing {missing}, unexpected {unexpected}')
        for name, (_, value) in self.table.items():
            array = arrays[name]
            if array.shape != value.shape:
                raise CheckpointError(f'Entry "{name}" has shape {array.shape} '
                                      f'in the checkpoint, {value.shape} in the model')
            if isinstance(value, Tensor):
                value.assign(array)
            else:
                np.copyto(value, array)


class Initializer:
    """Seeded initialisation keyed by parameter name.

    Each parameter draws from its own stream seeded by (seed, crc32(name)),
    so two models that differ only by extra layers share every common
    weight bit for bit.
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode('utf-8'))])

    def he_normal(self, name: str, shape: Shape_T, fan_in: int) -> Tensor:
        std = np.sqrt(2.0 / max(fan_in, 1))
        return parameter(self.rng(name).normal(0.0, std, size=shape), name=name)

    def normal(self, name: str, shape: Shape_T, std: float) -> Tensor:
        return parameter(self.rng(name).normal(0.0, std, size=shape), name=name)

    def zeros(self, name: str, shape: Shape_T) -> Tensor:
        return parameter(np.zeros(shape), name=name)

    def ones(self, name: str, shape: Shape_T) -> Tensor:
        return parameter(np.ones(shape), name=name)


def _little_endian(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder('<')


def write_blob(path: Path, header: Dict[str, Any], payloads: List[Array_T]) -> None:
    """Write a JSON header line followed by little-endian payloads."""
    with open(path, 'wb') as stream:
        stream.write(json.dumps(header, sort_keys=True).encode('utf-8') + b'\n')
        for array in payloads:
            stream.write(np.ascontiguousarray(
                array, dtype=_little_endian(array.dtype)).tobytes())


def read_blob(path: Path) -> Tuple[Dict[str, Any], bytes]:
    with open(path, 'rb') as stream:
        raw = stream.read()
    end = raw.find(b'\n')
    if end < 0:
        raise CheckpointError(f'{path}: missing header line')
    try:
        header = json.loads(raw[:end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f'{path}: malformed header ({error})')
    if not isinstance(header, dict):
        raise CheckpointError(f'{path}: header must be a JSON object')
    return header, raw[end + 1:]


def save_checkpoint(table: Parameter_Table,
                    path: Union[str, Path],
                    meta: Optional[Dict[str, Any]] = None) -> None:
    entries: List[checkpoint_entry_t] = []
    payloads: List[Array_T] = []
    for name, (kind, value) in table.table.items():
        array = value.data if isinstance(value, Tensor) else value
        entries.append({'name': name, 'kind': kind,
                        'dtype': np.dtype(array.dtype).name,
                        'shape': list(array.shape)})
        payloads.append(array)
    header: checkpoint_header_t = {
        'format': CHECKPOINT_FORMAT,
        'precision': Runtime.dtype.name,
        'entries': entries,
        'meta': meta or {},
    }
    write_blob(Path(path), dict(header), payloads)
    logger.info('checkpoint saved',
                extra={'fields': {'path': str(path), 'entries': len(entries)}})


def load_checkpoint(path: Union[str, Path]) -> Tuple[checkpoint_header_t, Dict[str, Array_T]]:
    """Read a checkpoint into (header, name -> array).

    Raises:
        CheckpointError: wrong format tag, truncated or oversized payload
    """
    path = Path(path)
    raw_header, body = read_blob(path)
    if raw_header.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f'{path}: not a checkpoint '
                              f'(format "{raw_header.get("format")}")')
    header: checkpoint_header_t = {
        'format': CHECKPOINT_FORMAT,
        'precision': str(raw_header.get('precision', 'float32')),
        'entries': list(raw_header.get('entries', [])),
        'meta': dict(raw_header.get('meta', {})),
    }
    arrays: Dict[str, Array_T] = {}
    offset = 0
    for entry in header['entries']:
        dtype = _little_endian(np.dtype(entry['dtype']))
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        size = count * dtype.itemsize
        if offset + size > len(body):
            raise CheckpointError(f'{path}: payload truncated at entry "{entry["name"]}"')
        arrays[entry['name']] = np.frombuffer(
            body, dtype=dtype, count=count, offset=offset).reshape(shape).astype(
                np.dtype(entry['dtype']))
        offset += size
    if offset != len(body):
        raise CheckpointError(f'{path}: {len(body) - offset} trailing payload bytes')
    return header, arrays
