"""
Human-part label maps: grouping, nearest resize and confidence maps.

Raw parsing maps use the 20 categories of the LIP label set (index 0 is
background). A grouping scheme folds them into K parts, where part 0 is
background whenever K >= 2.
"""

import json
import numpy as np
from bitarray import bitarray
from pathlib import Path
from dataclasses import dataclass
from typing import Dict, Tuple, Union
from duet.images import read_pgm, write_image
from duet.tensor import Array_T

NUM_RAW_LABELS = 20
BUILTIN_PARTS = (1, 2, 5, NUM_RAW_LABELS)

RAW_CATEGORIES: Tuple[str, ...] = (
    'background', 'hat', 'hair', 'glove', 'sunglasses', 'upper-clothes',
    'dress', 'coat', 'socks', 'pants', 'jumpsuits', 'scarf', 'skirt',
    'face', 'left-arm', 'right-arm', 'left-leg', 'right-leg',
    'left-shoe', 'right-shoe')

# background, head, upper torso, lower torso, shoes
PART_GROUPS: Dict[str, Tuple[str, ...]] = {
    'background': ('background',),
    'head': ('hat', 'hair', 'sunglasses', 'face', 'scarf'),
    'upper-torso': ('upper-clothes', 'dress', 'coat', 'glove',
                    'right-arm', 'left-arm', 'jumpsuits'),
    'lower-torso': ('pants', 'skirt', 'socks', 'right-leg', 'left-leg'),
    'shoe': ('right-shoe', 'left-shoe'),
}


class PartMaskError(Exception):
    pass


def _first_offender(bad: Array_T) -> Tuple[int, int]:
    row, col = np.argwhere(bad)[0]
    return int(row), int(col)


@dataclass(frozen=True)
class RawParsingMap:
    """A precomputed parsing map with labels in [0, 20)."""
    labels: Array_T

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise PartMaskError(f'Parsing map must be a non-empty 2-D grid, '
                                f'got shape {labels.shape}')
        bad = (labels < 0) | (labels >= NUM_RAW_LABELS)
        if bad.any():
            row, col = _first_offender(bad)
            raise PartMaskError(f'Parsing label {int(labels[row, col])} at pixel '
                                f'(row {row}, col {col}) is outside [0, {NUM_RAW_LABELS})')
        object.__setattr__(self, 'labels', labels.astype(np.int64))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @classmethod
    def from_pgm(cls, path: Union[str, Path]) -> 'RawParsingMap':
        return cls(read_pgm(path))

    def to_pgm(self, path: Union[str, Path]) -> None:
        write_image(path, self.labels.astype(np.uint8))

    def flip(self) -> 'RawParsingMap':
        return RawParsingMap(self.labels[:, ::-1].copy())


@dataclass(frozen=True)
class GroupingScheme:
    """Total map from the 20 raw categories onto K part groups."""
    K: int
    table: Tuple[int, ...]

    def __post_init__(self) -> None:
        table = tuple(int(v) for v in self.table)
        object.__setattr__(self, 'table', table)
        if self.K < 1:
            raise PartMaskError(f'Grouping needs K >= 1, got {self.K}')
        if len(table) != NUM_RAW_LABELS:
            raise PartMaskError(f'Grouping table must have {NUM_RAW_LABELS} entries, '
                                f'got {len(table)}')
        if any(not 0 <= group < self.K for group in table):
            raise PartMaskError(f'Grouping table values must lie in [0, {self.K}): {table}')
        if set(table) != set(range(self.K)):
            raise PartMaskError(f'Grouping table must cover every group 0..{self.K - 1}')
        if self.K >= 2 and table[0] != 0:
            raise PartMaskError('Background must map to group 0 when K >= 2')

    @classmethod
    def default(cls, K: int) -> 'GroupingScheme':
        """Built-in schemes: whole image, foreground/background, body regions, identity."""
        if K == 1:
            return cls(1, (0,) * NUM_RAW_LABELS)
        if K == 2:
            return cls(2, (0,) + (1,) * (NUM_RAW_LABELS - 1))
        if K == 5:
            index = {name: group for group, names in enumerate(PART_GROUPS.values())
                     for name in names}
            return cls(5, tuple(index[name] for name in RAW_CATEGORIES))
        if K == NUM_RAW_LABELS:
            return cls(K, tuple(range(NUM_RAW_LABELS)))
        raise PartMaskError(f'No built-in grouping for K={K}; use 1, 2, 5 or 20 '
                            f'or load a grouping file')

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'GroupingScheme':
        with open(path) as stream:
            try:
                raw = json.load(stream)
            except json.JSONDecodeError as error:
                raise PartMaskError(f'{path}: malformed grouping file ({error})')
        if not isinstance(raw, dict) or 'K' not in raw or 'table' not in raw:
            raise PartMaskError(f'{path}: grouping file needs "K" and "table"')
        return cls(int(raw['K']), tuple(raw['table']))

    def save(self, path: Union[str, Path]) -> None:
        with open(path, 'w') as stream:
            json.dump({'K': self.K, 'table': list(self.table)}, stream)


@dataclass(frozen=True)
class PartLabelMap:
    """Per-pixel part labels in [0, K)."""
    labels: Array_T
    K: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise PartMaskError(f'Label map must be a non-empty 2-D grid, '
                                f'got shape {labels.shape}')
        if self.K < 1:
            raise PartMaskError(f'Label map needs K >= 1, got {self.K}')
        bad = (labels < 0) | (labels >= self.K)
        if bad.any():
            row, col = _first_offender(bad)
            raise PartMaskError(f'Part label {int(labels[row, col])} at pixel '
                                f'(row {row}, col {col}) is outside [0, {self.K})')
        object.__setattr__(self, 'labels', labels.astype(np.int64))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def flat(self) -> Array_T:
        """Labels in row-major pixel order."""
        return self.labels.reshape(-1)

    def counts(self) -> Array_T:
        return np.bincount(self.flat, minlength=self.K)


@dataclass(frozen=True)
class ConfidenceMaps:
    """L1-normalized part indicators: weights[k, i] = [l_i == k] / count(k)."""
    weights: Array_T
    counts: Array_T

    @property
    def K(self) -> int:
        return int(self.weights.shape[0])

    @property
    def present(self) -> Array_T:
        return self.counts > 0


def group_labels(raw: RawParsingMap, scheme: GroupingScheme) -> PartLabelMap:
    lookup = np.asarray(scheme.table, dtype=np.int64)
    return PartLabelMap(lookup[raw.labels], scheme.K)


def _nearest_index(out_extent: int, in_extent: int) -> Array_T:
    # floor((i + 0.5) * in / out), in exact integer arithmetic
    i = np.arange(out_extent)
    return ((2 * i + 1) * in_extent) // (2 * out_extent)


def resize_nearest(part_map: PartLabelMap, out_h: int, out_w: int) -> PartLabelMap:
    """Nearest-neighbour resample; labels are categorical, nothing is blended."""
    if out_h < 1 or out_w < 1:
        raise PartMaskError(f'Resize target must be at least 1x1, got {out_h}x{out_w}')
    if (out_h, out_w) == (part_map.height, part_map.width):
        return part_map
    rows = _nearest_index(out_h, part_map.height)
    cols = _nearest_index(out_w, part_map.width)
    return PartLabelMap(part_map.labels[np.ix_(rows, cols)], part_map.K)


def build_confidence_maps(part_map: PartLabelMap) -> ConfidenceMaps:
    labels = part_map.flat
    indicator = (labels[None, :] == np.arange(part_map.K)[:, None]).astype(np.float64)
    counts = indicator.sum(axis=1)
    scale = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return ConfidenceMaps(indicator * scale[:, None], counts.astype(np.int64))


def binary_human_mask(part_map: PartLabelMap, human: bool = False) -> bitarray:
    """Per-pixel mask in row-major order.

    By default bit i is set where pixel i is background (non-human);
    with `human=True` the complement is returned.

    Raises:
        PartMaskError: the map has a single part, so no background exists
    """
    if part_map.K < 2:
        raise PartMaskError('A K=1 label map has no foreground/background distinction')
    selected = part_map.flat != 0 if human else part_map.flat == 0
    bits = bitarray()
    bits.pack(selected.astype(np.uint8).tobytes())
    return bits


def mask_to_array(bits: bitarray) -> Array_T:
    return np.frombuffer(bits.unpack(), dtype=np.uint8).astype(bool)
