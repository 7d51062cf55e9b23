"""
Backbone and run configuration.

A run configuration file is JSON of the shape

    {"backbone": {...BackboneConfig fields...}, "run": {...RunConfig fields...}}

where any field may be omitted, enum fields take their lowercase value
("keep_nonhuman_only") and lists stand for tuples.
"""

import json
import dataclasses
from enum import Enum
from pathlib import Path
from pampy import match, _
from dataclasses import dataclass
from typing import Any, Dict, Tuple, Type, TypeVar, Union
from duet.dpb import DPBConfig, DPBError
from duet.masks import BUILTIN_PARTS
from duet.modes import LatentMask, Transform
from duet.optim import StepSchedule

C = TypeVar('C', bound='Configurable')
E = TypeVar('E', bound=Enum)

Insertion_T = Tuple[int, int]


class ConfigError(Exception):
    pass


def _reject(name: str, value: Any, expected: str) -> Any:
    raise ConfigError(f'Field "{name}" expects {expected}, got {value!r}')


def _parse_enum(kind: Type[E], name: str, value: str) -> E:
    try:
        return kind(value.strip().lower())
    except ValueError:
        choices = ', '.join(str(member.value) for member in kind)
        raise ConfigError(f'Field "{name}" expects one of {choices}, got "{value}"')


def _tuple(name: str, value: Any) -> Tuple[Any, ...]:
    return match(value,
                 list, lambda v: tuple(_tuple(name, x) if isinstance(x, list) else x for x in v),
                 tuple, lambda v: tuple(_tuple(name, x) if isinstance(x, list) else x for x in v),
                 _, lambda v: _reject(name, v, 'a list'))


def coerce(name: str, default: Any, value: Any) -> Any:
    """Convert a decoded JSON value to the type of a field's default."""
    if isinstance(default, Enum):
        kind = type(default)
        return match(value,
                     kind, lambda v: v,
                     str, lambda v: _parse_enum(kind, name, v),
                     _, lambda v: _reject(name, v, f'a {kind.__name__} value'))
    return match(default,
                 bool, lambda d: match(value,
                                       bool, lambda v: v,
                                       _, lambda v: _reject(name, v, 'a boolean')),
                 int, lambda d: match(value,
                                      bool, lambda v: _reject(name, v, 'an integer'),
                                      int, lambda v: v,
                                      _, lambda v: _reject(name, v, 'an integer')),
                 float, lambda d: match(value,
                                        bool, lambda v: _reject(name, v, 'a number'),
                                        int, lambda v: float(v),
                                        float, lambda v: v,
                                        _, lambda v: _reject(name, v, 'a number')),
                 str, lambda d: match(value,
                                      str, lambda v: v,
                                      _, lambda v: _reject(name, v, 'a string')),
                 tuple, lambda d: _tuple(name, value),
                 _, lambda d: value)


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


class Configurable:
    """Dict round-tripping for the configuration dataclasses."""

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        pass

    @classmethod
    def from_dict(cls: Type[C], data: Dict[str, Any]) -> C:
        if not isinstance(data, dict):
            raise ConfigError(f'{cls.__name__} expects an object, got {data!r}')
        defaults = cls()  # type: ignore
        names = {f.name for f in dataclasses.fields(defaults)}  # type: ignore
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f'Unknown {cls.__name__} fields: {", ".join(unknown)}')
        values = {name: coerce(name, getattr(defaults, name), value)
                  for name, value in data.items()}
        return dataclasses.replace(defaults, **values)  # type: ignore

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: _plain(getattr(self, f.name))
                for f in dataclasses.fields(self)}  # type: ignore


def _conv_extent(size: int, stride: int) -> int:
    # 3x3 kernel, pad 1
    return (size + 2 - 3) // stride + 1


@dataclass(frozen=True)
class BackboneConfig(Configurable):
    """Toy backbone: a stem, four stages of conv+BN+ReLU blocks, the head.

    Stages are numbered 1..4; an insertion (s, n) places n blocks after
    stage s.
    """
    widths: Tuple[int, ...] = (16, 32, 64, 64)
    strides: Tuple[int, ...] = (2, 2, 2, 1)
    stem_width: int = 16
    stem_stride: int = 2
    blocks_per_stage: int = 1
    insertions: Tuple[Insertion_T, ...] = ()
    embedding_dim: int = 256
    num_identities: int = 16
    parts: int = 5
    enable_human: bool = True
    enable_latent: bool = True
    latent_mask: LatentMask = LatentMask.NONE
    mask_queries: bool = True
    reduction: int = 2
    g_transform: Transform = Transform.LINEAR_BN_RELU
    image_height: int = 96
    image_width: int = 32
    seed: int = 0

    def validate(self) -> None:
        if len(self.widths) != 4 or len(self.strides) != 4:
            raise ConfigError(f'Backbone needs 4 stage widths and strides, got '
                              f'{len(self.widths)} and {len(self.strides)}')
        if any(w < 1 for w in self.widths) or self.stem_width < 1:
            raise ConfigError(f'Channel widths must be positive: {self.widths}')
        if any(s not in (1, 2) for s in (*self.strides, self.stem_stride)):
            raise ConfigError(f'Strides must be 1 or 2: {self.strides}')
        if self.blocks_per_stage < 1:
            raise ConfigError(f'blocks_per_stage must be >= 1, got {self.blocks_per_stage}')
        if self.embedding_dim < 1 or self.num_identities < 1:
            raise ConfigError('embedding_dim and num_identities must be positive')
        if self.image_height < 1 or self.image_width < 1:
            raise ConfigError(f'Image size {self.image_height}x{self.image_width} is empty')
        if self.parts not in BUILTIN_PARTS:
            raise ConfigError(f'parts must be one of {BUILTIN_PARTS}, got {self.parts}')
        for entry in self.insertions:
            if len(entry) != 2:
                raise ConfigError(f'Insertion {entry} must be a (stage, count) pair')
            stage, count = entry
            if not 1 <= stage <= 4:
                raise ConfigError(f'Insertion stage {stage} outside 1..4')
            if count < 0:
                raise ConfigError(f'Insertion count {count} at stage {stage} is negative')
        if self.total_blocks():
            for stage in self.inserted_stages():
                try:
                    self.dpb_config(stage)
                except DPBError as error:
                    raise ConfigError(f'Stage {stage} block: {error}')

    def total_blocks(self) -> int:
        return sum(count for stage, count in self.insertions)

    def inserted_stages(self) -> Tuple[int, ...]:
        return tuple(sorted({stage for stage, count in self.insertions if count > 0}))

    def blocks_at(self, stage: int) -> int:
        return sum(count for s, count in self.insertions if s == stage)

    def feature_shape(self, stage: int) -> Tuple[int, int]:
        """Spatial extent after stage `stage` (0 is the stem)."""
        height = _conv_extent(self.image_height, self.stem_stride)
        width = _conv_extent(self.image_width, self.stem_stride)
        for stride in self.strides[:stage]:
            height, width = _conv_extent(height, stride), _conv_extent(width, stride)
        return height, width

    def dpb_config(self, stage: int) -> DPBConfig:
        return DPBConfig(channels=self.widths[stage - 1],
                         parts=self.parts,
                         reduction=self.reduction,
                         enable_human=self.enable_human,
                         enable_latent=self.enable_latent,
                         latent_mask=self.latent_mask,
                         mask_queries=self.mask_queries,
                         g_transform=self.g_transform)


@dataclass(frozen=True)
class RunConfig(Configurable):
    """Training run: PK batches, step schedule, SGD and loss settings.

    `steps_per_epoch` 0 means one pass over the training identities.
    """
    P: int = 16
    K: int = 4
    epochs: int = 60
    base_lr: float = 0.05
    decay_epoch: int = 40
    gamma: float = 0.1
    scale_schedule: bool = False
    momentum: float = 0.9
    weight_decay: float = 5e-4
    margin: float = 0.3
    use_triplet: bool = True
    normalize: bool = False
    flip: bool = True
    erase: bool = True
    steps_per_epoch: int = 0
    validate_every: int = 1
    seed: int = 0
    deterministic: bool = True
    precision: str = 'float32'

    def validate(self) -> None:
        if self.P < 1 or self.K < 1:
            raise ConfigError(f'P and K must be positive, got {self.P}x{self.K}')
        if self.use_triplet and (self.P < 2 or self.K < 2):
            raise ConfigError(f'Triplet mining needs P >= 2 and K >= 2, got {self.P}x{self.K}')
        if self.epochs < 1:
            raise ConfigError(f'epochs must be >= 1, got {self.epochs}')
        if self.decay_epoch < 0:
            raise ConfigError(f'decay_epoch must be non-negative, got {self.decay_epoch}')
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError('base_lr and weight_decay must be non-negative, '
                              'momentum in [0, 1)')
        if self.margin < 0:
            raise ConfigError(f'margin must be non-negative, got {self.margin}')
        if self.steps_per_epoch < 0 or self.validate_every < 0:
            raise ConfigError('steps_per_epoch and validate_every must be non-negative')
        if self.precision not in ('float32', 'float64'):
            raise ConfigError(f'precision must be float32 or float64, got "{self.precision}"')

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def schedule(self) -> StepSchedule:
        if self.scale_schedule:
            return StepSchedule.scaled(self.base_lr, self.epochs, self.gamma)
        return StepSchedule(self.base_lr, self.decay_epoch, self.gamma)


def load_run_config(path: Union[str, Path]) -> Tuple[BackboneConfig, RunConfig]:
    try:
        with open(path) as stream:
            raw = json.load(stream)
    except json.JSONDecodeError as error:
        raise ConfigError(f'{path}: malformed JSON ({error})')
    if not isinstance(raw, dict) or set(raw) - {'backbone', 'run'}:
        raise ConfigError(f'{path}: expected an object with "backbone" and "run" keys')
    return (BackboneConfig.from_dict(raw.get('backbone', {})),
            RunConfig.from_dict(raw.get('run', {})))


def save_run_config(backbone: BackboneConfig,
                    run: RunConfig,
                    path: Union[str, Path]) -> None:
    with open(path, 'w') as stream:
        json.dump({'backbone': backbone.to_dict(), 'run': run.to_dict()}, stream, indent=2)
