"""
Enumerations shared across the package.

Every member's value is its lowercase name, which is also the spelling
accepted in JSON configuration files.
"""

from enum import Enum, unique, auto
from typing import Any, List, Type, TypeVar

T = TypeVar('T', bound='ModeEnum')


class ModeEnum(Enum):
    """Base class for mode enumerations.

    `auto()` yields the lowercase member name, so `Kind.RELU.value`
    is `'relu'` and `Kind('relu')` round-trips.
    """

    def _generate_next_value_(  # type: ignore
            name: str,
            start: int,
            count: int,
            last_values: List[Any]) -> str:
        return name.lower()

    @classmethod
    def parse(cls: Type[T], value: str) -> T:
        """Look a member up by its value, case-insensitively."""
        return cls(value.strip().lower())


@unique
class Kind(ModeEnum):
    """Elementwise kernels."""
    ADD = auto()
    SUB = auto()
    MUL = auto()
    RELU = auto()
    SCALE = auto()
    SHIFT = auto()


@unique
class NormMode(ModeEnum):
    """Batch normalization statistics source."""
    TRAIN = auto()    # batch statistics, running stats updated
    EVAL = auto()     # running statistics


@unique
class Transform(ModeEnum):
    """Realisation of the per-pixel transforms of a block (g, theta, phi, psi)."""
    IDENTITY = auto()
    LINEAR = auto()
    LINEAR_BN_RELU = auto()


@unique
class LatentMask(ModeEnum):
    """Which pixels the latent branch may attend over."""
    NONE = auto()
    KEEP_NONHUMAN_ONLY = auto()   # latent w/o HP
    KEEP_HUMAN_ONLY = auto()      # latent w/o NHP


@unique
class Role(ModeEnum):
    """Side of a retrieval evaluation an embedding set sits on."""
    QUERY = auto()
    GALLERY = auto()


@unique
class Split(ModeEnum):
    """Dataset manifest split."""
    TRAIN = auto()
    QUERY = auto()
    GALLERY = auto()
