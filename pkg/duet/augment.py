import numpy as np
from dataclasses import dataclass
from typing import Optional, Tuple
from duet.masks import RawParsingMap
from duet.tensor import Array_T

Box_T = Tuple[int, int, int, int]  # top, left, height, width


@dataclass(frozen=True)
class AugmentFlags:
    """Horizontal flip and random erasing settings.

    Erasing picks a rectangle covering `area` of the image with aspect
    ratio (height / width) in `aspect`, retrying up to `attempts` times
    when the rectangle does not fit.
    """
    flip: bool = True
    erase: bool = True
    flip_probability: float = 0.5
    erase_probability: float = 0.5
    area: Tuple[float, float] = (0.02, 0.4)
    aspect: Tuple[float, float] = (0.3, 3.33)
    attempts: int = 100

    @classmethod
    def off(cls) -> 'AugmentFlags':
        return cls(flip=False, erase=False)


def hflip(image: Array_T, labels: RawParsingMap) -> Tuple[Array_T, RawParsingMap]:
    """Mirror a [C, H, W] image and its label map left to right."""
    return image[:, :, ::-1].copy(), labels.flip()


def erase_box(shape: Tuple[int, int],
              rng: np.random.Generator,
              flags: AugmentFlags) -> Optional[Box_T]:
    height, width = shape
    for _ in range(flags.attempts):
        target = rng.uniform(*flags.area) * height * width
        aspect = rng.uniform(*flags.aspect)
        h = int(round(np.sqrt(target * aspect)))
        w = int(round(np.sqrt(target / aspect)))
        if 0 < h < height and 0 < w < width:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return None


def random_erase(image: Array_T,
                 rng: np.random.Generator,
                 flags: AugmentFlags,
                 fill: Array_T) -> Tuple[Array_T, Optional[Box_T]]:
    """Overwrite one rectangle of a [C, H, W] image with the per-channel `fill`."""
    box = erase_box(image.shape[1:], rng, flags)
    if box is None:
        return image, None
    top, left, h, w = box
    erased = image.copy()
    erased[:, top:top + h, left:left + w] = np.asarray(fill, dtype=image.dtype)[:, None, None]
    return erased, box


def augment(image: Array_T,
            labels: RawParsingMap,
            rng: np.random.Generator,
            flags: AugmentFlags,
            fill: Array_T) -> Tuple[Array_T, RawParsingMap]:
    """Flip image and labels together; erase the image only."""
    if flags.flip and rng.uniform() < flags.flip_probability:
        image, labels = hflip(image, labels)
    if flags.erase and rng.uniform() < flags.erase_probability:
        image, _ = random_erase(image, rng, flags, fill)
    return image, labels
