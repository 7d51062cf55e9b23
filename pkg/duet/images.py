"""
Image files: 8-bit graymaps for label maps and masks, RGB pixmaps for images.

Reading and writing go through Pillow; the format follows the file
extension (``.pgm`` and ``.ppm`` in the harness).
"""

import numpy as np
from PIL import Image
from pathlib import Path
from typing import Union
from duet.tensor import Array_T

GRAY, RGB = 'L', 'RGB'


class ImageFormatError(Exception):
    pass


def read_image(path: Union[str, Path], mode: str) -> Array_T:
    """Read an image as uint8 [H, W] (mode L) or [H, W, 3] (mode RGB).

    The stored mode must already be `mode`; label maps must never be
    silently converted from colour.
    """
    try:
        with Image.open(path) as image:
            if image.mode != mode:
                raise ImageFormatError(f'{path}: expected mode {mode}, found {image.mode}')
            pixels = np.asarray(image, dtype=np.uint8)
    except (OSError, ValueError) as error:
        raise ImageFormatError(f'{path}: {error}')
    return pixels.copy()


def write_image(path: Union[str, Path], pixels: Array_T) -> None:
    array = np.asarray(pixels)
    if array.dtype != np.uint8:
        raise ImageFormatError(f'Images must be uint8, got {array.dtype}')
    if array.ndim != 2 and not (array.ndim == 3 and array.shape[2] == 3):
        raise ImageFormatError(f'Cannot write an image of shape {array.shape}')
    Image.fromarray(np.ascontiguousarray(array)).save(path)


def read_pgm(path: Union[str, Path]) -> Array_T:
    return read_image(path, GRAY)


def read_ppm(path: Union[str, Path]) -> Array_T:
    return read_image(path, RGB)
