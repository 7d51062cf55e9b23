"""
Synthetic pedestrians with parsing labels.

Each identity is a stack of coloured body bands (head, upper torso, lower
torso, shoes) drawn over a camera-tinted background, plus an optional
identity-specific accessory blob beside the torso. The accessory is
labelled background in the parsing map: it carries identity information
that only attention over non-human pixels can reach.

Every per-image perturbation (position jitter, pixel noise) scales with
`noise`; at zero noise two images of one identity differ only by camera
tint.
"""

import csv
import logging
import numpy as np
from pathlib import Path
from dataclasses import dataclass
from typing import List, NamedTuple, Tuple, Union
from duet.images import write_image
from duet.masks import RawParsingMap
from duet.modes import Split
from duet.tensor import Array_T

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.csv'
MANIFEST_FIELDS = ('path', 'identity', 'camera', 'split', 'junk_flag')

# raw parsing categories used for drawing
HAIR, FACE, UPPER, LEFT_ARM, RIGHT_ARM, PANTS, LEFT_SHOE, RIGHT_SHOE = 2, 13, 5, 14, 15, 9, 18, 19

BODY_PALETTE = np.array([
    [0.85, 0.20, 0.20], [0.20, 0.35, 0.85], [0.20, 0.70, 0.30],
    [0.90, 0.85, 0.25], [0.30, 0.30, 0.30], [0.85, 0.85, 0.85]])


class SynthError(Exception):
    pass


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    identities: int = 32
    images_per_identity: int = 8
    cameras: int = 3
    height: int = 96
    width: int = 32
    accessories: bool = True
    noise: float = 0.05
    test_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.identities < 1 or self.images_per_identity < 1 or self.cameras < 1:
            raise SynthError('identities, images_per_identity and cameras must be positive')
        if self.height < 16 or self.width < 8:
            raise SynthError(f'Images must be at least 16x8, got {self.height}x{self.width}')
        if self.noise < 0:
            raise SynthError(f'noise must be non-negative, got {self.noise}')
        if not 0 <= self.test_fraction <= 1:
            raise SynthError(f'test_fraction must lie in [0, 1], got {self.test_fraction}')

    @property
    def train_identities(self) -> int:
        return self.identities - int(round(self.identities * self.test_fraction))


class Appearance(NamedTuple):
    hair: Array_T
    skin: Array_T
    upper: Array_T
    lower: Array_T
    shoes: Array_T
    accessory: Array_T
    accessory_side: int       # -1 left of the torso, +1 right
    accessory_rows: Tuple[float, float]


class ManifestRow(NamedTuple):
    path: str
    identity: int
    camera: int
    split: Split
    junk: bool


def appearance(spec: SyntheticDatasetSpec, identity: int) -> Appearance:
    rng = np.random.default_rng([spec.seed, 0, identity])
    pick = rng.integers(0, len(BODY_PALETTE), size=3)
    top = rng.uniform(0.22, 0.4)
    return Appearance(
        hair=rng.uniform(0.05, 0.5, size=3),
        skin=np.array([0.9, 0.75, 0.6]) * rng.uniform(0.7, 1.0),
        upper=BODY_PALETTE[pick[0]],
        lower=BODY_PALETTE[pick[1]],
        shoes=BODY_PALETTE[pick[2]] * 0.6,
        accessory=rng.uniform(0.0, 1.0, size=3),
        accessory_side=int(rng.choice([-1, 1])),
        accessory_rows=(top, top + rng.uniform(0.15, 0.3)))


def camera_tint(spec: SyntheticDatasetSpec, camera: int) -> Array_T:
    rng = np.random.default_rng([spec.seed, 1, camera])
    return 1.0 + rng.uniform(-0.15, 0.15, size=3)


def render(spec: SyntheticDatasetSpec,
           identity: int,
           camera: int,
           index: int) -> Tuple[Array_T, RawParsingMap]:
    """Draw one image [H, W, 3] uint8 and its raw parsing map."""
    look = appearance(spec, identity)
    rng = np.random.default_rng([spec.seed, 2, index])
    H, W = spec.height, spec.width
    image = np.empty((H, W, 3))
    image[:] = np.array([0.55, 0.55, 0.5]) + 0.1 * np.sin(np.arange(W) / 3.0)[None, :, None]
    labels = np.zeros((H, W), dtype=np.int64)

    dy = int(round(rng.normal(0.0, 1.0) * spec.noise * H * 0.4))
    dx = int(round(rng.normal(0.0, 1.0) * spec.noise * W * 0.4))
    centre = W // 2 + dx

    def band(top: float, bottom: float, half_width: float, label: int, colour: Array_T) -> None:
        r0 = int(np.clip(round(top * H) + dy, 0, H))
        r1 = int(np.clip(round(bottom * H) + dy, 0, H))
        c0 = int(np.clip(centre - round(half_width * W), 0, W))
        c1 = int(np.clip(centre + round(half_width * W), 0, W))
        image[r0:r1, c0:c1] = colour
        labels[r0:r1, c0:c1] = label

    band(0.04, 0.09, 0.16, HAIR, look.hair)
    band(0.09, 0.20, 0.14, FACE, look.skin)
    band(0.20, 0.55, 0.30, LEFT_ARM, look.skin * 0.9)
    band(0.20, 0.55, 0.24, UPPER, look.upper)
    band(0.55, 0.88, 0.20, PANTS, look.lower)
    band(0.88, 0.95, 0.20, LEFT_SHOE, look.shoes)
    r0, r1 = int(np.clip(round(0.88 * H) + dy, 0, H)), int(np.clip(round(0.95 * H) + dy, 0, H))
    labels[r0:r1, centre:] = np.where(labels[r0:r1, centre:] == LEFT_SHOE,
                                      RIGHT_SHOE, labels[r0:r1, centre:])
    arm_rows = slice(int(np.clip(round(0.20 * H) + dy, 0, H)),
                     int(np.clip(round(0.55 * H) + dy, 0, H)))
    labels[arm_rows, centre:] = np.where(labels[arm_rows, centre:] == LEFT_ARM,
                                         RIGHT_ARM, labels[arm_rows, centre:])

    if spec.accessories:
        r0 = int(np.clip(round(look.accessory_rows[0] * H) + dy, 0, H))
        r1 = int(np.clip(round(look.accessory_rows[1] * H) + dy, 0, H))
        edge = centre + look.accessory_side * int(round(0.30 * W))
        c0, c1 = sorted((edge, edge + look.accessory_side * max(2, int(round(0.16 * W)))))
        c0, c1 = int(np.clip(c0, 0, W)), int(np.clip(c1, 0, W))
        image[r0:r1, c0:c1] = look.accessory
        labels[r0:r1, c0:c1] = 0

    image = image * camera_tint(spec, camera)
    image = image + rng.normal(0.0, 1.0, size=image.shape) * spec.noise
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return pixels, RawParsingMap(labels)


def plan(spec: SyntheticDatasetSpec) -> List[ManifestRow]:
    """Manifest rows in generation order.

    The first `train_identities` identities are for training; for the
    rest, images from the last camera are queries and the others gallery.
    """
    rows: List[ManifestRow] = []
    index = 0
    for identity in range(spec.identities):
        for shot in range(spec.images_per_identity):
            camera = shot % spec.cameras
            if identity < spec.train_identities:
                split = Split.TRAIN
            elif camera == spec.cameras - 1:
                split = Split.QUERY
            else:
                split = Split.GALLERY
            rows.append(ManifestRow(f'images/{index:05d}.ppm', identity, camera, split, False))
            index += 1
    return rows


def label_path(image_path: str) -> str:
    """Label maps mirror the image tree: images/N.ppm -> labels/N.pgm."""
    return str(Path('labels') / Path(image_path).with_suffix('.pgm').name)


def synth_generate(spec: SyntheticDatasetSpec, out_dir: Union[str, Path]) -> Path:
    """Write images, label maps and manifest.csv under `out_dir`.

    Raises:
        SynthError: the directory cannot be written
    """
    root = Path(out_dir)
    try:
        (root / 'images').mkdir(parents=True, exist_ok=True)
        (root / 'labels').mkdir(parents=True, exist_ok=True)
        rows = plan(spec)
        for index, row in enumerate(rows):
            pixels, labels = render(spec, row.identity, row.camera, index)
            write_image(root / row.path, pixels)
            labels.to_pgm(root / label_path(row.path))
        with open(root / MANIFEST, 'w', newline='') as stream:
            writer = csv.writer(stream)
            writer.writerow(MANIFEST_FIELDS)
            for row in rows:
                writer.writerow([row.path, row.identity, row.camera,
                                 row.split.value, int(row.junk)])
    except OSError as error:
        raise SynthError(f'Cannot write dataset to {root}: {error}')
    logger.info('dataset generated', extra={'fields': {
        'dir': str(root), 'images': len(rows), 'identities': spec.identities}})
    return root / MANIFEST
