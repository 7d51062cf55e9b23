"""
Manifest-backed datasets and PK batch sampling.

A dataset directory holds `manifest.csv` with the columns

    path, identity, camera, split, junk_flag

where `path` is an image (PPM) relative to the directory and the raw
parsing map lives at labels/<image stem>.pgm. Images load as float
arrays [3, H, W] scaled to [0, 1].
"""

import csv
import logging
import numpy as np
from pathlib import Path
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
from duet.augment import AugmentFlags, augment
from duet.images import ImageFormatError, read_ppm
from duet.masks import PartMaskError, RawParsingMap
from duet.modes import Split
from duet.synth import MANIFEST, MANIFEST_FIELDS, label_path
from duet.tensor import Array_T

logger = logging.getLogger(__name__)


class HarnessError(Exception):
    pass


@dataclass(frozen=True)
class Sample:
    path: str
    identity: int
    camera: int
    split: Split
    junk: bool


class Batch(NamedTuple):
    """Normalized images [B, 3, H, W], raw parsing maps, identities and class indices."""
    images: Array_T
    maps: List[RawParsingMap]
    identities: Array_T
    classes: Array_T


def _row(record: Dict[str, str], line: int, manifest: Path) -> Sample:
    try:
        return Sample(path=record['path'].strip(),
                      identity=int(record['identity']),
                      camera=int(record['camera']),
                      split=Split.parse(record['split']),
                      junk=record.get('junk_flag', '0').strip() not in ('', '0'))
    except (KeyError, ValueError, AttributeError) as error:
        raise HarnessError(f'{manifest}:{line}: malformed manifest row ({error})')


class Dataset:
    """Samples of one manifest with lazily loaded, cached images and maps."""

    def __init__(self, root: Union[str, Path], samples: Sequence[Sample]) -> None:
        self.root = Path(root)
        self.samples: List[Sample] = list(samples)
        self._images: Dict[int, Array_T] = {}
        self._maps: Dict[int, RawParsingMap] = {}
        self._stats: Optional[Tuple[Array_T, Array_T]] = None
        train_ids = sorted({s.identity for s in self.samples if s.split is Split.TRAIN})
        self.classes: Dict[int, int] = {identity: c for c, identity in enumerate(train_ids)}

    @classmethod
    def load(cls, directory: Union[str, Path]) -> 'Dataset':
        """
        Raises:
            HarnessError: missing or malformed manifest
        """
        root = Path(directory)
        manifest = root / MANIFEST
        if not manifest.is_file():
            raise HarnessError(f'No {MANIFEST} in {root}')
        with open(manifest, newline='') as stream:
            reader = csv.DictReader(stream)
            missing = set(MANIFEST_FIELDS[:4]) - set(reader.fieldnames or [])
            if missing:
                raise HarnessError(f'{manifest}: missing columns {sorted(missing)}')
            samples = [_row(record, line, manifest) for line, record in enumerate(reader, 2)]
        logger.debug('manifest loaded', extra={'fields': {
            'dir': str(root), 'samples': len(samples)}})
        return cls(root, samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def indices(self, split: Split) -> List[int]:
        return [i for i, s in enumerate(self.samples) if s.split is split]

    def image(self, index: int) -> Array_T:
        if index not in self._images:
            path = self.root / self.samples[index].path
            try:
                pixels = read_ppm(path)
            except (OSError, ImageFormatError) as error:
                raise HarnessError(f'Cannot read image {path}: {error}')
            self._images[index] = pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
        return self._images[index]

    def labels(self, index: int) -> RawParsingMap:
        if index not in self._maps:
            path = self.root / label_path(self.samples[index].path)
            try:
                self._maps[index] = RawParsingMap.from_pgm(path)
            except (OSError, ImageFormatError, PartMaskError) as error:
                raise HarnessError(f'Cannot read label map {path}: {error}')
        return self._maps[index]

    def stats(self) -> Tuple[Array_T, Array_T]:
        """Per-channel mean and standard deviation over the training images."""
        if self._stats is None:
            chosen = self.indices(Split.TRAIN) or list(range(len(self)))
            if not chosen:
                raise HarnessError(f'Dataset {self.root} is empty')
            stack = np.stack([self.image(i) for i in chosen])
            std = stack.std(axis=(0, 2, 3))
            self._stats = stack.mean(axis=(0, 2, 3)), np.where(std > 0, std, 1.0)
        return self._stats

    def batch(self,
              indices: Sequence[int],
              rng: Optional[np.random.Generator] = None,
              flags: Optional[AugmentFlags] = None) -> Batch:
        """Assemble samples, augmenting each when `flags` is given.

        Erased rectangles take the per-channel mean, which normalizes to zero.
        """
        mean, std = self.stats()
        images, maps = [], []
        for index in indices:
            image, labels = self.image(index), self.labels(index)
            if flags is not None:
                assert rng is not None
                image, labels = augment(image, labels, rng, flags, mean)
            images.append((image - mean[:, None, None]) / std[:, None, None])
            maps.append(labels)
        identities = np.array([self.samples[i].identity for i in indices], dtype=np.int64)
        classes = np.array([self.classes.get(int(i), -1) for i in identities], dtype=np.int64)
        return Batch(np.stack(images) if images else np.zeros((0, 3, 0, 0)),
                     maps, identities, classes)


class PKSampler:
    """Batches of exactly P identities with exactly K distinct instances each.

    Batch `step` draws from its own stream seeded by (seed, step), so a
    run is reproducible whatever order batches are requested in.
    """

    def __init__(self, dataset: Dataset, P: int, K: int, seed: int = 0) -> None:
        self.P, self.K, self.seed = P, K, seed
        pools: Dict[int, List[int]] = {}
        for index in dataset.indices(Split.TRAIN):
            pools.setdefault(dataset.samples[index].identity, []).append(index)
        self.pools = {identity: pool for identity, pool in sorted(pools.items())
                      if len(pool) >= K}
        if len(self.pools) < P:
            raise HarnessError(f'PK sampling needs {P} identities with at least {K} '
                               f'training images, the dataset has {len(self.pools)}')
        self.identities = list(self.pools)

    def steps_per_epoch(self) -> int:
        images = sum(len(pool) for pool in self.pools.values())
        return max(1, images // (self.P * self.K))

    def batch(self, step: int) -> List[int]:
        rng = np.random.default_rng([self.seed, 3, step])
        chosen = rng.choice(len(self.identities), size=self.P, replace=False)
        indices: List[int] = []
        for position in chosen:
            pool = self.pools[self.identities[int(position)]]
            picks = rng.choice(len(pool), size=self.K, replace=False)
            indices.extend(pool[int(p)] for p in picks)
        return indices
