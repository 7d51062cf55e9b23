"""
Single-query retrieval evaluation.

For every query the gallery is filtered (junk entries, and entries sharing
both the query's identity and camera), ranked by ascending Euclidean
distance with ties broken by gallery index, and scored:

- CMC: Recall@k is the fraction of queries whose first correct match is
  within the top k;
- AP: the mean over the j-th positive at 1-based rank r_j of j / r_j.

Queries with no valid positive are left out of both.
"""

import csv
import json
import logging
import numpy as np
from pathlib import Path
from dataclasses import dataclass, field
from mypy_extensions import TypedDict
from typing import Any, Dict, List, Optional, Tuple, Union
from duet.modes import Role
from duet.params import CheckpointError, read_blob, write_blob
from duet.tensor import Array_T

logger = logging.getLogger(__name__)

DISTRACTOR = -1
EMBEDDING_FORMAT = 'duet-embeddings/1'


class MetricError(Exception):
    pass


class report_t(TypedDict):
    cmc: List[float]
    map: float
    r1: float
    r5: float
    r10: float
    valid_queries: int


@dataclass(frozen=True)
class EmbeddingSet:
    """M embeddings with identity, camera and junk flag per entry.

    Identity -1 marks a distractor: a valid negative for every query and
    never a query itself.
    """
    features: Array_T
    ids: Array_T
    cameras: Array_T
    role: Role = Role.GALLERY
    junk: Array_T = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        ids = np.asarray(self.ids, dtype=np.int64)
        cameras = np.asarray(self.cameras, dtype=np.int64)
        junk = np.asarray(self.junk, dtype=bool)
        if junk.size == 0:
            junk = np.zeros(len(ids), dtype=bool)
        if features.ndim != 2:
            raise MetricError(f'Features must be [M, D], got {features.shape}')
        size = features.shape[0]
        if ids.shape != (size,) or cameras.shape != (size,) or junk.shape != (size,):
            raise MetricError(f'Metadata lengths {ids.shape}, {cameras.shape}, '
                              f'{junk.shape} do not match {size} features')
        if (ids < DISTRACTOR).any():
            raise MetricError(f'Identities must be >= {DISTRACTOR}')
        if self.role is Role.QUERY and (ids < 0).any():
            raise MetricError(f'Query {int(np.argmax(ids < 0))} has distractor identity '
                              f'{DISTRACTOR}; distractors belong to the gallery')
        if (cameras < 0).any():
            raise MetricError('Camera ids must be non-negative')
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'ids', ids)
        object.__setattr__(self, 'cameras', cameras)
        object.__setattr__(self, 'junk', junk)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class EvalResult:
    cmc: Array_T
    mAP: float
    average_precisions: Array_T

    @property
    def valid_queries(self) -> int:
        return int(self.average_precisions.size)

    def recall(self, k: int) -> float:
        """Recall@k, saturating beyond the computed range."""
        if k < 1:
            raise MetricError(f'Recall@k needs k >= 1, got {k}')
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def report(self) -> report_t:
        return {'cmc': [float(v) for v in self.cmc], 'map': float(self.mAP),
                'r1': self.recall(1), 'r5': self.recall(5), 'r10': self.recall(10),
                'valid_queries': self.valid_queries}


def pairwise_euclidean(query: EmbeddingSet, gallery: EmbeddingSet) -> Array_T:
    if query.dim != gallery.dim:
        raise MetricError(f'Query dimension {query.dim} differs from gallery '
                          f'dimension {gallery.dim}')
    diff = query.features[:, None, :] - gallery.features[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def rank_gallery(dist_row: Array_T,
                 query: Tuple[int, int],
                 gallery: EmbeddingSet,
                 exclude_same_camera: bool = True) -> Array_T:
    """Valid gallery indices of one query, nearest first.

    Args:
        dist_row: distances from the query to every gallery entry
        query: (identity, camera) of the query
        gallery: gallery metadata
        exclude_same_camera: drop entries with the query's identity and camera
    """
    identity, camera = query
    keep = ~gallery.junk
    if exclude_same_camera:
        keep &= ~((gallery.ids == identity) & (gallery.cameras == camera))
    order = np.argsort(dist_row, kind='stable')
    return order[keep[order]]


def average_precision(hits: Array_T) -> float:
    """AP of a ranked boolean hit list with at least one hit."""
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def cmc_and_map(query: EmbeddingSet,
                gallery: EmbeddingSet,
                k_max: Optional[int] = None,
                exclude_same_camera: bool = True,
                distances: Optional[Array_T] = None) -> EvalResult:
    """CMC curve up to `k_max` (default: gallery size) and mAP.

    Raises:
        MetricError: no query has a valid positive
    """
    dist = pairwise_euclidean(query, gallery) if distances is None else distances
    if dist.shape != (len(query), len(gallery)):
        raise MetricError(f'Distance matrix {dist.shape} does not match '
                          f'{len(query)} queries x {len(gallery)} gallery entries')
    k_max = k_max or max(len(gallery), 1)
    hits_at = np.zeros(k_max)
    aps: List[float] = []
    for q in range(len(query)):
        if query.junk[q] or query.ids[q] < 0:
            continue
        identity, camera = int(query.ids[q]), int(query.cameras[q])
        ranked = rank_gallery(dist[q], (identity, camera), gallery, exclude_same_camera)
        hits = gallery.ids[ranked] == identity
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        if first < k_max:
            hits_at[first:] += 1
        aps.append(average_precision(hits))
    if not aps:
        raise MetricError('No query has a valid positive in the gallery')
    result = EvalResult(hits_at / len(aps), float(np.mean(aps)), np.asarray(aps))
    logger.debug('evaluated', extra={'fields': {
        'queries': len(query), 'valid': len(aps), 'map': result.mAP}})
    return result


def _sidecar(path: Path) -> Path:
    return path.with_suffix('.csv')


def save_embeddings(embeddings: EmbeddingSet, path: Union[str, Path]) -> None:
    """Write the JSON-header payload file plus its CSV metadata sidecar."""
    path = Path(path)
    header: Dict[str, Any] = {'format': EMBEDDING_FORMAT, 'count': len(embeddings),
                              'dim': embeddings.dim, 'role': embeddings.role.value}
    write_blob(path, header, [embeddings.features.astype(np.float32)])
    with open(_sidecar(path), 'w', newline='') as stream:
        writer = csv.writer(stream)
        writer.writerow(['index', 'identity', 'camera', 'junk_flag'])
        for index in range(len(embeddings)):
            writer.writerow([index, int(embeddings.ids[index]),
                             int(embeddings.cameras[index]), int(embeddings.junk[index])])


def load_embeddings(path: Union[str, Path]) -> EmbeddingSet:
    path = Path(path)
    try:
        header, body = read_blob(path)
    except CheckpointError as error:
        raise MetricError(str(error))
    if header.get('format') != EMBEDDING_FORMAT:
        raise MetricError(f'{path}: not an embedding file')
    count, dim = int(header['count']), int(header['dim'])
    if len(body) != count * dim * 4:
        raise MetricError(f'{path}: expected {count * dim * 4} payload bytes, '
                          f'found {len(body)}')
    features = np.frombuffer(body, dtype='<f4').reshape(count, dim).astype(np.float32)
    rows: List[Tuple[int, int, bool]] = []
    with open(_sidecar(path), newline='') as stream:
        for record in csv.DictReader(stream):
            rows.append((int(record['identity']), int(record['camera']),
                         record['junk_flag'].strip() not in ('0', '')))
    if len(rows) != count:
        raise MetricError(f'{_sidecar(path)}: {len(rows)} rows for {count} embeddings')
    ids, cameras, junk = (np.array(column) for column in zip(*rows)) if rows else (
        np.zeros(0), np.zeros(0), np.zeros(0))
    return EmbeddingSet(features, ids, cameras, Role.parse(str(header['role'])), junk)


def write_report(result: EvalResult, path: Union[str, Path]) -> None:
    with open(path, 'w') as stream:
        json.dump(result.report(), stream, indent=2)
