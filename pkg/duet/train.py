"""
Training, embedding extraction and evaluation.

Every source of randomness in a run is keyed: parameters by (seed, name),
PK batches by (seed, step), augmentation by (seed, step), so the same
configuration reproduces the same loss sequence and evaluation.
"""

import logging
import dataclasses
import numpy as np
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Union
from duet.augment import AugmentFlags
from duet.config import BackboneConfig, RunConfig
from duet.data import Dataset, HarnessError, PKSampler
from duet.losses import EmbeddingBatch, LossReport, combined_loss
from duet.metrics import EmbeddingSet, EvalResult, cmc_and_map
from duet.model import Model, build_model
from duet.modes import Role, Split
from duet.optim import OptimizerState, sgd_step
from duet.params import load_checkpoint, save_checkpoint
from duet.tensor import Graph, Runtime, constant, precision

logger = logging.getLogger(__name__)

CHECKPOINT = 'model.ckpt'


class EpochRecord(NamedTuple):
    epoch: int
    learning_rate: float
    loss: float
    recall_at_1: Optional[float]


class TrainResult(NamedTuple):
    model: Model
    losses: List[float]
    epochs: List[EpochRecord]
    checkpoint: Optional[Path]


def _meta(backbone: BackboneConfig, run: RunConfig) -> Dict[str, Any]:
    return {'backbone': backbone.to_dict(), 'run': run.to_dict()}


def train(backbone: BackboneConfig,
          run: RunConfig,
          dataset: Dataset,
          out_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """Fit a model on the training split with PK batches.

    The classifier width follows the number of training identities in
    the dataset. A checkpoint is written to `out_dir`/model.ckpt when
    `out_dir` is given.

    Raises:
        HarnessError: too few identities or images for PK sampling
    """
    if backbone.num_identities != dataset.num_classes:
        backbone = dataclasses.replace(backbone, num_identities=max(dataset.num_classes, 1))
    sampler = PKSampler(dataset, run.P, run.K, run.seed)
    steps = run.steps_per_epoch or sampler.steps_per_epoch()
    schedule = run.schedule()
    flags = AugmentFlags(flip=run.flip, erase=run.erase)
    validating = bool(dataset.indices(Split.QUERY)) and bool(dataset.indices(Split.GALLERY))

    previous = Runtime.deterministic
    Runtime.deterministic = run.deterministic
    try:
        with precision(run.precision):
            model = build_model(backbone).train()
            state = OptimizerState(schedule.lr_at(0), run.momentum, run.weight_decay)
            losses: List[float] = []
            history: List[EpochRecord] = []
            logger.info('training', extra={'fields': {
                'steps_per_epoch': steps, 'epochs': run.epochs, 'P': run.P, 'K': run.K,
                'identities': dataset.num_classes, 'blocks': backbone.total_blocks()}})

            for epoch in range(run.epochs):
                state.learning_rate = schedule.lr_at(epoch)
                epoch_losses: List[float] = []
                for step in range(epoch * steps, (epoch + 1) * steps):
                    report = _step(model, dataset, sampler, run, flags, state, step)
                    losses.append(report.combined)
                    epoch_losses.append(report.combined)
                    logger.debug('step', extra={'fields': {
                        'step': step, 'loss': report.combined,
                        'softmax': report.softmax_loss, 'triplet': report.triplet_loss,
                        'active': report.active_triplet_fraction}})

                recall = None
                if validating and run.validate_every and (epoch + 1) % run.validate_every == 0:
                    recall = evaluate_model(model, dataset).recall(1)
                    model.train()
                record = EpochRecord(epoch, state.learning_rate,
                                     float(np.mean(epoch_losses)), recall)
                history.append(record)
                logger.info('epoch', extra={'fields': record._asdict()})

            path = None
            if out_dir is not None:
                directory = Path(out_dir)
                try:
                    directory.mkdir(parents=True, exist_ok=True)
                except OSError as error:
                    raise HarnessError(f'Cannot create output directory {directory}: {error}')
                path = directory / CHECKPOINT
                save_checkpoint(model.table, path, _meta(backbone, run))
    finally:
        Runtime.deterministic = previous
    return TrainResult(model, losses, history, path)


def _step(model: Model,
          dataset: Dataset,
          sampler: PKSampler,
          run: RunConfig,
          flags: AugmentFlags,
          state: OptimizerState,
          step: int) -> LossReport:
    rng = np.random.default_rng([run.seed, 4, step])
    batch = dataset.batch(sampler.batch(step), rng, flags)
    params = model.parameters()
    model.table.zero_grad()
    with Graph() as graph:
        out = model(constant(batch.images), batch.maps)
        loss, report = combined_loss(out.logits, EmbeddingBatch(out.embeddings, batch.classes),
                                     run.margin, run.use_triplet, run.normalize)
        graph.backward(loss, params)
    sgd_step(params, state)
    return report


def extract(model: Model,
            dataset: Dataset,
            split: Split,
            batch_size: int = 64) -> EmbeddingSet:
    """Eval-mode embeddings of every sample in `split`, in manifest order."""
    indices = dataset.indices(split)
    if not indices:
        raise HarnessError(f'Dataset {dataset.root} has no {split.value} samples')
    chunks: List[np.ndarray] = []
    for start in range(0, len(indices), batch_size):
        batch = dataset.batch(indices[start:start + batch_size])
        chunks.append(model.embed(batch.images, batch.maps))
    samples = [dataset.samples[i] for i in indices]
    return EmbeddingSet(np.concatenate(chunks),
                        np.array([s.identity for s in samples]),
                        np.array([s.camera for s in samples]),
                        Role.QUERY if split is Split.QUERY else Role.GALLERY,
                        np.array([s.junk for s in samples]))


def evaluate_model(model: Model,
                   dataset: Dataset,
                   exclude_same_camera: bool = True) -> EvalResult:
    return cmc_and_map(extract(model, dataset, Split.QUERY),
                       extract(model, dataset, Split.GALLERY),
                       exclude_same_camera=exclude_same_camera)


def load_model(path: Union[str, Path]) -> Model:
    """Rebuild a model from the backbone configuration stored with its weights."""
    header, arrays = load_checkpoint(path)
    meta = header.get('meta', {})
    if 'backbone' not in meta:
        raise HarnessError(f'{path}: checkpoint carries no backbone configuration')
    backbone = BackboneConfig.from_dict(meta['backbone'])
    with precision(header.get('precision', 'float32')):
        model = build_model(backbone)
    model.table.load_state(arrays)
    return model.eval()


def evaluate(checkpoint: Union[str, Path],
             dataset: Dataset,
             exclude_same_camera: bool = True) -> EvalResult:
    """Query against gallery with the model stored in `checkpoint`."""
    model = load_model(checkpoint)
    result = evaluate_model(model, dataset, exclude_same_camera)
    logger.info('evaluation', extra={'fields': {
        'checkpoint': str(checkpoint), 'map': result.mAP, 'r1': result.recall(1),
        'valid_queries': result.valid_queries}})
    return result
