"""
Ablation grids over block configurations.

table1   - Baseline, HP-1, HP-2, HP-5, Latent, HP-5 + Latent (one block)
masking  - Latent with and without human / non-human pixels
blocks   - 1, 3 and 5 blocks for HP-5, Latent and HP-5 + Latent

Every variant is trained and evaluated once per seed; the table reports
the seed means.
"""

import logging
import dataclasses
import numpy as np
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple
from duet.config import BackboneConfig, ConfigError, RunConfig
from duet.data import Dataset
from duet.modes import LatentMask
from duet.train import evaluate_model, train

logger = logging.getLogger(__name__)

GRIDS = ('table1', 'masking', 'blocks')
STAGES = (1, 2, 3, 4)

# block count -> insertions (stage, count)
BLOCK_LAYOUTS: Dict[int, Tuple[Tuple[int, int], ...]] = {
    1: ((2, 1),),
    3: ((2, 2), (3, 1)),
    5: ((2, 2), (3, 3)),
}

HP = {'enable_human': True, 'enable_latent': False}
LATENT = {'enable_human': False, 'enable_latent': True}
BOTH = {'enable_human': True, 'enable_latent': True}


class Variant(NamedTuple):
    name: str
    stage: Optional[int]
    overrides: Dict[str, Any]


class AblationRow(NamedTuple):
    name: str
    stage: Optional[int]
    r1: float
    r5: float
    r10: float
    mAP: float


def _at(stage: int, **fields: Any) -> Dict[str, Any]:
    return {'insertions': ((stage, 1),), **fields}


def variants(grid: str, stage: int) -> List[Variant]:
    if grid == 'table1':
        return [
            Variant('Baseline', None, {'insertions': ()}),
            Variant('DPB (HP-1)', stage, _at(stage, parts=1, **HP)),
            Variant('DPB (HP-2)', stage, _at(stage, parts=2, **HP)),
            Variant('DPB (HP-5)', stage, _at(stage, parts=5, **HP)),
            Variant('DPB (Latent)', stage, _at(stage, **LATENT)),
            Variant('DPB (HP-5 + Latent)', stage, _at(stage, parts=5, **BOTH)),
        ]
    if grid == 'masking':
        without_hp = {'latent_mask': LatentMask.KEEP_NONHUMAN_ONLY}
        without_nhp = {'latent_mask': LatentMask.KEEP_HUMAN_ONLY}
        return [
            Variant('DPB (Latent)', stage, _at(stage, **LATENT)),
            Variant('DPB (Latent w/o HP)', stage, _at(stage, **LATENT, **without_hp)),
            Variant('DPB (Latent w/o NHP)', stage, _at(stage, **LATENT, **without_nhp)),
            Variant('DPB (HP-5 + Latent w/o HP)', stage,
                    _at(stage, parts=5, **BOTH, **without_hp)),
            Variant('DPB (HP-5 + Latent w/o NHP)', stage,
                    _at(stage, parts=5, **BOTH, **without_nhp)),
        ]
    if grid == 'blocks':
        rows = []
        for count, layout in BLOCK_LAYOUTS.items():
            for label, branches in (('HP-5', HP), ('Latent', LATENT), ('HP-5 + Latent', BOTH)):
                rows.append(Variant(f'DPB x{count} ({label})', None,
                                    {'insertions': layout, 'parts': 5, **branches}))
        return rows
    raise ConfigError(f'Unknown grid "{grid}", expected one of {", ".join(GRIDS)}')


def plan(grid: str, stages: Sequence[int]) -> List[Variant]:
    """Variants of `grid` at each stage; stage-free variants appear once."""
    seen: Dict[str, Variant] = {}
    for stage in stages:
        if stage not in STAGES:
            raise ConfigError(f'Stage {stage} outside {STAGES[0]}..{STAGES[-1]}')
        for variant in variants(grid, stage):
            seen.setdefault(f'{variant.name}@{variant.stage}', variant)
    return list(seen.values())


def run_variant(variant: Variant,
                backbone: BackboneConfig,
                run: RunConfig,
                dataset: Dataset,
                seeds: Sequence[int]) -> AblationRow:
    scores = []
    for seed in seeds:
        config = dataclasses.replace(backbone, seed=seed, **variant.overrides)
        result = evaluate_model(train(config, dataclasses.replace(run, seed=seed),
                                      dataset).model, dataset)
        scores.append((result.recall(1), result.recall(5), result.recall(10), result.mAP))
        logger.info('variant evaluated', extra={'fields': {
            'variant': variant.name, 'stage': variant.stage, 'seed': seed,
            'r1': result.recall(1), 'map': result.mAP}})
    r1, r5, r10, mAP = (float(v) for v in np.mean(scores, axis=0))
    return AblationRow(variant.name, variant.stage, r1, r5, r10, mAP)


def run_grid(grid: str,
             stages: Sequence[int],
             backbone: BackboneConfig,
             run: RunConfig,
             dataset: Dataset,
             seeds: Sequence[int] = (0, 1, 2)) -> List[AblationRow]:
    if not seeds:
        raise ConfigError('An ablation needs at least one seed')
    return [run_variant(v, backbone, run, dataset, seeds) for v in plan(grid, stages)]


def format_table(rows: Sequence[AblationRow]) -> str:
    """Fixed-width comparison table, scores in percent."""
    width = max([len('Method')] + [len(row.name) for row in rows])
    lines = [f'{"Method":<{width}}  {"Stage":>5}  {"R-1":>6}  {"R-5":>6}  {"R-10":>6}  {"mAP":>6}']
    for row in rows:
        stage = '-' if row.stage is None else f'Res-{row.stage}'
        lines.append(f'{row.name:<{width}}  {stage:>5}  {100 * row.r1:6.2f}  '
                     f'{100 * row.r5:6.2f}  {100 * row.r10:6.2f}  {100 * row.mAP:6.2f}')
    return '\n'.join(lines)
