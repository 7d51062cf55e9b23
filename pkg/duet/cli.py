"""
Command line entry point.

    duet synth --out data/
    duet train --data data/ --out runs/hp5 --insert 2:1 --epochs 12
    duet eval --data data/ --checkpoint runs/hp5/model.ckpt
    duet extract --data data/ --checkpoint runs/hp5/model.ckpt --split query --out q.emb
    duet gradcheck
    duet export-masks --data data/ --checkpoint runs/hp5/model.ckpt --index 0 --out masks/
    duet ablate --data data/ --grid table1 --stage 2

Exit status is 0 on success, 1 when a command fails and 2 on bad
arguments or missing paths. Logs go to stderr as JSON lines; tables and
reports go to stdout.
"""

import sys
import logging
import argparse
import dataclasses
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple
from duet import ablate
from duet.config import BackboneConfig, ConfigError, RunConfig, load_run_config
from duet.data import Dataset, HarnessError
from duet.dpb import DPBError, export_masks
from duet.gradcheck import CASES, COMPOSITE_TOLERANCE, GradCheckError, gradient_suite
from duet.images import ImageFormatError
from duet.logs import configure_logging
from duet.losses import LossError
from duet.masks import PartMaskError, group_labels, resize_nearest
from duet.metrics import MetricError, cmc_and_map, load_embeddings, save_embeddings, write_report
from duet.modes import LatentMask, Split
from duet.optim import OptimizerError
from duet.params import CheckpointError
from duet.synth import SynthError, SyntheticDatasetSpec, synth_generate
from duet.tensor import GraphError, TensorError
from duet.train import evaluate, extract, load_model, train

logger = logging.getLogger(__name__)

FAILURES = (ConfigError, HarnessError, DPBError, GradCheckError, LossError, PartMaskError,
            MetricError, ImageFormatError, OptimizerError, CheckpointError, SynthError,
            TensorError, GraphError)


class UsageError(Exception):
    """Bad arguments or a missing input path: exit status 2."""


def _existing(path: str, what: str) -> Path:
    resolved = Path(path)
    if not resolved.exists():
        raise UsageError(f'{what} {path} does not exist')
    return resolved


def _insertion(text: str) -> Tuple[int, int]:
    try:
        stage, count = text.split(':')
        return int(stage), int(count)
    except ValueError:
        raise argparse.ArgumentTypeError(f'insertion "{text}" is not STAGE:COUNT')


def _configs(args: argparse.Namespace) -> Tuple[BackboneConfig, RunConfig]:
    backbone, run = BackboneConfig(), RunConfig()
    if args.config:
        backbone, run = load_run_config(_existing(args.config, 'Config file'))
    changes: Dict[str, Any] = {}
    if args.insert is not None:
        changes['insertions'] = tuple(args.insert)
    if args.parts is not None:
        changes['parts'] = args.parts
    if args.no_human:
        changes['enable_human'] = False
    if args.no_latent:
        changes['enable_latent'] = False
    if args.latent_mask is not None:
        changes['latent_mask'] = LatentMask.parse(args.latent_mask)
    backbone = dataclasses.replace(backbone, **changes)
    run_changes = {name: value for name, value in (
        ('epochs', args.epochs), ('seed', args.seed), ('base_lr', args.lr),
        ('P', args.P), ('K', args.K), ('steps_per_epoch', args.steps_per_epoch))
        if value is not None}
    if args.scale_schedule:
        run_changes['scale_schedule'] = True
    return backbone, dataclasses.replace(run, **run_changes)


def _dataset(path: str) -> Dataset:
    return Dataset.load(_existing(path, 'Dataset directory'))


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticDatasetSpec(identities=args.identities,
                                images_per_identity=args.images_per_identity,
                                cameras=args.cameras,
                                height=args.height,
                                width=args.width,
                                accessories=not args.no_accessories,
                                noise=args.noise,
                                test_fraction=args.test_fraction,
                                seed=args.seed)
    print(synth_generate(spec, args.out))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    dataset = _dataset(args.data)
    backbone, run = _configs(args)
    result = train(backbone, run, dataset, args.out)
    for record in result.epochs:
        recall = '-' if record.recall_at_1 is None else f'{100 * record.recall_at_1:.2f}'
        print(f'epoch {record.epoch + 1:3d}  lr {record.learning_rate:.4f}  '
              f'loss {record.loss:.4f}  R-1 {recall}')
    print(result.checkpoint)
    return 0


def _print_result(report: Dict[str, Any]) -> None:
    print(f'R-1 {100 * report["r1"]:.2f}  R-5 {100 * report["r5"]:.2f}  '
          f'R-10 {100 * report["r10"]:.2f}  mAP {100 * report["map"]:.2f}  '
          f'({report["valid_queries"]} queries)')


def cmd_eval(args: argparse.Namespace) -> int:
    exclude = not args.no_camera_exclusion
    if args.checkpoint:
        result = evaluate(_existing(args.checkpoint, 'Checkpoint'), _dataset(args.data), exclude)
    elif args.query and args.gallery:
        result = cmc_and_map(load_embeddings(_existing(args.query, 'Embedding file')),
                             load_embeddings(_existing(args.gallery, 'Embedding file')),
                             exclude_same_camera=exclude)
    else:
        raise UsageError('eval needs --checkpoint with --data, or --query and --gallery')
    if args.report:
        write_report(result, args.report)
    _print_result(dict(result.report()))
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    model = load_model(_existing(args.checkpoint, 'Checkpoint'))
    embeddings = extract(model, _dataset(args.data), Split.parse(args.split))
    save_embeddings(embeddings, args.out)
    print(f'{len(embeddings)} embeddings of dimension {embeddings.dim} -> {args.out}')
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    known = {entry.name for entry in CASES}
    unknown = sorted(set(args.case or []) - known)
    if unknown:
        raise UsageError(f'Unknown gradient cases: {", ".join(unknown)}')
    results = gradient_suite(seed=args.seed, names=args.case or None)
    width = max(len(r.name) for r in results)
    for result in results:
        status = 'ok' if result.passed else 'FAIL'
        print(f'{result.name:<{width}}  {result.error:.3e}  (< {result.tolerance:.0e})  {status}')
    worst = max(r.error for r in results)
    print(f'max relative error {worst:.3e}')
    # per-case tolerances are reported; the exit status follows the worst error only
    return 0 if worst < COMPOSITE_TOLERANCE else 1


def cmd_export_masks(args: argparse.Namespace) -> int:
    model = load_model(_existing(args.checkpoint, 'Checkpoint'))
    dataset = _dataset(args.data)
    if not 0 <= args.index < len(dataset):
        raise UsageError(f'Sample index {args.index} outside [0, {len(dataset)})')
    stage = args.stage if args.stage is not None else (sorted(model.blocks) or [0])[0]
    batch = dataset.batch([args.index])
    features = model.stage_features(batch.images[0], batch.maps[0], stage)
    height, width = features.shape[1:]
    labels = resize_nearest(group_labels(batch.maps[0], model.scheme), height, width)
    masks = resize_nearest(group_labels(batch.maps[0], model.mask_scheme), height, width)
    written = export_masks(features, labels, model.blocks[stage][0], args.out,
                           rows=args.rows, mask_labels=masks)
    for path in written:
        print(path)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    dataset = _dataset(args.data)
    backbone, run = _configs(args)
    stages = list(ablate.STAGES) if args.stage == 'all' else [int(args.stage)]
    rows = ablate.run_grid(args.grid, stages, backbone, run, dataset, args.seeds)
    print(ablate.format_table(rows))
    return 0


def _run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--data', required=True, help='dataset directory with manifest.csv')
    parser.add_argument('--config', help='JSON run configuration')
    parser.add_argument('--insert', type=_insertion, action='append',
                        help='insert COUNT blocks after STAGE, as STAGE:COUNT (repeatable)')
    parser.add_argument('--parts', type=int, help='parts K of the human branch')
    parser.add_argument('--no-human', action='store_true', help='disable the human branch')
    parser.add_argument('--no-latent', action='store_true', help='disable the latent branch')
    parser.add_argument('--latent-mask', choices=[m.value for m in LatentMask])
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--lr', type=float, help='base learning rate')
    parser.add_argument('--P', type=int, help='identities per batch')
    parser.add_argument('--K', type=int, help='instances per identity')
    parser.add_argument('--steps-per-epoch', type=int)
    parser.add_argument('--scale-schedule', action='store_true',
                        help='decay the learning rate at 2/3 of the epochs')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='duet', description='Dual part-aligned blocks '
                                     'for person re-identification at desk scale')
    parser.add_argument('--verbose', action='store_true', help='log every training step')
    parser.add_argument('--log-file', help='also write the JSON log to this file')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='generate a synthetic dataset')
    synth.add_argument('--out', required=True)
    synth.add_argument('--identities', type=int, default=32)
    synth.add_argument('--images-per-identity', type=int, default=8)
    synth.add_argument('--cameras', type=int, default=3)
    synth.add_argument('--height', type=int, default=96)
    synth.add_argument('--width', type=int, default=32)
    synth.add_argument('--noise', type=float, default=0.05)
    synth.add_argument('--test-fraction', type=float, default=0.5)
    synth.add_argument('--no-accessories', action='store_true')
    synth.add_argument('--seed', type=int, default=0)
    synth.set_defaults(handler=cmd_synth)

    training = commands.add_parser('train', help='train a model')
    _run_options(training)
    training.add_argument('--out', required=True, help='checkpoint directory')
    training.set_defaults(handler=cmd_train)

    evaluation = commands.add_parser('eval', help='query/gallery retrieval metrics')
    evaluation.add_argument('--data')
    evaluation.add_argument('--checkpoint')
    evaluation.add_argument('--query', help='query embedding file')
    evaluation.add_argument('--gallery', help='gallery embedding file')
    evaluation.add_argument('--report', help='write the metrics as JSON')
    evaluation.add_argument('--no-camera-exclusion', action='store_true')
    evaluation.set_defaults(handler=cmd_eval)

    extraction = commands.add_parser('extract', help='write embeddings of one split')
    extraction.add_argument('--data', required=True)
    extraction.add_argument('--checkpoint', required=True)
    extraction.add_argument('--split', choices=[s.value for s in Split], default='query')
    extraction.add_argument('--out', required=True)
    extraction.set_defaults(handler=cmd_extract)

    checking = commands.add_parser(
        'gradcheck',
        help='finite-difference gradient suite; exits 0 iff the worst relative error < 1e-4')
    checking.add_argument('--seed', type=int, default=0)
    checking.add_argument('--case', action='append', help='run only this case (repeatable)')
    checking.set_defaults(handler=cmd_gradcheck)

    exporting = commands.add_parser('export-masks', help='dump part and attention maps')
    exporting.add_argument('--data', required=True)
    exporting.add_argument('--checkpoint', required=True)
    exporting.add_argument('--index', type=int, default=0, help='manifest row')
    exporting.add_argument('--stage', type=int, help='block stage (default: first)')
    exporting.add_argument('--rows', type=int, nargs='+', help='attention rows to write')
    exporting.add_argument('--out', required=True)
    exporting.set_defaults(handler=cmd_export_masks)

    ablation = commands.add_parser('ablate', help='train and compare block variants')
    _run_options(ablation)
    ablation.add_argument('--grid', choices=ablate.GRIDS, default='table1')
    ablation.add_argument('--stage', default='2', choices=[*map(str, ablate.STAGES), 'all'])
    ablation.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    ablation.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:
        return int(stop.code or 0)
    configure_logging(logging.DEBUG if args.verbose else logging.INFO, path=args.log_file)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except UsageError as error:
        print(f'duet {args.command}: {error}', file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except FAILURES as error:
        logger.error('command failed', extra={'fields': {
            'command': args.command, 'error': type(error).__name__}})
        print(f'duet {args.command}: {error}', file=sys.stderr)
        return 1
    except OSError as error:
        print(f'duet {args.command}: {error}', file=sys.stderr)
        return 1
