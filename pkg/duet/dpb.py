"""
The dual part-aligned block.

Given a feature map X (N = H*W pixel vectors of C channels) the block
returns Z = X + P_h(X^Human) + P_l(X^Latent):

- human branch: every parsed part k is pooled into h_k = g(sum_i p_ki x_i)
  with L1-normalized indicator weights p_ki, and each pixel receives the
  vector of the part it belongs to (background is part 0 and is pooled
  like any other part);
- latent branch: self-attention q_ij = softmax_j(phi(x_i) . theta(x_j))
  aggregating psi(x_j), optionally restricted to human or non-human
  pixels by a binary parsing mask;
- P_h and P_l are bias-free 1x1 projections initialised to zero, so a
  fresh block is the identity map.

All functions accept a single map [C, H, W] with single label maps, or a
batch [B, C, H, W] with one label map per sample.
"""

import logging
import numpy as np
from bitarray import bitarray
from pathlib import Path
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple, TypeVar, Union
from duet import ops
from duet.images import write_image
from duet.masks import (ConfidenceMaps, PartLabelMap, binary_human_mask,
                        build_confidence_maps, mask_to_array)
from duet.modes import LatentMask, NormMode, Transform
from duet.ops import BatchNormState
from duet.params import Initializer, Parameter_Table
from duet.tensor import Array_T, Tensor, constant, no_grad

logger = logging.getLogger(__name__)

T = TypeVar('T')
Mask_T = Union[bitarray, Array_T]
Many_T = Union[T, Sequence[T]]


class DPBError(Exception):
    pass


@dataclass(frozen=True)
class DPBConfig:
    channels: int
    parts: int = 5
    reduction: int = 2
    enable_human: bool = True
    enable_latent: bool = True
    latent_mask: LatentMask = LatentMask.NONE
    mask_queries: bool = True
    g_transform: Transform = Transform.LINEAR_BN_RELU
    attention_transform: Transform = Transform.LINEAR
    value_transform: Transform = Transform.LINEAR_BN_RELU
    output_projection: bool = True

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise DPBError(f'DPB needs at least one channel, got {self.channels}')
        if self.parts < 1:
            raise DPBError(f'DPB needs at least one part, got {self.parts}')
        if self.reduction < 1 or self.channels % self.reduction:
            raise DPBError(f'Channels {self.channels} are not divisible by '
                           f'reduction {self.reduction}')
        if not (self.enable_human or self.enable_latent):
            raise DPBError('DPB needs at least one enabled branch')
        if self.attention_transform is Transform.LINEAR_BN_RELU:
            raise DPBError('theta/phi support identity or linear transforms only')
        if self.latent_mask is not LatentMask.NONE and not self.enable_latent:
            raise DPBError(f'Latent mask "{self.latent_mask.value}" needs the latent branch')

    @property
    def key_channels(self) -> int:
        if self.attention_transform is Transform.IDENTITY:
            return self.channels
        return self.channels // self.reduction


@dataclass
class PixelTransform:
    """A per-pixel transform: identity, 1x1 linear, or 1x1 linear + BN + ReLU."""
    kind: Transform
    weight: Optional[Tensor] = None
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    state: Optional[BatchNormState] = None

    @classmethod
    def build(cls,
              kind: Transform,
              name: str,
              c_in: int,
              c_out: int,
              init: Initializer) -> 'PixelTransform':
        if kind is Transform.IDENTITY:
            if c_in != c_out:
                raise DPBError(f'{name}: identity transform cannot map {c_in} '
                               f'channels to {c_out}')
            return cls(kind)
        weight = init.he_normal(f'{name}.weight', (c_out, c_in), fan_in=c_in)
        if kind is Transform.LINEAR:
            return cls(kind, weight)
        return cls(kind, weight,
                   init.ones(f'{name}.bn.gamma', (c_out,)),
                   init.zeros(f'{name}.bn.beta', (c_out,)),
                   BatchNormState.fresh(c_out))

    def __call__(self, x: Tensor, mode: NormMode) -> Tensor:
        if self.weight is None:
            return x
        y = ops.pointwise_linear(x, self.weight)
        if self.state is None:
            return y
        assert self.gamma is not None and self.beta is not None
        return ops.relu(ops.batch_norm(y, self.gamma, self.beta, self.state, mode))

    def parameters(self) -> List[Tensor]:
        return [t for t in (self.weight, self.gamma, self.beta) if t is not None]

    def register(self, table: Parameter_Table) -> None:
        for param in self.parameters():
            assert param.name is not None
            table.set(param.name, 'parameter', param)
        if self.state is not None and self.weight is not None:
            prefix = self.weight.name[:-len('.weight')] if self.weight.name else 'transform'
            table.set(f'{prefix}.bn.running_mean', 'buffer', self.state.running_mean)
            table.set(f'{prefix}.bn.running_var', 'buffer', self.state.running_var)


@dataclass
class DPBParams:
    config: DPBConfig
    g: PixelTransform
    theta: PixelTransform
    phi: PixelTransform
    psi: PixelTransform
    proj_human: Optional[Tensor] = None
    proj_latent: Optional[Tensor] = None

    @classmethod
    def initialize(cls,
                   config: DPBConfig,
                   init: Initializer,
                   prefix: str = 'dpb') -> 'DPBParams':
        """Fresh parameters; branch projections start at exactly zero."""
        C, Ck = config.channels, config.key_channels
        skip = PixelTransform(Transform.IDENTITY)
        g = theta = phi = psi = skip
        proj_human = proj_latent = None
        if config.enable_human:
            g = PixelTransform.build(config.g_transform, f'{prefix}.g', C, C, init)
            if config.output_projection:
                proj_human = init.zeros(f'{prefix}.proj_human', (C, C))
        if config.enable_latent:
            theta = PixelTransform.build(config.attention_transform,
                                         f'{prefix}.theta', C, Ck, init)
            phi = PixelTransform.build(config.attention_transform,
                                       f'{prefix}.phi', C, Ck, init)
            psi = PixelTransform.build(config.value_transform, f'{prefix}.psi', C, C, init)
            if config.output_projection:
                proj_latent = init.zeros(f'{prefix}.proj_latent', (C, C))
        return cls(config, g, theta, phi, psi, proj_human, proj_latent)

    def transforms(self) -> Iterator[PixelTransform]:
        yield from (self.g, self.theta, self.phi, self.psi)

    def parameters(self) -> List[Tensor]:
        params = [p for t in self.transforms() for p in t.parameters()]
        return params + [p for p in (self.proj_human, self.proj_latent) if p is not None]

    def register(self, table: Parameter_Table) -> None:
        for transform in self.transforms():
            transform.register(table)
        for proj in (self.proj_human, self.proj_latent):
            if proj is not None:
                assert proj.name is not None
                table.set(proj.name, 'parameter', proj)


def _listify(items: Many_T[T]) -> List[T]:
    if isinstance(items, (list, tuple)):
        return list(items)
    return [items]  # type: ignore


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return ops.reshape(x, (1, *x.shape)), True
    if x.ndim != 4:
        raise DPBError(f'DPB expects a [C, H, W] or [B, C, H, W] map, got {x.shape}')
    return x, False


def _unbatched(x: Tensor, single: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if single else x


def _check_maps(maps: Sequence[PartLabelMap], x: Tensor, K: int) -> None:
    batch, _, height, width = x.shape
    if len(maps) != batch:
        raise DPBError(f'{len(maps)} label maps for a batch of {batch}')
    for index, part_map in enumerate(maps):
        if (part_map.height, part_map.width) != (height, width):
            raise DPBError(f'Label map {index} is {part_map.height}x{part_map.width}, '
                           f'feature map is {height}x{width}')
        if part_map.K != K:
            raise DPBError(f'Label map {index} has K={part_map.K}, block expects K={K}')


def human_branch(x: Tensor,
                 conf: Many_T[ConfidenceMaps],
                 labels: Many_T[PartLabelMap],
                 params: DPBParams,
                 mode: NormMode = NormMode.TRAIN) -> Tensor:
    """Part pooling, g, and scatter back to member pixels.

    Only parts with at least one pixel reach g, so g's batch statistics
    cover the present parts of the whole batch and nothing else. Empty
    parts contribute zero. With a single present part there are no batch
    statistics to take and g normalizes with its running statistics.
    """
    K = params.config.parts
    x4, single = _batched(x)
    maps, confs = _listify(labels), _listify(conf)
    _check_maps(maps, x4, K)
    if len(confs) != len(maps) or any(c.K != K for c in confs):
        raise DPBError(f'Expected {len(maps)} confidence map sets with K={K}')
    batch, channels, height, width = x4.shape
    pixels = height * width

    pool = constant(np.stack([c.weights.T for c in confs]))
    scatter = constant(np.stack([
        (np.arange(K)[:, None] == m.flat[None, :]).astype(np.float64) for m in maps]))
    # rows pick the present (image, part) pairs out of the B*K part vectors
    present = np.flatnonzero(np.concatenate([c.present for c in confs]))
    select = np.zeros((1, present.size, batch * K))
    select[0, np.arange(present.size), present] = 1.0
    g_mode = mode if present.size >= 2 else NormMode.EVAL
    if g_mode is not mode:
        logger.debug('single present part, g uses running statistics')

    flat = ops.reshape(x4, (batch, channels, pixels))
    parts = ops.transpose(ops.matmul(flat, pool))
    parts = ops.matmul(constant(select), ops.reshape(parts, (1, batch * K, channels)))
    parts = ops.reshape(parts, (present.size, channels, 1, 1))
    parts = params.g(parts, g_mode)
    parts = ops.reshape(parts, (1, present.size, channels))
    parts = ops.matmul(constant(select.transpose(0, 2, 1).copy()), parts)
    parts = ops.transpose(ops.reshape(parts, (batch, K, channels)))
    out = ops.reshape(ops.matmul(parts, scatter), (batch, channels, height, width))
    return _unbatched(out, single)


def _mask_list(mask: Many_T[Mask_T], single: bool) -> List[Mask_T]:
    if single:
        return [mask]  # type: ignore
    if isinstance(mask, np.ndarray) and mask.ndim == 2:
        return list(mask)
    return _listify(mask)


def _mask_rows(masks: Sequence[Mask_T], batch: int, pixels: int) -> Array_T:
    rows = [mask_to_array(m) if isinstance(m, bitarray) else np.asarray(m, dtype=bool)
            for m in masks]
    if len(rows) != batch or any(r.shape != (pixels,) for r in rows):
        raise DPBError(f'Expected {batch} masks of {pixels} pixels')
    return np.stack(rows)


def _attention(x4: Tensor, params: DPBParams, mask: Optional[Array_T]) -> Tensor:
    batch, _, height, width = x4.shape
    pixels = height * width
    width_k = params.config.key_channels
    keys = ops.reshape(params.theta(x4, NormMode.TRAIN), (batch, width_k, pixels))
    queries = ops.reshape(params.phi(x4, NormMode.TRAIN), (batch, width_k, pixels))
    logits = ops.matmul(ops.transpose(queries), keys)
    if mask is None:
        return ops.softmax_rows(logits)
    key_mask = mask[:, None, :]
    query_mask = mask[:, :, None] if params.config.mask_queries else None
    return ops.softmax_rows(logits, key_mask=key_mask, query_mask=query_mask)


def attention_matrix(x: Tensor,
                     params: DPBParams,
                     mask: Optional[Many_T[Mask_T]] = None) -> Tensor:
    """Row-stochastic [N, N] (or [B, N, N]) weights; row i attends over keys j."""
    x4, single = _batched(x)
    rows = None
    if mask is not None:
        rows = _mask_rows(_mask_list(mask, single), x4.shape[0], x4.shape[2] * x4.shape[3])
    return _unbatched(_attention(x4, params, rows), single)


def _latent(x: Tensor,
            params: DPBParams,
            mode: NormMode,
            mask: Optional[Many_T[Mask_T]]) -> Tensor:
    x4, single = _batched(x)
    batch, channels, height, width = x4.shape
    pixels = height * width
    rows = None
    if mask is not None:
        rows = _mask_rows(_mask_list(mask, single), batch, pixels)
    weights = _attention(x4, params, rows)
    values = ops.reshape(params.psi(x4, mode), (batch, channels, pixels))
    out = ops.matmul(values, ops.transpose(weights))
    return _unbatched(ops.reshape(out, (batch, channels, height, width)), single)


def latent_branch(x: Tensor,
                  params: DPBParams,
                  mode: NormMode = NormMode.TRAIN) -> Tensor:
    """x^Latent_i = sum_j q_ij psi(x_j)."""
    return _latent(x, params, mode, None)


def latent_branch_masked(x: Tensor,
                         mask: Many_T[Mask_T],
                         params: DPBParams,
                         mode: NormMode = NormMode.TRAIN) -> Tensor:
    """Latent branch restricted to pixels where `mask` is set.

    Masked-out keys get zero weight; masked-out queries (unless the
    block is configured keys-only) output a zero vector, as do rows with
    no surviving key.
    """
    return _latent(x, params, mode, mask)


def branch_masks(maps: Sequence[PartLabelMap], mode: LatentMask) -> List[bitarray]:
    return [binary_human_mask(m, human=mode is LatentMask.KEEP_HUMAN_ONLY) for m in maps]


def dpb_forward(x: Tensor,
                labels: Optional[Many_T[PartLabelMap]],
                params: DPBParams,
                mode: NormMode = NormMode.TRAIN,
                mask_labels: Optional[Many_T[PartLabelMap]] = None) -> Tensor:
    """Z = X + P_h(X^Human) + P_l(X^Latent); disabled branches add nothing.

    Args:
        x: feature map(s)
        labels: part label maps at the feature resolution with K parts
        params: block parameters
        mode: normalization mode for g and psi
        mask_labels: maps (K >= 2, part 0 background) for the masked latent
            variants; defaults to `labels`
    """
    config = params.config
    z = x
    if config.enable_human:
        if labels is None:
            raise DPBError('The human branch needs part label maps')
        maps = _listify(labels)
        human = human_branch(x, [build_confidence_maps(m) for m in maps], maps, params, mode)
        if params.proj_human is not None:
            human = ops.pointwise_linear(human, params.proj_human)
        z = ops.add(z, human)
    if config.enable_latent:
        if config.latent_mask is LatentMask.NONE:
            latent = latent_branch(x, params, mode)
        else:
            source = mask_labels if mask_labels is not None else labels
            if source is None:
                raise DPBError('Masked latent attention needs parsing label maps')
            latent = latent_branch_masked(
                x, branch_masks(_listify(source), config.latent_mask), params, mode)
        if params.proj_latent is not None:
            latent = ops.pointwise_linear(latent, params.proj_latent)
        z = ops.add(z, latent)
    return z


def scale_to_gray(values: Array_T) -> Array_T:
    """Max-normalize non-negative weights onto 0..255."""
    array = np.asarray(values, dtype=np.float64)
    peak = array.max() if array.size else 0.0
    if peak <= 0:
        return np.zeros(array.shape, dtype=np.uint8)
    return np.clip(np.rint(array / peak * 255.0), 0, 255).astype(np.uint8)


def export_masks(x: Tensor,
                 labels: PartLabelMap,
                 params: DPBParams,
                 out_dir: Union[str, Path],
                 rows: Optional[Sequence[int]] = None,
                 mask_labels: Optional[PartLabelMap] = None) -> List[Path]:
    """Write part_<k>.pgm confidence maps and attn_<i>.pgm attention rows.

    Args:
        x: a single feature map [C, H, W]
        labels: its part label map
        params: block parameters
        out_dir: created if missing
        rows: query pixels whose attention rows are written; defaults to
            the first, centre and last pixel

    Returns:
        The written paths.
    """
    if x.ndim != 3:
        raise DPBError(f'export_masks takes a single [C, H, W] map, got {x.shape}')
    height, width = x.shape[1:]
    pixels = height * width
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as error:
        raise DPBError(f'Cannot create export directory {out}: {error}')

    written: List[Path] = []

    def emit(name: str, values: Array_T) -> None:
        path = out / name
        try:
            write_image(path, scale_to_gray(values).reshape(height, width))
        except OSError as error:
            raise DPBError(f'Cannot write {path}: {error}')
        written.append(path)

    conf = build_confidence_maps(labels)
    for k in range(conf.K):
        emit(f'part_{k}.pgm', conf.weights[k])

    if params.config.enable_latent:
        mask = None
        if params.config.latent_mask is not LatentMask.NONE:
            source = mask_labels if mask_labels is not None else labels
            mask = branch_masks([source], params.config.latent_mask)[0]
        with no_grad():
            weights = attention_matrix(x, params, mask).data
        for i in sorted(set(rows if rows is not None else (0, pixels // 2, pixels - 1))):
            if not 0 <= i < pixels:
                raise DPBError(f'Attention row {i} outside [0, {pixels})')
            emit(f'attn_{i}.pgm', weights[i])

    logger.info('masks exported',
                extra={'fields': {'dir': str(out), 'files': len(written)}})
    return written
