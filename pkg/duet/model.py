"""
The toy backbone with dual part-aligned blocks.

    image -> stem -> stage 1 -> [blocks] -> stage 2 -> [blocks] -> ...
          -> global average pooling -> FC + BN + ReLU (embedding)
          -> linear classifier (logits)

Construction is the first pass: every parameter and normalization buffer
is created through a seeded `Initializer` and registered by name in the
model's `Parameter_Table`. `forward` is the second pass over that table.
Raw parsing maps are grouped into K parts and resized to each insertion
point once per forward.
"""

import logging
import numpy as np
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple
from duet import ops
from duet.config import BackboneConfig
from duet.data import HarnessError
from duet.dpb import DPBParams, dpb_forward
from duet.masks import GroupingScheme, PartLabelMap, RawParsingMap, group_labels, resize_nearest
from duet.modes import LatentMask, NormMode
from duet.ops import BatchNormState
from duet.params import Initializer, Parameter_Table
from duet.tensor import Tensor, constant, no_grad

logger = logging.getLogger(__name__)

Maps_T = List[PartLabelMap]


@dataclass
class ConvBlock:
    """3x3 convolution, batch normalization, ReLU."""
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    state: BatchNormState
    stride: int

    @classmethod
    def build(cls,
              name: str,
              c_in: int,
              c_out: int,
              stride: int,
              init: Initializer) -> 'ConvBlock':
        return cls(init.he_normal(f'{name}.weight', (c_out, c_in, 3, 3), fan_in=9 * c_in),
                   init.ones(f'{name}.bn.gamma', (c_out,)),
                   init.zeros(f'{name}.bn.beta', (c_out,)),
                   BatchNormState.fresh(c_out),
                   stride)

    def __call__(self, x: Tensor, mode: NormMode) -> Tensor:
        y = ops.conv2d(x, self.weight, stride=self.stride, pad=1)
        return ops.relu(ops.batch_norm(y, self.gamma, self.beta, self.state, mode))

    def register(self, table: Parameter_Table) -> None:
        prefix = self.weight.name[:-len('.weight')] if self.weight.name else 'conv'
        for param in (self.weight, self.gamma, self.beta):
            assert param.name is not None
            table.set(param.name, 'parameter', param)
        table.set(f'{prefix}.bn.running_mean', 'buffer', self.state.running_mean)
        table.set(f'{prefix}.bn.running_var', 'buffer', self.state.running_var)


class Output(NamedTuple):
    embeddings: Tensor
    logits: Tensor


class Model:
    """Backbone, inserted blocks and head, with train/eval modes."""

    def __init__(self, config: BackboneConfig) -> None:
        self.config = config
        self.mode: NormMode = NormMode.TRAIN
        self.table: Parameter_Table = Parameter_Table()
        self.scheme: GroupingScheme = GroupingScheme.default(config.parts)
        self.mask_scheme: GroupingScheme = GroupingScheme.default(2)
        init = Initializer(config.seed)

        self.stem = ConvBlock.build('stem', 3, config.stem_width, config.stem_stride, init)
        self.stages: List[List[ConvBlock]] = []
        self.blocks: Dict[int, List[DPBParams]] = {}
        width = config.stem_width
        for index, (out, stride) in enumerate(zip(config.widths, config.strides), start=1):
            stage = [ConvBlock.build(f'stage{index}.conv{j}', width if j == 0 else out, out,
                                     stride if j == 0 else 1, init)
                     for j in range(config.blocks_per_stage)]
            self.stages.append(stage)
            width = out
            count = config.blocks_at(index)
            if count:
                self.blocks[index] = [
                    DPBParams.initialize(config.dpb_config(index), init,
                                         prefix=f'stage{index}.dpb{j}')
                    for j in range(count)]

        D = config.embedding_dim
        self.embed_weight = init.he_normal('head.embed.weight', (D, width), fan_in=width)
        self.embed_gamma = init.ones('head.embed.bn.gamma', (D,))
        self.embed_beta = init.zeros('head.embed.bn.beta', (D,))
        self.embed_state = BatchNormState.fresh(D)
        self.classifier_weight = init.normal('head.classifier.weight',
                                             (config.num_identities, D), std=0.01)
        self.classifier_bias = init.zeros('head.classifier.bias', (config.num_identities,))
        self._register()
        logger.debug('model built', extra={'fields': {
            'entries': len(self.table), 'blocks': config.total_blocks(),
            'stages': list(self.blocks)}})

    def _register(self) -> None:
        self.stem.register(self.table)
        for index, stage in enumerate(self.stages, start=1):
            for conv in stage:
                conv.register(self.table)
            for block in self.blocks.get(index, []):
                block.register(self.table)
        for param in (self.embed_weight, self.embed_gamma, self.embed_beta,
                      self.classifier_weight, self.classifier_bias):
            assert param.name is not None
            self.table.set(param.name, 'parameter', param)
        self.table.set('head.embed.bn.running_mean', 'buffer', self.embed_state.running_mean)
        self.table.set('head.embed.bn.running_var', 'buffer', self.embed_state.running_var)

    def train(self) -> 'Model':
        self.mode = NormMode.TRAIN
        return self

    def eval(self) -> 'Model':
        self.mode = NormMode.EVAL
        return self

    def parameters(self) -> List[Tensor]:
        return self.table.parameters()

    def dpb_params(self) -> List[DPBParams]:
        return [block for stage in sorted(self.blocks) for block in self.blocks[stage]]

    def _stage_maps(self,
                    raw: Sequence[RawParsingMap],
                    scheme: GroupingScheme) -> Dict[int, Maps_T]:
        grouped = [group_labels(m, scheme) for m in raw]
        resized: Dict[int, Maps_T] = {}
        for stage in self.blocks:
            height, width = self.config.feature_shape(stage)
            resized[stage] = [resize_nearest(m, height, width) for m in grouped]
        return resized

    def _check_inputs(self, images: Tensor, raw: Sequence[RawParsingMap]) -> None:
        expected = (3, self.config.image_height, self.config.image_width)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise HarnessError(f'Images must be [B, {expected[0]}, {expected[1]}, '
                               f'{expected[2]}], got {images.shape}')
        if self.blocks and len(raw) != images.shape[0]:
            raise HarnessError(f'{len(raw)} label maps for {images.shape[0]} images')
        for index, m in enumerate(raw):
            if (m.height, m.width) != expected[1:]:
                raise HarnessError(f'Label map {index} is {m.height}x{m.width}, '
                                   f'images are {expected[1]}x{expected[2]}')

    def _trunk(self,
               images: Tensor,
               raw: Sequence[RawParsingMap],
               tap: Optional[int] = None) -> Tuple[Tensor, Optional[Tensor]]:
        self._check_inputs(images, raw)
        maps = self._stage_maps(raw, self.scheme) if self.blocks else {}
        masks: Dict[int, Maps_T] = {}
        if self.blocks and self.config.latent_mask is not LatentMask.NONE:
            masks = self._stage_maps(raw, self.mask_scheme)
        tapped: Optional[Tensor] = None
        x = self.stem(images, self.mode)
        for index, stage in enumerate(self.stages, start=1):
            for conv in stage:
                x = conv(x, self.mode)
            if index == tap:
                tapped = x
            for block in self.blocks.get(index, []):
                x = dpb_forward(x, maps[index], block, self.mode, masks.get(index))
        return x, tapped

    def _head(self, x: Tensor) -> Output:
        pooled = ops.global_avg_pool(x)
        embedded = ops.linear(pooled, self.embed_weight)
        embedded = ops.relu(ops.batch_norm(embedded, self.embed_gamma, self.embed_beta,
                                           self.embed_state, self.mode))
        logits = ops.linear(embedded, self.classifier_weight, self.classifier_bias)
        return Output(embedded, logits)

    def forward(self, images: Tensor, raw: Sequence[RawParsingMap] = ()) -> Output:
        """Embeddings [B, D] and logits [B, num_identities] of an image batch.

        Raises:
            HarnessError: image or label map geometry does not match the config
        """
        x, _ = self._trunk(images, raw)
        return self._head(x)

    __call__ = forward

    def embed(self, images: np.ndarray, raw: Sequence[RawParsingMap] = ()) -> np.ndarray:
        """Eval-mode embeddings of a [B, 3, H, W] array, nothing recorded."""
        previous, self.mode = self.mode, NormMode.EVAL
        try:
            with no_grad():
                return self.forward(constant(images), raw).embeddings.numpy()
        finally:
            self.mode = previous

    def stage_features(self,
                       image: np.ndarray,
                       raw: RawParsingMap,
                       stage: int) -> Tensor:
        """Eval-mode input [C, H, W] of the first block after `stage`."""
        if stage not in self.blocks:
            raise HarnessError(f'No block is inserted after stage {stage}')
        previous, self.mode = self.mode, NormMode.EVAL
        try:
            with no_grad():
                _, tapped = self._trunk(constant(image[None]), [raw], tap=stage)
        finally:
            self.mode = previous
        assert tapped is not None
        return ops.reshape(tapped, tapped.shape[1:])


def build_model(config: BackboneConfig) -> Model:
    """A freshly initialised model; block output projections start at zero."""
    return Model(config)
