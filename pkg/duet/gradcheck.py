"""
Central finite-difference checks of the analytic gradients.

`grad_check` compares backward against (f(p + eps) - f(p - eps)) / 2 eps
entry by entry. `gradient_suite` runs it over every kernel, both block
branches, the masked branch, the full block and both losses.
"""

import logging
import numpy as np
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Set, Tuple
from duet import ops
from duet.dpb import (DPBConfig, DPBParams, dpb_forward, human_branch,
                      latent_branch, latent_branch_masked)
from duet.losses import EmbeddingBatch, batch_hard_triplet, softmax_ce
from duet.masks import PartLabelMap, build_confidence_maps
from duet.modes import LatentMask, NormMode
from duet.ops import BatchNormState
from duet.params import Initializer
from duet.tensor import Graph, Runtime, Tensor, constant, no_grad, parameter, precision

logger = logging.getLogger(__name__)

Forward_T = Callable[[], Tensor]
Case_T = Tuple[Forward_T, List[Tensor]]
Builder_T = Callable[[np.random.Generator], Case_T]

ELEMENTARY_TOLERANCE = 1e-6
COMPOSITE_TOLERANCE = 1e-4


class GradCheckError(Exception):
    pass


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def grad_check(forward_fn: Forward_T,
               params: Sequence[Tensor],
               eps: float = 1e-3) -> float:
    """Max relative error between backward and central differences.

    Args:
        forward_fn: builds the scalar loss from the current parameter values
        params: 64-bit tensors to differentiate against
        eps: finite-difference step

    Returns:
        max over every entry of |a - n| / max(|a|, |n|, 1e-8)

    Raises:
        GradCheckError: not running at 64-bit, or the loss is not a scalar
    """
    if Runtime.dtype != np.float64 or any(p.dtype != np.float64 for p in params):
        raise GradCheckError('grad_check must run at float64 precision')
    for param in params:
        param.zero_grad()
        param.requires_grad = True

    with Graph() as graph:
        loss = forward_fn()
        if loss.size != 1:
            raise GradCheckError(f'grad_check needs a scalar loss, got shape {loss.shape}')
        graph.backward(loss, params)

    worst = 0.0
    for param in params:
        assert param.grad is not None
        analytic = param.grad.copy()
        original = param.numpy()
        numeric = np.zeros_like(original)
        for index in range(original.size):
            probe = original.copy()
            probe.flat[index] += eps
            param.assign(probe)
            with no_grad():
                upper = forward_fn().item()
            probe.flat[index] -= 2 * eps
            param.assign(probe)
            with no_grad():
                lower = forward_fn().item()
            numeric.flat[index] = (upper - lower) / (2 * eps)
        param.assign(original)
        if original.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


class CheckResult(NamedTuple):
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


class Case(NamedTuple):
    name: str
    build: Builder_T
    tolerance: float
    eps: float
    covers: Tuple[str, ...]


CASES: List[Case] = []


def case(name: str,
         covers: Tuple[str, ...] = (),
         tolerance: float = ELEMENTARY_TOLERANCE,
         eps: float = 1e-5) -> Callable[[Builder_T], Builder_T]:
    def register(build: Builder_T) -> Builder_T:
        CASES.append(Case(name, build, tolerance, eps, covers))
        return build
    return register


def covered_kernels() -> Set[str]:
    return {kernel for entry in CASES for kernel in entry.covers}


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    """A weighted sum, so the loss has no flat directions."""
    weights = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
    return ops.sum_all(ops.mul(out, constant(weights)))


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


@case('conv2d', ('Conv2d',))
def _conv2d(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 2, 5, 5)))
    w = parameter(rng.normal(size=(3, 2, 3, 3)))
    return lambda: _weighted(ops.conv2d(x, w, stride=1, pad=1), rng), [x, w]


@case('conv2d_strided', ('Conv2d',))
def _conv2d_strided(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 5, 5)))
    w = parameter(rng.normal(size=(2, 2, 3, 3)))
    return lambda: _weighted(ops.conv2d(x, w, stride=2, pad=1), rng), [x, w]


@case('pointwise_linear', ('PointwiseLinear',))
def _pointwise(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 3, 2, 2)))
    w = parameter(rng.normal(size=(4, 3)))
    b = parameter(rng.normal(size=(4,)))
    return lambda: _weighted(ops.pointwise_linear(x, w, b), rng), [x, w, b]


@case('linear', ('Linear',))
def _linear(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(3, 4)))
    w = parameter(rng.normal(size=(5, 4)))
    b = parameter(rng.normal(size=(5,)))
    return lambda: _weighted(ops.linear(x, w, b), rng), [x, w, b]


@case('batch_norm_train', ('BatchNorm',))
def _batch_norm_train(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(1.0, 2.0, size=(3, 2, 2, 2)))
    gamma = parameter(rng.normal(size=(2,)))
    beta = parameter(rng.normal(size=(2,)))
    state = BatchNormState.fresh(2)
    return (lambda: _weighted(ops.batch_norm(x, gamma, beta, state, NormMode.TRAIN), rng),
            [x, gamma, beta])


@case('batch_norm_eval', ('BatchNorm',))
def _batch_norm_eval(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 3, 2)))
    gamma = parameter(rng.normal(size=(3,)))
    beta = parameter(rng.normal(size=(3,)))
    state = BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    return (lambda: _weighted(ops.batch_norm(x, gamma, beta, state, NormMode.EVAL), rng),
            [x, gamma, beta])


@case('add_sub', ('Add', 'Sub'))
def _add_sub(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 3)))
    y = parameter(rng.normal(size=(2, 3)))
    return lambda: _weighted(ops.sub(ops.add(x, y), ops.mul(y, y)), rng), [x, y]


@case('mul_broadcast', ('Mul',))
def _mul(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 3, 4)))
    y = parameter(rng.normal(size=(2, 1, 4)))
    return lambda: _weighted(ops.mul(x, y), rng), [x, y]


@case('relu_scale_shift', ('Relu', 'Scale', 'Shift'))
def _relu(rng: np.random.Generator) -> Case_T:
    x = parameter(_away_from_zero(rng, (3, 4)))
    return lambda: _weighted(ops.shift(ops.scale(ops.relu(x), 2.5), -0.5), rng), [x]


@case('softmax_rows', ('SoftmaxRows',))
def _softmax(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 3, 5)))
    return lambda: _weighted(ops.softmax_rows(x), rng), [x]


@case('softmax_rows_masked', ('SoftmaxRows',))
def _softmax_masked(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 3, 5)))
    keys = np.array([[[True, False, True, True, False]], [[False, True, True, False, True]]])
    queries = np.array([[[True], [False], [True]], [[True], [True], [False]]])
    return (lambda: _weighted(ops.softmax_rows(x, key_mask=keys, query_mask=queries), rng),
            [x])


@case('global_avg_pool', ('GlobalAvgPool',))
def _gap(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 3, 2, 3)))
    return lambda: _weighted(ops.global_avg_pool(x), rng), [x]


@case('matmul_transpose', ('Matmul', 'Transpose'))
def _matmul(rng: np.random.Generator) -> Case_T:
    a = parameter(rng.normal(size=(2, 3, 4)))
    b = parameter(rng.normal(size=(2, 3, 2)))
    return lambda: _weighted(ops.matmul(ops.transpose(a), b), rng), [a, b]


@case('reshape_sum_mean', ('Reshape', 'Sum', 'Mean'))
def _reshape(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(2, 6)))
    w = constant(rng.normal(size=(3, 4)))

    def forward() -> Tensor:
        y = ops.mul(ops.reshape(x, (3, 4)), w)
        return ops.add(ops.sum_all(ops.mul(y, y)), ops.mean_all(y))
    return forward, [x]


@case('l2_normalize', ('L2Normalize',))
def _l2(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.normal(size=(3, 4)))
    return lambda: _weighted(ops.l2_normalize(x), rng), [x]


@case('pairwise_distance', ('PairwiseDistance',))
def _pairwise(rng: np.random.Generator) -> Case_T:
    e = parameter(rng.normal(size=(4, 3)))
    return lambda: _weighted(ops.pairwise_distance(e), rng), [e]


@case('masked_extreme', ('MaskedExtreme',))
def _extreme(rng: np.random.Generator) -> Case_T:
    x = parameter(rng.permutation(15).reshape(3, 5) * 0.3 + rng.uniform(0, 0.01, (3, 5)))
    mask = np.array([[1, 0, 1, 1, 0], [0, 1, 0, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)

    def forward() -> Tensor:
        return _weighted(ops.sub(ops.masked_max(x, mask), ops.masked_min(x, ~mask | mask)), rng)
    return forward, [x]


@case('softmax_cross_entropy', ('SoftmaxCrossEntropy',))
def _ce(rng: np.random.Generator) -> Case_T:
    logits = parameter(rng.normal(size=(4, 5)))
    labels = np.array([0, 3, 3, 1])
    return lambda: ops.softmax_cross_entropy(logits, labels), [logits]


def _block(rng: np.random.Generator,
           config: DPBConfig,
           batch: int = 2) -> Tuple[Tensor, List[PartLabelMap], DPBParams]:
    """A random 4x4 input, label maps using every part, and randomized weights."""
    x = parameter(rng.normal(size=(batch, config.channels, 4, 4)))
    maps = []
    for _ in range(batch):
        labels = np.concatenate([np.arange(config.parts),
                                 rng.integers(0, config.parts, 16 - config.parts)])
        maps.append(PartLabelMap(rng.permutation(labels).reshape(4, 4), config.parts))
    params = DPBParams.initialize(config, Initializer(int(rng.integers(1 << 30))))
    for proj in (params.proj_human, params.proj_latent):
        if proj is not None:
            proj.assign(rng.normal(0.0, 0.5, size=proj.shape))
    return x, maps, params


def _block_params(x: Tensor, params: DPBParams) -> List[Tensor]:
    return [x, *params.parameters()]


@case('human_branch', tolerance=COMPOSITE_TOLERANCE, eps=1e-6)
def _human(rng: np.random.Generator) -> Case_T:
    config = DPBConfig(channels=6, parts=5, enable_latent=False)
    x, maps, params = _block(rng, config)
    conf = [build_confidence_maps(m) for m in maps]
    return lambda: _weighted(human_branch(x, conf, maps, params), rng), _block_params(x, params)


@case('human_branch_empty_parts', tolerance=COMPOSITE_TOLERANCE, eps=1e-6)
def _human_sparse(rng: np.random.Generator) -> Case_T:
    config = DPBConfig(channels=6, parts=5, enable_latent=False)
    x, _, params = _block(rng, config)
    maps = [PartLabelMap(rng.choice([0, 2, 3], size=(4, 4)), 5) for _ in range(2)]
    conf = [build_confidence_maps(m) for m in maps]
    return lambda: _weighted(human_branch(x, conf, maps, params), rng), _block_params(x, params)


@case('latent_branch', tolerance=COMPOSITE_TOLERANCE, eps=1e-6)
def _latent(rng: np.random.Generator) -> Case_T:
    config = DPBConfig(channels=6, enable_human=False)
    x, _, params = _block(rng, config)
    return lambda: _weighted(latent_branch(x, params), rng), _block_params(x, params)


@case('latent_branch_masked', tolerance=COMPOSITE_TOLERANCE, eps=1e-6)
def _latent_masked(rng: np.random.Generator) -> Case_T:
    config = DPBConfig(channels=6, enable_human=False)
    x, _, params = _block(rng, config)
    mask = rng.uniform(size=(2, 16)) < 0.6
    mask[:, 0] = True
    return (lambda: _weighted(latent_branch_masked(x, mask, params), rng),
            _block_params(x, params))


@case('dpb_forward', tolerance=COMPOSITE_TOLERANCE, eps=1e-6)
def _dpb(rng: np.random.Generator) -> Case_T:
    config = DPBConfig(channels=6, parts=5)
    x, maps, params = _block(rng, config)
    return lambda: _weighted(dpb_forward(x, maps, params), rng), _block_params(x, params)


@case('dpb_forward_masked', tolerance=COMPOSITE_TOLERANCE, eps=1e-6)
def _dpb_masked(rng: np.random.Generator) -> Case_T:
    config = DPBConfig(channels=6, parts=5, latent_mask=LatentMask.KEEP_NONHUMAN_ONLY)
    x, maps, params = _block(rng, config)
    return lambda: _weighted(dpb_forward(x, maps, params), rng), _block_params(x, params)


@case('batch_hard_triplet', tolerance=COMPOSITE_TOLERANCE, eps=1e-6)
def _triplet(rng: np.random.Generator) -> Case_T:
    embeddings = parameter(rng.normal(size=(8, 4)))
    labels = np.repeat(np.arange(4), 2)
    return (lambda: batch_hard_triplet(EmbeddingBatch(embeddings, labels), margin=2.0),
            [embeddings])


@case('softmax_ce', tolerance=COMPOSITE_TOLERANCE, eps=1e-6)
def _softmax_ce(rng: np.random.Generator) -> Case_T:
    logits = parameter(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, size=6)
    return lambda: softmax_ce(logits, labels), [logits]


def gradient_suite(seed: int = 0,
                   eps: Optional[float] = None,
                   names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """Run the registered cases at float64.

    Args:
        seed: seeds every case's inputs
        eps: overrides each case's own finite-difference step
        names: restricts the run to these case names
    """
    results: List[CheckResult] = []
    with precision(np.float64):
        for index, entry in enumerate(CASES):
            if names is not None and entry.name not in names:
                continue
            rng = np.random.default_rng([seed, index])
            forward, params = entry.build(rng)
            # weights drawn inside `forward` must repeat on every call
            state = rng.bit_generator.state
            frozen = _replay(forward, rng, state)
            error = grad_check(frozen, params, eps if eps is not None else entry.eps)
            result = CheckResult(entry.name, error, entry.tolerance)
            logger.info('gradient check', extra={'fields': {
                'case': result.name, 'error': result.error,
                'tolerance': result.tolerance, 'passed': result.passed}})
            results.append(result)
    return results


def _replay(forward: Forward_T, rng: np.random.Generator, state: Dict) -> Forward_T:
    def run() -> Tensor:
        rng.bit_generator.state = state
        return forward()
    return run
