"""
Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a read-only numpy array. Differentiable kernels are
`Function` subclasses (see `duet.ops`); applying one inside an active
`Graph` appends a node to that graph, and `Graph.backward` walks the
nodes in exact reverse execution order.

Usage:
    with Graph() as graph:
        loss = ops.sum_all(ops.relu(x))
        graph.backward(loss)
    x.grad
"""

import types
import logging
import contextlib
import numpy as np
from typing import (Any, Callable, ClassVar, Dict, Iterable, Iterator,
                    List, NamedTuple, Optional, Sequence, Tuple, Type, Union)

logger = logging.getLogger(__name__)

Shape_T = Tuple[int, ...]
Array_T = np.ndarray
Data_T = Union[Array_T, float, int, Sequence[Any]]

MAX_RANK = 4


class TensorError(Exception):
    pass


class GraphError(Exception):
    pass


class Runtime:
    """Process-wide numeric settings.

    dtype         - precision of newly created tensors (float32 for training,
                    float64 for gradient checks)
    deterministic - forces sequential evaluation; every kernel here already
                    reduces in a fixed order, so this is recorded with runs
    debug         - check every kernel output for NaN/Inf on finite inputs
    """

    dtype: ClassVar[np.dtype] = np.dtype(np.float32)
    deterministic: ClassVar[bool] = True
    debug: ClassVar[bool] = False


def set_precision(dtype: Union[str, type, np.dtype]) -> None:
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TensorError(f'Unsupported precision "{resolved}", '
                          f'expected float32 or float64')
    Runtime.dtype = resolved


@contextlib.contextmanager
def precision(dtype: Union[str, type, np.dtype]) -> Iterator[None]:
    """Temporarily switch the precision of newly created tensors."""
    previous = Runtime.dtype
    set_precision(dtype)
    try:
        yield
    finally:
        Runtime.dtype = previous


@contextlib.contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    previous = Runtime.debug
    Runtime.debug = enabled
    try:
        yield
    finally:
        Runtime.debug = previous


class Tensor:
    """A dense value grid of rank at most 4.

    `data` is always a contiguous, read-only array; `assign` replaces it
    wholesale (the optimizer and the gradient checker use this), so a
    tensor observed during a forward pass never changes under it.
    `grad`, once populated, has the shape of `data` and is accumulated
    by summation until `zero_grad` is called.
    """

    def __init__(self,
                 data: Data_T,
                 requires_grad: bool = False,
                 name: Optional[str] = None,
                 dtype: Optional[np.dtype] = None) -> None:
        array = np.array(data, dtype=dtype or Runtime.dtype)
        self._set(array)
        self.requires_grad: bool = requires_grad
        self.grad: Optional[Array_T] = None
        self.name: Optional[str] = name
        self.produced: bool = False  # True for kernel outputs

    @classmethod
    def wrap(cls, array: Array_T, requires_grad: bool) -> 'Tensor':
        """Adopt a kernel output without copying it."""
        tensor = cls.__new__(cls)
        tensor._set(array)
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        tensor.produced = True
        return tensor

    def _set(self, array: Array_T) -> None:
        if array.ndim > MAX_RANK:
            raise TensorError(f'Tensor rank {array.ndim} exceeds {MAX_RANK}')
        array = np.ascontiguousarray(array)
        array.flags.writeable = False
        self.data: Array_T = array

    @property
    def shape(self) -> Shape_T:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    def item(self) -> float:
        if self.size != 1:
            raise TensorError(f'item() needs a single value, shape is {self.shape}')
        return float(self.data.reshape(()))

    def numpy(self) -> Array_T:
        return self.data.copy()

    def assign(self, array: Data_T) -> None:
        """Replace the value, keeping shape and dtype."""
        replacement = np.array(array, dtype=self.dtype)
        if replacement.shape != self.data.shape:
            raise TensorError(f'Cannot assign shape {replacement.shape} '
                              f'to tensor of shape {self.shape}')
        self._set(replacement)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: Array_T) -> None:
        if grad.shape != self.data.shape:
            raise GraphError(f'Gradient shape {grad.shape} does not match '
                             f'tensor shape {self.shape}'
                             f'{" for " + self.name if self.name else ""}')
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.dtype)
        else:
            self.grad = self.grad + grad

    def __repr__(self) -> str:
        label = f' name={self.name}' if self.name else ''
        return (f'Tensor(shape={self.shape}, dtype={self.dtype}, '
                f'requires_grad={self.requires_grad}{label})')


def constant(data: Data_T) -> Tensor:
    """A tensor that never receives gradients (masks, pooling matrices)."""
    return Tensor(data, requires_grad=False)


def parameter(data: Data_T, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Node(NamedTuple):
    function: 'Function'
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Graph:
    """Append-only record of executed kernels.

    A graph is made active with `with Graph() as graph:`; kernels applied
    while it is active and having at least one gradient-requiring input
    are recorded. `backward` may run once per recording; `reset` clears
    the record so the graph can be reused.
    """

    _stack: ClassVar[List[Optional['Graph']]] = []

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._consumed: bool = False

    def __enter__(self) -> 'Graph':
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        Graph._stack.pop()

    @classmethod
    def current(cls) -> Optional['Graph']:
        return cls._stack[-1] if cls._stack else None

    def record(self, node: Node) -> None:
        if self._consumed:
            raise GraphError('Graph already ran backward; call reset() '
                             'before recording a new pass')
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self._consumed = False

    def leaves(self) -> List[Tensor]:
        seen: Dict[int, Tensor] = {}
        for node in self.nodes:
            for tensor in node.inputs:
                if not tensor.produced and tensor.requires_grad:
                    seen.setdefault(id(tensor), tensor)
        return list(seen.values())

    def backward(self,
                 loss: Tensor,
                 params: Optional[Iterable[Tensor]] = None) -> None:
        """Populate gradients of `loss` with respect to every leaf.

        Leaf gradients are summed into `Tensor.grad`. Leaves in the graph
        and any extra `params` that the loss does not reach end up with a
        zero gradient rather than none.
        """
        if self._consumed:
            raise GraphError('backward called twice on the same graph '
                             'without reset()')
        if loss.size != 1:
            raise GraphError(f'backward needs a scalar loss, got shape {loss.shape}')
        if not self.nodes:
            raise GraphError('backward called on an empty graph')

        pending: Dict[int, Array_T] = {id(loss): np.ones_like(loss.data)}
        if not loss.produced and loss.requires_grad:
            loss.accumulate(pending.pop(id(loss)))

        for node in reversed(self.nodes):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            input_grads = node.function.backward(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.produced:
                    key = id(tensor)
                    if key in pending:
                        pending[key] = pending[key] + grad
                    else:
                        pending[key] = grad
                else:
                    tensor.accumulate(grad)

        for tensor in [*self.leaves(), *(params or [])]:
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
        self._consumed = True
        logger.debug('backward over %d nodes', len(self.nodes))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording onto any active graph."""
    Graph._stack.append(None)
    try:
        yield
    finally:
        Graph._stack.pop()


def _checked(forward: Callable[..., Array_T], name: str) -> Callable[..., Array_T]:
    """Wrap a kernel's forward pass with the debug-mode finiteness check."""

    def run(self: 'Function', *arrays: Array_T) -> Array_T:
        out = forward(self, *arrays)
        if Runtime.debug and not np.all(np.isfinite(out)):
            if all(np.all(np.isfinite(a)) for a in arrays):
                raise TensorError(f'{name} produced NaN/Inf from finite inputs')
        return out

    run.__name__ = forward.__name__
    run.__doc__ = forward.__doc__
    return run


class Differentiable(type):
    """Metaclass of every kernel.

    Wraps each kernel's `forward` with the debug finiteness check and
    keeps a registry of kernel classes, which the gradient suite walks.
    """

    registry: ClassVar[Dict[str, type]] = {}

    def __new__(mcs, name: str, bases: Any, attr: Dict[str, Any]) -> Any:
        forward = attr.get('forward')
        if isinstance(forward, types.FunctionType):
            attr['forward'] = _checked(forward, name)
        cls = super(Differentiable, mcs).__new__(mcs, name, bases, attr)
        if bases:
            Differentiable.registry[name] = cls
        return cls


class Function(metaclass=Differentiable):
    """Base class of differentiable kernels.

    `forward` receives the input arrays and saves whatever `backward`
    needs on `self`. `backward` receives dLoss/dOutput and returns one
    entry per input: an array shaped like that input, or None.
    """

    def forward(self, *arrays: Array_T) -> Array_T:
        raise NotImplementedError

    def backward(self, grad: Array_T) -> Tuple[Optional[Array_T], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls: Type['Function'], *tensors: Tensor, **options: Any) -> Tensor:
        function = cls(**options)
        out = function.forward(*(t.data for t in tensors))
        requires_grad = any(t.requires_grad for t in tensors)
        result = Tensor.wrap(np.asarray(out, dtype=tensors[0].dtype), requires_grad)
        graph = Graph.current()
        if graph is not None and requires_grad:
            graph.record(Node(function, tuple(tensors), result))
        return result
