#!/usr/bin/env python3
"""
Tensor Core for gatdet
numpy 기반 최소 텐서 연산과 define-by-run tape 역전파
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.special import softmax as _scipy_softmax

from detector_errors import DimensionError, NumericError, ParameterError

logger = logging.getLogger("gatdet-tensor")

DTYPE = np.float64
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99

ArrayLike = Union[np.ndarray, Sequence[float], float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """float64 row-major 배열 + 기록된 tape 위치"""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data: ArrayLike, tape: Optional["Tape"] = None, index: Optional[int] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tracked = f", tape_index={self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"


@dataclass
class TapeNode:
    """tape에 기록된 연산 하나"""

    op: str
    inputs: Tuple[Optional[int], ...]
    backward: Optional[BackwardFn]
    shape: Tuple[int, ...]


class ParameterStore:
    """이름 붙은 학습 파라미터와 batch-norm running 통계 저장소"""

    def __init__(self):
        self._values: Dict[str, np.ndarray] = {}
        self._trainable: Dict[str, bool] = {}
        self._bn_stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def add(self, name: str, value: ArrayLike, trainable: bool = True):
        if name in self._values:
            raise ParameterError(f"parameter '{name}' already registered")
        self._values[name] = np.array(value, dtype=DTYPE)
        self._trainable[name] = trainable

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            raise ParameterError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def set(self, name: str, value: np.ndarray):
        current = self[name]
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != current.shape:
            raise DimensionError(f"parameter '{name}' shape {current.shape} != {value.shape}")
        self._values[name] = value.copy()

    def names(self) -> List[str]:
        return list(self._values.keys())

    def trainable_names(self) -> List[str]:
        return [name for name in self._values if self._trainable[name]]

    def is_trainable(self, name: str) -> bool:
        return self._trainable.get(name, False)

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        return self._values.items()

    def add_batchnorm_stats(self, key: str, width: int):
        self._bn_stats[key] = (np.zeros(width, dtype=DTYPE), np.ones(width, dtype=DTYPE))

    def batchnorm_stats(self, key: str) -> Tuple[np.ndarray, np.ndarray]:
        try:
            return self._bn_stats[key]
        except KeyError:
            raise ParameterError(f"unknown batch-norm statistics '{key}'") from None

    def set_batchnorm_stats(self, key: str, mean: np.ndarray, var: np.ndarray):
        self._bn_stats[key] = (np.array(mean, dtype=DTYPE), np.array(var, dtype=DTYPE))

    def batchnorm_items(self) -> Iterable[Tuple[str, Tuple[np.ndarray, np.ndarray]]]:
        return self._bn_stats.items()

    def apply_batchnorm_updates(self, updates: Dict[str, Tuple[np.ndarray, np.ndarray]],
                                momentum: float = BN_MOMENTUM):
        """forward에서 모은 batch 통계를 running 통계에 반영"""
        for key, (batch_mean, batch_var) in updates.items():
            mean, var = self.batchnorm_stats(key)
            self._bn_stats[key] = (momentum * mean + (1.0 - momentum) * batch_mean,
                                   momentum * var + (1.0 - momentum) * batch_var)

    def copy(self) -> "ParameterStore":
        clone = ParameterStore()
        for name, value in self._values.items():
            clone.add(name, value.copy(), self._trainable[name])
        for key, (mean, var) in self._bn_stats.items():
            clone.set_batchnorm_stats(key, mean.copy(), var.copy())
        return clone


class Tape:
    """append-only 연산 기록 (forward 마다 새로 생성)"""

    def __init__(self, params: Optional[ParameterStore] = None):
        self.nodes: List[TapeNode] = []
        self.params = params if params is not None else ParameterStore()
        self._watched: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, data: np.ndarray, inputs: Sequence[Optional[int]],
               backward: Optional[BackwardFn]) -> Tensor:
        for idx in inputs:
            if idx is not None and idx >= len(self.nodes):
                raise ValueError(f"tape input {idx} recorded after node {len(self.nodes)}")
        self.nodes.append(TapeNode(op, tuple(inputs), backward, tuple(data.shape)))
        return Tensor(data, tape=self, index=len(self.nodes) - 1)

    def watch(self, name: str) -> Tensor:
        """등록된 파라미터를 leaf 노드로 연결 (이름당 한 번)"""
        if name not in self._watched:
            value = self.params[name]
            leaf = self.record("parameter", value.copy(), (), None)
            self._watched[name] = leaf.index
        return Tensor(self.params[name], tape=self, index=self._watched[name])

    def watched_index(self, name: str) -> Optional[int]:
        return self._watched.get(name)


class ParameterBinding:
    """forward 동안 파라미터를 Tensor로 제공하고 batch-norm 통계를 수집"""

    def __init__(self, store: ParameterStore, tape: Optional[Tape] = None, training: bool = False):
        if tape is not None and tape.params is not store:
            raise ValueError("tape is bound to a different parameter store")
        self.store = store
        self.tape = tape
        self.training = training
        self.bn_updates: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def __getitem__(self, name: str) -> Tensor:
        if self.tape is not None:
            return self.tape.watch(name)
        return Tensor(self.store[name])


# ----------------------------------------------------------------------------
# 내부 유틸
# ----------------------------------------------------------------------------

def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(data: np.ndarray, op: str):
    if data.size and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    _check_finite(data, op)
    tape = None
    for tensor in inputs:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise ValueError(f"{op}: inputs recorded on different tapes")
    if tape is None:
        return Tensor(data)
    indices = [t.index if t.tape is tape else None for t in inputs]
    return tape.record(op, data, indices, backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _segment_layout(segment_ids: np.ndarray, num_segments: int):
    """segment id 정렬 순서, 존재하는 segment, 시작 위치, 길이"""
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= num_segments):
        raise DimensionError(f"segment ids out of range [0, {num_segments})")
    order = np.argsort(segment_ids, kind="stable")
    present, starts, counts = np.unique(segment_ids[order], return_index=True, return_counts=True)
    return segment_ids, order, present, starts, counts


def _segment_matrix(segment_ids: np.ndarray, num_segments: int) -> sparse.csr_matrix:
    count = segment_ids.shape[0]
    return sparse.csr_matrix((np.ones(count, dtype=DTYPE), (segment_ids, np.arange(count))),
                             shape=(num_segments, count))


# ----------------------------------------------------------------------------
# 미분 가능한 연산
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """행렬 곱 (m×k)·(k×n)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    a_data, b_data = a.data, b.data

    def backward(grad):
        return grad @ b_data.T, a_data.T @ grad

    return _record("matmul", a_data @ b_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    shape_a, shape_b = a.shape, b.shape

    def backward(grad):
        return _unbroadcast(grad, shape_a), _unbroadcast(grad, shape_b)

    return _record("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    shape_a, shape_b = a.shape, b.shape

    def backward(grad):
        return _unbroadcast(grad, shape_a), -_unbroadcast(grad, shape_b)

    return _record("sub", a.data - b.data, (a, b), backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("elementwise_mul", a, b)
    a_data, b_data = a.data, b.data

    def backward(grad):
        return _unbroadcast(grad * b_data, a_data.shape), _unbroadcast(grad * a_data, b_data.shape)

    return _record("elementwise_mul", a_data * b_data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def backward(grad):
        return (grad * factor,)

    return _record("scale", a.data * factor, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(grad):
        return (grad * mask,)

    return _record("relu", np.where(mask, a.data, 0.0), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """axis 방향 연결"""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no inputs")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(grad):
        return np.split(grad, splits, axis=axis)

    return _record("concat", data, tensors, backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: {e}") from None

    def backward(grad):
        return (grad.reshape(original),)

    return _record("reshape", data, (a,), backward)


def reduce_sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)

    return _record("reduce_sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise DimensionError("reduce_mean over an empty axis")
    return scale(reduce_sum(a, axis=axis), 1.0 / count)


def log(a: Tensor, floor: Optional[float] = None) -> Tensor:
    """자연로그. floor가 주어지면 floor 아래 값은 고정 (기울기 0)"""
    a = as_tensor(a)
    if floor is None:
        if a.size and np.any(a.data <= 0):
            raise NumericError("log of non-positive input")
        clipped = a.data
        active = None
    else:
        if floor <= 0:
            raise ParameterError("log floor must be positive")
        active = a.data > floor
        clipped = np.where(active, a.data, floor)

    def backward(grad):
        g = grad / clipped
        return (g if active is None else g * active,)

    return _record("log", np.log(clipped), (a,), backward)


def huber_elem(a: Tensor, delta: float) -> Tensor:
    """원소별 Huber: |x|≤δ 이면 x²/2, 아니면 δ(|x|−δ/2)"""
    a = as_tensor(a)
    if delta <= 0:
        raise ParameterError("huber threshold must be positive")
    magnitude = np.abs(a.data)
    quadratic = magnitude <= delta
    out = np.where(quadratic, 0.5 * a.data ** 2, delta * (magnitude - 0.5 * delta))
    slope = np.where(quadratic, a.data, delta * np.sign(a.data))

    def backward(grad):
        return (grad * slope,)

    return _record("huber_elem", out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """max-subtraction softmax"""
    a = as_tensor(a)
    if a.data.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    out = _scipy_softmax(a.data, axis=axis)

    def backward(grad):
        return (out * (grad - np.sum(grad * out, axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """행 선택 x[index]"""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    rows = a.shape[0] if a.data.ndim else 0
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise DimensionError(f"gather_rows: index out of range for {rows} rows")

    def backward(grad):
        selector = _segment_matrix(index, rows)
        flat = grad.reshape(grad.shape[0], -1)
        return (np.asarray(selector @ flat).reshape((rows,) + grad.shape[1:]),)

    return _record("gather_rows", a.data[index], (a,), backward)


def segment_sum(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """segment id 별 행 합산 (빈 segment는 0)"""
    a = as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.shape[0] != a.shape[0]:
        raise DimensionError("segment_sum: one segment id per row required")
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= num_segments):
        raise DimensionError(f"segment ids out of range [0, {num_segments})")
    matrix = _segment_matrix(segment_ids, num_segments)
    out = np.asarray(matrix @ a.data.reshape(a.shape[0], -1)).reshape((num_segments,) + a.shape[1:])

    def backward(grad):
        return (grad[segment_ids],)

    return _record("segment_sum", out, (a,), backward)


def segment_max(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """segment 별 채널 최대값 (동률이면 먼저 나온 행으로 기울기 전달)"""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != len(segment_ids):
        raise DimensionError("segment_max expects rows aligned with segment ids")
    width = a.shape[1]
    out = np.zeros((num_segments, width), dtype=DTYPE)
    if a.shape[0] == 0:
        return _record("segment_max", out, (a,), lambda grad: (np.zeros_like(a.data),))

    _, order, present, starts, counts = _segment_layout(segment_ids, num_segments)
    ordered = a.data[order]
    maxima = np.maximum.reduceat(ordered, starts, axis=0)
    out[present] = maxima
    is_max = ordered == np.repeat(maxima, counts, axis=0)
    positions = np.where(is_max, np.arange(len(order))[:, None], len(order))
    first = np.minimum.reduceat(positions, starts, axis=0)
    source_rows = order[first]
    columns = np.broadcast_to(np.arange(width), source_rows.shape)
    shape = a.shape

    def backward(grad):
        grad_in = np.zeros(shape, dtype=DTYPE)
        grad_in[source_rows, columns] = grad[present]
        return (grad_in,)

    return _record("segment_max", out, (a,), backward)


def segment_softmax(a: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """segment 내부에서 채널별 독립 softmax"""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != len(segment_ids):
        raise DimensionError("segment_softmax expects rows aligned with segment ids")
    if a.shape[0] == 0:
        return _record("segment_softmax", a.data.copy(), (a,), lambda grad: (np.zeros_like(grad),))

    segment_ids, order, present, starts, _ = _segment_layout(segment_ids, num_segments)
    maxima = np.zeros((num_segments, a.shape[1]), dtype=DTYPE)
    maxima[present] = np.maximum.reduceat(a.data[order], starts, axis=0)
    exps = np.exp(a.data - maxima[segment_ids])
    matrix = _segment_matrix(segment_ids, num_segments)
    totals = np.asarray(matrix @ exps)
    out = exps / totals[segment_ids]

    def backward(grad):
        weighted = np.asarray(matrix @ (grad * out))
        return (out * (grad - weighted[segment_ids]),)

    return _record("segment_softmax", out, (a,), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool,
              eps: float = BN_EPSILON) -> Tuple[Tensor, Optional[np.ndarray], Optional[np.ndarray]]:
    """BatchNorm. train 모드는 batch 통계와 함께 (mean, var)를 돌려준다"""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    count = x.shape[0]
    gamma_data = gamma.data

    if training:
        if count == 0:
            raise ParameterError("batchnorm in train mode needs at least one row")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        normalized = (x.data - mean) * inv_std

        def backward(grad):
            d_norm = grad * gamma_data
            d_x = (inv_std / count) * (count * d_norm - d_norm.sum(axis=0)
                                       - normalized * (d_norm * normalized).sum(axis=0))
            return d_x, (grad * normalized).sum(axis=0), grad.sum(axis=0)
    else:
        mean, var = None, None
        inv_std = 1.0 / np.sqrt(np.asarray(running_var, dtype=DTYPE) + eps)
        normalized = (x.data - running_mean) * inv_std

        def backward(grad):
            return grad * gamma_data * inv_std, (grad * normalized).sum(axis=0), grad.sum(axis=0)

    out = normalized * gamma_data + beta.data
    return _record("batchnorm", out, (x, gamma, beta), backward), mean, var


def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """scalar loss에서 역전파. 학습 파라미터마다 기울기 (도달 불가면 0)"""
    if loss.tape is not tape or loss.index is None:
        raise ValueError("loss was not recorded on this tape")
    if loss.size != 1:
        raise DimensionError(f"backward requires a scalar loss, got shape {loss.shape}")

    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones(loss.shape, dtype=DTYPE)
    for position in range(loss.index, -1, -1):
        grad = grads[position]
        node = tape.nodes[position]
        if grad is None or node.backward is None:
            continue
        for source, source_grad in zip(node.inputs, node.backward(grad)):
            if source is None or source_grad is None:
                continue
            grads[source] = source_grad if grads[source] is None else grads[source] + source_grad

    result = {}
    for name in tape.params.trainable_names():
        index = tape.watched_index(name)
        grad = grads[index] if index is not None else None
        result[name] = np.zeros_like(tape.params[name]) if grad is None else np.array(grad, dtype=DTYPE)
    return result


# ----------------------------------------------------------------------------
# MLP
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """MLP 구조: widths는 입력 폭 포함 (레이어 수 = len(widths) - 1)"""

    widths: Tuple[int, ...]
    activations: Tuple[str, ...]
    batch_norm: Tuple[bool, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ParameterError("MlpSpec needs at least one layer")
        if any(int(w) <= 0 for w in self.widths):
            raise ParameterError(f"MlpSpec widths must be positive: {self.widths}")
        layers = len(self.widths) - 1
        if len(self.activations) != layers or len(self.batch_norm) != layers:
            raise ParameterError("MlpSpec needs one activation and batch-norm flag per layer")
        for activation in self.activations:
            if activation not in ("relu", "none"):
                raise ParameterError(f"unknown activation '{activation}'")

    @classmethod
    def build(cls, widths: Sequence[int], hidden_activation: str = "relu",
              output_activation: str = "none", batch_norm: bool = False) -> "MlpSpec":
        layers = len(widths) - 1
        activations = tuple([hidden_activation] * (layers - 1) + [output_activation]) if layers > 0 else ()
        return cls(tuple(int(w) for w in widths), activations, tuple([batch_norm] * max(layers, 0)))

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp_params(spec: MlpSpec, prefix: str, store: ParameterStore, rng: np.random.Generator):
    """Glorot uniform 가중치, 0 bias, BN scale 1 / shift 0"""
    for i in range(spec.num_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        store.add(f"{prefix}.layer{i}.weight", glorot_uniform(fan_in, fan_out, rng))
        store.add(f"{prefix}.layer{i}.bias", np.zeros(fan_out))
        if spec.batch_norm[i]:
            store.add(f"{prefix}.layer{i}.bn.gamma", np.ones(fan_out))
            store.add(f"{prefix}.layer{i}.bn.beta", np.zeros(fan_out))
            store.add_batchnorm_stats(f"{prefix}.layer{i}.bn", fan_out)


def mlp_forward(spec: MlpSpec, params: ParameterBinding, x: Tensor, prefix: str) -> Tensor:
    """affine → (batchnorm) → activation 을 레이어마다 적용"""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != spec.input_width:
        raise DimensionError(f"{prefix}: input width {x.shape} does not match {spec.input_width}")
    hidden = x
    for i in range(spec.num_layers):
        hidden = add(matmul(hidden, params[f"{prefix}.layer{i}.weight"]), params[f"{prefix}.layer{i}.bias"])
        if spec.batch_norm[i]:
            key = f"{prefix}.layer{i}.bn"
            running_mean, running_var = params.store.batchnorm_stats(key)
            hidden, batch_mean, batch_var = batchnorm(
                hidden, params[f"{key}.gamma"], params[f"{key}.beta"],
                running_mean, running_var, training=params.training)
            if params.training:
                params.bn_updates[key] = (batch_mean, batch_var)
        if spec.activations[i] == "relu":
            hidden = relu(hidden)
    return hidden


# ----------------------------------------------------------------------------
# 기울기 검증
# ----------------------------------------------------------------------------

def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """‖a−n‖ / max(‖a‖+‖n‖, floor)"""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale_ = max(np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric)), floor)
    return float(diff / scale_)


def check_gradients(build_loss: Callable[[ParameterBinding], Tensor], store: ParameterStore,
                    step: float = 1e-5, names: Optional[Sequence[str]] = None,
                    analytic_hook: Optional[Callable[[Dict[str, np.ndarray]], None]] = None
                    ) -> Dict[str, float]:
    """tape 기울기와 중심 차분 비교, 파라미터별 상대 오차 반환"""
    tape = Tape(store)
    loss = build_loss(ParameterBinding(store, tape, training=True))
    analytic = backward(tape, loss)
    if analytic_hook is not None:
        analytic_hook(analytic)

    def evaluate() -> float:
        return build_loss(ParameterBinding(store, None, training=True)).item()

    errors = {}
    for name in names if names is not None else store.trainable_names():
        value = store[name]
        numeric = np.zeros_like(value)
        flat_value = value.reshape(-1)
        flat_numeric = numeric.reshape(-1)
        for i in range(flat_value.size):
            original = flat_value[i]
            flat_value[i] = original + step
            plus = evaluate()
            flat_value[i] = original - step
            minus = evaluate()
            flat_value[i] = original
            flat_numeric[i] = (plus - minus) / (2.0 * step)
        errors[name] = gradient_relative_error(analytic[name], numeric)
    worst = max(errors.values()) if errors else 0.0
    logger.debug(f"gradient check: {len(errors)} parameters, worst relative error {worst:.3e}")
    return errors
