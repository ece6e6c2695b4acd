"""
Reverse-mode differentiation over dense numpy arrays.

Each Tensor records the op that produced it and a ``_backward`` closure that
pushes its gradient to its parents; ``backward`` walks the recorded graph in
reverse topological order. Only tensors that (transitively) depend on a
``requires_grad`` leaf keep their parents, so inference on frozen models
records nothing.
"""
import struct
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense array with an optional gradient and a recorded producer"""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 _children: Tuple["Tensor", ...] = (), _op: str = ""):
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward = lambda: None
        self._prev = _children
        self._op = _op

    # -- construction helpers -------------------------------------------

    @staticmethod
    def lift(value: Union["Tensor", ArrayLike]) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))

    def _child(self, data: np.ndarray, parents: Tuple["Tensor", ...], op: str) -> "Tensor":
        tracked = tuple(p for p in parents if p.requires_grad)
        return Tensor(data, requires_grad=bool(tracked), _children=tracked, _op=op)

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = Tensor.lift(other)
        out = self._child(self.data + other.data, (self, other), "+")

        def _backward():
            self._accumulate(_unbroadcast(out.grad, self.shape))
            other._accumulate(_unbroadcast(out.grad, other.shape))
        out._backward = _backward
        return out

    def __radd__(self, other):
        return self + other

    def __neg__(self):
        out = self._child(-self.data, (self,), "neg")

        def _backward():
            self._accumulate(-out.grad)
        out._backward = _backward
        return out

    def __sub__(self, other):
        return self + (-Tensor.lift(other))

    def __rsub__(self, other):
        return Tensor.lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor.lift(other)
        out = self._child(self.data * other.data, (self, other), "*")

        def _backward():
            self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
            other._accumulate(_unbroadcast(out.grad * self.data, other.shape))
        out._backward = _backward
        return out

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / float(other))

    def reciprocal(self) -> "Tensor":
        out = self._child(1.0 / self.data, (self,), "recip")

        def _backward():
            self._accumulate(-out.grad / (self.data ** 2))
        out._backward = _backward
        return out

    def __matmul__(self, other):
        other = Tensor.lift(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {self.shape} @ {other.shape}")
        out = self._child(self.data @ other.data, (self, other), "@")

        def _backward():
            self._accumulate(out.grad @ other.data.T)
            other._accumulate(self.data.T @ out.grad)
        out._backward = _backward
        return out

    # -- nonlinearities -------------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0
        out = self._child(np.where(mask, self.data, 0.0), (self,), "relu")

        def _backward():
            self._accumulate(out.grad * mask)
        out._backward = _backward
        return out

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        out = self._child(t, (self,), "tanh")

        def _backward():
            self._accumulate(out.grad * (1.0 - t ** 2))
        out._backward = _backward
        return out

    def sigmoid(self) -> "Tensor":
        s = 0.5 * (np.tanh(0.5 * self.data) + 1.0)
        out = self._child(s, (self,), "sigmoid")

        def _backward():
            self._accumulate(out.grad * s * (1.0 - s))
        out._backward = _backward
        return out

    def square(self) -> "Tensor":
        return self * self

    # -- reductions and shape ops --------------------------------------

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        out = self._child(np.asarray(self.data.sum(axis=axis)), (self,), "sum")

        def _backward():
            grad = out.grad if axis is None else np.expand_dims(out.grad, axis)
            self._accumulate(np.broadcast_to(grad, self.shape))
        out._backward = _backward
        return out

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / max(count, 1))

    def max(self, axis: int) -> "Tensor":
        """Maximum along ``axis``; ties send the gradient to the first maximizer"""
        idx = np.argmax(self.data, axis=axis)
        out = self._child(np.take_along_axis(self.data, np.expand_dims(idx, axis), axis).squeeze(axis),
                          (self,), "max")

        def _backward():
            grad = np.zeros_like(self.data)
            np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis)
            self._accumulate(grad)
        out._backward = _backward
        return out

    def reshape(self, *shape: int) -> "Tensor":
        out = self._child(self.data.reshape(*shape), (self,), "reshape")

        def _backward():
            self._accumulate(out.grad.reshape(self.shape))
        out._backward = _backward
        return out

    def __getitem__(self, index) -> "Tensor":
        out = self._child(self.data[index], (self,), "slice")

        def _backward():
            grad = np.zeros_like(self.data)
            if _is_fancy(index):
                np.add.at(grad, index, out.grad)
            else:
                grad[index] = out.grad
            self._accumulate(grad)
        out._backward = _backward
        return out

    # -- reverse pass ---------------------------------------------------

    def backward(self):
        """Propagate d(self)/d(leaf) into every reachable ``requires_grad`` leaf"""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        topo: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is not None:
                node._backward()


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [Tensor.lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    tracked = tuple(t for t in tensors if t.requires_grad)
    out = Tensor(data, requires_grad=bool(tracked), _children=tracked, _op="concat")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward():
        for t, grad in zip(tensors, np.split(out.grad, sizes, axis=axis)):
            t._accumulate(grad)
    out._backward = _backward
    return out


def hinge(x: Tensor, margin: float) -> Tensor:
    """phi_margin(x) = max(margin + x, 0)"""
    return (x + margin).relu()


class ParamBundle:
    """Ordered, uniquely named parameter tensors"""

    def __init__(self, items: Optional[Iterable[Tuple[str, Union[Tensor, np.ndarray]]]] = None):
        self._items: Dict[str, Tensor] = {}
        for name, value in items or []:
            self.add(name, value)

    def add(self, name: str, value: Union[Tensor, np.ndarray]):
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))
        tensor.requires_grad = True
        self._items[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> List[str]:
        return list(self._items)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._items.items()}

    def zero_grad(self):
        for t in self._items.values():
            t.grad = None

    def grads(self) -> "ParamBundle":
        """Gradients as a bundle, zeros for parameters the loss never reached"""
        return ParamBundle(
            (name, t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._items.items()
        )

    def frozen(self) -> Dict[str, Tensor]:
        """Constant views of the parameters; forward passes over them record no graph"""
        return {name: Tensor(t.data) for name, t in self._items.items()}

    def copy(self) -> "ParamBundle":
        return ParamBundle((name, t.data.copy()) for name, t in self._items.items())

    def merged(self, other: "ParamBundle") -> "ParamBundle":
        return ParamBundle(list((n, t.data) for n, t in self) + list((n, t.data) for n, t in other))

    def subset(self, prefix: str) -> "ParamBundle":
        return ParamBundle((n, t.data) for n, t in self if n.startswith(prefix))

    # -- tensor table codec --------------------------------------------
    # count u32, then per tensor: name length u16, UTF-8 name, rank u8,
    # dims u32 each, payload in ``dtype`` (little-endian)

    def to_bytes(self, dtype: str = "<f8") -> bytes:
        chunks = [struct.pack("<I", len(self._items))]
        for name, tensor in self._items.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", tensor.data.ndim))
            chunks.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            chunks.append(np.ascontiguousarray(tensor.data, dtype=dtype).tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes, dtype: str = "<f8", offset: int = 0) -> Tuple["ParamBundle", int]:
        """Decode a tensor table; returns the bundle and the offset after it"""
        itemsize = np.dtype(dtype).itemsize

        def take(n: int) -> bytes:
            nonlocal offset
            if offset + n > len(data):
                raise ValueError(f"truncated tensor table: need {n} bytes at offset {offset}, have {len(data) - offset}")
            chunk = data[offset:offset + n]
            offset += n
            return chunk

        (count,) = struct.unpack("<I", take(4))
        bundle = cls()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if n_values * itemsize > len(data) - offset:
                raise ValueError(f"tensor {name!r} dims {dims} overflow the remaining {len(data) - offset} bytes")
            payload = np.frombuffer(take(n_values * itemsize), dtype=dtype).reshape(dims)
            bundle.add(name, payload.astype(np.float64) if np.dtype(dtype) != np.float64 else payload.copy())
        return bundle, offset
