"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are appended to it in
execution order, so the tape is topologically sorted by construction and
:meth:`Tape.backward` only has to walk it in reverse.

>>> w = Parameter([1.0, -2.0], name="w")
>>> with Tape() as tape:
...     loss = tensor_sum(mul(w, w))
>>> tape.backward(loss)
>>> w.grad
array([ 2., -4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "matmul",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax_rows",
    "transpose",
    "reshape",
    "permute",
    "tile",
    "concat",
    "stack",
    "take_last",
    "tensor_sum",
    "mean",
    "mse",
    "layer_norm",
    "dropout",
    "backward",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array that can take part in differentiation.

    Parameters
    ----------
    values : array_like
        Converted to a C-contiguous float64 array.
    requires_grad : bool
        Whether operations on this tensor are recorded.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.data = np.asarray(values, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


class Parameter(Tensor):
    """A trainable tensor with a named gradient buffer of the same shape."""

    __slots__ = ("name", "grad")

    def __init__(self, values, name: str = ""):
        super().__init__(values, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------------
# Tape


class _Record:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the primitive operations run while it is active.

    Tapes are thread-local: a tape opened on one thread never records
    operations issued by another.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(parameter) into every reached ``Parameter.grad``.

        Gradients add to whatever is already stored, so a parameter used by
        several tapes collects the sum.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Parameter] = {}
        if isinstance(loss, Parameter):
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if isinstance(inp, Parameter):
                    leaves[key] = inp
        for key, p in leaves.items():
            if key in grads:
                p.grad = p.grad + grads[key]


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.records.append(_Record(tuple(inputs), out, vjp))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either 2-D (a shared
    weight applied to every batch entry) or has exactly the same batch axes
    as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record((a, b), out, vjp)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _record((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _record((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record((a, b), ad * bd, lambda g: (g * bd, g * ad))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a row vector to every row; the only broadcast supported."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit rows of {x.shape}")

    def vjp(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _record((x, bias), x.data + bias.data, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _record((x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _record((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed after subtracting the row max."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record((x,), s, vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    return _record((x,), np.swapaxes(x.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _record((x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record((x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def tile(x: Tensor, count: int) -> Tensor:
    """Stack ``count`` copies of ``x`` along a new leading axis."""
    x = _as_tensor(x)
    out = np.broadcast_to(x.data, (count, *x.shape)).copy()
    return _record((x,), out, lambda g: (g.sum(axis=0),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as err:
        raise ShapeError(f"cannot concatenate shapes {[x.shape for x in xs]}") from err
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(tuple(xs), out, vjp)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if len({x.shape for x in xs}) != 1:
        raise ShapeError(f"cannot stack shapes {[x.shape for x in xs]}")
    out = np.stack([x.data for x in xs], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(tuple(xs), out, vjp)


def take_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record((x,), x.data[..., start:stop], vjp)


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record((x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _record((x,), np.array(x.data.mean()), lambda g: (np.full(shape, float(g) / n),))


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _record((pred,), np.array(np.mean(diff * diff)), lambda g: (diff * (2.0 * float(g) / n),))


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and shift."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {shift.shape} do not fit {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def vjp(g):
        flat_g = g.reshape(-1, d)
        g_gain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        g_shift = flat_g.sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_shift

    return _record((x, gain, shift), out, vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    x = _as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record((x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Gradient checking


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Parameter | Iterable[Parameter],
    eps: float = 1e-5,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` takes no arguments, reads the current parameter values and returns
    a scalar tensor. The relative error of one element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [params] if isinstance(params, Parameter) else list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("objective is not finite at the base point")
    tape.backward(loss)

    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite objective while perturbing {p.name}[{i}]")
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
