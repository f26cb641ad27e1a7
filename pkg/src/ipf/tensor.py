"""Minimal dense tensor with reverse-mode gradients.

Values are immutable numpy arrays (float64 by default, float32 behind the
``dtype`` argument for throughput runs). The op set is exactly what the
alignment block needs; every op optionally records onto a :class:`Tape`,
and ``grad_check`` verifies recorded gradients against central finite
differences.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float64


class Tensor:
    """Immutable dense array with row-major flat storage."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE, order="C")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        arr.flags.writeable = False
    t.data = arr
    return t


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), dtype=dtype)


def check_finite(t: Tensor, where: str) -> Tensor:
    """Raise :class:`NumericError` naming ``where`` if any value is non-finite."""
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {where}")
    return t


class Tape:
    """Record of forward ops for one pass; replays backward in reverse order.

    Each record holds the output node, its input nodes, and a closure that
    maps the output adjoint to per-input adjoints. Nodes are identified by
    ``id()`` of the (immutable) Tensor, which the tape keeps alive.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def __len__(self) -> int:
        return len(self._records)

    def gradients(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of ``output`` (a scalar) with respect to each tensor in ``wrt``."""
        if output.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {output.shape}")
        adjoints: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for out, inputs, backward in reversed(self._records):
            out_grad = adjoints.get(id(out))
            if out_grad is None:
                continue
            for node, grad in zip(inputs, backward(out_grad)):
                if grad is None:
                    continue
                acc = adjoints.get(id(node))
                adjoints[id(node)] = grad if acc is None else acc + grad
        results = []
        for t in wrt:
            g = adjoints.get(id(t))
            results.append(np.zeros_like(t.data) if g is None else g)
        return results


# ---------------------------------------------------------------------------
# Forward ops. Every op takes an optional tape and returns a new Tensor.
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = _wrap(a.data + b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = _wrap(a.data - b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = _wrap(a.data * b.data)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = _wrap(a.data * c)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * c,))
    return out


def add_bias(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Add a length-n vector to every row of an m-by-n matrix."""
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {a.shape} and {b.shape} incompatible")
    out = _wrap(a.data + b.data[None, :])
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g.sum(axis=0)))
    return out


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    out = _wrap(a.data @ b.data)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def transpose(a: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = _wrap(a.data.T)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g.T,))
    return out


def slice_cols(a: Tensor, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for shape {a.shape}")
    out = _wrap(a.data[:, start:stop])

    if tape is not None:
        shape = a.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[:, start:stop] = g
            return (full,)

        tape.record(out, (a,), backward)
    return out


def concat_cols(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: empty input")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ ({[p.shape for p in parts]})")
    out = _wrap(np.concatenate([p.data for p in parts], axis=1))
    if tape is not None:
        widths = [p.shape[1] for p in parts]
        offsets = np.cumsum([0] + widths)

        def backward(g):
            return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

        tape.record(out, tuple(parts), backward)
    return out


def softmax_rows(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _wrap(y)
    if tape is not None:
        tape.record(out, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))
    return out


def gelu(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Gaussian-error linear unit, exact erf form x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
    out = _wrap(x * phi)
    if tape is not None:
        density = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        local = phi + x * density
        tape.record(out, (a,), lambda g: (g * local,))
    return out


def mean_over_axis(a: Tensor, axis: int, tape: Tape | None = None) -> Tensor:
    if not 0 <= axis < a.data.ndim:
        raise ShapeError(f"mean_over_axis: axis {axis} out of range for shape {a.shape}")
    out = _wrap(a.data.mean(axis=axis))
    if tape is not None:
        n = a.shape[axis]

        def backward(g):
            return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

        tape.record(out, (a,), backward)
    return out


def layernorm_rows(a: Tensor, eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    """Normalize each row to zero mean and unit variance (no affine terms)."""
    if a.data.ndim != 2:
        raise ShapeError(f"layernorm_rows expects a matrix, got shape {a.shape}")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = centered * inv_std
    out = _wrap(y)
    if tape is not None:
        n = a.shape[1]

        def backward(g):
            gy_sum = g.sum(axis=1, keepdims=True)
            gyy_sum = (g * y).sum(axis=1, keepdims=True)
            return (inv_std * (g - gy_sum / n - y * gyy_sum / n),)

        tape.record(out, (a,), backward)
    return out


def sum_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(np.asarray(a.data.sum()))
    if tape is not None:
        shape, dt = a.shape, a.data.dtype
        tape.record(out, (a,), lambda g: (np.full(shape, g, dtype=dt),))
    return out


def op_grad_checks(step: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Finite-difference errors for each differentiable op on random 3x4 inputs.

    Softmax and layernorm are weighted by a fixed random matrix so the
    scalar loss is not constant in the input.
    """
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 5)))
    c_like = Tensor(rng.normal(size=(3, 4)))
    c_row = Tensor(rng.normal(size=(4,)))
    bias_base = Tensor(rng.normal(size=(3, 4)))

    suite: dict[str, Callable[[Tensor, Tape | None], Tensor]] = {
        "sum": lambda t, tp: sum_all(t, tape=tp),
        "matmul": lambda t, tp: sum_all(matmul(t, w, tape=tp), tape=tp),
        "softmax_rows": lambda t, tp: sum_all(mul(softmax_rows(t, tape=tp), c_like, tape=tp), tape=tp),
        "gelu": lambda t, tp: sum_all(gelu(t, tape=tp), tape=tp),
        "mean_over_axis": lambda t, tp: sum_all(
            mul(mean_over_axis(t, 0, tape=tp), Tensor(c_row.data[:4]), tape=tp), tape=tp
        ),
        "layernorm_rows": lambda t, tp: sum_all(mul(layernorm_rows(t, tape=tp), c_like, tape=tp), tape=tp),
        "mul": lambda t, tp: sum_all(mul(t, t, tape=tp), tape=tp),
        "transpose_slice_concat": lambda t, tp: sum_all(
            concat_cols(
                [slice_cols(t, 0, 2, tape=tp), slice_cols(transpose(transpose(t, tape=tp), tape=tp), 2, 4, tape=tp)],
                tape=tp,
            ),
            tape=tp,
        ),
        "composition": lambda t, tp: sum_all(
            gelu(matmul(softmax_rows(t, tape=tp), w, tape=tp), tape=tp), tape=tp
        ),
    }

    def bias_loss(b: Tensor, tp: Tape | None) -> Tensor:
        return sum_all(gelu(add_bias(bias_base, b, tape=tp), tape=tp), tape=tp)

    errors = {name: grad_check(f, x, step=step) for name, f in suite.items()}
    errors["add_bias"] = grad_check(bias_loss, c_row, step=step)
    return errors


def grad_check(f: Callable[[Tensor, Tape | None], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradient of ``f`` at ``x`` and central
    finite differences, where error per coordinate is
    ``|fd - ad| / max(1, |fd|, |ad|)``.

    ``f`` must return a scalar Tensor and accept ``tape=None`` for the
    perturbed evaluations.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    tape = Tape()
    y = f(x, tape)
    if y.size != 1:
        raise ShapeError(f"grad_check requires scalar-valued f, got shape {y.shape}")
    analytic = tape.gradients(y, [x])[0].reshape(-1)

    base = x.data.reshape(-1).copy()
    worst = 0.0
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + step
        f_plus = f(_wrap(bumped.reshape(x.shape)), None).item()
        bumped[i] = base[i] - step
        f_minus = f(_wrap(bumped.reshape(x.shape)), None).item()
        fd = (f_plus - f_minus) / (2.0 * step)
        ad = float(analytic[i])
        err = abs(fd - ad) / max(1.0, abs(fd), abs(ad))
        worst = max(worst, err)
    return worst
