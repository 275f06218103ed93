"""Minimal dense tensors with tape-based reverse-mode differentiation.

Every op computes with numpy. When a :class:`Tape` is active (``with Tape():``)
the op appends a record holding its inputs, output and backward rule, so
:func:`backward` can walk the records in reverse and :meth:`Tape.replay` can
re-run them forward.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
ACTIVATION_CLAMP = 30.0
ABS_FLOOR = 1e-9  # grad_check: differences below this are rounding, not error

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class TensorError(ValueError):
    """Raised on shape errors, non-finite values and misuse of the tape."""


class Tensor:
    """A dense real array plus a flag saying whether gradients are wanted."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_ufunc__ = None  # make ndarray (op) Tensor dispatch to Tensor's reflected methods

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: tuple[np.ndarray, ...]
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of the ops executed while the tape was active."""

    records: list[Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)
    _produced: dict[int, int] = field(default_factory=dict, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, rec: Record) -> None:
        self._produced[id(rec.output)] = len(self.records)
        self.records.append(rec)

    def produced(self, t: Tensor) -> bool:
        idx = self._produced.get(id(t))
        return idx is not None and self.records[idx].output is t

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for x in rec.inputs:
                if not self.produced(x):
                    seen.setdefault(id(x), x)
        return list(seen.values())

    def replay(self, leaves: Mapping[Tensor, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Re-run every record forward; returns ``id(output) -> array``.

        Leaves not given in ``leaves`` use their current data.
        """
        values: dict[int, np.ndarray] = {}
        if leaves:
            for t, v in leaves.items():
                values[id(t)] = np.asarray(v)
        for rec in self.records:
            xs = [values.get(id(x), x.data) for x in rec.inputs]
            values[id(rec.output)] = rec.forward(*xs)
        return values


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _op(name: str, forward, backward, inputs: Sequence[Tensor]) -> Tensor:
    xs = tuple(x.data for x in inputs)
    out = Tensor(forward(*xs))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(x.requires_grad or tape.produced(x) for x in inputs):
        out.requires_grad = True
        tape._append(Record(name, tuple(inputs), out, xs, forward, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (a vector added to every row is the ``⊕`` case)."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise TensorError(f"add: cannot broadcast {sa} and {sb}") from exc
    return _op("add", np.add, lambda g, x, y, out: (_unbroadcast(g, sa), _unbroadcast(g, sb)), (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op("sub", np.subtract, lambda g, x, y, out: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), (a, b))


def neg(a) -> Tensor:
    return _op("neg", np.negative, lambda g, x, out: (-g,), (as_tensor(a),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise TensorError(f"mul: cannot broadcast {sa} and {sb}") from exc
    return _op(
        "mul",
        np.multiply,
        lambda g, x, y, out: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
        (a, b),
    )


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics (batched over leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise TensorError("matmul: scalars not allowed")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise TensorError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g, x, y, out):
        if x.ndim == 1 and y.ndim == 1:
            return g * y, g * x
        if y.ndim == 1:
            return _unbroadcast(g[..., None] * y, sa), _unbroadcast(np.einsum("...i,...ij->...j", g, x), sb)
        if x.ndim == 1:
            gx = np.einsum("...j,...ij->...i", g, y)
            gy = x[:, None] * g[..., None, :]
            return _unbroadcast(gx, sa), _unbroadcast(gy, sb)
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(gx, sa), _unbroadcast(gy, sb)

    return _op("matmul", np.matmul, backward, (a, b))


def tanh(a) -> Tensor:
    def forward(x):
        return np.tanh(np.clip(x, -ACTIVATION_CLAMP, ACTIVATION_CLAMP))

    def backward(g, x, out):
        inside = (x > -ACTIVATION_CLAMP) & (x < ACTIVATION_CLAMP)
        return (g * (1.0 - out * out) * inside,)

    return _op("tanh", forward, backward, (as_tensor(a),))


def sigmoid(a) -> Tensor:
    def forward(x):
        z = np.clip(x, -ACTIVATION_CLAMP, ACTIVATION_CLAMP)
        return (1.0 / (1.0 + np.exp(-z))).astype(x.dtype, copy=False)

    def backward(g, x, out):
        inside = (x > -ACTIVATION_CLAMP) & (x < ACTIVATION_CLAMP)
        return (g * out * (1.0 - out) * inside,)

    return _op("sigmoid", forward, backward, (as_tensor(a),))


def relu(a) -> Tensor:
    return _op("relu", lambda x: np.maximum(x, 0), lambda g, x, out: (g * (x > 0),), (as_tensor(a),))


def log(a) -> Tensor:
    return _op("log", np.log, lambda g, x, out: (g / x,), (as_tensor(a),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside ``[lo, hi]``."""

    def backward(g, x, out):
        return (g * ((x >= lo) & (x <= hi)),)

    return _op("clip", lambda x: np.clip(x, lo, hi), backward, (as_tensor(a),))


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (bool, True = keep) forces weights of dropped entries to 0."""
    keep = None if mask is None else np.asarray(mask, dtype=bool)

    def forward(x):
        if keep is not None:
            x = np.where(keep, x, -np.inf)
        z = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)

    def backward(g, x, out):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _op("softmax", forward, backward, (as_tensor(a),))


def log_softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Stable log-softmax; masked-out entries (mask False) come out as -inf and get no gradient."""
    keep = None if mask is None else np.asarray(mask, dtype=bool)

    def forward(x):
        if keep is not None:
            x = np.where(keep, x, -np.inf)
        z = x - np.max(x, axis=axis, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g, x, out):
        if keep is not None:
            g = np.where(keep, g, 0.0)
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _op("log_softmax", forward, backward, (as_tensor(a),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise TensorError("concat: nothing to concatenate")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise TensorError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g, *args):
        return tuple(np.split(g, bounds, axis=ax))

    return _op("concat", lambda *xs: np.concatenate(xs, axis=ax), backward, ts)


def max_over(a, axis: int, mask=None) -> Tensor:
    """Max along ``axis``; entries with ``mask == False`` never win. Gradient goes to the first maximiser."""
    keep = None if mask is None else np.asarray(mask, dtype=bool)

    def masked(x):
        return x if keep is None else np.where(keep, x, -np.inf)

    cache = {}

    def forward(x):
        idx = np.expand_dims(np.argmax(masked(x), axis=axis), axis)
        cache["idx"] = idx
        return np.squeeze(np.take_along_axis(x, idx, axis=axis), axis)

    def backward(g, x, out):
        idx = cache["idx"]
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _op("max", forward, backward, (as_tensor(a),))


def embedding(table, ids, padding_idx: int | None = 0) -> Tensor:
    """Row gather ``table[ids]``; the padding row never receives gradient."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise TensorError(f"embedding: id out of range for table with {table.shape[0]} rows")

    def backward(g, w, out):
        gw = np.zeros_like(w)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, w.shape[1]))
        if padding_idx is not None:
            gw[padding_idx] = 0
        return (gw,)

    return _op("embedding", lambda w: w[idx], backward, (table,))


def take(a, index, axis: int = -1) -> Tensor:
    """``np.take_along_axis``: pick entries of ``a`` along ``axis`` by an integer index array."""
    idx = np.asarray(index, dtype=np.int64)

    def backward(g, x, out):
        gx = np.zeros_like(x)
        # put_along_axis does not accumulate duplicates
        grid = list(np.indices(idx.shape, sparse=True))
        grid[axis % x.ndim] = idx
        np.add.at(gx, tuple(grid), g)
        return (gx,)

    return _op("take", lambda x: np.take_along_axis(x, idx, axis=axis), backward, (as_tensor(a),))


def conv1d(x, weight, bias, width: int) -> Tensor:
    """Valid 1-D convolution over the token axis.

    ``x``: [B, L, E]; ``weight``: [width*E, F]; ``bias``: [F]  ->  [B, L-width+1, F].
    Window rows are concatenated position-major before the product.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 3:
        raise TensorError(f"conv1d: expected [B, L, E] input, got {x.shape}")
    B, L, E = x.shape
    if L < width:
        raise TensorError(f"conv1d: sequence length {L} shorter than width {width}")
    if weight.shape[0] != width * E or bias.shape != (weight.shape[1],):
        raise TensorError(f"conv1d: weight {weight.shape} / bias {bias.shape} do not fit width={width}, E={E}")
    P = L - width + 1

    def unfold(v):
        return np.concatenate([v[:, i:i + P, :] for i in range(width)], axis=-1)

    cache = {}

    def forward(v, w, b):
        cache["cols"] = unfold(v)
        return cache["cols"] @ w + b

    def backward(g, v, w, b, out):
        cols = cache["cols"]
        gw = cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.sum(axis=(0, 1))
        gcols = g @ w.T
        gv = np.zeros_like(v)
        for i in range(width):
            gv[:, i:i + P, :] += gcols[..., i * E:(i + 1) * E]
        return gv, gw, gb

    return _op("conv1d", forward, backward, (x, weight, bias))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g, x, out):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(x.dtype),)

    return _op("sum", lambda x: np.sum(x, axis=axis), backward, (a,))


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), np.asarray(1.0 / n, dtype=a.dtype))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _op("reshape", lambda x: x.reshape(shape), lambda g, x, out: (g.reshape(old),), (a,))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    return _op(
        "swapaxes",
        lambda x: np.swapaxes(x, ax1, ax2),
        lambda g, x, out: (np.swapaxes(g, ax1, ax2),),
        (as_tensor(a),),
    )


def repeat(a, repeats: int, axis: int = 0) -> Tensor:
    """``np.repeat``: each slice along ``axis`` is tiled ``repeats`` times consecutively."""
    a = as_tensor(a)
    ax = axis % a.ndim

    def backward(g, x, out):
        shp = x.shape[:ax] + (x.shape[ax], repeats) + x.shape[ax + 1:]
        return (g.reshape(shp).sum(axis=ax + 1),)

    return _op("repeat", lambda x: np.repeat(x, repeats, axis=ax), backward, (a,))


# ---------------------------------------------------------------- gradients


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """dLoss/dParam for each requested leaf (default: every requires_grad leaf on the tape).

    Leaves that did not contribute to ``loss`` get a zero gradient.
    """
    if loss.size != 1:
        raise TensorError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TensorError("backward: loss was not produced on this tape")
    if params is None:
        params = [t for t in tape.leaves() if t.requires_grad]
    params = list(params)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    end = tape._produced[id(loss)]
    for rec in reversed(tape.records[: end + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        gin = rec.backward(g, *rec.saved, rec.output.data)
        for x, gx in zip(rec.inputs, gin):
            if gx is None or not (x.requires_grad or tape.produced(x)):
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = np.asarray(gx, dtype=x.dtype)
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    dtype: str

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check_dtypes(
    f: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    dtypes: Sequence = (np.float32, np.float64),
    epsilon: float = 1e-6,
    names: Sequence[str] | None = None,
    floor: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    order: int = 2,
) -> dict[str, GradCheckReport]:
    """Compare backward() of ``f`` at each dtype against one float64 central-difference oracle.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor * max|n|, ABS_FLOOR)``.
    With ``max_coords`` only that many coordinates per input (drawn from ``rng``)
    are perturbed; the analytic gradient is still computed in full. ``order`` 4
    uses the five-point stencil, whose error is small enough at a larger step
    that float64 rounding in ``f`` stops mattering.
    """
    if order not in (2, 4):
        raise TensorError("grad_check: order must be 2 or 4")
    if epsilon <= 0:
        raise TensorError("grad_check: epsilon must be positive")
    names = list(names) if names is not None else [f"x{i}" for i in range(len(inputs))]
    base = [np.array(x, dtype=np.float64) for x in inputs]
    rng = rng or np.random.default_rng(0)

    analytic = {}
    for dtype in dtypes:
        leaves = [Tensor(x.astype(dtype), requires_grad=True) for x in base]
        with Tape() as tape:
            out = f(leaves)
        if out.size != 1:
            raise TensorError("grad_check: f must be scalar-valued")
        g = backward(tape, out, leaves)
        analytic[np.dtype(dtype).name] = [np.asarray(g[t], dtype=np.float64) for t in leaves]

    # the oracle replays a float64 recording of f, which skips graph construction
    leaves64 = [Tensor(x, requires_grad=True) for x in base]
    with Tape() as tape64:
        out64 = f(leaves64)

    def evaluate(values):
        if not tape64.produced(out64):
            ts = [Tensor(v, dtype=np.float64) for v in values]
            return float(np.asarray(f(ts).data, dtype=np.float64).reshape(()))
        got = tape64.replay(dict(zip(leaves64, values)))
        return float(np.asarray(got[id(out64)], dtype=np.float64).reshape(()))

    reports = {k: GradCheckReport([], k) for k in analytic}
    for i, x in enumerate(base):
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        for c, j in enumerate(coords):
            def shifted(h):
                vals = list(base)
                vals[i] = x.copy()
                vals[i].reshape(-1)[j] += h
                return evaluate(vals)

            if order == 2:
                numeric[c] = (shifted(epsilon) - shifted(-epsilon)) / (2 * epsilon)
            else:
                numeric[c] = (8 * (shifted(epsilon) - shifted(-epsilon))
                              - (shifted(2 * epsilon) - shifted(-2 * epsilon))) / (12 * epsilon)
        for key, grads in analytic.items():
            a = grads[i].reshape(-1)[coords]
            # absolute floor for gradients that are identically zero (e.g. a softmax-invariant bias)
            scale = max((float(np.max(np.abs(numeric))) if numeric.size else 0.0) * floor, ABS_FLOOR)
            rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), scale)
            k = int(np.argmax(rel)) if rel.size else 0
            worst = np.unravel_index(int(coords[k]), x.shape) if rel.size else ()
            reports[key].entries.append(
                GradCheckEntry(
                    names[i],
                    float(rel[k]) if rel.size else 0.0,
                    tuple(int(w) for w in worst),
                    float(a[k]) if rel.size else 0.0,
                    float(numeric[k]) if rel.size else 0.0,
                )
            )
    return reports


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    dtype=np.float64,
    names: Sequence[str] | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Single-dtype :func:`grad_check_dtypes` over every coordinate.

    The analytic gradient is computed at ``dtype``; the numeric oracle is always
    evaluated in float64 so 32-bit runs measure the backward pass, not rounding
    in the oracle.
    """
    reports = grad_check_dtypes(f, inputs, (dtype,), epsilon, names, floor)
    return reports[np.dtype(dtype).name]


def global_norm(grads: Mapping) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_global_norm(grads: Mapping, max_norm: float) -> dict:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise TensorError("clip_global_norm: max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    """Adam moments with decoupled weight decay (AdamW)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    clip_norm: float = 5.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float | None = None,
) -> None:
    """One AdamW update of ``params`` in place (data arrays are replaced, not mutated).

    Parameters without an entry in ``grads`` are left untouched; ``lr`` overrides
    the state's learning rate for this step only.
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise TensorError("learning rate must be non-negative")
    for name, g in grads.items():
        if name not in params:
            raise TensorError(f"optimizer_step: unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise TensorError(f"optimizer_step: grad shape {g.shape} != param shape {params[name].shape} for {name!r}")
        m = state.m.get(name)
        if m is not None and m.shape != g.shape:
            raise TensorError(f"optimizer_step: moment shape mismatch for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p.data * (1.0 - lr * state.weight_decay) - lr * update
        p.data = new.astype(p.dtype, copy=False)
