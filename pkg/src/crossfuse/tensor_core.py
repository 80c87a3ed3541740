"""Dense tensor substrate with exact reverse-mode adjoints.

Every operation the fusion stack needs lives here: matrix products,
row-wise softmax, 2-d pooling, bilinear resizing, and the supporting
elementwise/reshape plumbing.  Forward calls optionally record onto a
:class:`Tape`; :func:`backward` replays the tape in reverse to produce a
:class:`GradRecord` for all watched (named) tensors.

Tensors are immutable after construction (the underlying numpy buffer is
write-protected) and carry either standard (float32) or wide (float64)
precision.  Wide precision is what the finite-difference oracles run in.
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

STANDARD = np.float32
WIDE = np.float64

_DTYPE_TO_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAME_TO_DTYPE = {"f32": np.float32, "f64": np.float64}


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(ValueError):
    """A structural precondition (divisibility, variant name, ...) is violated."""


class TapeStateError(RuntimeError):
    """Backward requested before any forward evaluation was recorded."""


class Tensor:
    """Immutable dense array of rank 1-3, row-major, single dtype.

    ``data`` is the flat-compatible numpy view; ``shape`` mirrors
    ``data.shape`` as a tuple.  Scalar learnables use shape ``(1,)``.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(STANDARD)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: trusts arr to be fresh, C-ordered, float32/64.
        t = object.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def to_dtype(self, dtype) -> "Tensor":
        if self.data.dtype == np.dtype(dtype):
            return self
        return Tensor._wrap(self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={_DTYPE_TO_NAME[self.dtype]})"


def zeros(shape, dtype=STANDARD) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def full(shape, value, dtype=STANDARD) -> Tensor:
    return Tensor._wrap(np.full(shape, value, dtype=dtype))


def scalar(value, dtype=STANDARD) -> Tensor:
    return Tensor._wrap(np.array([value], dtype=dtype))


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------


@dataclass
class GradRecord:
    """Accumulated gradients keyed by parameter name ("cfe_t.w_q", ...).

    A name is absent exactly when the parameter did not participate in the
    evaluated graph.  Present entries always match the parameter's shape.
    """

    entries: dict = field(default_factory=dict)

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> Tensor:
        return self.entries[name]

    def get(self, name, default=None):
        return self.entries.get(name, default)

    def names(self):
        return sorted(self.entries)


class Tape:
    """Wengert list of recorded operations plus the set of watched tensors.

    Owned by exactly one evaluation at a time; activate with
    ``with record_on(tape): ...`` around the forward pass.
    """

    def __init__(self):
        self._steps = []  # (out, parents, backward_fn) in execution order
        self._watched = {}  # id(tensor) -> (name, tensor)

    def watch(self, tensor: Tensor, name: str):
        self._watched[id(tensor)] = (name, tensor)

    def watch_all(self, named_tensors):
        for name, t in named_tensors:
            self.watch(t, name)

    @property
    def num_steps(self) -> int:
        return len(self._steps)

    def last_output(self) -> Tensor:
        if not self._steps:
            raise TapeStateError("tape is empty: run a forward evaluation first")
        return self._steps[-1][0]


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


@contextmanager
def record_on(tape: Tape):
    """Activate `tape` so that ops executed in the block are recorded."""
    stack = _tape_stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def _emit(out: Tensor, parents, backward_fn):
    stack = _tape_stack()
    if stack:
        stack[-1]._steps.append((out, tuple(parents), backward_fn))
    return out


def backward(output_grad: Tensor, tape: Tape, output: Tensor | None = None) -> GradRecord:
    """Reverse sweep over `tape`, seeding `output` with `output_grad`.

    `output` defaults to the tape's final recorded result.  Returns the
    gradient of every watched tensor that is reachable from the output;
    unreachable parameters are simply absent from the record.
    """
    if not tape._steps:
        raise TapeStateError("backward before forward: tape has no recorded operations")
    if output is None:
        output = tape.last_output()
    if output_grad.shape != output.shape:
        raise DimensionError(
            f"output_grad shape {output_grad.shape} != output shape {output.shape}"
        )
    grads = {id(output): np.array(output_grad.data, copy=True)}
    for out, parents, backward_fn in reversed(tape._steps):
        g = grads.get(id(out))
        if g is None:
            continue
        parent_grads = backward_fn(g)
        for parent, pg in zip(parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    entries = {}
    for tid, (name, tensor) in tape._watched.items():
        g = grads.get(tid)
        if g is not None:
            entries[name] = Tensor._wrap(np.ascontiguousarray(g))
    return GradRecord(entries)


# ---------------------------------------------------------------------------
# Multiply counting (used by the complexity auditor)
# ---------------------------------------------------------------------------


class MultiplyCounter:
    """Counts scalar multiplications performed inside matrix products,
    bucketed by the pipeline stage active when the product ran."""

    def __init__(self):
        self.counts = {}

    def add(self, stage: str, n: int):
        self.counts[stage] = self.counts.get(stage, 0) + n

    def total(self, *stages) -> int:
        if not stages:
            return sum(self.counts.values())
        return sum(self.counts.get(s, 0) for s in stages)


def _counter_state():
    state = getattr(_tls, "counters", None)
    if state is None:
        state = {"active": [], "stage": ["other"]}
        _tls.counters = state
    return state


@contextmanager
def count_multiplies(counter: MultiplyCounter | None = None):
    """Collect matmul multiply counts into `counter` for the duration."""
    counter = counter if counter is not None else MultiplyCounter()
    state = _counter_state()
    state["active"].append(counter)
    try:
        yield counter
    finally:
        state["active"].pop()


@contextmanager
def op_stage(name: str):
    """Label matmuls executed in this block for the multiply counter."""
    state = _counter_state()
    state["stage"].append(name)
    try:
        yield
    finally:
        state["stage"].pop()


def _note_matmul(m: int, k: int, n: int):
    state = _counter_state()
    if state["active"]:
        stage = state["stage"][-1]
        mults = m * k * n
        for counter in state["active"]:
            counter.add(stage, mults)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _require_rank(t: Tensor, rank: int, what: str):
    if t.data.ndim != rank:
        raise DimensionError(f"{what} must have rank {rank}, got shape {t.shape}")


def _common_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ConfigurationError(
                f"mixed precisions in one op: {[str(x.dtype) for x in tensors]}"
            )
    return dt


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-d pair; adjoints dA = g.Bt, dB = At.g."""
    _require_rank(a, 2, "matmul lhs")
    _require_rank(b, 2, "matmul rhs")
    _common_dtype(a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    _note_matmul(a.shape[0], a.shape[1], b.shape[1])
    out = Tensor._wrap(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    _require_rank(a, 2, "transpose input")
    out = Tensor._wrap(np.ascontiguousarray(a.data.T))

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _emit(out, (a,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a rank-1 bias broadcast over rows."""
    _common_dtype(a, b)
    if a.shape == b.shape:
        out = Tensor._wrap(a.data + b.data)

        def bwd(g):
            return g, g

        return _emit(out, (a, b), bwd)
    if b.data.ndim == 1 and a.data.ndim == 2 and b.shape[0] == a.shape[1]:
        out = Tensor._wrap(a.data + b.data)

        def bwd_bias(g):
            return g, g.sum(axis=0)

        return _emit(out, (a, b), bwd_bias)
    raise DimensionError(f"add shapes do not conform: {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _common_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data - b.data)

    def bwd(g):
        return g, -g

    return _emit(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shape tensors."""
    _common_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data * b.data)

    def bwd(g):
        return g * b.data, g * a.data

    return _emit(out, (a, b), bwd)


def scalar_mul(s: Tensor, x: Tensor) -> Tensor:
    """Scale `x` by the single-element learnable `s`."""
    if s.size != 1:
        raise DimensionError(f"scalar_mul coefficient must be one element, got {s.shape}")
    _common_dtype(s, x)
    sval = s.data.reshape(-1)[0]
    out = Tensor._wrap(sval * x.data)

    def bwd(g):
        ds = np.array([np.sum(g * x.data)], dtype=g.dtype)
        return ds, sval * g

    return _emit(out, (s, x), bwd)


def const_scale(x: Tensor, c: float) -> Tensor:
    """Scale by a fixed (non-learnable) constant."""
    cval = x.data.dtype.type(c)
    out = Tensor._wrap(cval * x.data)

    def bwd(g):
        return (cval * g,)

    return _emit(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0))
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _emit(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_arr = np.empty_like(d)
    pos = d >= 0
    out_arr[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out_arr[~pos] = ez / (1.0 + ez)
    out = Tensor._wrap(out_arr)

    def bwd(g):
        return (g * out_arr * (1.0 - out_arr),)

    return _emit(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.array([x.data.sum()], dtype=x.dtype))

    def bwd(g):
        return (np.full(x.shape, g.reshape(-1)[0], dtype=g.dtype),)

    return _emit(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor._wrap(np.array([x.data.mean()], dtype=x.dtype))

    def bwd(g):
        return (np.full(x.shape, g.reshape(-1)[0] / n, dtype=g.dtype),)

    return _emit(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}: element counts differ")
    out = Tensor._wrap(np.ascontiguousarray(x.data.reshape(shape)))
    in_shape = x.shape

    def bwd(g):
        return (np.ascontiguousarray(g.reshape(in_shape)),)

    return _emit(out, (x,), bwd)


def col_slice(x: Tensor, j0: int, j1: int) -> Tensor:
    """Columns [j0, j1) of a 2-d tensor."""
    _require_rank(x, 2, "col_slice input")
    if not (0 <= j0 < j1 <= x.shape[1]):
        raise DimensionError(f"column slice [{j0}:{j1}) out of range for {x.shape}")
    out = Tensor._wrap(np.ascontiguousarray(x.data[:, j0:j1]))
    in_shape = x.shape

    def bwd(g):
        full_g = np.zeros(in_shape, dtype=g.dtype)
        full_g[:, j0:j1] = g
        return (full_g,)

    return _emit(out, (x,), bwd)


def concat_cols(parts) -> Tensor:
    """Concatenate 2-d tensors with equal row counts along columns."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_cols needs at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        _require_rank(p, 2, "concat_cols part")
        if p.shape[0] != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {p.shape} vs {parts[0].shape}"
            )
    _common_dtype(*parts)
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def bwd(g):
        grads, j = [], 0
        for w in widths:
            grads.append(np.ascontiguousarray(g[:, j : j + w]))
            j += w
        return grads

    return _emit(out, tuple(parts), bwd)


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    _require_rank(m, 2, "softmax_rows input")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor._wrap(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _emit(out, (m,), bwd)


def pool2d(fmap: Tensor, s: int, kind: str) -> Tensor:
    """Window pooling of an HxWxC map by non-overlapping s x s windows.

    Average pooling spreads its adjoint uniformly; max pooling routes the
    adjoint to the first (row-major) maximal element of each window.
    """
    _require_rank(fmap, 3, "pool2d input")
    if s < 1:
        raise ConfigurationError(f"pool window must be >= 1, got {s}")
    h, w, c = fmap.shape
    if h % s or w % s:
        raise ConfigurationError(
            f"pool window {s} does not divide spatial extents {h}x{w}"
        )
    if kind not in ("avg", "max"):
        raise ConfigurationError(f"unknown pooling kind {kind!r}")
    ho, wo = h // s, w // s
    # (ho, wo, c, s*s) with the window flattened row-major
    windows = np.ascontiguousarray(
        fmap.data.reshape(ho, s, wo, s, c).transpose(0, 2, 4, 1, 3)
    ).reshape(ho, wo, c, s * s)

    def scatter(gwin):
        # inverse of the window gather above
        return np.ascontiguousarray(
            gwin.reshape(ho, wo, c, s, s).transpose(0, 3, 1, 4, 2)
        ).reshape(h, w, c)

    if kind == "avg":
        out = Tensor._wrap(np.ascontiguousarray(windows.mean(axis=-1)))

        def bwd_avg(g):
            gwin = np.broadcast_to(g[..., None] / (s * s), windows.shape)
            return (scatter(np.ascontiguousarray(gwin)),)

        return _emit(out, (fmap,), bwd_avg)

    argmax = windows.argmax(axis=-1)
    out = Tensor._wrap(
        np.ascontiguousarray(
            np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
        )
    )

    def bwd_max(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, argmax[..., None], g[..., None], axis=-1)
        return (scatter(gwin),)

    return _emit(out, (fmap,), bwd_max)


def _resize_coords(n_in: int, n_out: int):
    # sample centers at (i + 0.5) / scale - 0.5, clamped to the valid range
    idx = np.arange(n_out, dtype=np.float64)
    src = (idx + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    w_hi = src - lo
    return lo, hi, w_hi


def bilinear_resize(fmap: Tensor, h_out: int, w_out: int) -> Tensor:
    """Bilinear resampling of an HxWxC map, per channel."""
    _require_rank(fmap, 3, "bilinear_resize input")
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"output extents must be >= 1, got {h_out}x{w_out}")
    h, w, c = fmap.shape
    dt = fmap.dtype
    i0, i1, wi1 = _resize_coords(h, h_out)
    j0, j1, wj1 = _resize_coords(w, w_out)
    wi1 = wi1.astype(dt)[:, None, None]
    wj1 = wj1.astype(dt)[None, :, None]
    wi0 = dt.type(1.0) - wi1
    wj0 = dt.type(1.0) - wj1
    x = fmap.data
    corners = (
        (i0, j0, wi0 * wj0),
        (i0, j1, wi0 * wj1),
        (i1, j0, wi1 * wj0),
        (i1, j1, wi1 * wj1),
    )
    out_arr = np.zeros((h_out, w_out, c), dtype=dt)
    for ri, cj, wgt in corners:
        out_arr += wgt * x[np.ix_(ri, cj)]
    out = Tensor._wrap(out_arr)

    def bwd(g):
        gx = np.zeros((h, w, c), dtype=g.dtype)
        for ri, cj, wgt in corners:
            np.add.at(gx, np.ix_(ri, cj), wgt * g)
        return (gx,)

    return _emit(out, (fmap,), bwd)


def space_to_channel(fmap: Tensor, s: int) -> Tensor:
    """Fold each s x s x C block into one (s*s*C)-channel pixel, row-major."""
    _require_rank(fmap, 3, "space_to_channel input")
    h, w, c = fmap.shape
    if s < 1:
        raise ConfigurationError(f"block size must be >= 1, got {s}")
    if h % s or w % s:
        raise ConfigurationError(
            f"block size {s} does not divide spatial extents {h}x{w}"
        )
    ho, wo = h // s, w // s
    out = Tensor._wrap(
        np.ascontiguousarray(
            fmap.data.reshape(ho, s, wo, s, c).transpose(0, 2, 1, 3, 4)
        ).reshape(ho, wo, s * s * c)
    )

    def bwd(g):
        return (
            np.ascontiguousarray(
                g.reshape(ho, wo, s, s, c).transpose(0, 2, 1, 3, 4)
            ).reshape(h, w, c),
        )

    return _emit(out, (fmap,), bwd)


# ---------------------------------------------------------------------------
# rawtensor v1 file format
# ---------------------------------------------------------------------------


def write_rawtensor(path, tensor: Tensor):
    """One JSON header line, then the row-major little-endian payload."""
    header = {
        "v": 1,
        "dtype": _DTYPE_TO_NAME[tensor.dtype],
        "shape": list(tensor.shape),
    }
    payload = np.ascontiguousarray(tensor.data, dtype=tensor.data.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload.tobytes())


def read_rawtensor(path) -> Tensor:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"bad rawtensor header in {path}: {exc}") from exc
    if header.get("v") != 1:
        raise ConfigurationError(f"unsupported rawtensor version {header.get('v')!r}")
    dt_name = header.get("dtype")
    if dt_name not in _NAME_TO_DTYPE:
        raise ConfigurationError(f"unknown rawtensor dtype {dt_name!r}")
    shape = tuple(int(n) for n in header.get("shape", ()))
    dt = np.dtype(_NAME_TO_DTYPE[dt_name]).newbyteorder("<")
    expected = int(np.prod(shape)) * dt.itemsize
    if len(blob) != expected:
        raise ConfigurationError(
            f"rawtensor payload is {len(blob)} bytes, expected {expected}"
        )
    arr = np.frombuffer(blob, dtype=dt).reshape(shape)
    return Tensor._wrap(np.ascontiguousarray(arr, dtype=_NAME_TO_DTYPE[dt_name]))


def dtype_name(dtype) -> str:
    return _DTYPE_TO_NAME[np.dtype(dtype)]


def dtype_from_name(name: str):
    try:
        return _NAME_TO_DTYPE[name]
    except KeyError:
        raise ConfigurationError(f"unknown dtype name {name!r}") from None
