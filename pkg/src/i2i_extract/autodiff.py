"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to the parents' adjoints.  The graph is
rebuilt on every forward pass; :func:`backward` walks it once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

DTYPE = np.float64

# Sign patterns of piecewise-linear ops, recorded only inside kink_patterns().
_kink_log: list[np.ndarray] | None = None


@contextlib.contextmanager
def kink_patterns():
    """Collect the branch pattern of every relu / leaky_relu / abs evaluated inside."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _note_kink(pattern: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(pattern)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Dense float64 array plus graph bookkeeping.

    A tensor built directly by the user is a leaf.  Tensors produced by ops
    carry ``parents`` and a backward closure; ``grad`` holds the adjoint after
    the most recent :func:`backward` call that reached this node.
    """

    __slots__ = ("data", "requires_grad", "parents", "op", "grad", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, parents: tuple = (),
                 op: str = "leaf", backward_fn: BackwardFn | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = parents
        self.op = op
        self.grad: np.ndarray | None = None
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(value: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn,
              op: str) -> Tensor:
    """Register a new graph node. ``backward_fn`` returns one adjoint per parent."""
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, parents=tuple(parents) if needs else (),
                  op=op, backward_fn=backward_fn if needs else None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None


# elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data
    return custom_op(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    return custom_op(a.data ** exponent, (a,),
                     lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def absolute(a: Tensor) -> Tensor:
    _note_kink(np.sign(a.data))
    return custom_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# reductions and shape ops -------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return custom_op(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return custom_op(np.asarray(a.data.mean()), (a,),
                     lambda g: (np.full(a.shape, g / n),), "mean")


def mean_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Mean over ``axes`` with the reduced axes dropped."""
    axes = tuple(ax % a.ndim for ax in axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    kept = tuple(s if i not in axes else 1 for i, s in enumerate(a.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept) / n, a.shape).copy(),)

    return custom_op(a.data.mean(axis=axes), (a,), backward, "mean_axes")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    return custom_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; the backward scatters into zeros."""
    out = a.data[key]

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return custom_op(np.array(out), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise DimensionError(f"rank mismatch {t.shape} vs {ref}", axis="rank")
        for ax, (m, n) in enumerate(zip(t.shape, ref)):
            if ax != axis and m != n:
                raise DimensionError(f"concat shapes {t.shape} vs {ref}", axis=ax)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                     backward, "concat")


# activations --------------------------------------------------------------

def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigurationError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    _note_kink(a.data > 0)
    scale = np.where(a.data > 0, 1.0, slope)
    return custom_op(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    _note_kink(a.data > 0)
    mask = (a.data > 0).astype(DTYPE)
    return custom_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(a: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "relu":
        return relu(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ConfigurationError(f"unknown activation kind {kind!r}")


# convolution / resampling -------------------------------------------------

def _im2col(xt: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Columns ``[C*kh*kw, B*Ho*Wo]`` of a channel-major, already padded input."""
    C, B = xt.shape[:2]
    hspan, wspan = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + hspan:stride, j:j + wspan:stride]
    return cols.reshape(C * kh * kw, B * Ho * Wo)


def _shift_correlate(xt: np.ndarray, k_ijfc: np.ndarray, Ho: int, Wo: int) -> np.ndarray:
    """Stride-1 correlation as one stacked matmul followed by shifted adds."""
    C, B, Hp, Wp = xt.shape
    kh, kw, F, _ = k_ijfc.shape
    y = (k_ijfc.reshape(kh * kw * F, C) @ xt.reshape(C, -1)).reshape(kh, kw, F, B, Hp, Wp)
    out = np.zeros((F, B, Ho, Wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += y[i, j, :, :, i:i + Ho, j:j + Wo]
    return out


def _shift_kernel_grad(xt: np.ndarray, gt: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Stride-1 kernel adjoint without materializing im2col columns.

    With the output adjoint embedded at the top-left of each padded frame, tap
    (i, j) is a flat offset ``i*Wp + j`` into the flattened padded input.
    """
    C, B, Hp, Wp = xt.shape
    F, _, Ho, Wo = gt.shape
    frame = np.zeros((F, B, Hp, Wp), dtype=DTYPE)
    frame[:, :, :Ho, :Wo] = gt
    gfull = frame.reshape(F, -1)
    xfull = xt.reshape(C, -1)
    n = gfull.shape[1]
    gk = np.empty((F, C, kh, kw), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            s = i * Wp + j
            gk[:, :, i, j] = gfull[:, :n - s] @ xfull[:, s:].T
    return gk


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW layout."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be [B,C,H,W], got {x.shape}", axis="rank")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be [F,C,kh,kw], got {kernel.shape}",
                             axis="rank")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"invalid stride={stride} / pad={pad}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"kernel expects {Ck} channels, input has {C}", axis="C")
    if kh > H + 2 * pad:
        raise DimensionError(f"kernel height {kh} exceeds padded height {H + 2 * pad}",
                             axis="H")
    if kw > W + 2 * pad:
        raise DimensionError(f"kernel width {kw} exceeds padded width {W + 2 * pad}",
                             axis="W")
    if bias is not None and bias.shape != (F,):
        raise DimensionError(f"bias shape {bias.shape} != ({F},)", axis="F")

    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    # Work in channel-major layout [C, B, H, W] so the channel contraction is one matmul.
    xt = x.data.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kmat = kernel.data.reshape(F, C * kh * kw)
    # Shifted-product form writes kh*kw*F rows instead of kh*kw*C; cheaper when F < C.
    narrow = stride == 1 and F < C
    cols = None
    if narrow:
        out = _shift_correlate(xt, kernel.data.transpose(2, 3, 0, 1), Ho, Wo)
    else:
        cols = _im2col(xt, kh, kw, stride, Ho, Wo)
        out = (kmat @ cols).reshape(F, B, Ho, Wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gflat = gt.reshape(F, B * Ho * Wo)
        gk = gx = None
        if kernel.requires_grad:
            if cols is not None:
                gk = (gflat @ cols.T).reshape(kernel.shape)
            else:
                gk = _shift_kernel_grad(xt, gt, kh, kw)
        if x.requires_grad:
            if narrow and pad <= min(kh, kw) - 1:
                # Input adjoint is a full correlation with the flipped, transposed kernel.
                q, r = kh - 1 - pad, kw - 1 - pad
                gpad = np.pad(gt, ((0, 0), (0, 0), (q, q), (r, r)))
                flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gx = (flipped.reshape(C, F * kh * kw) @ _im2col(gpad, kh, kw, 1, H, W))
                gx = gx.reshape(C, B, H, W)
            else:
                gcols = (kmat.T @ gflat).reshape(C, kh, kw, B, Ho, Wo)
                gxt = np.zeros(xt.shape, dtype=DTYPE)
                hspan, wspan = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        gxt[:, :, i:i + hspan:stride, j:j + wspan:stride] += gcols[:, i, j]
                gx = gxt[:, :, pad:pad + H, pad:pad + W] if pad else gxt
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        grads = [gx, gk]
        if bias is not None:
            grads.append(gflat.sum(axis=1))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return custom_op(out, parents, backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"upsample input must be [B,C,H,W], got {x.shape}", axis="rank")
    if factor == 1:
        return custom_op(x.data.copy(), (x,), lambda g: (g,), "upsample")
    B, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None],
                          (B, C, H, factor, W, factor)).reshape(B, C, H * factor, W * factor)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return custom_op(out, (x,), backward, "upsample")


# losses -------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        axis = next((i for i, (m, n) in enumerate(zip(a.shape, b.shape)) if m != n), "rank")
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ", axis=axis)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "l1")
    return mean_all(absolute(a - b))


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mse")
    diff = a - b
    return mean_all(diff * diff)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, stable for any finite logit."""
    logits, targets = as_tensor(logits), as_tensor(targets)
    _same_shape(logits, targets, "bce_with_logits")
    x, t = logits.data, targets.data
    n = x.size
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    value = np.asarray(per.mean())

    def backward(g):
        return (g * (_stable_sigmoid(x) - t) / n, None)

    return custom_op(value, (logits, targets), backward, "bce_with_logits")


def loss(kind: str, a: Tensor, b) -> Tensor:
    if kind == "l1":
        return l1_loss(a, b)
    if kind == "mse":
        return mse_loss(a, b)
    if kind == "bce_with_logits":
        return bce_with_logits(a, b)
    raise ConfigurationError(f"unknown loss kind {kind!r}")


# parameter groups and backward -------------------------------------------

@dataclass
class ParamGroup:
    """Ordered, uniquely named parameters of one generator or discriminator."""

    name: str
    params: dict[str, Tensor] = field(default_factory=dict)

    def add(self, pname: str, value: np.ndarray) -> Tensor:
        if pname in self.params:
            raise ConfigurationError(f"duplicate parameter {pname!r} in group {self.name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[pname] = t
        return t

    def __getitem__(self, pname: str) -> Tensor:
        return self.params[pname]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params.values()]

    def load(self, values: Iterable[np.ndarray]) -> None:
        for p, v in zip(self.params.values(), values, strict=True):
            if p.data.shape != np.shape(v):
                raise DimensionError(f"parameter shape {p.data.shape} vs {np.shape(v)}")
            p.data[...] = v

    def num_elements(self) -> int:
        return sum(p.size for p in self.params.values())


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def grad(loss_node: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Adjoints of a scalar ``loss_node`` w.r.t. ``wrt``; unreachable tensors get zeros."""
    if loss_node.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss_node.shape}")
    order = _toposort(loss_node)
    # Only nodes with a path to a requested tensor need adjoints.
    targets = {id(t) for t in wrt}
    needed: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in needed for p in node.parents):
            needed.add(id(node))
    pruned = [n for n in order if id(n) not in needed and n.requires_grad]
    for n in pruned:
        n.requires_grad = False
    adj: dict[int, np.ndarray] = {id(loss_node): np.ones_like(loss_node.data)}
    try:
        for node in reversed(order):
            g = adj.get(id(node))
            node.grad = g
            if g is None or node._backward is None or id(node) not in needed:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or id(parent) not in needed:
                    continue
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
    finally:
        for n in pruned:
            n.requires_grad = True
    out = []
    for t in wrt:
        g = adj.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(t.shape))
    return out


def backward(loss_node: Tensor, groups: Sequence[ParamGroup]) -> dict[str, list[np.ndarray]]:
    """Gradient map ``group name -> [grad per param]`` for a scalar loss."""
    flat = [p for grp in groups for p in grp]
    grads = grad(loss_node, flat)
    result: dict[str, list[np.ndarray]] = {}
    i = 0
    for grp in groups:
        result[grp.name] = grads[i:i + len(grp)]
        i += len(grp)
    return result


@dataclass
class FiniteDiffReport:
    max_rel_error: float  # over the checked coordinates
    checked: int
    skipped_kinks: int  # coordinates whose +-step probe changed a relu/abs branch
    raw_max_rel_error: float  # including kink-crossing coordinates


def _same_patterns(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_report(group: ParamGroup, loss_closure: Callable[[], Tensor],
                       step: float = 1e-3, n_samples: int | None = 200, seed: int = 0,
                       skip_kinks: bool = False) -> FiniteDiffReport:
    """Compare autodiff against central differences on sampled coordinates.

    With ``skip_kinks`` a coordinate is excluded when either probe ``w +- step``
    switches the branch of any relu, leaky_relu or abs relative to ``w``: the
    central difference then straddles a kink and does not estimate the
    derivative.  Sampling continues until ``n_samples`` coordinates have been
    checked or the group is exhausted.  Parameters are restored exactly.
    """
    if step <= 0:
        raise ConfigurationError("step must be > 0")
    with kink_patterns() as base_pattern:
        grads = backward(loss_closure(), [group])[group.name]
    tensors = group.tensors()
    coords = [(ti, idx) for ti, p in enumerate(tensors) for idx in np.ndindex(p.shape)]
    if n_samples is not None and n_samples < len(coords):
        order = np.random.default_rng(seed).permutation(len(coords))
        coords = [coords[k] for k in order]
        target = n_samples
    else:
        target = len(coords)
    worst = raw_worst = 0.0
    checked = skipped = 0
    for ti, idx in coords:
        if checked >= target:
            break
        p = tensors[ti]
        orig = p.data[idx]
        try:
            with kink_patterns() as up_pattern:
                p.data[idx] = orig + step
                up = loss_closure().item()
            with kink_patterns() as down_pattern:
                p.data[idx] = orig - step
                down = loss_closure().item()
        finally:
            p.data[idx] = orig
        g_fd = (up - down) / (2.0 * step)
        g_ad = float(grads[ti][idx])
        err = abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)
        raw_worst = max(raw_worst, err)
        if skip_kinks and not (_same_patterns(up_pattern, base_pattern)
                               and _same_patterns(down_pattern, base_pattern)):
            skipped += 1
            continue
        checked += 1
        worst = max(worst, err)
    return FiniteDiffReport(worst, checked, skipped, raw_worst)


def finite_diff_check(group: ParamGroup, loss_closure: Callable[[], Tensor],
                      step: float = 1e-3, n_samples: int | None = 200,
                      seed: int = 0, skip_kinks: bool = False) -> float:
    """Max over sampled coordinates of ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.

    See :func:`finite_diff_report` for ``skip_kinks``.
    """
    return finite_diff_report(group, loss_closure, step, n_samples, seed,
                              skip_kinks).max_rel_error
