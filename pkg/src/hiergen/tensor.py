"""Dense-tensor engine with reverse-mode autodiff, VAE primitives and Adam.

Everything downstream (mesh features, the recursive encoders/decoders, the
training loop) is built on the `Tensor` class defined here.  The tape is
implicit: every op that touches a ``requires_grad`` tensor records its parents
and a backward closure on the output, and ``Tensor.backward()`` replays the
resulting DAG in reverse topological order.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Operand shapes incompatible for a primitive."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {pretty}")


class NumericalError(ArithmeticError):
    """An operation produced NaN/Inf from finite inputs."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


def _finite(primitive: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{primitive} produced non-finite values")
    return arr


def _quiet():
    return np.errstate(divide="ignore", invalid="ignore", over="ignore")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float64 array participating in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- op construction ---------------------------------------------------

    @staticmethod
    def from_op(data, parents, backward, primitive: str = "op") -> "Tensor":
        """Wrap an op result on the tape.

        ``backward(grad)`` must return one gradient array (or None) per
        parent.  This is the extension point other modules use to define
        custom primitives (e.g. the mesh neighbor averaging).
        """
        out = Tensor(_finite(primitive, np.asarray(data, dtype=np.float64)))
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic introspection -----------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    # -- backward pass -------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Accumulates into ``.grad`` of every reachable ``requires_grad``
        tensor (+= semantics, so per-shape losses in a batch accumulate).
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        # Iterative topological sort: deterministic order, no recursion limit.
        topo: list[Tensor] = []
        state: dict[int, int] = {}  # id -> 0 visiting, 1 done
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                state[id(node)] = 1
                topo.append(node)
                continue
            if id(node) in state:
                continue
            state[id(node)] = 0
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in state and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    acc = grads.get(id(p))
                    grads[id(p)] = pg if acc is None else acc + pg
            if node.requires_grad and node._backward is None:
                # leaf tensor: accumulate into .grad
                node.grad = g.copy() if node.grad is None else node.grad + g

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method aliases --------------------------------------------------------

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _broadcast_check(primitive: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(primitive, a.data.shape, b.data.shape) from None


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("div", a, b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    with _quiet():
        data = a.data / b.data
    return Tensor.from_op(data, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    e = float(exponent)

    def backward(g):
        return (g * e * np.power(a.data, e - 1.0),)

    with _quiet():
        data = np.power(a.data, e)
    return Tensor.from_op(data, (a,), backward, "power")


def exp(a) -> Tensor:
    a = _lift(a)
    with _quiet():
        out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return Tensor.from_op(out_data, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        return (g / a.data,)

    with _quiet():
        data = np.log(a.data)
    return Tensor.from_op(data, (a,), backward, "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    with _quiet():
        out_data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out_data,)

    return Tensor.from_op(out_data, (a,), backward, "sqrt")


# -- activations ---------------------------------------------------------------


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = _lift(a)
    factor = np.where(a.data >= 0.0, 1.0, slope)

    def backward(g):
        return (g * factor,)

    return Tensor.from_op(a.data * factor, (a,), backward, "leaky_relu")


def tanh(a) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out_data * out_data),)

    return Tensor.from_op(out_data, (a,), backward, "tanh")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out_data = _sigmoid_np(a.data)

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor.from_op(out_data, (a,), backward, "sigmoid")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        return (g * _sigmoid_np(a.data),)

    return Tensor.from_op(np.logaddexp(0.0, a.data), (a,), backward, "softplus")


# -- structural ops -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad  # both 1-D: dot product

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.data.shape for t in tensors]) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor.from_op(data, tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(data, tensors, backward, "stack")


def reshape(a, shape) -> Tensor:
    a = _lift(a)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return Tensor.from_op(a.data.reshape(shape), (a,), backward, "reshape")


def getitem(a, key) -> Tensor:
    a = _lift(a)
    data = a.data[key]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return Tensor.from_op(data, (a,), backward, "getitem")


def take_rows(a, indices) -> Tensor:
    """Gather rows (axis 0) by an integer index array; duplicates allowed."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(a.data[idx], (a,), backward, "take_rows")


def scatter_add_rows(a, indices, n_rows: int) -> Tensor:
    """Sum rows of `a` into an (n_rows, D) output at the given row indices."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError("scatter_add_rows", a.data.shape, idx.shape)
    data = np.zeros((n_rows, a.data.shape[1]))
    np.add.at(data, idx, a.data)

    def backward(g):
        return (g[idx],)

    return Tensor.from_op(data, (a,), backward, "scatter_add_rows")


# -- reductions ---------------------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = _lift(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return Tensor.from_op(a.data.sum(axis=axis), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = _lift(a)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.data.shape).copy(),)

    return Tensor.from_op(a.data.mean(axis=axis), (a,), backward, "mean")


def max_reduce(a, axis: int = 0) -> Tensor:
    """Max over one axis; the backward routes gradient to the first argmax."""
    a = _lift(a)
    arg = a.data.argmax(axis=axis)

    def backward(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis)
        return (out,)

    return Tensor.from_op(a.data.max(axis=axis), (a,), backward, "max_reduce")


# -- losses -------------------------------------------------------------------


def softmax_cross_entropy(logits, target_index: int) -> Tensor:
    """Cross entropy of a 1-D logit vector against an integer class target."""
    logits = _lift(logits)
    if logits.data.ndim != 1:
        raise ShapeError("softmax_cross_entropy", logits.data.shape)
    t = int(target_index)
    if not 0 <= t < logits.data.shape[0]:
        raise ContractError(f"target index {t} out of range for {logits.data.shape[0]} classes")
    m = logits.data.max()
    shifted = logits.data - m
    log_z = m + np.log(np.exp(shifted).sum())
    probs = np.exp(logits.data - log_z)

    def backward(g):
        grad = probs.copy()
        grad[t] -= 1.0
        return (g * grad,)

    return Tensor.from_op(log_z - logits.data[t], (logits,), backward,
                          "softmax_cross_entropy")


def binary_cross_entropy(logits, targets, reduction: str = "sum") -> Tensor:
    """Numerically stable BCE on raw logits against {0,1} targets."""
    logits = _lift(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ShapeError("binary_cross_entropy", logits.data.shape, t.shape)
    x = logits.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    scale = 1.0 / x.size if reduction == "mean" else 1.0

    def backward(g):
        return (g * scale * (_sigmoid_np(x) - t),)

    value = per.mean() if reduction == "mean" else per.sum()
    return Tensor.from_op(value, (logits,), backward, "binary_cross_entropy")


def mse(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("mse", a.data.shape, b.data.shape)
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        d = g * 2.0 * diff / n
        return d, -d

    return Tensor.from_op((diff * diff).mean(), (a, b), backward, "mse")


def sum_squares(a, b) -> Tensor:
    """Sum of squared differences (the reconstruction-loss building block)."""
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("sum_squares", a.data.shape, b.data.shape)
    diff = a.data - b.data

    def backward(g):
        d = g * 2.0 * diff
        return d, -d

    return Tensor.from_op((diff * diff).sum(), (a, b), backward, "sum_squares")


# -- VAE primitives -------------------------------------------------------------


@dataclass
class GaussianParams:
    """Diagonal Gaussian posterior: mean and log-variance of equal shape."""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.data.shape != self.logvar.data.shape:
            raise ShapeError("gaussian_params", self.mu.data.shape, self.logvar.data.shape)


def gaussian_kl(g: GaussianParams) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) = 0.5 * sum(exp(lv) + mu^2 - 1 - lv)."""
    lv = g.logvar
    term = exp(lv) + g.mu * g.mu - 1.0 - lv
    return sum_(term) * 0.5


def reparameterize(g: GaussianParams, noise) -> Tensor:
    """mu + exp(0.5*logvar) * noise, differentiable in mu and logvar."""
    noise = _lift(noise)
    if noise.data.shape != g.mu.data.shape:
        raise ShapeError("reparameterize", g.mu.data.shape, noise.data.shape)
    return g.mu + exp(g.logvar * 0.5) * noise


# -- Adam optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam with a stepped learning-rate decay schedule."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_every: int = 100
    decay_rate: float = 0.9
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("betas must lie in [0, 1)")

    def effective_lr(self, step: int | None = None) -> float:
        step = self.step_count if step is None else step
        return self.lr * self.decay_rate ** (step // self.decay_every)


def adam_step(state: AdamState, params: dict) -> float:
    """One Adam update over named parameters using their accumulated .grad.

    Returns the learning rate that was applied.  Parameters with no gradient
    (grad None) are treated as zero-gradient.
    """
    state.step_count += 1
    t = state.step_count
    lr = state.effective_lr(t)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", p.data.shape, g.shape)
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.first_moment[name] = m
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return lr


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


def gradients(loss: Tensor, wrt: list[Tensor]) -> list[np.ndarray]:
    """Gradient map of a scalar loss; unreachable tensors get zeros."""
    for p in wrt:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in wrt]


# -- checkpoint archive -----------------------------------------------------------

CHECKPOINT_FORMAT = 1


def save_checkpoint(path, params: dict, config_hash: str = "", step_count: int = 0):
    """Write a zip archive of float32 little-endian payloads plus a JSON header."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "step_count": int(step_count),
        "params": {name: list(p.data.shape) for name, p in params.items()},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=1, sort_keys=True))
        for name, p in params.items():
            zf.writestr(f"params/{name}", p.data.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read back (arrays, header); arrays are float64 upcasts of the payloads."""
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json"))
        arrays = {}
        for name, shape in header["params"].items():
            raw = np.frombuffer(zf.read(f"params/{name}"), dtype="<f4")
            arrays[name] = raw.astype(np.float64).reshape(shape)
    return arrays, header
