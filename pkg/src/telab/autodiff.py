"""Minimal reverse-mode automatic differentiation over float64 buffers.

Graphs are built per forward pass (define-by-run).  Broadcasting is
restricted to a leading batch dimension or scalars; anything else needs an
explicit reshape.  ``reduce_max`` remembers its argmax so gradients route
to the first maximal entry, matching the solver's tie-breaking.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "backward",
    "primitive_forward",
    "matmul",
    "add",
    "mul",
    "divide",
    "concat",
    "take_slice",
    "relu",
    "tanh_",
    "row_softmax",
    "layer_norm",
    "reduce_sum",
    "reduce_max",
    "embed_lookup",
    "transpose",
    "reshape",
    "sinusoidal_pe",
    "position_encoding_matrix",
    "ParameterSet",
    "OptimizerState",
    "optimizer_step",
    "GradCheckResult",
    "grad_check",
    "save_tensors",
    "load_tensors",
]


class AutodiffError(ValueError):
    """Shape mismatch, invalid index, or misuse of the graph API."""


class Tensor:
    """A float64 value node; ``requires_grad`` marks trainable leaves."""

    __slots__ = ("values", "grad", "requires_grad", "parents", "backward_fn", "op", "meta")

    def __init__(self, values, requires_grad: bool = False) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.meta: dict | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __truediv__(self, other):
        return divide(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad or p.backward_fn is not None for p in parents):
        out.parents = parents
        out.backward_fn = backward_fn
        out.op = op
        out.requires_grad = True
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise AutodiffError(f"{op}: shapes {sa} and {sb} need an explicit reshape")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")

    def bwd(g, ga, gb):
        ga += _reduce_to(g, a.shape)
        gb += _reduce_to(g, b.shape)

    return _node(a.values + b.values, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")

    def bwd(g, ga, gb):
        ga += _reduce_to(g * b.values, a.shape)
        gb += _reduce_to(g * a.values, b.shape)

    return _node(a.values * b.values, (a, b), bwd, "mul")


def divide(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "divide")

    def bwd(g, ga, gb):
        ga += _reduce_to(g / b.values, a.shape)
        gb += _reduce_to(-g * a.values / (b.values * b.values), b.shape)

    return _node(a.values / b.values, (a, b), bwd, "divide")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise AutodiffError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bwd(g, ga, gb):
        ga += g @ b.values.T
        gb += a.values.T @ g

    return _node(a.values @ b.values, (a, b), bwd, "matmul")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise AutodiffError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, *grads):
        for gp, piece in zip(grads, np.split(g, splits, axis=axis)):
            gp += piece

    return _node(np.concatenate([p.values for p in parts], axis=axis), parts, bwd, "concat")


def take_slice(t: Tensor, key) -> Tensor:
    out_values = t.values[key]

    def bwd(g, gt):
        gt[key] += g

    return _node(out_values, (t,), bwd, "slice")


def relu(t: Tensor) -> Tensor:
    mask = t.values > 0

    def bwd(g, gt):
        gt += g * mask

    return _node(np.where(mask, t.values, 0.0), (t,), bwd, "relu")


def tanh_(t: Tensor) -> Tensor:
    y = np.tanh(t.values)

    def bwd(g, gt):
        gt += g * (1.0 - y * y)

    return _node(y, (t,), bwd, "tanh")


def row_softmax(t: Tensor) -> Tensor:
    z = t.values - t.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, gt):
        gt += s * (g - (g * s).sum(axis=-1, keepdims=True))

    return _node(s, (t,), bwd, "row_softmax")


def layer_norm(t: Tensor, eps: float = 1e-5) -> Tensor:
    x = t.values
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv

    def bwd(g, gt):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        gt += inv * (g - gm - y * gym)

    return _node(y, (t,), bwd, "layer_norm")


def reduce_sum(t: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def bwd(g, gt):
            gt += g  # scalar broadcast
        return _node(np.asarray(t.values.sum()), (t,), bwd, "reduce_sum")

    def bwd_axis(g, gt):
        gt += np.expand_dims(g, axis)

    return _node(t.values.sum(axis=axis), (t,), bwd_axis, "reduce_sum")


def _tie_gap(values: np.ndarray, axis: int | None) -> float:
    if axis is None:
        flat = np.sort(values.reshape(-1))
        return float(flat[-1] - flat[-2]) if flat.size > 1 else np.inf
    if values.shape[axis] < 2:
        return np.inf
    ordered = np.sort(values, axis=axis)
    top = np.take(ordered, -1, axis=axis)
    second = np.take(ordered, -2, axis=axis)
    return float(np.min(top - second))


def reduce_max(t: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        flat_idx = int(np.argmax(t.values))  # first maximal entry

        def bwd(g, gt):
            gt.reshape(-1)[flat_idx] += g

        out = _node(np.asarray(t.values.reshape(-1)[flat_idx]), (t,), bwd, "reduce_max")
    else:
        idx = np.argmax(t.values, axis=axis)
        taken = np.take_along_axis(t.values, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def bwd_axis(g, gt):
            scatter = np.zeros_like(t.values)
            np.put_along_axis(scatter, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            gt += scatter

        out = _node(taken, (t,), bwd_axis, "reduce_max")
    if out.meta is None:
        out.meta = {}
    out.meta["tie_gap"] = _tie_gap(t.values, axis)
    return out


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise AutodiffError(f"lookup index out of range for table of {table.shape[0]} rows")

    def bwd(g, gt):
        np.add.at(gt, ids, g)

    return _node(table.values[ids], (table,), bwd, "embed_lookup")


def transpose(t: Tensor) -> Tensor:
    if t.values.ndim != 2:
        raise AutodiffError("transpose expects a 2-D tensor")

    def bwd(g, gt):
        gt += g.T

    return _node(t.values.T.copy(), (t,), bwd, "transpose")


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bwd(g, gt):
        gt += g.reshape(t.shape)

    return _node(t.values.reshape(shape), (t,), bwd, "reshape")


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "divide": divide,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": take_slice,
    "relu": relu,
    "tanh": tanh_,
    "row_softmax": row_softmax,
    "layer_norm": layer_norm,
    "reduce_sum": reduce_sum,
    "reduce_max": reduce_max,
    "embed_lookup": embed_lookup,
    "transpose": transpose,
    "reshape": reshape,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name (the stable op vocabulary)."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise AutodiffError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every reachable grad-carrying node.

    Repeated calls keep accumulating; zero grads between steps.
    """
    if loss.values.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = local.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        parent_grads = []
        for p in node.parents:
            pg = local.get(id(p))
            if pg is None:
                pg = np.zeros_like(p.values)
                local[id(p)] = pg
            parent_grads.append(pg)
        node.backward_fn(g, *parent_grads)
    for node in order:
        if node.requires_grad and id(node) in local:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += local[id(node)]


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All nodes reachable from ``root`` (for inspection)."""
    return _topo_order(root)


def sinusoidal_pe(position: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos position code: component 2i is
    sin(pos / 10000^(2i/dim)), component 2i+1 the matching cos."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"dim must be a positive even integer, got {dim}")
    if position < 0:
        raise ValueError("position must be nonnegative")
    i = np.arange(dim // 2, dtype=np.float64)
    angle = position / np.power(10000.0, 2.0 * i / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def position_encoding_matrix(n_positions: int, dim: int) -> np.ndarray:
    return np.stack([sinusoidal_pe(p, dim) for p in range(n_positions)])


@dataclass
class ParamGroup:
    name: str
    tensors: dict[str, Tensor]
    frozen: bool = False


class ParameterSet:
    """Named tensors organized in groups; frozen groups never train."""

    def __init__(self) -> None:
        self.groups: dict[str, ParamGroup] = {}

    def add_group(
        self,
        name: str,
        tensors: Mapping[str, Tensor | np.ndarray],
        frozen: bool = False,
    ) -> ParamGroup:
        if name in self.groups:
            raise AutodiffError(f"duplicate parameter group {name!r}")
        wrapped = {}
        for key, t in tensors.items():
            if not isinstance(t, Tensor):
                t = Tensor(np.asarray(t, dtype=np.float64), requires_grad=not frozen)
            else:
                t.requires_grad = not frozen
            wrapped[key] = t
        group = ParamGroup(name, wrapped, frozen)
        self.groups[name] = group
        return group

    def tensor(self, group: str, name: str) -> Tensor:
        return self.groups[group].tensors[name]

    def __getitem__(self, qualified: str) -> Tensor:
        group, _, name = qualified.partition(".")
        return self.tensor(group, name)

    def named(self, trainable_only: bool = False) -> Iterator[tuple[str, Tensor]]:
        for gname, group in self.groups.items():
            if trainable_only and group.frozen:
                continue
            for tname, t in group.tensors.items():
                yield f"{gname}.{tname}", t

    def trainable_parameter_count(self) -> int:
        return sum(t.size for _, t in self.named(trainable_only=True))

    def group_checksum(self, group: str) -> str:
        h = hashlib.sha256()
        for tname in sorted(self.groups[group].tensors):
            t = self.groups[group].tensors[tname]
            h.update(tname.encode())
            h.update(np.ascontiguousarray(t.values).tobytes())
        return h.hexdigest()

    def zero_grads(self) -> None:
        for _, t in self.named(trainable_only=True):
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: np.array(t.values) for name, t in self.named()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, t in self.named():
            if name not in arrays:
                raise AutodiffError(f"checkpoint is missing tensor {name!r}")
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != t.shape:
                raise AutodiffError(f"{name}: checkpoint shape {src.shape} != {t.shape}")
            t.values[...] = src

    def save(self, path: str) -> None:
        layout = {g.name: {"frozen": g.frozen, "tensors": sorted(g.tensors)} for g in self.groups.values()}
        save_tensors(path, self.state_arrays(), extra={"groups": layout})

    def load(self, path: str) -> None:
        arrays, _ = load_tensors(path)
        self.load_state_arrays(arrays)


@dataclass
class OptimizerState:
    """Adaptive moment estimation with bias correction."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ParameterSet, state: OptimizerState) -> None:
    """One bias-corrected moment update of every non-frozen tensor.

    Missing gradients count as zero; all trainable grads are cleared at the
    end.  Frozen groups are never touched.
    """
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for name, t in params.named(trainable_only=True):
        g = t.grad if t.grad is not None else np.zeros_like(t.values)
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(t.values)
        v = state.second_moment.get(name)
        if v is None:
            v = state.second_moment[name] = np.zeros_like(t.values)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.values -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    params.zero_grads()


@dataclass
class GradCheckResult:
    max_rel_error: float
    unreliable: bool


def grad_check(
    fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    eps: float = 1e-6,
    noise_floor: float = 1e-6,
) -> GradCheckResult:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the scalar expression from the given tensors on
    every call.  The result is flagged unreliable when any ``reduce_max``
    in the primal graph sat on a (near-)tie, where the derivative is not
    defined.
    """
    for t in tensors.values():
        t.grad = None
    out = fn()
    backward(out)
    unreliable = any(
        node.meta is not None and node.meta.get("tie_gap", np.inf) < 1e-9
        for node in graph_nodes(out)
    )
    analytic = {
        name: (np.array(t.grad) if t.grad is not None else np.zeros_like(t.values))
        for name, t in tensors.items()
    }

    worst = 0.0
    for name, t in tensors.items():
        flat = t.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), noise_floor)
            worst = max(worst, abs(a - numeric) / denom)
    for t in tensors.values():
        t.grad = None
    return GradCheckResult(max_rel_error=worst, unreliable=unreliable)


_MAGIC = b"NTC1"


def save_tensors(path: str, arrays: Mapping[str, np.ndarray], extra: dict | None = None) -> None:
    """Named-tensor container: JSON manifest plus raw little-endian f64."""
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        src = np.asarray(arrays[name])
        a = np.ascontiguousarray(src, dtype="<f8")  # promotes 0-d to 1-d
        entries.append(
            {"name": name, "dtype": "f64", "shape": list(src.shape), "offset": len(payload)}
        )
        payload.extend(a.tobytes())
    manifest = json.dumps({"tensors": entries, "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        fh.write(bytes(payload))


def load_tensors(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise AutodiffError(f"{path} is not a tensor container")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode())
        payload = fh.read()
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        buf = payload[start : start + 8 * count]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, manifest.get("extra", {})
