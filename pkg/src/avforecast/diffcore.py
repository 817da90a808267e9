"""Differentiable tensor substrate.

A fixed catalog of float64 forward ops (backed by torch autograd), a named
parameter store, a bias-corrected ADAM step, finite-difference gradient
checking and the binary checkpoint container.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"AVFCKPT\x00"
CHECKPOINT_VERSION = 1

torch.use_deterministic_algorithms(True)


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def as_tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


# ---------------------------------------------------------------------------
# op catalog

_CHECK_FINITE = True


@contextmanager
def finite_checks(enabled: bool):
    """Toggle per-op input finiteness validation (hot loops that already
    check their loss can switch it off)."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _finite(op: str, *xs: torch.Tensor) -> None:
    if not _CHECK_FINITE:
        return
    for i, x in enumerate(xs):
        if x is not None and not bool(torch.isfinite(x).all()):
            raise NonFiniteError(f"{op}: input {i} contains non-finite values")


def _expect(op: str, what: str, got, want) -> None:
    if got != want:
        raise ShapeError(f"{op}: {what} is {got}, expected {want}")


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis; ``w`` is (out, in)."""
    _finite("linear", x, w, b)
    if w.dim() != 2:
        raise ShapeError(f"linear: weight must be 2-d, got shape {tuple(w.shape)}")
    _expect("linear", "input dim -1", x.shape[-1], w.shape[1])
    if b is not None:
        _expect("linear", "bias dim 0", b.shape[0], w.shape[0])
    return F.linear(x, w, b)


def conv2d(x, w, b=None, stride: int = 2, padding: int = 1):
    _finite("conv2d", x, w, b)
    if x.dim() != 4 or w.dim() != 4:
        raise ShapeError("conv2d: input and weight must be 4-d (N, C, H, W)")
    _expect("conv2d", "input channels (dim 1)", x.shape[1], w.shape[1])
    return F.conv2d(x, w, b, stride=stride, padding=padding)


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 1):
    """Transposed convolution; ``w`` is (C_in, C_out, k, k)."""
    _finite("conv_transpose2d", x, w, b)
    if x.dim() != 4 or w.dim() != 4:
        raise ShapeError("conv_transpose2d: input and weight must be 4-d")
    _expect("conv_transpose2d", "input channels (dim 1)", x.shape[1], w.shape[0])
    return F.conv_transpose2d(x, w, b, stride=stride, padding=padding)


def batch_norm2d(x, gamma, beta, running_mean, running_var, training: bool,
                 momentum: float = 0.1, eps: float = 1e-5):
    """2D batch norm. Training mode normalizes with batch statistics and
    updates the running buffers in place; inference uses the buffers."""
    _finite("batch_norm2d", x, gamma, beta)
    if x.dim() != 4:
        raise ShapeError(f"batch_norm2d: input must be 4-d, got {x.dim()}-d")
    _expect("batch_norm2d", "channels (dim 1)", x.shape[1], gamma.shape[0])
    if training:
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
        n = x.numel() // x.shape[1]
        with torch.no_grad():
            running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
            unbiased = var.detach() * (n / max(n - 1, 1))
            running_var.mul_(1 - momentum).add_(momentum * unbiased)
    else:
        mean, var = running_mean, running_var
    shape = (1, -1, 1, 1)
    xhat = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + eps)
    return xhat * gamma.view(shape) + beta.view(shape)


def leaky_relu(x, slope: float = 0.2):
    # x >= 0 takes the right-derivative (1) at the kink
    _finite("leaky_relu", x)
    return torch.where(x >= 0, x, slope * x)


def sigmoid(x):
    _finite("sigmoid", x)
    return torch.sigmoid(x)


def tanh(x):
    _finite("tanh", x)
    return torch.tanh(x)


def softmax(x, dim: int = -1, mask=None):
    """Softmax; ``mask`` (bool, broadcastable) marks entries to exclude."""
    _finite("softmax", x)
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    return torch.softmax(x, dim=dim)


def concat(xs: list, dim: int = -1):
    if not xs:
        raise ShapeError("concat: empty input list")
    _finite("concat", *xs)
    ref = list(xs[0].shape)
    d = dim % len(ref)
    for i, x in enumerate(xs[1:], 1):
        s = list(x.shape)
        if len(s) != len(ref):
            raise ShapeError(f"concat: input {i} has rank {len(s)}, expected {len(ref)}")
        for k, (a, b) in enumerate(zip(s, ref)):
            if k != d and a != b:
                raise ShapeError(f"concat: input {i} dim {k} is {a}, expected {b}")
    return torch.cat(xs, dim=dim)


def lstm_cell(x, h, c, w_ih, w_hh, b):
    """One LSTM step with gate order (input, forget, cell, output)."""
    _finite("lstm_cell", x, h, c, w_ih, w_hh, b)
    hidden = h.shape[-1]
    _expect("lstm_cell", "w_ih rows", w_ih.shape[0], 4 * hidden)
    _expect("lstm_cell", "input dim -1", x.shape[-1], w_ih.shape[1])
    _expect("lstm_cell", "w_hh cols", w_hh.shape[1], hidden)
    gates = F.linear(x, w_ih) + F.linear(h, w_hh) + b
    i, f, g, o = gates.chunk(4, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def _same_shape(op, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


def add(a, b):
    _finite("add", a, b)
    _same_shape("add", a, b)
    return a + b


def sub(a, b):
    _finite("sub", a, b)
    _same_shape("sub", a, b)
    return a - b


def mul(a, b):
    _finite("mul", a, b)
    _same_shape("mul", a, b)
    return a * b


def matmul(a, b):
    _finite("matmul", a, b)
    _expect("matmul", "inner dim", a.shape[-1], b.shape[-2])
    return a @ b


def exp(x):
    _finite("exp", x)
    return torch.exp(x)


def log(x):
    _finite("log", x)
    return torch.log(x)


def square(x):
    _finite("square", x)
    return x * x


def sum_(x, dim=None):
    _finite("sum", x)
    return x.sum() if dim is None else x.sum(dim=dim)


def mean(x, dim=None):
    _finite("mean", x)
    return x.mean() if dim is None else x.mean(dim=dim)


CATALOG: dict[str, Callable] = {
    "linear": linear,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "batch_norm2d": batch_norm2d,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
    "concat": concat,
    "lstm_cell": lstm_cell,
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "square": square,
    "sum": sum_,
    "mean": mean,
}


def forward(kind: str, inputs: Iterable, **attrs):
    """Evaluate catalog op ``kind`` on ``inputs``."""
    try:
        fn = CATALOG[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    inputs = list(inputs)
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# parameters

class ParamStore:
    """Ordered name -> float64 tensor map.

    Trainable entries are autograd leaves; buffers (batch-norm running
    statistics) live alongside them but never receive gradients.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self.entries: OrderedDict[str, torch.Tensor] = OrderedDict()
        self._buffers: set[str] = set()
        self.generator = torch.Generator().manual_seed(rng_seed)

    def add(self, name: str, value, trainable: bool = True) -> torch.Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(value, dtype=DTYPE).detach().clone()
        if trainable:
            t.requires_grad_(True)
        else:
            self._buffers.add(name)
        self.entries[name] = t
        return t

    def normal(self, name: str, shape, std: float) -> torch.Tensor:
        return self.add(name, torch.randn(*shape, generator=self.generator, dtype=DTYPE) * std)

    def uniform(self, name: str, shape, bound: float) -> torch.Tensor:
        u = torch.rand(*shape, generator=self.generator, dtype=DTYPE)
        return self.add(name, (2 * u - 1) * bound)

    def zeros(self, name: str, shape, trainable: bool = True) -> torch.Tensor:
        return self.add(name, torch.zeros(*shape, dtype=DTYPE), trainable)

    def ones(self, name: str, shape, trainable: bool = True) -> torch.Tensor:
        return self.add(name, torch.ones(*shape, dtype=DTYPE), trainable)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def trainable(self, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(
            (k, v) for k, v in self.entries.items()
            if k not in self._buffers and k.startswith(prefix)
        )

    def numel(self, prefix: str = "") -> int:
        return sum(v.numel() for v in self.trainable(prefix).values())

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite values in place from arrays keyed by name."""
        for name, t in self.entries.items():
            if name not in arrays:
                raise KeyError(f"missing entry {name!r}")
            a = np.asarray(arrays[name])
            if tuple(a.shape) != tuple(t.shape):
                raise ShapeError(f"{name}: shape {a.shape}, expected {tuple(t.shape)}")
            with torch.no_grad():
                t.copy_(torch.from_numpy(a.astype(np.float64)))

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().numpy().copy()) for k, v in self.entries.items())


# ---------------------------------------------------------------------------
# gradients

def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> "OrderedDict[str, torch.Tensor]":
    """Gradient of a scalar ``loss`` w.r.t. each named parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    leaves = [params[n] for n in names]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    else:
        grads = [None] * len(leaves)
    out = OrderedDict()
    for n, p, g in zip(names, leaves, grads):
        out[n] = torch.zeros_like(p, requires_grad=False) if g is None else g.detach()
    return out


def clip_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm <= max_norm; returns the
    pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, torch.Tensor], **kw) -> "AdamState":
        st = cls(**kw)
        for n, p in params.items():
            st.m[n] = torch.zeros_like(p, requires_grad=False)
            st.v[n] = torch.zeros_like(p, requires_grad=False)
        return st


def adam_update(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
                state: AdamState, lr: float) -> AdamState:
    """One bias-corrected ADAM step, in place on ``params`` and ``state``."""
    for n, g in grads.items():
        if n not in params:
            raise KeyError(f"gradient for unknown parameter {n!r}")
        if tuple(g.shape) != tuple(params[n].shape):
            raise ShapeError(f"adam_update: grad {n} has shape {tuple(g.shape)}, param {tuple(params[n].shape)}")
        if n not in state.m:
            state.m[n] = torch.zeros_like(g)
            state.v[n] = torch.zeros_like(g)
        if tuple(state.m[n].shape) != tuple(g.shape):
            raise ShapeError(f"adam_update: state for {n} has shape {tuple(state.m[n].shape)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for n, g in grads.items():
            m, v = state.m[n], state.v[n]
            m.mul_(b1).add_((1 - b1) * g)
            v.mul_(b2).add_((1 - b2) * g * g)
            params[n].sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return state


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def grad_check(fn: Callable[[], torch.Tensor], point: Mapping[str, torch.Tensor], eps: float = 1e-5,
               n_coords: int = 32, seed: int = 0,
               skip: Callable[[str, tuple], bool] | None = None) -> GradCheckResult:
    """Compare autograd gradients of ``fn()`` with central differences.

    ``fn`` closes over the tensors in ``point``; coordinates are perturbed in
    place. Relative error is ``|analytic - numeric| / max(1, |analytic|)``.
    Coordinates where ``fn`` goes non-finite are skipped and counted.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads = backward(fn(), point)
    rng = np.random.default_rng(seed)
    coords = []
    names = [n for n in point if point[n].numel() > 0]
    sizes = np.array([point[n].numel() for n in names], dtype=float)
    for _ in range(n_coords):
        n = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = tuple(int(i) for i in np.unravel_index(rng.integers(point[n].numel()), tuple(point[n].shape)))
        if skip is not None and skip(n, idx):
            continue
        coords.append((n, idx))
    worst, worst_at, skipped = 0.0, None, 0
    with torch.no_grad():
        for n, idx in coords:
            p = point[n]
            orig = p[idx].item()
            p[idx] = orig + eps
            fp = float(fn())
            p[idx] = orig - eps
            fm = float(fn())
            p[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * eps)
            analytic = float(grads[n][idx])
            err = abs(analytic - numeric) / max(1.0, abs(analytic))
            if err > worst:
                worst, worst_at = err, (n, idx, analytic, numeric)
    return GradCheckResult(worst, len(coords) - skipped, skipped, worst_at)


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: magic (8 bytes) | u64 LE header length | UTF-8 JSON header |
# float64 LE payloads concatenated in header name order

def _adam_header(st: AdamState) -> dict:
    return {"beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step}


def save_checkpoint(path, tensors: Mapping[str, np.ndarray | torch.Tensor],
                    adam: AdamState | Mapping[str, AdamState] | None = None,
                    meta: dict | None = None) -> None:
    """Write tensors (plus ADAM moments, stored as ``adam/<group>/m|v/<name>``)."""
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for k, v in tensors.items():
        arrays[k] = v.detach().numpy() if torch.is_tensor(v) else np.asarray(v)
    adam_hdr = None
    if isinstance(adam, AdamState):
        adam_hdr = _adam_header(adam)
        groups = {"": adam}
    elif adam:
        adam_hdr = {g: _adam_header(s) for g, s in adam.items()}
        groups = dict(adam)
    else:
        groups = {}
    for g, st in groups.items():
        pre = f"adam/{g}/" if g else "adam/"
        for n in st.m:
            arrays[f"{pre}m/{n}"] = st.m[n].numpy()
            arrays[f"{pre}v/{n}"] = st.v[n].numpy()
    header = {
        "version": CHECKPOINT_VERSION,
        "names": list(arrays),
        "shapes": [list(a.shape) for a in arrays.values()],
        "dtype": "f64",
        "adam": adam_hdr,
        "meta": meta or {},
    }
    hbytes = json.dumps(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    adam: AdamState | dict | None
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    for key in ("version", "names", "shapes", "dtype"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")
    if header["version"] != CHECKPOINT_VERSION or header["dtype"] != "f64":
        raise CheckpointError(f"{path}: unsupported version/dtype {header['version']}/{header['dtype']}")
    off = 16 + hlen
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated payload at {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=off).reshape(shape).astype(np.float64)
        off += n
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")

    def rebuild(pre: str, hdr: dict) -> AdamState:
        st = AdamState(step=int(hdr["step"]), beta1=hdr["beta1"], beta2=hdr["beta2"], eps=hdr["eps"])
        for k, a in arrays.items():
            if k.startswith(pre + "m/"):
                st.m[k[len(pre) + 2:]] = torch.from_numpy(a.copy())
            elif k.startswith(pre + "v/"):
                st.v[k[len(pre) + 2:]] = torch.from_numpy(a.copy())
        return st

    adam_hdr = header.get("adam")
    adam = None
    if adam_hdr is not None:
        if "step" in adam_hdr:
            adam = rebuild("adam/", adam_hdr)
        else:
            adam = {g: rebuild(f"adam/{g}/", h) for g, h in adam_hdr.items()}
    tensors = OrderedDict((k, a) for k, a in arrays.items() if not k.startswith("adam/"))
    return Checkpoint(tensors, adam, header.get("meta", {}))
