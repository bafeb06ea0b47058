"""Tensor plumbing shared by every other module.

Values and gradients live in ``torch.Tensor`` objects and reverse-mode
differentiation is delegated to torch autograd.  This module adds the
pieces the rest of the package relies on: precision control, a checked
mode that aborts on non-finite values, a small op-graph evaluator with
shape diagnostics, a tape-guarded ``backward``, a hand-written Adam, a
central-difference gradient probe and the ``VDC1`` checkpoint container.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import os
import struct
import tempfile
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

DENSITY_CLAMP = 30.0

_checked = False


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# precision / checked mode
# ---------------------------------------------------------------------------

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def resolve_dtype(precision: str | torch.dtype) -> torch.dtype:
    if isinstance(precision, torch.dtype):
        return precision
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(_DTYPES)}") from None


@contextlib.contextmanager
def use_precision(precision: str | torch.dtype) -> Iterator[torch.dtype]:
    """Temporarily switch the default floating dtype."""
    old = torch.get_default_dtype()
    dtype = resolve_dtype(precision)
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(old)


@contextlib.contextmanager
def checked_mode(enabled: bool = True) -> Iterator[None]:
    global _checked
    old = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = old


def is_checked() -> bool:
    return _checked


def check_finite(value: Tensor, op: str) -> Tensor:
    if not torch.isfinite(value).all():
        n_bad = int((~torch.isfinite(value)).sum())
        raise NonFiniteError(f"op '{op}' produced {n_bad} non-finite value(s) (shape {tuple(value.shape)})")
    return value


def set_threads(n: int) -> None:
    """Set intra-op threads; 1 is the deterministic reference."""
    torch.set_num_threads(max(1, int(n)))


# ---------------------------------------------------------------------------
# activations used throughout
# ---------------------------------------------------------------------------

def density_activation(pre: Tensor) -> Tensor:
    """softplus with the pre-activation clamped to [-30, 30]."""
    return F.softplus(pre.clamp(-DENSITY_CLAMP, DENSITY_CLAMP))


# ---------------------------------------------------------------------------
# op-graph evaluation
# ---------------------------------------------------------------------------

def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.dim() != 0 and b.dim() != 0:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _binary(fn):
    def run(op, a, b):
        _same_shape(op, a, b)
        return fn(a, b)
    return run


def _matmul(op, a, b):
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"{op}: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def _log(op, a):
    if _checked and bool((a <= 0).any()):
        raise DomainError(f"{op}: log of non-positive input (min {float(a.min())})")
    return torch.log(a)


def _reduce(fn):
    def run(op, a, dim=None):
        if dim is None:
            return fn(a)
        if not -a.dim() <= dim < a.dim():
            raise ShapeError(f"{op}: dim {dim} out of range for shape {tuple(a.shape)}")
        return fn(a, dim=dim)
    return run


def _broadcast(op, a, shape):
    try:
        return a.expand(*shape)
    except RuntimeError:
        raise ShapeError(f"{op}: cannot broadcast {tuple(a.shape)} to {tuple(shape)}") from None


def _slice(op, a, dim, start, stop):
    if not -a.dim() <= dim < a.dim():
        raise ShapeError(f"{op}: dim {dim} out of range for shape {tuple(a.shape)}")
    return a.narrow(dim, start, stop - start)


def _concat(op, dim, *parts):
    ref = parts[0].shape
    for p in parts[1:]:
        if p.dim() != len(ref) or any(s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != dim % len(ref)):
            raise ShapeError(f"{op}: cannot concatenate {tuple(ref)} with {tuple(p.shape)} along dim {dim}")
    return torch.cat(parts, dim=dim)


def _clamp(op, a, lo, hi):
    return a.clamp(lo, hi)


# op name -> (implementation, number of leading tensor operands); any further
# arguments are literals (dims, bounds, shapes).  concat takes a literal dim
# followed by any number of operands.
OPS: dict[str, tuple[Callable, int]] = {
    "add": (_binary(torch.add), 2),
    "sub": (_binary(torch.sub), 2),
    "mul": (_binary(torch.mul), 2),
    "div": (_binary(torch.div), 2),
    "matmul": (_matmul, 2),
    "exp": (lambda op, a: torch.exp(a), 1),
    "log": (_log, 1),
    "sigmoid": (lambda op, a: torch.sigmoid(a), 1),
    "softplus": (lambda op, a: F.softplus(a), 1),
    "sum": (_reduce(torch.sum), 1),
    "mean": (_reduce(torch.mean), 1),
    "broadcast": (_broadcast, 1),
    "slice": (_slice, 1),
    "clamp": (_clamp, 1),
    "min": (lambda op, a, b: torch.minimum(a, torch.as_tensor(b, dtype=a.dtype)), 1),
    "max": (lambda op, a, b: torch.maximum(a, torch.as_tensor(b, dtype=a.dtype)), 1),
}


def evaluate_graph(inputs: Mapping[str, Tensor], expression) -> Tensor:
    """Evaluate a nested-tuple expression over named tensors.

    An expression is an input name, a number, or a tuple ``(op, *args)``,
    e.g. ``("sum", ("sigmoid", "x"))`` or ``("slice", "x", 0, 1, 3)``.
    Autograd records every node; in checked mode each node's output is
    tested for finiteness.
    """

    def ev(node):
        if isinstance(node, str):
            try:
                return inputs[node]
            except KeyError:
                raise KeyError(f"unknown input {node!r}") from None
        if isinstance(node, Tensor):
            return node
        if isinstance(node, (int, float)) and not isinstance(node, bool):
            return torch.tensor(float(node))
        op, *args = node
        if op == "concat":
            out = _concat(op, args[0], *(ev(a) for a in args[1:]))
        else:
            if op not in OPS:
                raise KeyError(f"unknown op {op!r}")
            fn, arity = OPS[op]
            out = fn(op, *(ev(a) for a in args[:arity]), *args[arity:])
        if _checked:
            check_finite(out, op)
        return out

    return ev(expression)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every leaf's ``.grad``.

    The tape is consumed: a second call on the same output raises.
    """
    if output.numel() != 1 or output.dim() != 0:
        raise TapeError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    if getattr(output, "_tape_consumed", False):
        raise TapeError("backward called twice on a consumed tape")
    if _checked:
        check_finite(output, "backward")
    output.backward()
    output._tape_consumed = True


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[Tensor] = field(default_factory=list)
    second_moment: list[Tensor] = field(default_factory=list)
    # per-parameter update counts; parameters without a gradient are skipped
    param_steps: list[int] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        return cls(
            lr=lr,
            beta1=betas[0],
            beta2=betas[1],
            epsilon=eps,
            first_moment=[torch.zeros_like(p) for p in params],
            second_moment=[torch.zeros_like(p) for p in params],
            param_steps=[0] * len(params),
        )


@torch.no_grad()
def adam_step(params: Sequence[Tensor], state: AdamState, grads: Sequence[Tensor | None] | None = None) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``.

    ``grads`` defaults to each parameter's ``.grad``.  A ``None`` gradient
    leaves that parameter and its moments untouched.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if not state.first_moment:
        fresh = AdamState.for_params(params, state.lr, (state.beta1, state.beta2), state.epsilon)
        state.first_moment, state.second_moment, state.param_steps = (
            fresh.first_moment, fresh.second_moment, fresh.param_steps)
    if len(params) != len(state.first_moment) or len(grads) != len(params):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.first_moment)} moments")
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {tuple(g.shape)} vs param shape {tuple(p.shape)}")
        if _checked:
            check_finite(g, "adam_step")
        m, v = state.first_moment[i], state.second_moment[i]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        state.param_steps[i] += 1
        n = state.param_steps[i]
        m_hat = m / (1 - b1 ** n)
        v_hat = v / (1 - b2 ** n)
        p.sub_(state.lr * m_hat / (v_hat.sqrt() + state.epsilon))
    state.step_count += 1
    return state


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(g.square().sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_probes(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_probes: int = 20,
    seed: int = 0,
    min_rel_grad: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic and central-difference derivatives at random coordinates.

    Coordinates are drawn uniformly over the concatenation of all params.
    With ``min_rel_grad > 0`` only coordinates whose analytic derivative is
    at least that fraction of the largest one are eligible; central
    differences cannot resolve derivatives near the roundoff floor
    ``eps * |loss| / h``.
    """
    params = list(params)
    zero_grad(params)
    loss = loss_fn()
    backward(loss)
    analytic_all = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    zero_grad(params)

    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    if min_rel_grad > 0:
        flat_grad = torch.cat([g.reshape(-1) for g in analytic_all]).abs()
        floor = min_rel_grad * float(flat_grad.max())
        eligible = torch.nonzero(flat_grad >= floor).reshape(-1).numpy()
        picks = rng.choice(eligible, size=min(n_probes, eligible.size), replace=False)
    else:
        picks = rng.choice(offsets[-1], size=min(n_probes, offsets[-1]), replace=False)

    analytic, numeric = [], []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[k])
            view = params[k].data.view(-1)
            orig = view[j].item()
            view[j] = orig + h
            up = float(loss_fn())
            view[j] = orig - h
            down = float(loss_fn())
            view[j] = orig
            analytic.append(float(analytic_all[k].view(-1)[j]))
            numeric.append((up - down) / (2 * h))
    return np.asarray(analytic), np.asarray(numeric)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    n_probes: int = 20,
    seed: int = 0,
    min_rel_grad: float = 0.0,
) -> float:
    """Max relative error between autograd and central differences."""
    a, n = finite_diff_probes(loss_fn, params, h=h, n_probes=n_probes, seed=seed, min_rel_grad=min_rel_grad)
    return float(relative_errors(a, n).max()) if len(a) else 0.0


# ---------------------------------------------------------------------------
# VDC1 container
# ---------------------------------------------------------------------------

MAGIC = b"VDC1"
_CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3, np.dtype("uint8"): 4}
_DTYPE_OF = {v: k for k, v in _CODE_OF.items()}


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype not in _CODE_OF:
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int64)
        elif np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        else:
            raise TypeError(f"cannot store dtype {arr.dtype}")
    return arr


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")


def pack_container(entries: Mapping[str, object]) -> bytes:
    chunks = [MAGIC]
    for name, value in entries.items():
        arr = _as_array(value)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", _CODE_OF[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(chunks)


def unpack_container(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not a VDC1 container (bad magic)")
    out: dict[str, np.ndarray] = {}
    pos = 4
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        code, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        dtype = _DTYPE_OF[code].newbyteorder("<")
        count = int(np.prod(shape)) if rank else 1
        nbytes = count * dtype.itemsize
        if pos + nbytes > len(blob):
            raise ValueError(f"truncated container at entry {name!r}")
        out[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
    return out


def save_container(path: str | os.PathLike, entries: Mapping[str, object]) -> Path:
    """Write atomically: temp file in the target directory, fsync, rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = pack_container(entries)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    return path


def load_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return unpack_container(Path(path).read_bytes())


def content_hash(entries: Mapping[str, object]) -> str:
    return hashlib.sha256(pack_container(entries)).hexdigest()


def tensor_hash(tensors: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
