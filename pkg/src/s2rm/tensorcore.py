"""Differentiable primitives used by the model code.

Thin adapters over :mod:`torch` autograd. Every array-valued quantity in the
package is a ``torch.Tensor``; the functions here add the shape checking and
error types the rest of the package relies on, plus an independent
finite-difference gradient checker.

Summation order: reductions and contractions are delegated to torch's CPU
kernels. With a fixed thread count (see :func:`set_determinism`) these use a
fixed blocking/reduction order, so forward evaluation is bit-reproducible on
the same build.
"""
from __future__ import annotations

import contextlib
import re
from collections import OrderedDict
from typing import Callable, Iterator, Sequence

import torch

from .errors import DegenerateInputError, DimensionError, NumericError

_ELEMENTWISE = ("exp", "tanh", "sigmoid", "add", "mul", "sub", "scale")
_LABELS = re.compile(r"^([a-zA-Z]*),([a-zA-Z]*)->([a-zA-Z]*)$")


def set_determinism(threads: int = 1) -> None:
    """Pin the intra-op thread count and force deterministic kernels."""
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


@contextlib.contextmanager
def default_dtype(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily change the default floating dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def float64_mode():
    """Float64 default dtype (gradient-check mode)."""
    return default_dtype(torch.float64)


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.get_default_dtype())
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def broadcast_shape(*shapes: Sequence[int]) -> tuple[int, ...]:
    """Trailing-axis broadcast of ``shapes``; raises DimensionError if incompatible."""
    rank = max((len(s) for s in shapes), default=0)
    out = []
    for axis in range(1, rank + 1):
        extents = {s[-axis] for s in shapes if len(s) >= axis}
        extents.discard(1)
        if len(extents) > 1:
            raise DimensionError(f"shapes {[tuple(s) for s in shapes]} do not broadcast")
        out.append(extents.pop() if extents else 1)
    return tuple(reversed(out))


def contract(spec: str, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Labelled two-operand contraction, e.g. ``contract("mak,akv->mkv", w, v)``.

    Labels missing from the output are summed over.
    """
    match = _LABELS.match(spec.replace(" ", ""))
    if match is None:
        raise DimensionError(f"malformed contraction spec {spec!r}")
    la, lb, lo = match.groups()
    if len(la) != a.dim() or len(lb) != b.dim():
        raise DimensionError(
            f"spec {spec!r} expects ranks ({len(la)}, {len(lb)}), got ({a.dim()}, {b.dim()})"
        )
    extents: dict[str, int] = {}
    for labels, operand in ((la, a), (lb, b)):
        for label, extent in zip(labels, operand.shape):
            if extents.setdefault(label, extent) != extent:
                raise DimensionError(
                    f"label {label!r} has extents {extents[label]} and {extent} in {spec!r}"
                )
    unknown = set(lo) - set(extents)
    if unknown:
        raise DimensionError(f"output labels {sorted(unknown)} not present in operands")
    return torch.einsum(f"{la},{lb}->{lo}", a, b)


def elementwise(kind: str, *operands, factor: float | None = None) -> torch.Tensor:
    """Pointwise ``exp``/``tanh``/``sigmoid`` (unary), ``add``/``mul``/``sub`` (binary),
    or ``scale`` (unary, multiplied by ``factor``)."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind in ("exp", "tanh", "sigmoid", "scale"):
        if len(operands) != 1:
            raise DimensionError(f"{kind} takes one operand")
        (x,) = operands
        if kind == "scale":
            if factor is None:
                raise ValueError("scale requires factor")
            return x * factor
        return getattr(torch, kind)(x)
    if len(operands) != 2:
        raise DimensionError(f"{kind} takes two operands")
    a, b = operands
    broadcast_shape(tuple(a.shape), tuple(b.shape))
    return {"add": torch.add, "mul": torch.mul, "sub": torch.sub}[kind](a, b)


def softmax(x: torch.Tensor, axis: int) -> torch.Tensor:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise DimensionError(f"axis {axis} out of range for rank {x.dim()}")
    return torch.softmax(x, dim=axis)


def reduce_sum(x: torch.Tensor, axis: int) -> torch.Tensor:
    return x.sum(dim=axis)


def concat(xs: Sequence[torch.Tensor], axis: int = 0) -> torch.Tensor:
    try:
        return torch.cat(list(xs), dim=axis)
    except RuntimeError as exc:
        raise DimensionError(str(exc)) from exc


def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"cannot apply {tuple(weight.shape)} weight to width {x.shape[-1]}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def l2_normalize(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=axis, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateInputError("cannot normalize a zero vector")
    return x / norm


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    Error per component is ``|analytic - numeric| / max(1, |numeric|)``. Runs
    in float64 regardless of the ambient default dtype.
    """
    with float64_mode():
        x0 = torch.as_tensor(x, dtype=torch.float64).detach().clone()
        xg = x0.clone().requires_grad_(True)
        out = f(xg)
        if out.numel() != 1:
            raise DimensionError("grad_check needs a scalar-valued function")
        if not torch.isfinite(out).all():
            raise NumericError("function value is not finite")
        (analytic,) = torch.autograd.grad(out, xg, allow_unused=True)
        if analytic is None:
            analytic = torch.zeros_like(x0)
        flat = x0.reshape(-1)
        numeric = torch.empty_like(flat)
        with torch.no_grad():
            for i in range(flat.numel()):
                plus = flat.clone()
                minus = flat.clone()
                plus[i] += step
                minus[i] -= step
                fp = f(plus.reshape(x0.shape))
                fm = f(minus.reshape(x0.shape))
                if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                    raise NumericError(f"non-finite value perturbing component {i}")
                numeric[i] = (fp.reshape(()) - fm.reshape(())) / (2 * step)
        analytic = analytic.reshape(-1)
        if not torch.isfinite(analytic).all():
            raise NumericError("analytic gradient is not finite")
        err = (analytic - numeric).abs() / numeric.abs().clamp_min(1.0)
        return float(err.max()) if err.numel() else 0.0


class ParamStore:
    """Insertion-ordered name -> tensor map of trainable parameters."""

    def __init__(self):
        self._items: OrderedDict[str, torch.Tensor] = OrderedDict()

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        store = cls()
        for name, p in module.named_parameters():
            store.add(name, p)
        return store

    def add(self, name: str, tensor: torch.Tensor) -> None:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self._items[name] = tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._items[name]

    def __contains__(self, name) -> bool:
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()
