"""Shape-checked differentiable primitives.

Recording and reverse traversal are delegated to torch's autograd tape: every
primitive returns a tensor whose ``grad_fn`` node holds the pullback, and
``backward`` visits those nodes once each in reverse topological order. What
this module adds is the operand contract: shape mismatches raise
:class:`ShapeError` naming both shapes instead of surfacing deep inside torch.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ShapeError

Tensor = torch.Tensor


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast("mul", a, b)
    return a * b


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.log_softmax(x, dim=dim)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def embedding(table: Tensor, ids: Tensor) -> Tensor:
    if table.dim() != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {tuple(table.shape)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside table of {table.shape[0]} rows")
    return table[ids]


def masked_fill(x: Tensor, mask: Tensor, value: float) -> Tensor:
    """Entries where ``mask`` is true are replaced by ``value`` (no gradient flows through them)."""
    _broadcast("masked_fill", x, mask)
    return x.masked_fill(mask, value)


def sum(x: Tensor, dim: Optional[int | Sequence[int]] = None) -> Tensor:  # noqa: A001
    return x.sum() if dim is None else x.sum(dim=dim)


def mean(x: Tensor, dim: Optional[int | Sequence[int]] = None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: features {tuple(x.shape[-1:])} vs gain {tuple(gain.shape)}"
                         f" / bias {tuple(bias.shape)}")
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def inject_gradient(outputs: Sequence[Tensor], grads: Sequence[Tensor]) -> None:
    """Backpropagate externally computed d(loss)/d(outputs) into the recorded graph."""
    for out, g in zip(outputs, grads):
        if out.shape != g.shape:
            raise ShapeError(f"inject_gradient: output {tuple(out.shape)} vs gradient {tuple(g.shape)}")
    torch.autograd.backward(list(outputs), list(grads))
