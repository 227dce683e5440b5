"""Analytic-versus-numeric gradient agreement checks.

Verifies the backend's gradient path on a handful of embedding coordinates:
central finite differences at double precision against autograd, reported as
per-coordinate relative errors.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import torch

from ..errors import CapabilityError, DomainError, NonFiniteError

MAX_PROBE_SIZE = 8
FD_STEP = 1e-4
REL_TOL = 1e-3

#: Gradients with both magnitudes below this floor count as agreeing zeros.
ZERO_FLOOR = 1e-8


@dataclasses.dataclass(frozen=True)
class GradientProbe:
    """A set of flat coordinates of one embedding to probe.

    Attributes:
        embedding: the tensor the loss is differentiated against.
        indices: flat coordinate indices into it, at most 8.
        loss_fn: scalar loss as a function of the embedding.
    """

    embedding: torch.Tensor
    indices: tuple[int, ...]
    loss_fn: Callable[[torch.Tensor], torch.Tensor]

    def __post_init__(self) -> None:
        if len(self.indices) == 0:
            raise DomainError("probe needs at least one coordinate")
        if len(self.indices) > MAX_PROBE_SIZE:
            raise DomainError(
                f"probe holds {len(self.indices)} coordinates, limit is {MAX_PROBE_SIZE}"
            )
        n = self.embedding.numel()
        for idx in self.indices:
            if not 0 <= idx < n:
                raise DomainError(f"coordinate {idx} outside embedding of size {n}")


@dataclasses.dataclass(frozen=True)
class GradientCheckEntry:
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclasses.dataclass(frozen=True)
class GradientCheckReport:
    entries: tuple[GradientCheckEntry, ...]
    max_rel_error: float
    passed: bool


def _relative(a: float, n: float) -> float:
    if abs(a) < ZERO_FLOOR and abs(n) < ZERO_FLOOR:
        return 0.0
    return abs(a - n) / max(abs(a), abs(n))


def gradient_check(
    backend,
    probe: GradientProbe,
    step: float = FD_STEP,
    threshold: float = REL_TOL,
    analytic_override: Sequence[float] | None = None,
) -> GradientCheckReport:
    """Compare autograd against central finite differences on probe coordinates.

    ``analytic_override`` substitutes externally supplied gradient values for
    the autograd ones, which is how a deliberately corrupted gradient is shown
    to fail the check.

    Raises:
        CapabilityError: if the backend does not support gradients.
        NonFiniteError: if any loss or gradient evaluation is non-finite.
    """
    if not getattr(backend, "supports_gradients", False):
        raise CapabilityError("gradient check needs a gradient-capable backend")
    if step <= 0:
        raise DomainError(f"step must be > 0, got {step}")
    base = probe.embedding.detach().to(torch.float64).clone()

    leaf = base.clone().requires_grad_(True)
    loss = probe.loss_fn(leaf)
    if loss.numel() != 1:
        raise DomainError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteError("loss is non-finite at the probe point")
    (grad,) = torch.autograd.grad(loss, leaf, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(leaf)
    if not torch.isfinite(grad).all():
        raise NonFiniteError("analytic gradient is non-finite")
    grad_flat = grad.reshape(-1)

    entries = []
    for pos, idx in enumerate(probe.indices):
        shifted = base.reshape(-1).clone()
        shifted[idx] += step
        with torch.no_grad():
            loss_plus = probe.loss_fn(shifted.reshape(base.shape))
        shifted[idx] -= 2 * step
        with torch.no_grad():
            loss_minus = probe.loss_fn(shifted.reshape(base.shape))
        if not (torch.isfinite(loss_plus) and torch.isfinite(loss_minus)):
            raise NonFiniteError(f"finite-difference loss non-finite at coordinate {idx}")
        numeric = float((loss_plus - loss_minus) / (2 * step))
        analytic = (
            float(analytic_override[pos])
            if analytic_override is not None
            else float(grad_flat[idx])
        )
        entries.append(
            GradientCheckEntry(
                index=idx,
                analytic=analytic,
                numeric=numeric,
                rel_error=_relative(analytic, numeric),
            )
        )
    max_rel = max(e.rel_error for e in entries)
    return GradientCheckReport(
        entries=tuple(entries), max_rel_error=max_rel, passed=max_rel < threshold
    )
