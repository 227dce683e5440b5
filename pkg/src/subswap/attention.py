"""Attention mathematics and the swap decision policy.

The denoiser's attention sublayers all route through :func:`scaled_attention`,
which exposes the two quantities the swap operates on:

* the row-stochastic attention map ``softmax(q k^T / sqrt(d))``, and
* the attention output ``map @ v``.

For self-attention the map is called M and the output phi; for cross-attention
the map is called A. Swapping replaces the target trajectory's M, phi, or A
with the source trajectory's stored values during the first ``lambda`` executed
denoising steps, counted from the noisiest timestep (step index j, with j = 1
at t = T). The cross-attention output is never injected; it is always
recomputed from the target's values.
"""

from __future__ import annotations

import dataclasses
import math
import warnings

import torch

from .errors import (
    BankIncompleteError,
    DomainError,
    IncompatibleResolutionError,
    NonFiniteError,
    PromptLengthError,
    ShapeError,
)

KIND_SELF = "self"
KIND_CROSS = "cross"
KINDS = (KIND_SELF, KIND_CROSS)

#: Validation slack for row sums of stored attention maps.
ROW_SUM_TOL = 1e-5


def _require_finite(name: str, tensor: torch.Tensor) -> None:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"{name} contains non-finite values")


def scaled_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Compute the attention map and output for one head.

    Args:
        q: queries, shape ``[..., n_query, d]``.
        k: keys, shape ``[..., n_key, d]``.
        v: values, shape ``[..., n_key, d_v]``.

    Returns:
        ``(map, output)`` where ``map = softmax(q k^T / sqrt(d))`` has shape
        ``[..., n_query, n_key]`` with rows summing to 1, and
        ``output = map @ v`` has shape ``[..., n_query, d_v]``.

    Raises:
        ShapeError: if the trailing dimensions are incompatible.
        NonFiniteError: if any input contains NaN or infinity.
    """
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeError("q, k, v must have at least 2 dimensions")
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(
            f"query dim {d} does not match key dim {k.shape[-1]}"
        )
    if v.shape[-2] != k.shape[-2]:
        raise ShapeError(
            f"value count {v.shape[-2]} does not match key count {k.shape[-2]}"
        )
    for name, t in (("q", q), ("k", k), ("v", v)):
        _require_finite(name, t)
    logits = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(d)
    attn_map = torch.softmax(logits, dim=-1)
    output = torch.matmul(attn_map, v)
    return attn_map, output


@dataclasses.dataclass(frozen=True)
class SwapSchedule:
    """Per-quantity swap step counts ``(lambda_phi, lambda_m, lambda_a)``.

    Each lambda is the number of leading denoising steps during which the
    corresponding source quantity replaces the target's. ``lambda_phi``
    controls the self-attention output phi, ``lambda_m`` the self-attention
    map M, ``lambda_a`` the cross-attention map A.
    """

    lambda_phi: int
    lambda_m: int
    lambda_a: int

    def __post_init__(self) -> None:
        for name, value in self.as_dict().items():
            if not isinstance(value, int) or isinstance(value, bool):
                raise DomainError(f"{name} must be an integer, got {value!r}")
            if value < 0:
                raise DomainError(f"{name} must be >= 0, got {value}")

    def as_dict(self) -> dict[str, int]:
        return {
            "lambda_phi": self.lambda_phi,
            "lambda_m": self.lambda_m,
            "lambda_a": self.lambda_a,
        }

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.lambda_phi, self.lambda_m, self.lambda_a)

    @property
    def max_step(self) -> int:
        """Last step index at which any source quantity is injected."""
        return max(self.as_tuple())

    def clamped_to(self, total_steps: int) -> "SwapSchedule":
        """Clamp lambda values to ``total_steps``, warning when they exceed it."""
        if total_steps < 0:
            raise DomainError(f"total_steps must be >= 0, got {total_steps}")
        if self.max_step <= total_steps:
            return self
        warnings.warn(
            f"swap schedule {self.as_tuple()} exceeds {total_steps} steps; clamping",
            stacklevel=2,
        )
        return SwapSchedule(
            min(self.lambda_phi, total_steps),
            min(self.lambda_m, total_steps),
            min(self.lambda_a, total_steps),
        )


@dataclasses.dataclass(frozen=True)
class SwapFlags:
    """Which source quantities replace the target's at one step."""

    use_source_phi: bool
    use_source_m: bool
    use_source_a: bool

    @property
    def any_self(self) -> bool:
        return self.use_source_phi or self.use_source_m

    @property
    def any(self) -> bool:
        return self.use_source_phi or self.use_source_m or self.use_source_a


def decide_swap(step: int, schedule: SwapSchedule) -> SwapFlags:
    """Decide which source quantities are injected at denoising step ``step``.

    ``step`` counts executed denoising steps starting at 1 for the noisiest
    timestep. A quantity is taken from the source exactly when
    ``step <= lambda`` for its schedule entry; the decision depends on nothing
    else.

    Raises:
        DomainError: if ``step < 1``.
    """
    if not isinstance(step, int) or isinstance(step, bool):
        raise DomainError(f"step must be an integer, got {step!r}")
    if step < 1:
        raise DomainError(f"step must be >= 1, got {step}")
    return SwapFlags(
        use_source_phi=step <= schedule.lambda_phi,
        use_source_m=step <= schedule.lambda_m,
        use_source_a=step <= schedule.lambda_a,
    )


@dataclasses.dataclass(frozen=True)
class AttentionRecord:
    """One head's captured attention state at one step of one layer.

    Attributes:
        step: denoising step index, 1-based from the noisiest timestep.
        layer_id: stable identifier of the attention sublayer.
        head: head index within the sublayer.
        kind: ``"self"`` or ``"cross"``.
        map: row-stochastic attention map, ``[n_query, n_key]``.
        output: attention output phi, ``[n_query, d_v]``; stored for
            self-attention only, ``None`` for cross-attention.
    """

    step: int
    layer_id: str
    head: int
    kind: str
    map: torch.Tensor
    output: torch.Tensor | None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DomainError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.step < 1:
            raise DomainError(f"step must be >= 1, got {self.step}")
        if self.head < 0:
            raise DomainError(f"head must be >= 0, got {self.head}")
        if self.map.ndim != 2:
            raise ShapeError(f"map must be 2-D, got shape {tuple(self.map.shape)}")
        if self.kind == KIND_CROSS and self.output is not None:
            raise ShapeError("cross-attention records do not store an output")
        if self.output is not None:
            if self.output.ndim != 2:
                raise ShapeError(
                    f"output must be 2-D, got shape {tuple(self.output.shape)}"
                )
            if self.output.shape[0] != self.map.shape[0]:
                raise ShapeError(
                    "output rows must match map rows: "
                    f"{self.output.shape[0]} vs {self.map.shape[0]}"
                )
        self.validate_map()

    def validate_map(self) -> None:
        """Check the stored map is row-stochastic within tolerance."""
        _require_finite("map", self.map)
        if self.map.numel() == 0:
            raise ShapeError("map must be non-empty")
        lo = float(self.map.min())
        hi = float(self.map.max())
        if lo < 0.0 or hi > 1.0:
            raise NonFiniteError(
                f"map entries must lie in [0, 1], found range [{lo}, {hi}]"
            )
        row_sums = self.map.sum(dim=-1)
        err = float((row_sums - 1.0).abs().max())
        if err > ROW_SUM_TOL:
            raise NonFiniteError(
                f"map rows must sum to 1 within {ROW_SUM_TOL}, worst error {err}"
            )

    def key(self) -> tuple[int, str, int, str]:
        return (self.step, self.layer_id, self.head, self.kind)


def _check_query_match(record: AttentionRecord, target_map: torch.Tensor) -> None:
    if record.map.shape[0] != target_map.shape[0]:
        raise IncompatibleResolutionError(
            f"source operates on {record.map.shape[0]} queries, "
            f"target on {target_map.shape[0]}"
        )


def apply_self_swap(
    source_record: AttentionRecord | None,
    target_map: torch.Tensor,
    target_v: torch.Tensor,
    flags: SwapFlags,
) -> torch.Tensor:
    """Produce one head's self-attention output under the swap flags.

    Precedence: an active phi swap returns the stored source output verbatim
    and the map flag is ignored; an active map swap recomputes the output as
    ``source_map @ target_v``; otherwise the target's own ``map @ v`` stands.

    Raises:
        BankIncompleteError: if phi is requested but absent from the record.
        IncompatibleResolutionError: if source and target query or key counts
            disagree for the requested quantity.
        ShapeError: if a provided record is not a self-attention record.
    """
    if target_map.ndim != 2 or target_v.ndim != 2:
        raise ShapeError("target_map and target_v must be 2-D")
    if target_map.shape[1] != target_v.shape[0]:
        raise ShapeError(
            f"target map keys {target_map.shape[1]} do not match "
            f"target value count {target_v.shape[0]}"
        )
    if source_record is not None and source_record.kind != KIND_SELF:
        raise ShapeError(
            f"apply_self_swap needs a self-attention record, got {source_record.kind!r}"
        )
    if flags.use_source_phi:
        if source_record is None:
            raise BankIncompleteError("phi swap requested without a source record")
        if source_record.output is None:
            raise BankIncompleteError(
                "phi swap requested but the source record stores no output"
            )
        _check_query_match(source_record, target_map)
        return source_record.output
    if flags.use_source_m:
        if source_record is None:
            raise BankIncompleteError("map swap requested without a source record")
        _check_query_match(source_record, target_map)
        if source_record.map.shape[1] != target_v.shape[0]:
            raise IncompatibleResolutionError(
                f"source map keys {source_record.map.shape[1]} do not match "
                f"target value count {target_v.shape[0]}"
            )
        return torch.matmul(source_record.map.to(target_v.dtype), target_v)
    return torch.matmul(target_map, target_v)


def apply_cross_swap(
    source_record: AttentionRecord | None,
    target_map: torch.Tensor,
    target_v: torch.Tensor,
    flags: SwapFlags,
) -> torch.Tensor:
    """Produce one head's cross-attention output under the swap flags.

    An active map swap recomputes the output as ``source_map @ target_v``;
    the cross-attention output itself is never taken from the source.

    Raises:
        PromptLengthError: if the source map's key axis does not match the
            target's value count (tokenized prompt lengths differ).
    """
    if target_map.ndim != 2 or target_v.ndim != 2:
        raise ShapeError("target_map and target_v must be 2-D")
    if target_map.shape[1] != target_v.shape[0]:
        raise ShapeError(
            f"target map keys {target_map.shape[1]} do not match "
            f"target value count {target_v.shape[0]}"
        )
    if source_record is not None and source_record.kind != KIND_CROSS:
        raise ShapeError(
            f"apply_cross_swap needs a cross-attention record, got {source_record.kind!r}"
        )
    if flags.use_source_a:
        if source_record is None:
            raise BankIncompleteError("map swap requested without a source record")
        _check_query_match(source_record, target_map)
        if source_record.map.shape[1] != target_v.shape[0]:
            raise PromptLengthError(
                f"source attends over {source_record.map.shape[1]} text tokens, "
                f"target provides {target_v.shape[0]}"
            )
        return torch.matmul(source_record.map.to(target_v.dtype), target_v)
    return torch.matmul(target_map, target_v)
