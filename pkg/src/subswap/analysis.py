"""Attention map summaries, SVD structure, and schedule ablations.

Captured maps are compared on a common footing: each map's query axis is
reshaped to its spatial grid, bilinearly resized to a 64x64 grid (4096
queries), averaged across layers, heads, and captured steps, and the rows
are renormalized to sum to 1. Principal structure comes from the averaged
map's singular value decomposition, whose left singular vectors reshape to
query-grid images.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .attention import KIND_SELF, KINDS, SwapSchedule
from .bank import BRANCH_COND, AttentionBank
from .errors import ContractError, DomainError, EmptyInputError, ShapeError
from .pipeline import (
    GenerationConfig,
    generate,
    generate_with_capture,
    initial_noise,
    subject_swap,
)
from .prompts import PromptSpec
from .sampling import Trajectory

QUERY_GRID = 64

AXES = ("lambda_phi", "lambda_m", "lambda_a")
#: Accepted spellings of the sweep axes (the map axes carry their math names).
AXIS_ALIASES = {
    "lambda_phi": "lambda_phi",
    "lambda_m": "lambda_m",
    "lambda_M": "lambda_m",
    "lambda_a": "lambda_a",
    "lambda_A": "lambda_a",
}


def resize_query_axis(attn_map: torch.Tensor, out_side: int = QUERY_GRID) -> torch.Tensor:
    """Bilinearly resize a map's query axis onto an ``out_side``^2 grid.

    The query axis must be a flattened square grid; each key's column is
    treated as an image over queries and resized independently.
    """
    if attn_map.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {tuple(attn_map.shape)}")
    n_query, n_key = attn_map.shape
    side = math.isqrt(n_query)
    if side * side != n_query:
        raise ShapeError(f"query axis of length {n_query} is not a square grid")
    if side == out_side:
        return attn_map.clone()
    columns = attn_map.transpose(0, 1).reshape(n_key, 1, side, side)
    resized = F.interpolate(
        columns, size=(out_side, out_side), mode="bilinear", align_corners=False
    )
    return resized.reshape(n_key, out_side * out_side).transpose(0, 1).contiguous()


def _renormalize_rows(matrix: torch.Tensor) -> torch.Tensor:
    sums = matrix.sum(dim=-1, keepdim=True)
    if float(sums.min()) <= 0:
        raise ContractError("cannot renormalize rows with non-positive sums")
    return matrix / sums


def average_attention(
    bank: AttentionBank, kind: str, branch: str = BRANCH_COND
) -> torch.Tensor:
    """Average one kind's maps across layers, heads, and captured steps.

    Every map is resized to the 64x64 query grid first; the mean's rows are
    renormalized to sum to 1. By default only the conditional guidance
    branch contributes.
    """
    if kind not in KINDS:
        raise DomainError(f"kind must be one of {KINDS}, got {kind!r}")
    total = None
    count = 0
    n_key = None
    for (step, rec_branch, layer, head, rec_kind), record in bank.records():
        if rec_kind != kind or rec_branch != branch:
            continue
        if n_key is None:
            n_key = record.map.shape[1]
        elif record.map.shape[1] != n_key:
            raise ContractError(
                f"maps of kind {kind!r} disagree on key count: {record.map.shape[1]} vs {n_key}"
            )
        resized = resize_query_axis(record.map.to(torch.float64))
        total = resized if total is None else total + resized
        count += 1
    if total is None:
        raise EmptyInputError(f"bank holds no {kind!r} records on branch {branch!r}")
    return _renormalize_rows(total / count)


def per_step_maps(
    bank: AttentionBank, kind: str = KIND_SELF, branch: str = BRANCH_COND
) -> list[tuple[int, torch.Tensor]]:
    """One layer/head-averaged map per captured step, in step order."""
    if kind not in KINDS:
        raise DomainError(f"kind must be one of {KINDS}, got {kind!r}")
    by_step: dict[int, list[torch.Tensor]] = {}
    for (step, rec_branch, layer, head, rec_kind), record in bank.records():
        if rec_kind != kind or rec_branch != branch:
            continue
        by_step.setdefault(step, []).append(resize_query_axis(record.map.to(torch.float64)))
    if not by_step:
        raise EmptyInputError(f"bank holds no {kind!r} records on branch {branch!r}")
    out = []
    for step in sorted(by_step):
        stacked = torch.stack(by_step[step])
        out.append((step, _renormalize_rows(stacked.mean(dim=0))))
    return out


@dataclasses.dataclass(frozen=True)
class SVDSummary:
    """Leading singular structure of an averaged attention map.

    Attributes:
        singular_values: all singular values, non-increasing.
        components: top-k left singular vectors reshaped to the query grid
            and min-max normalized to [0, 1].
        explained_fraction: per-component share of the total squared
            spectral energy.
    """

    singular_values: torch.Tensor
    components: tuple[torch.Tensor, ...]
    explained_fraction: tuple[float, ...]


def svd_components(attn_map: torch.Tensor, k: int) -> SVDSummary:
    """Top-k left singular vectors of a map, as query-grid images.

    Raises:
        DomainError: unless ``1 <= k <= min(map.shape)``.
    """
    if attn_map.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {tuple(attn_map.shape)}")
    if k <= 0 or k > min(attn_map.shape):
        raise DomainError(
            f"k must lie in [1, {min(attn_map.shape)}], got {k}"
        )
    n_query = attn_map.shape[0]
    side = math.isqrt(n_query)
    if side * side != n_query:
        raise ShapeError(f"query axis of length {n_query} is not a square grid")
    u, s, _ = torch.linalg.svd(attn_map.to(torch.float64), full_matrices=False)
    energy = float((s**2).sum())
    components = []
    fractions = []
    for i in range(k):
        img = u[:, i].reshape(side, side)
        lo, hi = float(img.min()), float(img.max())
        if hi > lo:
            img = (img - lo) / (hi - lo)
        else:
            img = torch.zeros_like(img)
        components.append(img)
        fractions.append(float(s[i] ** 2) / energy if energy > 0 else 0.0)
    return SVDSummary(
        singular_values=s,
        components=tuple(components),
        explained_fraction=tuple(fractions),
    )


@dataclasses.dataclass(frozen=True)
class AblationRow:
    value: int
    mse_to_source: float
    mse_to_vanilla: float


@dataclasses.dataclass(frozen=True)
class AblationReport:
    """Swap outcomes across one schedule axis."""

    axis: str
    rows: tuple[AblationRow, ...]

    def to_text(self) -> str:
        lines = [f"axis\t{self.axis}", "value\tmse_to_source\tmse_to_vanilla"]
        for row in self.rows:
            lines.append(f"{row.value}\t{row.mse_to_source:.10e}\t{row.mse_to_vanilla:.10e}")
        return "\n".join(lines) + "\n"


def _mse(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(((a - b) ** 2).mean())


def _schedule_on_axis(axis: str, value: int, base: SwapSchedule) -> SwapSchedule:
    values = base.as_dict()
    values[axis] = value
    return SwapSchedule(**values)


def ablation_sweep(
    axis: str,
    values: list[int],
    base_config: GenerationConfig,
    backend,
    source_prompt: PromptSpec,
    target_prompt: PromptSpec,
) -> tuple[AblationReport, dict[int, Trajectory]]:
    """Sweep one schedule axis, measuring final-latent MSE both ways.

    The non-swept axes keep ``base_config.schedule``'s values; the step
    analysis protocol holds them at zero. Two endpoint facts are asserted
    when present in the sweep: swapping for zero steps must reproduce
    vanilla generation, and a full-length sweep value must reproduce the
    source when source and target prompts coincide (with the other axes at
    zero).
    """
    axis = AXIS_ALIASES.get(axis, axis)
    if axis not in AXES:
        raise DomainError(f"axis must be one of {sorted(AXIS_ALIASES)}, got {axis!r}")
    if not values:
        raise EmptyInputError("no sweep values given")
    for v in values:
        if v < 0:
            raise DomainError(f"sweep values must be >= 0, got {v}")
    values = [min(v, base_config.steps) for v in values]
    capture_limit = max(
        max(_schedule_on_axis(axis, v, base_config.schedule).max_step for v in values),
        0,
    )
    z_init = initial_noise(base_config, dtype=backend.dtype)
    source_traj, bank = generate_with_capture(
        z_init, source_prompt, base_config, backend, capture_limit=capture_limit
    )
    vanilla = generate(z_init, target_prompt, base_config, backend)
    same_prompt = source_prompt.tokens == target_prompt.tokens
    others_zero = all(
        v == 0 for name, v in base_config.schedule.as_dict().items() if name != axis
    )
    rows = []
    trajectories: dict[int, Trajectory] = {}
    for value in values:
        cfg = dataclasses.replace(
            base_config, schedule=_schedule_on_axis(axis, value, base_config.schedule)
        )
        traj = subject_swap(z_init, bank, target_prompt, cfg, backend)
        trajectories[value] = traj
        row = AblationRow(
            value=value,
            mse_to_source=_mse(traj.final, source_traj.final),
            mse_to_vanilla=_mse(traj.final, vanilla.final),
        )
        if value == 0 and others_zero and row.mse_to_vanilla >= 1e-8:
            raise ContractError(
                f"zero-step swap deviates from vanilla generation: {row.mse_to_vanilla}"
            )
        if value == base_config.steps and same_prompt and others_zero:
            if row.mse_to_source >= 1e-8:
                raise ContractError(
                    f"full-length same-prompt swap deviates from source: {row.mse_to_source}"
                )
        rows.append(row)
    return AblationReport(axis=axis, rows=tuple(rows)), trajectories


# ---- rendering -------------------------------------------------------------

#: Five-anchor gradient used for heatmaps (dark violet to yellow).
_HEAT_ANCHORS = np.array(
    [[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]],
    dtype=np.float64,
)


def _colorize(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    norm = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    pos = norm * (len(_HEAT_ANCHORS) - 1)
    idx = np.clip(pos.astype(np.int64), 0, len(_HEAT_ANCHORS) - 2)
    frac = (pos - idx)[..., None]
    rgb = _HEAT_ANCHORS[idx] * (1 - frac) + _HEAT_ANCHORS[idx + 1] * frac
    return rgb.round().astype(np.uint8)


def save_heatmap(matrix: torch.Tensor, path: str | Path, scale: int = 4) -> None:
    """Render a matrix as a PNG heatmap (nearest-neighbor upscaled)."""
    arr = matrix.detach().to(torch.float64).cpu().numpy()
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    img = Image.fromarray(_colorize(arr), mode="RGB")
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")


def write_html_grid(path: str | Path, title: str, entries: list[tuple[str, str]]) -> None:
    """Write a minimal static page laying out (caption, image file) cells."""
    cells = "\n".join(
        f'<figure><img src="{src}" alt="{caption}"><figcaption>{caption}</figcaption></figure>'
        for caption, src in entries
    )
    html = (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{title}</title>"
        "<style>body{font-family:monospace}figure{display:inline-block;margin:8px}"
        "img{image-rendering:pixelated;border:1px solid #888}</style>"
        f"</head><body><h1>{title}</h1>\n{cells}\n</body></html>\n"
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(html, encoding="utf-8")
