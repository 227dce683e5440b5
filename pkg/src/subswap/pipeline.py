"""Source capture and subject-swapped generation.

The flow mirrors its use: run the source trajectory once while capturing
every head's attention state into a bank, build the target prompt by
substituting the personalized concept token for the subject, then run the
target trajectory from the source's initial noise while a controller injects
the banked source state during the scheduled leading steps.

Capture is observational: a run with capture enabled produces bit-identical
latents to the same run without it. Injection with an all-zero schedule is
likewise the identity, so vanilla generation is the zero point of the swap.
"""

from __future__ import annotations

import dataclasses

import torch

from .attention import (
    KIND_SELF,
    AttentionRecord,
    SwapSchedule,
    apply_cross_swap,
    apply_self_swap,
    decide_swap,
)
from .bank import AttentionBank
from .backend.base import AttentionController, AttentionSite
from .errors import ContractError, DomainError, InstrumentationError, ShapeError
from .nulltext import NullTextBank
from .prompts import PromptSpec
from .sampling import (
    NoiseSchedule,
    Trajectory,
    active_branches,
    constant_uncond,
    sample_trajectory,
)

DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 7.5
DEFAULT_SCHEDULE = (10, 25, 20)

SWAP_BRANCHES_BOTH = "both"
SWAP_BRANCHES_COND = "cond"


@dataclasses.dataclass(frozen=True)
class GenerationConfig:
    """Settings shared by capture, vanilla generation, and swapping.

    Attributes:
        steps: denoising step count T.
        guidance_w: classifier-free guidance weight.
        seed: RNG seed for the initial noise.
        latent_shape: latent tensor shape.
        schedule: swap step counts (phi, M, A).
        swap_branches: ``"both"`` applies the swap on the conditional and
            unconditional guidance branches, ``"cond"`` restricts it.
        swap_layers: optional allowlist of layer ids to swap; None means all.
        bank_memory_budget: byte budget before captured records spill to disk.
    """

    steps: int = DEFAULT_STEPS
    guidance_w: float = DEFAULT_GUIDANCE
    seed: int = 0
    latent_shape: tuple[int, ...] = (4, 8, 8)
    schedule: SwapSchedule = dataclasses.field(
        default_factory=lambda: SwapSchedule(*DEFAULT_SCHEDULE)
    )
    swap_branches: str = SWAP_BRANCHES_BOTH
    swap_layers: tuple[str, ...] | None = None
    bank_memory_budget: int | None = None
    final_alpha_bar: float = 0.2

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        if self.guidance_w < 0:
            raise DomainError(f"guidance_w must be >= 0, got {self.guidance_w}")
        if self.swap_branches not in (SWAP_BRANCHES_BOTH, SWAP_BRANCHES_COND):
            raise DomainError(
                f"swap_branches must be 'both' or 'cond', got {self.swap_branches!r}"
            )
        object.__setattr__(self, "schedule", self.schedule.clamped_to(self.steps))

    def noise_schedule(self, dtype: torch.dtype = torch.float64) -> NoiseSchedule:
        return NoiseSchedule.linear(self.steps, self.final_alpha_bar, dtype=dtype)

    def swap_branch_set(self, w: float) -> tuple[str, ...]:
        branches = active_branches(w)
        if self.swap_branches == SWAP_BRANCHES_COND:
            branches = tuple(b for b in branches if b == "cond")
        return branches


def initial_noise(cfg: GenerationConfig, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Seeded standard-normal initial latent z_T."""
    g = torch.Generator().manual_seed(cfg.seed)
    return torch.randn(cfg.latent_shape, generator=g, dtype=dtype)


class CaptureController(AttentionController):
    """Stores every visited head's attention state; never alters outputs."""

    def __init__(self, bank: AttentionBank):
        super().__init__()
        self.bank = bank

    def attend(self, site: AttentionSite, attn_map, v, output):
        if 1 <= self.step <= self.bank.capture_limit and self.branch in self.bank.branches:
            self.bank.store(
                AttentionRecord(
                    step=self.step,
                    layer_id=site.layer_id,
                    head=site.head,
                    kind=site.kind,
                    map=attn_map,
                    output=output if site.kind == KIND_SELF else None,
                ),
                branch=self.branch,
            )
        return output


class SwapController(AttentionController):
    """Replaces attention state with banked source records per the schedule."""

    def __init__(
        self,
        bank: AttentionBank,
        schedule: SwapSchedule,
        branches: tuple[str, ...],
        layer_allowlist: tuple[str, ...] | None = None,
    ):
        super().__init__()
        self.bank = bank
        self.schedule = schedule
        self.branches = branches
        self.layer_allowlist = layer_allowlist

    def attend(self, site: AttentionSite, attn_map, v, output):
        if self.branch not in self.branches:
            return output
        if self.layer_allowlist is not None and site.layer_id not in self.layer_allowlist:
            return output
        flags = decide_swap(self.step, self.schedule)
        if site.kind == KIND_SELF:
            if not flags.any_self:
                return output
            record = self.bank.fetch(self.step, self.branch, site.layer_id, site.head, site.kind)
            return apply_self_swap(record, attn_map, v, flags)
        if not flags.use_source_a:
            return output
        record = self.bank.fetch(self.step, self.branch, site.layer_id, site.head, site.kind)
        return apply_cross_swap(record, attn_map, v, flags)


def _uncond_source(backend, null_bank: NullTextBank | None, total_steps: int):
    if null_bank is None:
        return constant_uncond(backend.default_uncond())
    if null_bank.total_steps != total_steps:
        raise ContractError(
            f"null-text bank drives {null_bank.total_steps} steps, run has {total_steps}"
        )
    return null_bank.source


def _check_latent(backend, z: torch.Tensor) -> None:
    if tuple(z.shape) != tuple(backend.latent_shape):
        raise ShapeError(
            f"latent shape {tuple(z.shape)} does not match backend "
            f"{tuple(backend.latent_shape)}"
        )


def generate(
    z_init: torch.Tensor,
    prompt: PromptSpec,
    cfg: GenerationConfig,
    backend,
    null_bank: NullTextBank | None = None,
) -> Trajectory:
    """Vanilla guided generation from ``z_init`` with no hooks installed."""
    _check_latent(backend, z_init)
    sched = cfg.noise_schedule(dtype=backend.dtype)
    cond = backend.encode_text(prompt.tokens)
    return sample_trajectory(
        backend,
        z_init,
        cond,
        sched,
        cfg.guidance_w,
        _uncond_source(backend, null_bank, cfg.steps),
    )


def generate_with_capture(
    z_init: torch.Tensor,
    prompt: PromptSpec,
    cfg: GenerationConfig,
    backend,
    null_bank: NullTextBank | None = None,
    capture_limit: int | None = None,
) -> tuple[Trajectory, AttentionBank]:
    """Generate while recording attention state over the capture window.

    The window defaults to the schedule's largest lambda, so the bank holds
    exactly the steps a later swap can consume. The returned bank is frozen
    and validated against the backend's declared sites; a hook that failed
    to fire surfaces as an instrumentation error.
    """
    _check_latent(backend, z_init)
    sched = cfg.noise_schedule(dtype=backend.dtype)
    cond = backend.encode_text(prompt.tokens)
    branches = active_branches(cfg.guidance_w)
    limit = cfg.schedule.max_step if capture_limit is None else capture_limit
    if limit > cfg.steps:
        raise DomainError(f"capture limit {limit} exceeds {cfg.steps} steps")
    bank = AttentionBank(
        total_steps=cfg.steps,
        capture_limit=limit,
        branches=branches,
        layer_ids=backend.layer_ids(),
        heads=max(site.head for site in backend.attention_sites()) + 1,
        memory_budget=cfg.bank_memory_budget,
    )
    traj = sample_trajectory(
        backend,
        z_init,
        cond,
        sched,
        cfg.guidance_w,
        _uncond_source(backend, null_bank, cfg.steps),
        controller=CaptureController(bank),
    )
    bank.freeze()
    expected = len(bank.branches) * len(backend.attention_sites()) * limit
    if len(bank) != expected:
        raise InstrumentationError(
            f"capture stored {len(bank)} records, hooks declare {expected}"
        )
    return traj, bank


def subject_swap(
    source_z_init: torch.Tensor,
    bank: AttentionBank,
    target_prompt: PromptSpec,
    cfg: GenerationConfig,
    backend,
    null_bank: NullTextBank | None = None,
) -> Trajectory:
    """Generate the target trajectory with source attention injected.

    The target starts from the source's own initial noise, and during the
    first ``lambda`` executed steps of each scheduled quantity the banked
    source state replaces the target's. An all-zero schedule reproduces
    vanilla generation bit for bit.

    Raises:
        BankIncompleteError: if the bank lacks a record the schedule needs.
        ArchitectureMismatchError: if the bank was captured on a different
            attention layout than the backend exposes.
    """
    _check_latent(backend, source_z_init)
    if bank.total_steps != cfg.steps:
        raise ContractError(
            f"bank captured over {bank.total_steps} steps, run has {cfg.steps}"
        )
    sched = cfg.noise_schedule(dtype=backend.dtype)
    cond = backend.encode_text(target_prompt.tokens)
    branches = cfg.swap_branch_set(cfg.guidance_w)
    heads = max(site.head for site in backend.attention_sites()) + 1
    bank.validate_architecture(backend.layer_ids(), heads)
    allow = cfg.swap_layers
    layer_scope = (
        backend.layer_ids()
        if allow is None
        else tuple(l for l in backend.layer_ids() if l in allow)
    )
    bank.validate_complete(cfg.schedule, branches, layer_scope, heads)
    controller = SwapController(bank, cfg.schedule, branches, layer_allowlist=allow)
    return sample_trajectory(
        backend,
        source_z_init,
        cond,
        sched,
        cfg.guidance_w,
        _uncond_source(backend, null_bank, cfg.steps),
        controller=controller,
    )
