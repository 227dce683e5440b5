"""Deterministic DDIM sampling, inversion, and classifier-free guidance.

The discrete noise schedule indexes cumulative signal fractions
``alpha_bar[0..T]`` with ``alpha_bar[0] = 1`` and strictly decreasing values.
A denoising pass runs t = T, T-1, ..., 1, producing latents z_T ... z_0;
the executed-step index j starts at 1 for t = T. The deterministic update is

    x0_hat  = (z_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)
    z_prev  = sqrt(alpha_bar_prev) * x0_hat + sqrt(1 - alpha_bar_prev) * eps

and inversion runs the same recursion in reverse at guidance weight 1.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Callable, Protocol

import torch

from . import storage
from .errors import (
    ContractError,
    CorruptionError,
    DomainError,
    NonFiniteError,
    ScheduleError,
    ShapeError,
)

DIRECTION_SAMPLING = "sampling"
DIRECTION_INVERSION = "inversion"

TRAJECTORY_FORMAT = "subswap-trajectory"
TRAJECTORY_FORMAT_VERSION = 1


class DenoisingBackend(Protocol):
    """Minimal surface the sampler needs from a noise predictor."""

    deterministic: bool

    def predict(
        self, z: torch.Tensor, t: int, cond: torch.Tensor, controller=None
    ) -> torch.Tensor: ...


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions for a T-step discrete diffusion.

    Attributes:
        alpha_bar: tensor of length T+1; ``alpha_bar[0] == 1``, strictly
            decreasing, every value in (0, 1].
    """

    alpha_bar: torch.Tensor

    def __post_init__(self) -> None:
        ab = self.alpha_bar
        if ab.ndim != 1 or ab.numel() < 2:
            raise ScheduleError("alpha_bar must be a 1-D tensor of length >= 2")
        if not torch.isfinite(ab).all():
            raise ScheduleError("alpha_bar contains non-finite values")
        if float(ab[0]) != 1.0:
            raise ScheduleError(f"alpha_bar[0] must be 1, got {float(ab[0])}")
        if float(ab.min()) <= 0.0 or float(ab.max()) > 1.0:
            raise ScheduleError("alpha_bar values must lie in (0, 1]")
        if not bool((ab[1:] < ab[:-1]).all()):
            raise ScheduleError("alpha_bar must be strictly decreasing")

    @property
    def total_steps(self) -> int:
        return self.alpha_bar.numel() - 1

    @classmethod
    def linear(
        cls, total_steps: int, final_alpha_bar: float = 0.2, dtype: torch.dtype = torch.float64
    ) -> "NoiseSchedule":
        """Linearly interpolated alpha_bar from 1 down to ``final_alpha_bar``."""
        if total_steps < 1:
            raise ScheduleError(f"total_steps must be >= 1, got {total_steps}")
        if not 0.0 < final_alpha_bar < 1.0:
            raise ScheduleError(
                f"final_alpha_bar must lie in (0, 1), got {final_alpha_bar}"
            )
        ab = torch.linspace(1.0, final_alpha_bar, total_steps + 1, dtype=dtype)
        return cls(alpha_bar=ab)


@dataclasses.dataclass
class Trajectory:
    """An ordered sequence of latents z_T ... z_0 with its provenance.

    ``latents[i]`` is the latent at schedule time ``T - i`` regardless of
    whether the trajectory was produced by sampling or by inversion.
    """

    latents: list[torch.Tensor]
    direction: str

    def __post_init__(self) -> None:
        if self.direction not in (DIRECTION_SAMPLING, DIRECTION_INVERSION):
            raise DomainError(f"unknown trajectory direction {self.direction!r}")
        if len(self.latents) < 2:
            raise ShapeError("a trajectory holds at least two latents")
        shape = self.latents[0].shape
        for z in self.latents:
            if z.shape != shape:
                raise ShapeError("trajectory latents must share one shape")

    @property
    def total_steps(self) -> int:
        return len(self.latents) - 1

    @property
    def initial(self) -> torch.Tensor:
        """The noisiest latent, z_T."""
        return self.latents[0]

    @property
    def final(self) -> torch.Tensor:
        """The fully denoised latent, z_0."""
        return self.latents[-1]

    def at_time(self, t: int) -> torch.Tensor:
        """Latent at schedule time t (t = T is the noisiest)."""
        total = self.total_steps
        if not 0 <= t <= total:
            raise DomainError(f"t must lie in [0, {total}], got {t}")
        return self.latents[total - t]


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    writer = storage.ArtifactWriter(Path(path))
    try:
        dtype = storage.dtype_name(traj.latents[0].dtype)
        entries = []
        total = traj.total_steps
        for i, z in enumerate(traj.latents):
            entry = storage.blob_entry(z, f"t{total - i}.bin")
            storage.write_blob(writer.path, entry, z)
            entries.append(entry)
        storage.write_manifest(
            writer.path,
            {
                "format": TRAJECTORY_FORMAT,
                "format_version": TRAJECTORY_FORMAT_VERSION,
                "byte_order": "little",
                "dtype": dtype,
                "direction": traj.direction,
                "total_steps": total,
                "latents": entries,
            },
        )
        writer.commit()
    except BaseException:
        writer.abort()
        raise


def load_trajectory(path: str | Path) -> Trajectory:
    directory = Path(path)
    manifest = storage.read_manifest(directory, TRAJECTORY_FORMAT, TRAJECTORY_FORMAT_VERSION)
    try:
        dtype = manifest["dtype"]
        entries = manifest["latents"]
        total = manifest["total_steps"]
        direction = manifest["direction"]
        if len(entries) != total + 1:
            raise CorruptionError(
                f"trajectory declares {total} steps but stores {len(entries)} latents"
            )
        latents = [storage.read_blob(directory, entry, dtype) for entry in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"malformed trajectory manifest under {directory}: {exc}") from exc
    return Trajectory(latents=latents, direction=direction)


def ddim_step(
    z_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule
) -> torch.Tensor:
    """One deterministic denoising update from schedule time t to t_prev.

    Raises:
        DomainError: unless ``t > t_prev >= 0`` and both index the schedule.
        NonFiniteError: if inputs are not finite.
    """
    if not (0 <= t_prev < t <= sched.total_steps):
        raise DomainError(
            f"need total_steps >= t > t_prev >= 0, got t={t}, t_prev={t_prev}"
        )
    if z_t.shape != eps.shape:
        raise ShapeError(f"z_t shape {tuple(z_t.shape)} != eps shape {tuple(eps.shape)}")
    for name, tensor in (("z_t", z_t), ("eps", eps)):
        if not torch.isfinite(tensor).all():
            raise NonFiniteError(f"{name} contains non-finite values")
    ab = sched.alpha_bar
    a_t = ab[t].to(z_t.dtype)
    a_prev = ab[t_prev].to(z_t.dtype)
    x0_hat = (z_t - torch.sqrt(1.0 - a_t) * eps) / torch.sqrt(a_t)
    return torch.sqrt(a_prev) * x0_hat + torch.sqrt(1.0 - a_prev) * eps


def cfg_predict(
    backend: DenoisingBackend,
    z: torch.Tensor,
    t: int,
    cond: torch.Tensor,
    uncond: torch.Tensor,
    w: float,
    controller=None,
) -> torch.Tensor:
    """Classifier-free guided noise prediction ``eps_u + w * (eps_c - eps_u)``.

    The endpoints are exact: w = 1 evaluates and returns the conditional
    prediction only, w = 0 the unconditional one; neither synthesizes the
    other branch, so banks captured at those weights hold a single branch.

    Raises:
        DomainError: if w < 0.
    """
    if w < 0:
        raise DomainError(f"guidance weight must be >= 0, got {w}")
    if w == 1.0:
        if controller is not None:
            controller.set_branch("cond")
        return backend.predict(z, t, cond, controller=controller)
    if w == 0.0:
        if controller is not None:
            controller.set_branch("uncond")
        return backend.predict(z, t, uncond, controller=controller)
    if controller is not None:
        controller.set_branch("uncond")
    eps_u = backend.predict(z, t, uncond, controller=controller)
    if controller is not None:
        controller.set_branch("cond")
    eps_c = backend.predict(z, t, cond, controller=controller)
    return eps_u + w * (eps_c - eps_u)


def active_branches(w: float) -> tuple[str, ...]:
    """Guidance branches a run at weight ``w`` evaluates."""
    if w == 1.0:
        return ("cond",)
    if w == 0.0:
        return ("uncond",)
    return ("uncond", "cond")


def sample_trajectory(
    backend: DenoisingBackend,
    z_init: torch.Tensor,
    cond: torch.Tensor,
    sched: NoiseSchedule,
    w: float,
    uncond_source: Callable[[int], torch.Tensor],
    controller=None,
) -> Trajectory:
    """Run the full denoising loop t = T ... 1 and collect every latent.

    ``uncond_source(j)`` supplies the unconditional embedding for executed
    step j, which lets a per-step optimized bank drive the loop. The optional
    controller observes or overrides attention inside each prediction.
    """
    if not getattr(backend, "deterministic", False):
        raise ContractError("sampling requires a deterministic backend")
    z = z_init
    latents = [z]
    total = sched.total_steps
    for j, t in enumerate(range(total, 0, -1), start=1):
        if controller is not None:
            controller.begin_step(j)
        eps = cfg_predict(backend, z, t, cond, uncond_source(j), w, controller=controller)
        z = ddim_step(z, eps, t, t - 1, sched)
        latents.append(z)
    return Trajectory(latents=latents, direction=DIRECTION_SAMPLING)


def ddim_invert(
    z_0: torch.Tensor,
    prompt_embedding: torch.Tensor,
    backend: DenoisingBackend,
    sched: NoiseSchedule,
) -> Trajectory:
    """Map a clean latent back to the noisiest timestep.

    Runs the denoising recursion in reverse at guidance weight 1 (conditional
    prediction only), evaluating the network at each move's destination
    timestep. Returns a trajectory holding z_T ... z_0 with the inversion
    direction recorded.

    Raises:
        ContractError: if the backend does not declare determinism.
    """
    if not getattr(backend, "deterministic", False):
        raise ContractError("inversion requires a deterministic backend")
    ab = sched.alpha_bar
    z = z_0
    ascending = [z_0]
    for t_next in range(1, sched.total_steps + 1):
        eps = backend.predict(z, t_next, prompt_embedding)
        a_cur = ab[t_next - 1].to(z.dtype)
        a_next = ab[t_next].to(z.dtype)
        x0_hat = (z - torch.sqrt(1.0 - a_cur) * eps) / torch.sqrt(a_cur)
        z = torch.sqrt(a_next) * x0_hat + torch.sqrt(1.0 - a_next) * eps
        ascending.append(z)
    return Trajectory(latents=list(reversed(ascending)), direction=DIRECTION_INVERSION)


def constant_uncond(embedding: torch.Tensor) -> Callable[[int], torch.Tensor]:
    """Uncond source that ignores the step index."""

    def source(_step: int) -> torch.Tensor:
        return embedding

    return source


def reconstruct(
    z_init: torch.Tensor,
    cond: torch.Tensor,
    uncond_source: Callable[[int], torch.Tensor],
    backend: DenoisingBackend,
    sched: NoiseSchedule,
    w: float,
    controller=None,
) -> Trajectory:
    """Re-sample from z_T under guidance, optionally with per-step unconds."""
    return sample_trajectory(
        backend, z_init, cond, sched, w, uncond_source, controller=controller
    )


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """``||a - b|| / ||b||`` with a tiny floor on the denominator."""
    denom = float(torch.linalg.vector_norm(b))
    return float(torch.linalg.vector_norm(a - b)) / max(denom, 1e-300)
