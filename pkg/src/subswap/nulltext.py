"""Per-step unconditional embedding optimization for faithful reconstruction.

Guided re-sampling at w > 1 drifts away from an inversion trajectory. This
module pins it back: for each denoising step, the unconditional embedding is
optimized so the guided update lands on the inversion trajectory's pivot
latent, and the optimized reconstruction (not the pivot) is carried into the
next step. Descent uses backtracking step halving, so every inner-iteration
loss sequence is non-increasing by construction.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from . import storage
from .errors import (
    CapabilityError,
    ContractError,
    CorruptionError,
    DivergenceError,
    DomainError,
)
from .sampling import DIRECTION_INVERSION, NoiseSchedule, Trajectory, cfg_predict, ddim_step

NULLBANK_FORMAT = "subswap-nullbank"
NULLBANK_FORMAT_VERSION = 1

DEFAULT_INNER_ITERS = 10
DEFAULT_LR = 1e-2
EARLY_STOP_LOSS = 1e-5
DIVERGENCE_GUARD = 1e6
_MIN_STEP = 1e-12


@dataclasses.dataclass
class NullTextBank:
    """One optimized unconditional embedding per executed denoising step.

    ``embeddings[j - 1]`` drives step j. ``loss_history[j - 1]`` holds that
    step's inner-iteration losses, starting with the pre-update loss.
    """

    embeddings: list[torch.Tensor]
    loss_history: list[list[float]] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.embeddings) < 1:
            raise DomainError("a null-text bank holds at least one embedding")
        shape = self.embeddings[0].shape
        for emb in self.embeddings:
            if emb.shape != shape:
                raise ContractError("null-text embeddings must share one shape")

    @property
    def total_steps(self) -> int:
        return len(self.embeddings)

    def source(self, step: int) -> torch.Tensor:
        if not 1 <= step <= self.total_steps:
            raise DomainError(
                f"step must lie in [1, {self.total_steps}], got {step}"
            )
        return self.embeddings[step - 1]


def save_nullbank(bank: NullTextBank, path: str | Path) -> None:
    writer = storage.ArtifactWriter(Path(path))
    try:
        dtype = storage.dtype_name(bank.embeddings[0].dtype)
        entries = []
        for j, emb in enumerate(bank.embeddings, start=1):
            entry = storage.blob_entry(emb, f"step{j}.bin")
            storage.write_blob(writer.path, entry, emb)
            entries.append(entry)
        storage.write_manifest(
            writer.path,
            {
                "format": NULLBANK_FORMAT,
                "format_version": NULLBANK_FORMAT_VERSION,
                "byte_order": "little",
                "dtype": dtype,
                "total_steps": bank.total_steps,
                "embeddings": entries,
                "loss_history": bank.loss_history,
            },
        )
        writer.commit()
    except BaseException:
        writer.abort()
        raise


def load_nullbank(path: str | Path) -> NullTextBank:
    directory = Path(path)
    manifest = storage.read_manifest(directory, NULLBANK_FORMAT, NULLBANK_FORMAT_VERSION)
    try:
        dtype = manifest["dtype"]
        entries = manifest["embeddings"]
        if len(entries) != manifest["total_steps"]:
            raise CorruptionError(
                f"null-text bank declares {manifest['total_steps']} steps "
                f"but stores {len(entries)} embeddings"
            )
        embeddings = [storage.read_blob(directory, entry, dtype) for entry in entries]
        history = [list(map(float, seq)) for seq in manifest.get("loss_history", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(
            f"malformed null-text manifest under {directory}: {exc}"
        ) from exc
    return NullTextBank(embeddings=embeddings, loss_history=history)


def optimize_null_text(
    inversion: Trajectory,
    cond: torch.Tensor,
    backend,
    sched: NoiseSchedule,
    iters: int = DEFAULT_INNER_ITERS,
    lr: float = DEFAULT_LR,
    w: float = 7.5,
    early_stop: float = EARLY_STOP_LOSS,
) -> NullTextBank:
    """Fit per-step unconditional embeddings against an inversion trajectory.

    For executed step j (moving t -> t-1), the loss is the squared distance
    between the guided update of the carried latent and the inversion pivot
    z*_{t-1}. Each step starts from the previous step's optimized embedding.
    With ``iters=0`` the backend's default embedding is returned for every
    step and the carried latent is plain guided re-sampling.

    Raises:
        CapabilityError: if the backend cannot provide gradients.
        ContractError: if the trajectory is not an inversion or its length
            does not match the schedule.
        DivergenceError: if any per-step loss exceeds the divergence guard.
    """
    if inversion.direction != DIRECTION_INVERSION:
        raise ContractError("optimize_null_text needs an inversion trajectory")
    if inversion.total_steps != sched.total_steps:
        raise ContractError(
            f"trajectory has {inversion.total_steps} steps, schedule {sched.total_steps}"
        )
    if iters < 0:
        raise DomainError(f"iters must be >= 0, got {iters}")
    if lr <= 0:
        raise DomainError(f"lr must be > 0, got {lr}")
    if iters > 0 and not getattr(backend, "supports_gradients", False):
        raise CapabilityError("null-text optimization needs a gradient-capable backend")

    total = sched.total_steps
    uncond = backend.default_uncond().detach().clone()
    z = inversion.initial
    embeddings: list[torch.Tensor] = []
    history: list[list[float]] = []

    for j, t in enumerate(range(total, 0, -1), start=1):
        pivot = inversion.at_time(t - 1)

        def step_loss(emb: torch.Tensor) -> torch.Tensor:
            eps = cfg_predict(backend, z, t, cond, emb, w)
            return ((ddim_step(z, eps, t, t - 1, sched) - pivot) ** 2).sum()

        losses: list[float] = []
        with torch.no_grad():
            current = float(step_loss(uncond))
        losses.append(current)
        if current > DIVERGENCE_GUARD:
            raise DivergenceError(f"null-text loss diverged at step {j}: {current}")
        for _ in range(iters):
            if current < early_stop:
                break
            leaf = uncond.clone().requires_grad_(True)
            loss = step_loss(leaf)
            if not loss.requires_grad:
                # the embedding never entered the update (exact w = 1)
                losses.append(current)
                continue
            (grad,) = torch.autograd.grad(loss, leaf, allow_unused=True)
            if grad is None:
                losses.append(current)
                continue
            step_size = lr
            accepted = False
            while step_size >= _MIN_STEP:
                candidate = (uncond - step_size * grad).detach()
                with torch.no_grad():
                    cand_loss = float(step_loss(candidate))
                if cand_loss <= current:
                    uncond = candidate
                    current = cand_loss
                    accepted = True
                    break
                step_size /= 2.0
            losses.append(current)
            if not accepted:
                break
        embeddings.append(uncond.detach().clone())
        history.append(losses)
        with torch.no_grad():
            eps = cfg_predict(backend, z, t, cond, uncond, w)
            z = ddim_step(z, eps, t, t - 1, sched)

    return NullTextBank(embeddings=embeddings, loss_history=history)
