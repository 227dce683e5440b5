"""Concept learning: embedding inversion on the toy backend, and a
finetuning plan emitter for full-scale adapters.

Embedding inversion optimizes a single new token's embedding vector against
the standard denoising objective while every model weight stays frozen.
Full-model finetuning is out of scope to execute here; ``finetune_adapter``
validates its configuration and emits the training plan an adapter would
run, or delegates to a registered adapter when one is supplied.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Sequence

import torch

from .. import storage
from ..errors import (
    CapabilityError,
    ConfigError,
    DivergenceError,
    DomainError,
    EmptyInputError,
)
from ..sampling import NoiseSchedule

MODE_EMBEDDING = "embedding_inversion"
MODE_FINETUNE = "finetune_adapter"

CONCEPT_FORMAT = "subswap-concept"
CONCEPT_FORMAT_VERSION = 1

DIVERGENCE_GUARD = 1e6


@dataclasses.dataclass(frozen=True)
class ConceptTrainerConfig:
    """Hyperparameters for learning a personalized concept.

    The two modes carry the defaults used at full scale: embedding inversion
    runs at lr 5e-4 for 1000 steps with batch 4; adapter finetuning runs
    AdamW at lr 1e-6 for 800 steps over both the denoiser and text encoder.
    """

    mode: str
    lr: float
    steps: int
    batch: int = 1

    def __post_init__(self) -> None:
        if self.mode not in (MODE_EMBEDDING, MODE_FINETUNE):
            raise ConfigError(f"unknown trainer mode {self.mode!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")

    @classmethod
    def embedding_inversion(
        cls, lr: float = 5e-4, steps: int = 1000, batch: int = 4
    ) -> "ConceptTrainerConfig":
        return cls(mode=MODE_EMBEDDING, lr=lr, steps=steps, batch=batch)

    @classmethod
    def finetune(cls, lr: float = 1e-6, steps: int = 800) -> "ConceptTrainerConfig":
        return cls(mode=MODE_FINETUNE, lr=lr, steps=steps, batch=1)


def _denoising_loss(
    backend,
    row: torch.Tensor,
    token_id: int,
    template_tokens: Sequence[int],
    refs: Sequence[torch.Tensor],
    eps_draws: torch.Tensor,
    t_draws: torch.Tensor,
    ref_draws: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Mean denoising MSE over one pre-drawn batch."""
    cond = backend.embed_tokens(template_tokens, overrides={token_id: row})
    losses = []
    for b in range(eps_draws.shape[0]):
        x0 = refs[int(ref_draws[b])]
        t = int(t_draws[b])
        a = sched.alpha_bar[t].to(x0.dtype)
        noise = eps_draws[b]
        z_t = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * noise
        eps_hat = backend.predict(z_t, t, cond)
        losses.append(((eps_hat - noise) ** 2).mean())
    return torch.stack(losses).mean()


def concept_eval_loss(
    backend,
    row: torch.Tensor,
    token_id: int,
    template_tokens: Sequence[int],
    refs: Sequence[torch.Tensor],
    sched: NoiseSchedule,
    seed: int = 1234,
    n: int = 16,
) -> float:
    """Deterministic held-out denoising loss for a candidate embedding row."""
    g = torch.Generator().manual_seed(seed)
    shape = tuple(refs[0].shape)
    eps_draws = torch.randn((n, *shape), generator=g, dtype=refs[0].dtype)
    t_draws = torch.randint(1, sched.total_steps + 1, (n,), generator=g)
    ref_draws = torch.randint(0, len(refs), (n,), generator=g)
    with torch.no_grad():
        loss = _denoising_loss(
            backend, row, token_id, template_tokens, refs, eps_draws, t_draws, ref_draws, sched
        )
    return float(loss)


def train_concept_embedding(
    reference_latents: Sequence[torch.Tensor],
    token_id: int,
    cfg: ConceptTrainerConfig,
    backend,
    sched: NoiseSchedule,
    template_tokens: Sequence[int],
    seed: int = 0,
) -> torch.Tensor:
    """Learn an embedding row for ``token_id`` from reference latents.

    Only the new token's vector is optimized; the model and the rest of the
    embedding table are frozen. With ``cfg.steps == 0`` the initialization
    (the backend's current row for the token) is returned unchanged.

    Raises:
        EmptyInputError: with no reference latents.
        CapabilityError: if the backend cannot provide gradients.
        DivergenceError: if the loss exceeds the divergence guard.
    """
    if cfg.mode != MODE_EMBEDDING:
        raise ConfigError(f"train_concept_embedding needs mode {MODE_EMBEDDING!r}")
    if len(reference_latents) == 0:
        raise EmptyInputError("no reference latents to learn from")
    if not getattr(backend, "supports_gradients", False):
        raise CapabilityError("concept training needs a gradient-capable backend")
    if token_id not in template_tokens:
        raise DomainError(
            f"template must contain the concept token id {token_id}"
        )
    refs = [r.detach().to(backend.dtype) for r in reference_latents]
    row = backend.token_embedding(token_id).detach().clone()
    if cfg.steps == 0:
        return row
    row.requires_grad_(True)
    opt = torch.optim.Adam([row], lr=cfg.lr)
    g = torch.Generator().manual_seed(seed)
    shape = tuple(refs[0].shape)
    for _ in range(cfg.steps):
        eps_draws = torch.randn((cfg.batch, *shape), generator=g, dtype=refs[0].dtype)
        t_draws = torch.randint(1, sched.total_steps + 1, (cfg.batch,), generator=g)
        ref_draws = torch.randint(0, len(refs), (cfg.batch,), generator=g)
        opt.zero_grad()
        loss = _denoising_loss(
            backend, row, token_id, template_tokens, refs, eps_draws, t_draws, ref_draws, sched
        )
        loss_value = float(loss.detach())
        if loss_value > DIVERGENCE_GUARD:
            raise DivergenceError(f"concept training diverged, loss {loss_value}")
        loss.backward()
        opt.step()
    return row.detach().clone()


def save_concept(
    path: str | Path, token_id: int, vector: torch.Tensor, token: str | None = None
) -> None:
    writer = storage.ArtifactWriter(Path(path))
    try:
        entry = storage.blob_entry(vector, "embedding.bin")
        storage.write_blob(writer.path, entry, vector)
        storage.write_manifest(
            writer.path,
            {
                "format": CONCEPT_FORMAT,
                "format_version": CONCEPT_FORMAT_VERSION,
                "byte_order": "little",
                "dtype": storage.dtype_name(vector.dtype),
                "token_id": token_id,
                "token": token,
                "embedding": entry,
            },
        )
        writer.commit()
    except BaseException:
        writer.abort()
        raise


def load_concept(path: str | Path) -> tuple[int, torch.Tensor, str | None]:
    directory = Path(path)
    manifest = storage.read_manifest(directory, CONCEPT_FORMAT, CONCEPT_FORMAT_VERSION)
    try:
        vector = storage.read_blob(directory, manifest["embedding"], manifest["dtype"])
        return int(manifest["token_id"]), vector, manifest.get("token")
    except (KeyError, TypeError, ValueError) as exc:
        raise storage.CorruptionError(
            f"malformed concept manifest under {directory}: {exc}"
        ) from exc


@dataclasses.dataclass(frozen=True)
class TrainingPlan:
    """Full-model finetuning recipe an adapter would execute."""

    optimizer: str
    lr: float
    steps: int
    tune_denoiser: bool
    tune_text_encoder: bool
    n_references: int
    checkpoint: str | None = None
    template: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainingPlan":
        return cls(**json.loads(text))


def finetune_adapter(
    reference_images: Sequence,
    cfg: ConceptTrainerConfig,
    checkpoint: str | None = None,
    adapter=None,
    dry_run: bool = True,
    template: str | None = None,
) -> TrainingPlan:
    """Validate a finetuning config and emit (or hand off) its plan.

    By default this is a dry run that returns the plan without touching any
    weights. Executing the plan requires a registered adapter with a
    ``finetune`` entry point.
    """
    if cfg.mode != MODE_FINETUNE:
        raise ConfigError(f"finetune_adapter needs mode {MODE_FINETUNE!r}")
    if len(reference_images) == 0:
        raise EmptyInputError("no reference images to finetune on")
    plan = TrainingPlan(
        optimizer="adamw",
        lr=cfg.lr,
        steps=cfg.steps,
        tune_denoiser=True,
        tune_text_encoder=True,
        n_references=len(reference_images),
        checkpoint=checkpoint,
        template=template,
    )
    if dry_run:
        return plan
    if adapter is None or not hasattr(adapter, "finetune"):
        raise CapabilityError("executing a finetuning plan requires an adapter")
    adapter.finetune(plan, reference_images)
    return plan
