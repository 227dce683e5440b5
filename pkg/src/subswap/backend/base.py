"""Noise predictor contract and the attention hook interface.

A backend is any deterministic denoiser that exposes its attention interior
through a controller: at every attention sublayer, for every head, the
backend computes ``(map, output)`` and hands them to the active controller,
which may return a replacement output. The transparent base controller
returns the computed output unchanged, so installing it never changes
results.
"""

from __future__ import annotations

from typing import NamedTuple, Protocol, runtime_checkable

import torch


class AttentionSite(NamedTuple):
    """Stable address of one attention head inside the denoiser."""

    layer_id: str
    kind: str
    head: int


class AttentionController:
    """Per-head attention observer/overrider.

    The sampler drives ``begin_step`` once per executed denoising step and
    ``set_branch`` before each guidance branch's prediction; the backend
    calls ``attend`` once per (site) per prediction, in its declared site
    order. ``attend`` returns the attention output to use downstream.
    """

    def __init__(self) -> None:
        self.step = 0
        self.branch = "cond"

    def begin_step(self, step: int) -> None:
        self.step = step

    def set_branch(self, branch: str) -> None:
        self.branch = branch

    def attend(
        self,
        site: AttentionSite,
        attn_map: torch.Tensor,
        v: torch.Tensor,
        output: torch.Tensor,
    ) -> torch.Tensor:
        return output


@runtime_checkable
class NoisePredictor(Protocol):
    """Contract every denoising backend satisfies.

    Attributes:
        deterministic: identical inputs give bit-identical outputs.
        supports_gradients: predictions are differentiable w.r.t. the
            conditioning embedding.
        latent_shape: shape of the latents the backend denoises.
        text_len: fixed tokenized prompt length.
        dtype: working dtype of latents and embeddings.
    """

    deterministic: bool
    supports_gradients: bool
    latent_shape: tuple[int, ...]
    text_len: int
    dtype: torch.dtype

    def predict(
        self,
        z: torch.Tensor,
        t: int,
        cond: torch.Tensor,
        controller: AttentionController | None = None,
    ) -> torch.Tensor:
        """Predict the noise in ``z`` at schedule time ``t``."""
        ...

    def attention_sites(self) -> tuple[AttentionSite, ...]:
        """Stable ordered list of every attention head the hooks visit."""
        ...

    def layer_ids(self) -> tuple[str, ...]:
        """Stable ordered list of attention layer identifiers."""
        ...

    def encode_text(self, tokens) -> torch.Tensor:
        """Embed a fixed-length token id sequence."""
        ...

    def default_uncond(self) -> torch.Tensor:
        """Embedding of the all-padding (empty) prompt."""
        ...

    def encode_image(self, image) -> torch.Tensor:
        """Map an 8-bit RGB array to a latent."""
        ...

    def decode_image(self, z: torch.Tensor):
        """Map a latent to an 8-bit RGB array."""
        ...
