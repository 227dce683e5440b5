"""Deterministic miniature latent denoiser with hookable attention.

The model is small enough to run full trajectories in milliseconds while
exercising every contract the real pipeline needs: per-head self- and
cross-attention routed through the shared attention math, controller hooks,
a text embedder with learnable concept slots, image encode/decode, and
differentiability w.r.t. conditioning embeddings.

Architecture: the latent (4 channels on an 8x8 grid) is flattened to 64
tokens, projected to a 32-dim stream, tagged with positional and sinusoidal
timestep embeddings, then passed through 2 residual blocks. Each block holds
one 2-head self-attention and one 2-head cross-attention sublayer over the
8-token text embedding. A final projection maps the stream back to the
latent shape as the noise estimate.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..attention import KIND_CROSS, KIND_SELF, scaled_attention
from ..errors import DomainError, NonFiniteError, ShapeError, VocabularyError
from .base import AttentionController, AttentionSite

PAD_ID = 0
#: Token ids 1..N_CONCEPT_SLOTS are reserved for learnable concept tokens.
N_CONCEPT_SLOTS = 7


@dataclasses.dataclass(frozen=True)
class ToyModelSpec:
    """Construction parameters of the toy denoiser."""

    latent_shape: tuple[int, int, int] = (4, 8, 8)
    n_blocks: int = 2
    n_heads: int = 2
    text_len: int = 8
    vocab_size: int = 64
    d_model: int = 32
    init_seed: int = 0

    def __post_init__(self) -> None:
        if len(self.latent_shape) != 3:
            raise DomainError("latent_shape must be (channels, height, width)")
        if self.latent_shape[1] != self.latent_shape[2]:
            raise DomainError("the toy latent grid must be square")
        if self.n_blocks < 1 or self.n_heads < 1:
            raise DomainError("n_blocks and n_heads must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise DomainError(
                f"d_model {self.d_model} must divide into {self.n_heads} heads"
            )
        if self.vocab_size <= 1 + N_CONCEPT_SLOTS:
            raise DomainError("vocab_size leaves no room for hashed words")
        if self.text_len < 1:
            raise DomainError("text_len must be >= 1")


class ToyTokenizer:
    """Stateless word-level tokenizer over a small hashed vocabulary.

    Words written as ``<name>`` map into the reserved concept slots; all
    other words hash into the remaining id range. Sequences are padded with
    id 0 to the model's fixed text length.
    """

    def __init__(self, spec: ToyModelSpec):
        self.spec = spec

    def _word_id(self, word: str) -> int:
        word = word.lower()
        if word.startswith("<") and word.endswith(">") and len(word) > 2:
            return 1 + zlib.crc32(word.encode("utf-8")) % N_CONCEPT_SLOTS
        base = 1 + N_CONCEPT_SLOTS
        return base + zlib.crc32(word.encode("utf-8")) % (self.spec.vocab_size - base)

    def encode_words(self, words: Sequence[str]) -> list[int]:
        return [self._word_id(w) for w in words]

    def encode(self, prompt: str) -> list[int]:
        """Tokenize a prompt and pad it to the fixed text length."""
        words = prompt.split()
        ids = self.encode_words(words)
        if len(ids) > self.spec.text_len:
            raise DomainError(
                f"prompt has {len(ids)} words, the backend holds {self.spec.text_len}"
            )
        return ids + [PAD_ID] * (self.spec.text_len - len(ids))

    def concept_id(self, token: str) -> int:
        if not (token.startswith("<") and token.endswith(">") and len(token) > 2):
            raise DomainError(f"concept tokens are written <name>, got {token!r}")
        return self._word_id(token)


def sinusoidal_embedding(t: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Standard sin/cos timestep embedding of width ``dim``."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    angles = float(t) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class ToyDenoiser:
    """Seeded, deterministic, differentiable noise predictor.

    All weights are drawn once from a generator seeded with
    ``spec.init_seed``; two instances built from equal specs are identical.
    """

    deterministic = True
    supports_gradients = True

    def __init__(self, spec: ToyModelSpec | None = None, dtype: torch.dtype = torch.float64):
        self.spec = spec or ToyModelSpec()
        self.dtype = dtype
        self.tokenizer = ToyTokenizer(self.spec)
        self._concepts: dict[int, torch.Tensor] = {}
        s = self.spec
        self.latent_shape = s.latent_shape
        self.text_len = s.text_len
        c, h, _ = s.latent_shape
        n_tokens = h * h
        d = s.d_model
        g = torch.Generator().manual_seed(s.init_seed)

        def draw(*shape: int, scale: float) -> torch.Tensor:
            return torch.randn(*shape, generator=g, dtype=dtype) * scale

        w: dict[str, torch.Tensor] = {}
        w["token_emb"] = draw(s.vocab_size, d, scale=1.0)
        w["text_pos"] = draw(s.text_len, d, scale=0.3)
        w["w_in"] = draw(c, d, scale=c**-0.5)
        w["pos"] = draw(n_tokens, d, scale=0.3)
        w["time_gain"] = draw(d, scale=0.3)
        for i in range(s.n_blocks):
            for kind in (KIND_SELF, KIND_CROSS):
                p = f"b{i}.{kind}"
                w[f"{p}.wq"] = draw(d, d, scale=d**-0.5)
                w[f"{p}.wk"] = draw(d, d, scale=d**-0.5)
                w[f"{p}.wv"] = draw(d, d, scale=d**-0.5)
                w[f"{p}.wo"] = draw(d, d, scale=0.3 * d**-0.5)
        w["w_out"] = draw(d, c, scale=0.15 * d**-0.5)
        w["img_proj"] = draw(3, c, scale=1.0)
        self.w = w
        self._sites = tuple(
            AttentionSite(layer_id=f"block{i}", kind=kind, head=head)
            for i in range(s.n_blocks)
            for kind in (KIND_SELF, KIND_CROSS)
            for head in range(s.n_heads)
        )

    # ---- contract surface -------------------------------------------------

    def attention_sites(self) -> tuple[AttentionSite, ...]:
        return self._sites

    def layer_ids(self) -> tuple[str, ...]:
        return tuple(f"block{i}" for i in range(self.spec.n_blocks))

    def embed_tokens(
        self, tokens: Sequence[int], overrides: dict[int, torch.Tensor] | None = None
    ) -> torch.Tensor:
        """Embed token ids, optionally overriding rows of the embedding table.

        Override values participate in autograd, which is how concept
        training differentiates through the lookup.
        """
        ids = list(tokens)
        if len(ids) != self.spec.text_len:
            raise ShapeError(
                f"expected {self.spec.text_len} token ids, got {len(ids)}"
            )
        for tid in ids:
            if not 0 <= tid < self.spec.vocab_size:
                raise VocabularyError(f"token id {tid} is outside the vocabulary")
        rows = self.w["token_emb"][torch.tensor(ids, dtype=torch.long)]
        merged = dict(self._concepts)
        if overrides:
            merged.update(overrides)
        if merged:
            pieces = []
            for pos, tid in enumerate(ids):
                if tid in merged:
                    vec = merged[tid]
                    if vec.shape != (self.spec.d_model,):
                        raise ShapeError(
                            f"concept vector for id {tid} must have shape "
                            f"({self.spec.d_model},), got {tuple(vec.shape)}"
                        )
                    pieces.append(vec.to(self.dtype))
                else:
                    pieces.append(rows[pos])
            rows = torch.stack(pieces)
        return rows + self.w["text_pos"]

    def encode_text(self, tokens: Sequence[int]) -> torch.Tensor:
        return self.embed_tokens(tokens)

    def encode_prompt(self, prompt: str) -> torch.Tensor:
        return self.encode_text(self.tokenizer.encode(prompt))

    def default_uncond(self) -> torch.Tensor:
        return self.encode_text([PAD_ID] * self.spec.text_len)

    def register_concept(self, token_id: int, vector: torch.Tensor) -> None:
        """Bind a learned embedding to one of the reserved concept token ids."""
        if not 1 <= token_id <= N_CONCEPT_SLOTS:
            raise DomainError(
                f"concept ids lie in [1, {N_CONCEPT_SLOTS}], got {token_id}"
            )
        if vector.shape != (self.spec.d_model,):
            raise ShapeError(
                f"concept vector must have shape ({self.spec.d_model},), "
                f"got {tuple(vector.shape)}"
            )
        self._concepts[token_id] = vector.detach().clone().to(self.dtype)

    def token_embedding(self, token_id: int) -> torch.Tensor:
        """Current embedding-table row for a token id (concept-aware)."""
        if not 0 <= token_id < self.spec.vocab_size:
            raise VocabularyError(f"token id {token_id} is outside the vocabulary")
        if token_id in self._concepts:
            return self._concepts[token_id].clone()
        return self.w["token_emb"][token_id].clone()

    # ---- forward ----------------------------------------------------------

    def predict(
        self,
        z: torch.Tensor,
        t: int,
        cond: torch.Tensor,
        controller: AttentionController | None = None,
    ) -> torch.Tensor:
        """Predict the noise in latent ``z`` at schedule time ``t``.

        Every attention head's ``(map, output)`` is offered to the controller
        in the order :meth:`attention_sites` declares; the returned output
        feeds the rest of the forward pass.
        """
        s = self.spec
        if tuple(z.shape) != s.latent_shape:
            raise ShapeError(
                f"latent shape {tuple(z.shape)} does not match {s.latent_shape}"
            )
        if not isinstance(t, int) or isinstance(t, bool) or t < 1:
            raise DomainError(f"t must be an integer >= 1, got {t!r}")
        if cond.shape != (s.text_len, s.d_model):
            raise ShapeError(
                f"cond must have shape ({s.text_len}, {s.d_model}), "
                f"got {tuple(cond.shape)}"
            )
        if not torch.isfinite(z).all():
            raise NonFiniteError("latent contains non-finite values")
        if not torch.isfinite(cond).all():
            raise NonFiniteError("cond embedding contains non-finite values")
        c, h, _ = s.latent_shape
        d = s.d_model
        n_heads = s.n_heads
        dh = d // n_heads
        x = z.to(self.dtype).reshape(c, h * h).transpose(0, 1) @ self.w["w_in"]
        x = x + self.w["pos"]
        x = x + sinusoidal_embedding(t, d, self.dtype) * self.w["time_gain"]
        cond = cond.to(self.dtype)
        for i in range(s.n_blocks):
            for kind in (KIND_SELF, KIND_CROSS):
                p = f"b{i}.{kind}"
                hidden = F.layer_norm(x, (d,))
                source = hidden if kind == KIND_SELF else cond
                q = hidden @ self.w[f"{p}.wq"]
                k = source @ self.w[f"{p}.wk"]
                v = source @ self.w[f"{p}.wv"]
                outs = []
                for head in range(n_heads):
                    sl = slice(head * dh, (head + 1) * dh)
                    attn_map, out = scaled_attention(q[:, sl], k[:, sl], v[:, sl])
                    if controller is not None:
                        out = controller.attend(
                            AttentionSite(layer_id=f"block{i}", kind=kind, head=head),
                            attn_map,
                            v[:, sl],
                            out,
                        )
                    outs.append(out)
                x = x + torch.cat(outs, dim=1) @ self.w[f"{p}.wo"]
        eps = F.layer_norm(x, (d,)) @ self.w["w_out"]
        return eps.transpose(0, 1).reshape(c, h, h)

    def predict_with_taps(
        self, z: torch.Tensor, t: int, cond: torch.Tensor
    ) -> tuple[torch.Tensor, dict[AttentionSite, tuple[torch.Tensor, torch.Tensor]]]:
        """Predict and also return every head's ``(map, output)`` by site."""
        taps: dict[AttentionSite, tuple[torch.Tensor, torch.Tensor]] = {}

        class _Tap(AttentionController):
            def attend(self, site, attn_map, v, output):
                taps[site] = (attn_map.detach().clone(), output.detach().clone())
                return output

        eps = self.predict(z, t, cond, controller=_Tap())
        return eps, taps

    # ---- images -----------------------------------------------------------

    def encode_image(self, image: np.ndarray | torch.Tensor) -> torch.Tensor:
        """Map an 8-bit RGB array (H, W, 3) to a latent."""
        if isinstance(image, np.ndarray):
            # copy: PIL hands out read-only arrays, which torch rejects
            image = torch.from_numpy(np.array(image, copy=True))
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ShapeError(f"expected an (H, W, 3) image, got {tuple(image.shape)}")
        c, h, _ = self.spec.latent_shape
        x = image.to(self.dtype) / 255.0 * 2.0 - 1.0
        x = x.permute(2, 0, 1).unsqueeze(0)
        x = F.interpolate(x, size=(h, h), mode="bilinear", align_corners=False)
        z = torch.einsum("rhw,rc->chw", x[0], self.w["img_proj"])
        return z

    def decode_image(self, z: torch.Tensor, size: int = 64) -> np.ndarray:
        """Map a latent back to an 8-bit RGB array (size, size, 3)."""
        if tuple(z.shape) != self.spec.latent_shape:
            raise ShapeError(
                f"latent shape {tuple(z.shape)} does not match {self.spec.latent_shape}"
            )
        inv = torch.linalg.pinv(self.w["img_proj"])
        rgb = torch.einsum("chw,cr->rhw", z.to(self.dtype), inv)
        rgb = F.interpolate(
            rgb.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
        )[0]
        rgb = ((rgb + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0
        return rgb.permute(1, 2, 0).round().to(torch.uint8).numpy()

    def reference_images(self, seed: int, count: int, size: int = 64) -> list[np.ndarray]:
        """Procedural subject images: a filled disk over a gradient sky."""
        if count < 1:
            raise DomainError(f"count must be >= 1, got {count}")
        images = []
        g = torch.Generator().manual_seed(seed)
        ys, xs = torch.meshgrid(
            torch.arange(size, dtype=self.dtype),
            torch.arange(size, dtype=self.dtype),
            indexing="ij",
        )
        for _ in range(count):
            top = torch.rand(3, generator=g, dtype=self.dtype)
            bottom = torch.rand(3, generator=g, dtype=self.dtype)
            grad = ys.unsqueeze(-1) / (size - 1)
            img = top * (1 - grad) + bottom * grad
            cx = float(torch.rand(1, generator=g, dtype=self.dtype)) * size * 0.5 + size * 0.25
            cy = float(torch.rand(1, generator=g, dtype=self.dtype)) * size * 0.5 + size * 0.25
            r = float(torch.rand(1, generator=g, dtype=self.dtype)) * size * 0.15 + size * 0.12
            color = torch.rand(3, generator=g, dtype=self.dtype)
            mask = ((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r).unsqueeze(-1)
            img = torch.where(mask, color, img)
            images.append((img * 255.0).round().to(torch.uint8).numpy())
        return images

    def reference_latents(self, seed: int, count: int) -> list[torch.Tensor]:
        return [self.encode_image(img) for img in self.reference_images(seed, count)]
