"""Adapter boundary for full-scale pretrained denoisers.

The pipeline itself never imports a heavyweight model stack. External
checkpoints plug in through a registry keyed by URI scheme: a backend
selector of the form ``adapter:<scheme>://<rest>`` resolves to whatever
factory was registered for ``<scheme>``, and the returned object must
satisfy the :class:`~subswap.backend.base.NoisePredictor` contract
(deterministic prediction, ordered attention sites, controller hooks,
text and image codecs).
"""

from __future__ import annotations

from typing import Callable

from ..errors import CapabilityError, ConfigError
from .base import NoisePredictor
from .toy import ToyDenoiser, ToyModelSpec

_REGISTRY: dict[str, Callable[[str], NoisePredictor]] = {}


def register_adapter(scheme: str, factory: Callable[[str], NoisePredictor]) -> None:
    """Register a factory producing a backend from an adapter URI."""
    if not scheme or "/" in scheme or ":" in scheme:
        raise ConfigError(f"invalid adapter scheme {scheme!r}")
    _REGISTRY[scheme] = factory


def unregister_adapter(scheme: str) -> None:
    _REGISTRY.pop(scheme, None)


def registered_schemes() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def resolve_backend(selector: str, init_seed: int = 0) -> NoisePredictor:
    """Build a backend from a selector string.

    ``"toy"`` constructs the built-in miniature denoiser. ``"adapter:<uri>"``
    dispatches on the URI's scheme and fails with a capability error when no
    adapter implementation is registered for it.
    """
    if selector == "toy":
        return ToyDenoiser(ToyModelSpec(init_seed=init_seed))
    if selector.startswith("adapter:"):
        uri = selector[len("adapter:") :]
        scheme, sep, _ = uri.partition("://")
        if not sep or not scheme:
            raise ConfigError(
                f"adapter selector must look like adapter:<scheme>://<path>, got {selector!r}"
            )
        factory = _REGISTRY.get(scheme)
        if factory is None:
            raise CapabilityError(
                f"no adapter implementation registered for scheme {scheme!r}"
            )
        return factory(uri)
    raise ConfigError(f"unknown backend selector {selector!r}")
