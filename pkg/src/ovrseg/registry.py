"""Class registries and text prompt construction."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

CLS_PLACEHOLDER = "[CLS]"

# Mask value marking pixels excluded from losses and metrics.
IGNORE_INDEX = 255

# Remote-sensing prompt ensemble (P = 4).
REMOTE_SENSING_TEMPLATES: tuple[str, ...] = (
    "A satellite image of a [CLS]",
    "A land use image of a [CLS]",
    "A remote sensing image of a [CLS]",
    "An aerial image of a [CLS]",
)

# Single generic template, useful for ablation configs.
GENERIC_TEMPLATES: tuple[str, ...] = ("A photo of a [CLS] in a scene",)


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered class names with seen/unseen flags and prompt templates.

    ``seen_flags[i]`` is True when class ``names[i]`` carries training labels.
    """

    names: tuple[str, ...]
    seen_flags: tuple[bool, ...]
    templates: tuple[str, ...] = field(default=REMOTE_SENSING_TEMPLATES)

    def __post_init__(self) -> None:
        if len(self.names) < 1:
            raise ValueError("registry needs at least one class")
        if len(self.names) != len(set(self.names)):
            raise ValueError("class names must be unique")
        if len(self.seen_flags) != len(self.names):
            raise ValueError("seen_flags must align with names")
        if not any(self.seen_flags):
            raise ValueError("registry needs at least one seen class")
        if len(self.templates) < 1:
            raise ValueError("registry needs at least one prompt template")
        for t in self.templates:
            if t.count(CLS_PLACEHOLDER) != 1:
                raise ValueError(
                    f"template {t!r} must contain exactly one {CLS_PLACEHOLDER} placeholder"
                )

    @property
    def n_classes(self) -> int:
        return len(self.names)

    @property
    def n_prompts(self) -> int:
        return len(self.templates)

    def seen_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.seen_flags) if s]

    def unseen_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.seen_flags) if not s]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}; known: {', '.join(self.names)}") from None

    def seen_subset(self) -> "ClassRegistry":
        """Registry restricted to seen classes, in manifest order."""
        idx = self.seen_indices()
        return replace(
            self,
            names=tuple(self.names[i] for i in idx),
            seen_flags=tuple(True for _ in idx),
        )

    def permuted(self, perm: Sequence[int]) -> "ClassRegistry":
        """Registry with classes reordered so new position j holds old class perm[j]."""
        if sorted(perm) != list(range(self.n_classes)):
            raise ValueError("perm must be a permutation of class indices")
        return replace(
            self,
            names=tuple(self.names[i] for i in perm),
            seen_flags=tuple(self.seen_flags[i] for i in perm),
        )


def build_prompts(registry: ClassRegistry) -> list[str]:
    """All prompt strings, class-major then template order."""
    prompts = []
    for name in registry.names:
        for template in registry.templates:
            prompts.append(template.replace(CLS_PLACEHOLDER, name))
    return prompts
