from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..knowledge_graph import NodeRegistry


@dataclass
class Dataset:
    """In-memory samples.

    Exactly one of ``images`` (N, H, W, 3) uint8 or ``features`` (N, H', W', d)
    is set for a trainable dataset; annotation-only datasets carry neither.
    ``masks`` holds per-pixel attribute indices (-1 for background) and only
    exists for synthetic data.
    """

    labels: np.ndarray
    attribute_scores: np.ndarray
    registry: NodeRegistry
    images: np.ndarray | None = None
    features: np.ndarray | None = None
    boxes: np.ndarray | None = None
    masks: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.attribute_scores = np.asarray(self.attribute_scores, dtype=np.float64)
        n = len(self.labels)
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if self.images is not None and self.features is not None:
            raise ValueError("a dataset holds either images or feature maps, not both")
        if self.attribute_scores.shape != (n, self.registry.n_attributes):
            raise ValueError(
                f"attribute scores have shape {self.attribute_scores.shape}, "
                f"expected {(n, self.registry.n_attributes)}"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.registry.n_categories):
            raise ValueError("labels out of range")
        if (self.attribute_scores < 0).any() or (self.attribute_scores > 1).any():
            raise ValueError("attribute scores must lie in [0, 1]")
        for name in ("images", "features", "boxes", "masks"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} entries for {n} labels")
        if len(self.ids) != n:
            raise ValueError("ids length does not match labels")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return self.registry.n_categories

    @property
    def inputs(self) -> np.ndarray:
        if self.images is not None:
            return self.images
        if self.features is not None:
            return self.features
        raise ValueError("dataset has no images or feature maps (annotation-only)")

    def instances(self):
        """``(label, attribute_scores)`` pairs for graph construction."""
        return zip(self.labels.tolist(), self.attribute_scores)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)

        def take(arr):
            return None if arr is None else arr[index]

        return replace(
            self,
            labels=self.labels[index],
            attribute_scores=self.attribute_scores[index],
            images=take(self.images),
            features=take(self.features),
            boxes=take(self.boxes),
            masks=take(self.masks),
            ids=[self.ids[i] for i in np.arange(len(self))[index]],
        )
