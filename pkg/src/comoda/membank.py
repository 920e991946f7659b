"""Per-clip feature stores with momentum refresh.

One bank per (domain, modality), each holding two spaces: `raw` encoder
features for the cross-domain loss and `projected` head outputs for the
cross-modal losses. Updates follow stored <- delta * stored +
(1 - delta) * fresh; projected rows are renormalized to unit length after
the mix, raw rows are left as the exact convex combination.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .data import MODALITIES, Corpus
from .errors import ConfigError, UnknownClipError

SPACES = ("raw", "projected")


class MemoryBankSet:
    """Four (domain, modality) banks, two feature spaces each."""

    def __init__(self, delta: float = 0.5):
        if not 0.0 <= delta <= 1.0:
            raise ConfigError("momentum delta must lie in [0, 1]")
        self.delta = delta
        self._ids: dict[tuple[str, str], list[str]] = {}
        self._index: dict[tuple[str, str], dict[str, int]] = {}
        self._store: dict[tuple[str, str, str], torch.Tensor] = {}

    def register(
        self,
        domain: str,
        modality: str,
        clip_ids: Sequence[str],
        raw: torch.Tensor,
        projected: torch.Tensor,
    ) -> None:
        if len(clip_ids) != raw.shape[0] or len(clip_ids) != projected.shape[0]:
            raise ConfigError("bank init rows do not match clip ids")
        key = (domain, modality)
        self._ids[key] = list(clip_ids)
        self._index[key] = {cid: i for i, cid in enumerate(clip_ids)}
        self._store[(domain, modality, "raw")] = raw.clone()
        self._store[(domain, modality, "projected")] = projected.clone()

    def ids(self, domain: str, modality: str) -> list[str]:
        return list(self._ids[(domain, modality)])

    def size(self, domain: str, modality: str) -> int:
        return len(self._ids[(domain, modality)])

    def _rows(self, domain: str, modality: str, clip_ids: Sequence[str]) -> torch.Tensor:
        index = self._index.get((domain, modality))
        if index is None:
            raise ConfigError(f"no bank registered for ({domain}, {modality})")
        try:
            rows = [index[cid] for cid in clip_ids]
        except KeyError as exc:
            raise UnknownClipError(
                f"clip {exc.args[0]!r} not in ({domain}, {modality}) bank"
            ) from None
        return torch.as_tensor(rows, dtype=torch.long)

    def lookup(
        self,
        domain: str,
        modality: str,
        clip_ids: Sequence[str],
        space: str = "projected",
    ) -> torch.Tensor:
        """Stored rows in the requested order; detached constants."""
        if space not in SPACES:
            raise ConfigError(f"unknown bank space {space!r}")
        rows = self._rows(domain, modality, clip_ids)
        return self._store[(domain, modality, space)].index_select(0, rows)

    def table(
        self, domain: str, modality: str, space: str
    ) -> tuple[torch.Tensor, dict[str, int]]:
        """Full bank tensor and its clip_id -> row map (for loss resolvers)."""
        if space not in SPACES:
            raise ConfigError(f"unknown bank space {space!r}")
        return self._store[(domain, modality, space)], self._index[(domain, modality)]

    def update(
        self,
        domain: str,
        modality: str,
        clip_ids: Sequence[str],
        fresh: torch.Tensor,
        space: str,
        delta: float | None = None,
    ) -> None:
        """stored <- delta * stored + (1 - delta) * fresh, per clip.

        Projected rows are renormalized after the mix (a convex mix of
        unit vectors is not unit); raw rows keep the exact formula value.
        """
        if space not in SPACES:
            raise ConfigError(f"unknown bank space {space!r}")
        d = self.delta if delta is None else delta
        if not 0.0 <= d <= 1.0:
            raise ConfigError("momentum delta must lie in [0, 1]")
        rows = self._rows(domain, modality, clip_ids)
        store = self._store[(domain, modality, space)]
        fresh = fresh.detach().to(store.dtype)
        if fresh.shape != (len(clip_ids), store.shape[1]):
            raise ConfigError(
                f"fresh features shape {tuple(fresh.shape)} does not match "
                f"({len(clip_ids)}, {store.shape[1]})"
            )
        mixed = d * store.index_select(0, rows) + (1.0 - d) * fresh
        if space == "projected":
            mixed = mixed / (mixed.norm(dim=1, keepdim=True) + 1e-12)
        store.index_copy_(0, rows, mixed)

    def state_dict(self) -> dict:
        return {
            "delta": self.delta,
            "ids": {f"{d}/{m}": ids for (d, m), ids in self._ids.items()},
            "store": {
                f"{d}/{m}/{s}": tensor.clone()
                for (d, m, s), tensor in self._store.items()
            },
        }

    def load_state_dict(self, state: dict) -> None:
        self.delta = state["delta"]
        self._ids = {}
        self._index = {}
        self._store = {}
        for key, ids in state["ids"].items():
            domain, modality = key.split("/")
            self._ids[(domain, modality)] = list(ids)
            self._index[(domain, modality)] = {c: i for i, c in enumerate(ids)}
        for key, tensor in state["store"].items():
            domain, modality, space = key.split("/")
            self._store[(domain, modality, space)] = tensor.clone()


def init_banks(
    corpus_source: Corpus,
    corpus_target: Corpus,
    raw_dim: int,
    projected_dim: int,
    rng: np.random.Generator,
    *,
    delta: float = 0.5,
    init: str = "random",
    dtype: torch.dtype = torch.float32,
) -> MemoryBankSet:
    """One entry per clip per (domain, modality); random unit rows or zeros."""
    if init not in ("random", "zeros"):
        raise ConfigError(f"unknown bank init {init!r}")
    banks = MemoryBankSet(delta=delta)
    for domain, corpus in (("source", corpus_source), ("target", corpus_target)):
        ids = corpus.ids()
        for modality in MODALITIES:
            tensors = {}
            for space, dim in (("raw", raw_dim), ("projected", projected_dim)):
                if init == "zeros":
                    arr = np.zeros((len(ids), dim))
                else:
                    arr = rng.standard_normal((len(ids), dim))
                    arr /= np.linalg.norm(arr, axis=1, keepdims=True) + 1e-12
                tensors[space] = torch.as_tensor(arr, dtype=dtype)
            banks.register(domain, modality, ids, tensors["raw"], tensors["projected"])
    return banks
