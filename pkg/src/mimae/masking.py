"""Patch mask generation: orthogonal (disjoint visible sets) and independent masks.

Convention: ``1`` marks a masked patch, ``0`` a visible one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mimae.autodiff import Tensor, broadcast_to, gather_rows, scatter_rows
from mimae.errors import ContractError, ShapeError

STRATEGIES = ("orthogonal", "independent")
COUNT_STRATEGIES = ("complete", "fixed4")


@dataclass(frozen=True, eq=False)
class MaskSet:
    """N binary masks over P patches for one image."""

    masks: np.ndarray  # (N, P) uint8
    strategy: str
    ratio: float
    seed: int | None = None

    @property
    def num_masks(self) -> int:
        return self.masks.shape[0]

    @property
    def num_patches(self) -> int:
        return self.masks.shape[1]

    def visible(self, i: int) -> np.ndarray:
        """Ascending indices of the patches visible under mask ``i``."""
        return np.flatnonzero(self.masks[i] == 0)

    @property
    def orthogonal(self) -> bool:
        """True when visible sets are pairwise disjoint."""
        return bool(((1 - self.masks.astype(np.int64)).sum(axis=0) <= 1).all())

    @property
    def complete(self) -> bool:
        """True when every patch is visible under exactly one mask."""
        return bool(((1 - self.masks.astype(np.int64)).sum(axis=0) == 1).all())

    def __eq__(self, other):
        if not isinstance(other, MaskSet):
            return NotImplemented
        return (self.strategy == other.strategy and self.ratio == other.ratio
                and np.array_equal(self.masks, other.masks))


def mask_count(ratio: float, strategy: str = "complete") -> int:
    """Number of masks per image for a masking ``ratio``.

    ``complete`` uses as many masks as it takes for the visible sets to tile
    the image, ``max(2, round(1 / (1 - ratio)))`` with halves rounded up;
    ``fixed4`` always uses four.
    """
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"mask ratio must lie in (0, 1), got {ratio}")
    if strategy == "complete":
        return max(2, math.floor(1.0 / (1.0 - ratio) + 0.5))
    if strategy == "fixed4":
        return 4
    raise ContractError(f"unknown mask-count strategy {strategy!r}; expected one of {COUNT_STRATEGIES}")


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_orthogonal(num_patches: int, num_masks: int, seed=None, visible: int | None = None) -> MaskSet:
    """Split a random permutation of the patches into ``num_masks`` visible sets.

    By default the chunks cover every patch and differ in size by at most one.
    With ``visible`` set, each mask gets exactly that many visible patches
    taken from the front of the permutation (disjoint but not covering).
    """
    P, N = int(num_patches), int(num_masks)
    if N < 2:
        raise ContractError(f"orthogonal masking needs at least 2 masks, got {N}")
    if P < N:
        raise ContractError(f"cannot split {P} patches into {N} non-empty visible sets")
    if visible is not None and (visible < 1 or visible * N > P):
        raise ContractError(f"{N} disjoint sets of {visible} visible patches do not fit in {P} patches")
    perm = _rng(seed).permutation(P)
    if visible is None:
        chunks = np.array_split(perm, N)
    else:
        chunks = np.split(perm[: visible * N], N)
    masks = np.ones((N, P), dtype=np.uint8)
    for i, chunk in enumerate(chunks):
        masks[i, chunk] = 0
    ratio = 1.0 - (P / N if visible is None else visible) / P
    return MaskSet(masks, "orthogonal", ratio, seed if isinstance(seed, (int, np.integer)) else None)


def gen_independent(num_patches: int, ratio: float, num_masks: int, seed=None) -> MaskSet:
    """Each mask independently keeps ``round(P * (1 - ratio))`` visible patches."""
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"mask ratio must lie in (0, 1), got {ratio}")
    P = int(num_patches)
    V = int(round(P * (1.0 - ratio)))
    if V < 1:
        raise ContractError(f"ratio {ratio} leaves no visible patch out of {P}")
    rng = _rng(seed)
    masks = np.ones((num_masks, P), dtype=np.uint8)
    for i in range(num_masks):
        masks[i, rng.choice(P, size=V, replace=False)] = 0
    return MaskSet(masks, "independent", ratio, seed if isinstance(seed, (int, np.integer)) else None)


def gen_batch(batch: int, num_patches: int, num_masks: int, ratio: float, rng: np.random.Generator,
              strategy: str = "orthogonal", visible: int | None = None) -> np.ndarray:
    """Masks for a whole batch, shape (B, N, P); one fresh MaskSet per image."""
    out = np.empty((batch, num_masks, num_patches), dtype=np.uint8)
    for b in range(batch):
        if strategy == "orthogonal":
            out[b] = gen_orthogonal(num_patches, num_masks, rng, visible=visible).masks
        elif strategy == "independent":
            out[b] = gen_independent(num_patches, ratio, num_masks, rng).masks
        else:
            raise ContractError(f"unknown mask strategy {strategy!r}; expected one of {STRATEGIES}")
    return out


def visible_index(mask: np.ndarray) -> np.ndarray:
    """Ascending visible-patch indices per row of a (B, P) mask; all rows must agree in count."""
    mask = np.asarray(mask)
    if mask.ndim == 1:
        mask = mask[None]
    counts = (mask == 0).sum(axis=1)
    if (counts != counts[0]).any():
        raise ShapeError(f"rows have different visible counts {sorted(set(counts.tolist()))}")
    if counts[0] < 1:
        raise ContractError("mask leaves no visible patch")
    # stable argsort puts visible (0) patches first, in ascending patch order
    return np.argsort(mask, axis=1, kind="stable")[:, : counts[0]]


def apply_mask(images, mask):
    """Gather visible patch rows of ``images`` (B, P, D).

    ``mask`` is (P,) shared by the batch or (B, P) per image. Returns the
    visible rows (B, V, D) in ascending patch order and the (B, V) index map
    used to scatter them back.
    """
    mask = np.asarray(mask)
    B, P = images.shape[0], images.shape[1]
    if mask.shape[-1] != P:
        raise ShapeError(f"mask length {mask.shape[-1]} != number of patches {P}")
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (B, P))
    index = visible_index(mask)
    if isinstance(images, Tensor):
        return gather_rows(images, index), index
    rows = np.arange(B)[:, None]
    return np.asarray(images)[rows, index], index


def scatter_visible(visible, index: np.ndarray, num_patches: int, fill=0.0):
    """Inverse of :func:`apply_mask`: place rows back at their patch positions.

    Positions not listed in ``index`` receive ``fill`` (a scalar, or a
    tensor broadcastable to (B, P, D)).
    """
    B, _, D = visible.shape
    if isinstance(visible, Tensor):
        base = fill if isinstance(fill, Tensor) else Tensor(np.full((B, num_patches, D), fill, visible.dtype))
        if base.shape != (B, num_patches, D):
            base = broadcast_to(base, (B, num_patches, D))
        return scatter_rows(base, visible, index)
    out = np.full((B, num_patches, D), fill, dtype=np.asarray(visible).dtype)
    out[np.arange(B)[:, None], index] = visible
    return out
