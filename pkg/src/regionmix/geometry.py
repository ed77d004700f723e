"""Multi-magnification region layout.

A region covers a ``t x t`` grid of tiles at the coarsest magnification.
Each finer level doubles the grid side, so level ``i`` (1-based, level 1
coarsest) holds ``(t * 2**(i-1))**2`` tiles.  Tokens are laid out
coarsest level first, row-major within a level; every operation in this
module is pure index arithmetic on that canonical order.
"""

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


def sequence_length(t: int, l: int) -> int:
    """Total token count of a region with coarsest grid side t over l levels."""
    if t < 1:
        raise ValueError(f"tile grid side must be >= 1, got {t}")
    if l < 1:
        raise ValueError(f"level count must be >= 1, got {l}")
    return t * t * sum(4**i for i in range(l))


@dataclass(frozen=True)
class RegionSpec:
    """Geometry contract shared by every region in a dataset.

    t: tile grid side at the coarsest level.
    l: number of magnification levels.
    d: embedding dimension of each tile.
    """

    t: int
    l: int
    d: int

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"t must be >= 1, got {self.t}")
        if self.l < 1:
            raise ValueError(f"l must be >= 1, got {self.l}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")

    @cached_property
    def s(self) -> int:
        """Sequence length: total tokens across all levels."""
        return sequence_length(self.t, self.l)

    def grid_side(self, level: int) -> int:
        self._check_level(level)
        return self.t * 2 ** (level - 1)

    @cached_property
    def level_sizes(self) -> tuple[int, ...]:
        """Token count per level, coarsest first."""
        return tuple((self.t * 2**i) ** 2 for i in range(self.l))

    @cached_property
    def level_offsets(self) -> tuple[int, ...]:
        """Canonical index of each level's first token."""
        offsets = [0]
        for n in self.level_sizes[:-1]:
            offsets.append(offsets[-1] + n)
        return tuple(offsets)

    def level_slice(self, level: int) -> slice:
        """Contiguous canonical-index range of one level's tokens."""
        self._check_level(level)
        start = self.level_offsets[level - 1]
        return slice(start, start + self.level_sizes[level - 1])

    def _check_level(self, level: int) -> None:
        if not 1 <= level <= self.l:
            raise ValueError(f"level must be in [1, {self.l}], got {level}")


@dataclass(frozen=True)
class TokenAddress:
    """Position of one token: level (1 = coarsest) plus row/col on that level's grid."""

    level: int
    row: int
    col: int


def canonical_index(addr: TokenAddress, spec: RegionSpec) -> int:
    """Map a token address to its canonical index (levels coarsest-first, row-major)."""
    g = spec.grid_side(addr.level)
    if not (0 <= addr.row < g and 0 <= addr.col < g):
        raise ValueError(
            f"address ({addr.row}, {addr.col}) out of bounds for level {addr.level} "
            f"grid of side {g}"
        )
    return spec.level_offsets[addr.level - 1] + addr.row * g + addr.col


def address_of(index: int, spec: RegionSpec) -> TokenAddress:
    """Inverse of canonical_index."""
    if not 0 <= index < spec.s:
        raise ValueError(f"index must be in [0, {spec.s}), got {index}")
    level = spec.l
    for i, off in enumerate(spec.level_offsets[1:], start=1):
        if index < off:
            level = i
            break
    local = index - spec.level_offsets[level - 1]
    row, col = divmod(local, spec.grid_side(level))
    return TokenAddress(level=level, row=row, col=col)


def level_weights(spec: RegionSpec) -> np.ndarray:
    """Per-token weights giving every magnification level the same total weight.

    A token at level i receives s / (l * n_i), so each level's tokens sum
    to s / l and the overall sum is exactly s (mean per-token weight 1).
    """
    w = np.empty(spec.s, dtype=np.float64)
    for level in range(1, spec.l + 1):
        n = spec.level_sizes[level - 1]
        w[spec.level_slice(level)] = spec.s / (spec.l * n)
    return w


@dataclass(frozen=True)
class GridTransform:
    """Spatial symmetry of the region: quarter-turn rotation, then optional
    horizontal mirror.  Applied to token content; positions stay fixed."""

    rotation: int = 0
    flip: bool = False

    def __post_init__(self):
        if self.rotation not in (0, 1, 2, 3):
            raise ValueError(f"rotation must be one of 0..3, got {self.rotation}")

    def compose(self, other: "GridTransform") -> "GridTransform":
        """Transform equivalent to applying `other` first, then `self`."""
        if other.flip:
            return GridTransform(
                rotation=(other.rotation - self.rotation) % 4,
                flip=not self.flip,
            )
        return GridTransform(
            rotation=(self.rotation + other.rotation) % 4,
            flip=self.flip,
        )

    def inverse(self) -> "GridTransform":
        if self.flip:
            return GridTransform(rotation=self.rotation, flip=True)
        return GridTransform(rotation=(-self.rotation) % 4, flip=False)


def grid_transform_permutation(tf: GridTransform, spec: RegionSpec) -> np.ndarray:
    """Token permutation induced by a grid transform, as perm[src] = dst.

    One quarter turn maps (row, col) -> (col, g-1-row) on a grid of side g;
    the mirror then maps (row, col) -> (row, g-1-col).  The same map is
    applied on every level's grid, so spatial nesting across levels is
    preserved, and each level's block maps onto itself.
    """
    perm = np.empty(spec.s, dtype=np.int64)
    for level in range(1, spec.l + 1):
        g = spec.grid_side(level)
        off = spec.level_offsets[level - 1]
        n = spec.level_sizes[level - 1]
        rows, cols = np.divmod(np.arange(n, dtype=np.int64), g)
        for _ in range(tf.rotation):
            rows, cols = cols, g - 1 - rows
        if tf.flip:
            cols = g - 1 - cols
        perm[off : off + n] = off + rows * g + cols
    return perm


def subregion_indices(
    source_c: int, target_t: int, offset_row: int, offset_col: int, l: int
) -> np.ndarray:
    """Canonical indices, within a c x c source region, of the tokens covered
    by a t x t window at the given offset (offsets in coarsest-tile units).

    The window is aligned exactly at every level: level i uses the offset
    scaled by 2**(i-1).  The result is ordered canonically for the target
    region, so gathering a source region's token matrix with it yields a
    valid t x t region embedding.
    """
    if target_t < 1 or source_c < target_t:
        raise ValueError(
            f"need 1 <= target_t <= source_c, got target_t={target_t}, source_c={source_c}"
        )
    if l < 1:
        raise ValueError(f"level count must be >= 1, got {l}")
    limit = source_c - target_t
    if not (0 <= offset_row <= limit and 0 <= offset_col <= limit):
        raise ValueError(
            f"offsets must lie in [0, {limit}], got ({offset_row}, {offset_col})"
        )
    chunks = []
    src_off = 0
    for i in range(l):
        scale = 2**i
        sg = source_c * scale
        tg = target_t * scale
        rows = (offset_row * scale + np.arange(tg, dtype=np.int64))[:, None]
        cols = (offset_col * scale + np.arange(tg, dtype=np.int64))[None, :]
        chunks.append((src_off + rows * sg + cols).reshape(-1))
        src_off += sg * sg
    return np.concatenate(chunks)


def permute_tokens(values: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Move token content so the token at index i lands at perm[i]."""
    out = np.empty_like(values)
    out[perm] = values
    return out


def mask_size(s: int, r: float) -> int:
    """Number of masked tokens at removal ratio r: floor(s * r)."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"removal ratio must be in [0, 1], got {r}")
    return int(math.floor(s * r))
