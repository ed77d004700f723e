"""Geometric augmentation of region embeddings.

Rotations and flips permute token content while the learned positions
stay fixed; contrastive training additionally subsamples two target
windows from a larger quantized context.
"""

import numpy as np

from .dataio import RegionEmbedding
from .geometry import (
    GridTransform,
    RegionSpec,
    grid_transform_permutation,
    permute_tokens,
    subregion_indices,
)
from .mixer import MaskPlan, sample_mask


def random_grid_transform(rng: np.random.Generator) -> GridTransform:
    """Uniform draw over the eight rotation/flip symmetries."""
    return GridTransform(rotation=int(rng.integers(4)), flip=bool(rng.integers(2)))


def transform_region(values: np.ndarray, tf: GridTransform, spec: RegionSpec) -> np.ndarray:
    return permute_tokens(values, grid_transform_permutation(tf, spec))


def make_views(
    source: RegionEmbedding,
    source_c: int,
    spec: RegionSpec,
    r: float,
    rng: np.random.Generator,
) -> list[tuple[RegionEmbedding, MaskPlan]]:
    """Cut two augmented target views out of a larger source context.

    Each view independently draws a window offset uniform over
    [0, c - t]^2, a grid transform, and a mask plan at ratio r.  Token
    values are gathered through the window and then content-permuted by
    the transform.
    """
    if source_c < spec.t:
        raise ValueError(
            f"source context side {source_c} is smaller than the target side {spec.t}"
        )
    views = []
    for _ in range(2):
        offset_row = int(rng.integers(0, source_c - spec.t + 1))
        offset_col = int(rng.integers(0, source_c - spec.t + 1))
        window = subregion_indices(source_c, spec.t, offset_row, offset_col, spec.l)
        tf = random_grid_transform(rng)
        values = permute_tokens(
            source.values[window], grid_transform_permutation(tf, spec)
        )
        plan = sample_mask(spec, r, rng)
        views.append(
            (
                RegionEmbedding(
                    values=values,
                    region_id=source.region_id,
                    grid_row=source.grid_row + offset_row,
                    grid_col=source.grid_col + offset_col,
                ),
                plan,
            )
        )
    return views
