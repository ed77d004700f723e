"""Evaluation metrics."""

import numpy as np
from scipy.stats import rankdata


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    ties counting one half (rank-sum formulation).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(
            f"scores and labels must be equal-length vectors, got shapes "
            f"{scores.shape} and {labels.shape}"
        )
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present to compute AUROC")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
