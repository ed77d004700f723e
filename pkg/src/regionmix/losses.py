"""Self-supervised objectives: masked reconstruction and batch-wise contrast."""

import numpy as np
import torch

from .mixer import MaskPlan


def _row_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # exact cosine, no epsilon: callers guarantee non-zero target rows
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def mem_loss(
    x_hat: torch.Tensor,
    x: torch.Tensor,
    plan: MaskPlan,
    weights,
) -> torch.Tensor:
    """Weighted cosine reconstruction loss over masked rows only.

    Returns -(1/k) * sum_{i in masked} w_i * cos(x_hat_i, x_i).  Gradients
    flow exclusively through the masked rows of x_hat.
    """
    masked = torch.as_tensor(np.asarray(plan.masked), dtype=torch.long, device=x.device)
    return masked_cosine_loss(
        x_hat.unsqueeze(0), x.unsqueeze(0), masked.unsqueeze(0), weights
    )


def masked_cosine_loss(
    x_hat: torch.Tensor,
    x: torch.Tensor,
    masked_idx: torch.Tensor,
    weights,
) -> torch.Tensor:
    """Batched form of mem_loss: inputs (b, s, d), masked_idx (b, k)."""
    if masked_idx.ndim != 2 or masked_idx.shape[1] == 0:
        raise ValueError("loss is undefined for an empty mask (k = 0)")
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: x_hat {tuple(x_hat.shape)} vs x {tuple(x.shape)}")
    w = torch.as_tensor(np.asarray(weights), dtype=x.dtype, device=x.device)
    if w.shape != (x.shape[1],):
        raise ValueError(f"weights must have shape ({x.shape[1]},), got {tuple(w.shape)}")
    idx = masked_idx[..., None].expand(-1, -1, x.shape[-1])
    pred = torch.take_along_dim(x_hat, idx, dim=1)
    target = torch.take_along_dim(x, idx, dim=1)
    if bool((target.norm(dim=-1) == 0).any()):
        raise FloatingPointError("zero-norm target row at a masked position")
    sim = _row_cosine(pred, target)
    w_masked = w[masked_idx]
    return -(w_masked * sim).sum(dim=1).mean() / masked_idx.shape[1]


def ntxent_loss(
    z: torch.Tensor,
    z_prime: torch.Tensor,
    temperature: float,
    symmetric: bool = False,
) -> torch.Tensor:
    """Normalized temperature-scaled cross-entropy over a batch of view pairs.

    For each i the positive is (z_i, z'_i); the denominator sums the
    similarities of z_i with every *other* z'_j (the positive itself is
    excluded).  The optional symmetric mode averages the loss with the two
    view roles swapped.
    """
    if z.ndim != 2 or z.shape != z_prime.shape:
        raise ValueError(
            f"expected matching (n, p) matrices, got {tuple(z.shape)} and "
            f"{tuple(z_prime.shape)}"
        )
    n = z.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 pairs for in-batch negatives, got {n}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    zn = z / z.norm(dim=-1, keepdim=True)
    zpn = z_prime / z_prime.norm(dim=-1, keepdim=True)
    sim = zn @ zpn.T / temperature  # sim[i, j] = sim(z_i, z'_j) / tau
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    negatives = sim.masked_fill(eye, float("-inf"))
    loss = -(sim.diagonal() - torch.logsumexp(negatives, dim=1)).mean()
    if symmetric:
        negatives_t = sim.T.masked_fill(eye, float("-inf"))
        loss_t = -(sim.diagonal() - torch.logsumexp(negatives_t, dim=1)).mean()
        loss = (loss + loss_t) / 2
    return loss
