"""Gated-attention multiple-instance aggregation and group supervision."""

import torch
import torch.nn.functional as F
from torch import nn


class GatedAttentionMIL(nn.Module):
    """Attention-pooled bag classifier.

    Each bag element receives a score h^T (tanh(V z) * sigmoid(U z));
    softmax over the bag yields the attention weights, the weighted sum is
    classified by a single linear layer.
    """

    def __init__(self, input_dim: int, attention_dim: int = 16, n_classes: int = 2):
        super().__init__()
        self.V = nn.Linear(input_dim, attention_dim, bias=False)
        self.U = nn.Linear(input_dim, attention_dim, bias=False)
        self.h = nn.Linear(attention_dim, 1, bias=False)
        self.classifier = nn.Linear(input_dim, n_classes)

    def attention(self, bag: torch.Tensor) -> torch.Tensor:
        """Attention weights over a (b, d) bag; a probability vector."""
        if bag.ndim != 2 or bag.shape[1] != self.V.in_features:
            raise ValueError(
                f"expected bag of shape (b, {self.V.in_features}), got {tuple(bag.shape)}"
            )
        scores = self.h(torch.tanh(self.V(bag)) * torch.sigmoid(self.U(bag)))
        return torch.softmax(scores.squeeze(-1), dim=0)

    def forward(self, bag: torch.Tensor):
        """Returns (logits, aggregated embedding, attention weights)."""
        alpha = self.attention(bag)
        z_agg = alpha @ bag
        return self.classifier(z_agg), z_agg, alpha


def abmil_attention(bag: torch.Tensor, model: GatedAttentionMIL) -> torch.Tensor:
    return model.attention(bag)


def aggregate(bag: torch.Tensor, model: GatedAttentionMIL):
    """Weighted combination of the bag and its logits."""
    logits, z_agg, _ = model(bag)
    return z_agg, logits


def smoothed_cross_entropy(
    logits: torch.Tensor, label: int, smoothing: float
) -> torch.Tensor:
    """Cross-entropy with label smoothing for a single example."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    target = torch.tensor([label], device=logits.device)
    return F.cross_entropy(
        logits.unsqueeze(0), target, label_smoothing=smoothing
    ).squeeze(0)


def group_min_loss(
    per_slide_losses: list[torch.Tensor], slide_ids: list[str]
) -> tuple[torch.Tensor, str]:
    """Propagate the group label to the slide with the smallest loss.

    Gradients flow only through the selected slide; ties break toward the
    lexicographically smallest slide id.
    """
    if not per_slide_losses:
        raise ValueError("specimen has no slides")
    if len(per_slide_losses) != len(slide_ids):
        raise ValueError("losses and slide ids must align")
    order = sorted(range(len(slide_ids)), key=lambda i: slide_ids[i])
    values = [float(per_slide_losses[i].detach()) for i in order]
    best = order[int(min(range(len(values)), key=values.__getitem__))]
    return per_slide_losses[best], slide_ids[best]
