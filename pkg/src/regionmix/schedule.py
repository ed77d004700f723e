"""Optimizer schedules and parameter grouping."""

import math

from torch import nn


def warmup_cosine_lr(
    step: int,
    total_steps: int,
    peak_lr: float,
    warmup_fraction: float,
) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then cosine decay to 0.

    The two pieces agree exactly at the junction; step == total_steps
    yields exactly 0.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0.0 <= warmup_fraction < 1.0:
        raise ValueError(f"warmup_fraction must be in [0, 1), got {warmup_fraction}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step must be in [0, {total_steps}], got {step}")
    warmup_steps = int(math.floor(warmup_fraction * total_steps))
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span == 0:
        return 0.0
    progress = (step - warmup_steps) / span
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def scaled_peak_lr(base_lr: float, batch_size: int, base_batch: int) -> float:
    """Linear scaling rule: the peak rate grows with the batch size."""
    if batch_size < 1 or base_batch < 1:
        raise ValueError("batch sizes must be >= 1")
    return base_lr * batch_size / base_batch


def layerwise_lrs(base_lr: float, decay: float, n_layers: int) -> dict:
    """Per-group learning rates for depth-decayed fine-tuning.

    The aggregation head and the final encoder norm train at base_lr;
    encoder layer j (1-based from the input) at base_lr * decay**(n+1-j);
    the input projection, position tables, and class tokens at
    base_lr * decay**(n+1).
    """
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    if n_layers < 0:
        raise ValueError(f"n_layers must be >= 0, got {n_layers}")
    return {
        "head": base_lr,
        "final_norm": base_lr,
        "layers": [base_lr * decay ** (n_layers + 1 - j) for j in range(1, n_layers + 1)],
        "embed": base_lr * decay ** (n_layers + 1),
    }


def split_decay_param_names(model: nn.Module) -> tuple[list[str], list[str]]:
    """Classify every trainable parameter as weight-decayed or not.

    The undecayed set is exactly the learnable norms and biases; position
    tables, class tokens, and mask tokens all receive decay.
    """
    norm_params = set()
    for mod_name, module in model.named_modules():
        if isinstance(module, nn.LayerNorm):
            for pname, _ in module.named_parameters(recurse=False):
                norm_params.add(f"{mod_name}.{pname}" if mod_name else pname)
    decayed, undecayed = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if name.endswith(".bias") or name in norm_params:
            undecayed.append(name)
        else:
            decayed.append(name)
    return decayed, undecayed


def decay_param_groups(model: nn.Module, weight_decay: float, **group_kwargs) -> list[dict]:
    """Two optimizer groups: decayed weights and undecayed norms/biases."""
    decayed, undecayed = split_decay_param_names(model)
    params = dict(model.named_parameters())
    groups = []
    if decayed:
        groups.append(
            {
                "params": [params[n] for n in decayed],
                "weight_decay": weight_decay,
                "names": decayed,
                **group_kwargs,
            }
        )
    if undecayed:
        groups.append(
            {
                "params": [params[n] for n in undecayed],
                "weight_decay": 0.0,
                "names": undecayed,
                **group_kwargs,
            }
        )
    return groups
