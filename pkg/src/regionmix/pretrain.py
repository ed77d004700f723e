"""Self-supervised pretraining loop for the mixing encoder.

Two objectives:

* ``mem``  — masked embedding modeling: each region is rotated/flipped,
  masked at the removal ratio, encoded, decoded, and scored with the
  level-weighted cosine reconstruction loss.
* ``cmem`` — the same reconstruction plus a contrastive term between two
  masked target views subsampled from a larger source context; the
  concatenated class tokens pass through a projector that is discarded at
  inference.

Single-worker runs are bit-reproducible: every random draw comes from one
named numpy stream plus the torch seed, and checkpoints carry enough state
to resume exactly.
"""

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataio import load_split_regions
from .geometry import (
    GridTransform,
    grid_transform_permutation,
    level_weights,
    mask_size,
)
from .losses import masked_cosine_loss, ntxent_loss
from .mixer import (
    MixerConfig,
    MixingEncoder,
    config_fingerprint,
    load_checkpoint,
    save_checkpoint,
)
from .schedule import decay_param_groups, scaled_peak_lr, warmup_cosine_lr
from .synth import _stream

OBJECTIVES = ("mem", "cmem")


@dataclass
class PretrainConfig:
    objective: str = "mem"
    r: float = 0.5
    source_c: int = 3
    total_samples: int = 200_000_000
    batch_size: int = 4096
    base_lr: float = 1.5e-4
    base_batch: int = 256
    warmup_fraction: float = 0.05
    weight_decay: float = 5e-2
    betas: tuple[float, float] = (0.9, 0.95)
    temperature: float = 0.2
    contrastive_weight: float = 1.0
    symmetric_contrastive: bool = False
    projector_hidden: int = 4096
    projector_output: int = 256
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"removal ratio must be in [0, 1], got {self.r}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.batch_size < 1 or self.base_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.objective == "cmem" and self.batch_size < 2:
            raise ValueError("contrastive training needs batch_size >= 2 for negatives")
        if self.total_samples < self.batch_size:
            raise ValueError("total_samples must cover at least one batch")
        if self.source_c < 1:
            raise ValueError(f"source_c must be >= 1, got {self.source_c}")

    @property
    def total_steps(self) -> int:
        return self.total_samples // self.batch_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ProjectorConfig:
    input_dim: int
    hidden: int = 4096
    output: int = 256


class Projector(nn.Module):
    """Two linear layers with one nonlinearity; a pretraining artifact."""

    def __init__(self, cfg: ProjectorConfig):
        super().__init__()
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Linear(cfg.input_dim, cfg.hidden),
            nn.GELU(),
            nn.Linear(cfg.hidden, cfg.output),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def lr_at(step: int, cfg: PretrainConfig) -> float:
    """Learning rate at an optimizer step under the linear-scaled warmup-cosine schedule."""
    peak = scaled_peak_lr(cfg.base_lr, cfg.batch_size, cfg.base_batch)
    return warmup_cosine_lr(step, cfg.total_steps, peak, cfg.warmup_fraction)


def _inverse_transform_table(spec) -> np.ndarray:
    """Gather indices realizing each of the eight grid transforms, (8, s)."""
    table = np.empty((8, spec.s), dtype=np.int64)
    i = 0
    for rotation in range(4):
        for flip in (False, True):
            perm = grid_transform_permutation(GridTransform(rotation, flip), spec)
            table[i] = np.argsort(perm)
            i += 1
    return table


def _subwindow_table(source_c: int, spec) -> np.ndarray:
    """Window token indices for every offset of a t-window in a c-context."""
    from .geometry import subregion_indices

    n_off = source_c - spec.t + 1
    table = np.empty((n_off * n_off, spec.s), dtype=np.int64)
    for orow in range(n_off):
        for ocol in range(n_off):
            table[orow * n_off + ocol] = subregion_indices(
                source_c, spec.t, orow, ocol, spec.l
            )
    return table


def _batch_masks(rng: np.random.Generator, b: int, s: int, k: int):
    """Per-sample uniform masks: (masked (b, k), visible (b, s - k)), sorted."""
    order = rng.random((b, s)).argsort(axis=1)
    return np.sort(order[:, :k], axis=1), np.sort(order[:, k:], axis=1)


def pretrain_run(
    cfg: PretrainConfig,
    dataset_dir: str | Path,
    mixer_cfg: MixerConfig,
    out_dir: str | Path,
    device: str = "cpu",
    resume_from: str | Path | None = None,
) -> dict:
    """Optimize the mixing encoder on a dataset's train-split regions.

    Labels are discarded: the corpus is simply every region of the split.
    Returns a summary with the final checkpoint path and the loss history.
    """
    cfg.validate()
    spec = mixer_cfg.spec
    k = mask_size(spec.s, cfg.r)
    if k < 1:
        raise ValueError(
            f"removal ratio {cfg.r} masks no tokens of a {spec.s}-token region; "
            "the reconstruction loss is undefined"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = config_fingerprint(cfg, mixer_cfg)

    data_spec, regions = load_split_regions(dataset_dir, "train")
    if cfg.objective == "cmem":
        if data_spec.t != cfg.source_c:
            raise ValueError(
                f"contrastive corpus must hold source contexts of side {cfg.source_c}, "
                f"dataset has t={data_spec.t}"
            )
        if cfg.source_c < spec.t:
            raise ValueError(
                f"source context {cfg.source_c} smaller than target side {spec.t}"
            )
    elif data_spec.t != spec.t:
        raise ValueError(
            f"dataset grid side t={data_spec.t} does not match the model's t={spec.t}"
        )
    if (data_spec.l, data_spec.d) != (spec.l, spec.d):
        raise ValueError(
            f"dataset levels/dim (l={data_spec.l}, d={data_spec.d}) do not match the "
            f"model (l={spec.l}, d={spec.d})"
        )

    x_all = torch.from_numpy(regions).to(device)
    weights = level_weights(spec)
    inv_transforms = _inverse_transform_table(spec)
    windows = _subwindow_table(cfg.source_c, spec) if cfg.objective == "cmem" else None

    torch.manual_seed(cfg.seed)
    model = MixingEncoder(mixer_cfg).to(device)
    trainables = nn.ModuleDict({"mixer": model})
    if cfg.objective == "cmem":
        proj_cfg = ProjectorConfig(
            input_dim=mixer_cfg.n_class_tokens * mixer_cfg.hidden_dim,
            hidden=cfg.projector_hidden,
            output=cfg.projector_output,
        )
        trainables["projector"] = Projector(proj_cfg).to(device)
    optimizer = torch.optim.AdamW(
        decay_param_groups(trainables, cfg.weight_decay, lr=0.0), betas=cfg.betas
    )
    data_rng = _stream(cfg.seed, "pretrain-data")
    history: list[dict] = []
    step_start = 0

    if resume_from is not None:
        loaded, meta = load_checkpoint(resume_from, expected_fingerprint=fingerprint)
        model.load_state_dict(loaded.state_dict())
        extra = meta["extra"]
        if cfg.objective == "cmem":
            trainables["projector"].load_state_dict(extra["projector"])
        optimizer.load_state_dict(extra["optimizer"])
        data_rng.bit_generator.state = extra["np_rng_state"]
        torch.set_rng_state(torch.as_tensor(extra["torch_rng_state"], dtype=torch.uint8))
        history = list(extra["history"])
        step_start = meta["step"]

    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "checkpoint.pt"
    b = cfg.batch_size
    n_regions = x_all.shape[0]
    arange_b = torch.arange(b, device=device)[:, None]

    def save(step: int, path: Path) -> None:
        extra = {
            "objective": cfg.objective,
            "pretrain_config": cfg.to_dict(),
            "optimizer": optimizer.state_dict(),
            "np_rng_state": data_rng.bit_generator.state,
            "torch_rng_state": torch.get_rng_state(),
            "history": history,
        }
        if cfg.objective == "cmem":
            extra["projector"] = trainables["projector"].state_dict()
        save_checkpoint(path, model, step, fingerprint, extra=extra)

    with open(metrics_path, "a", encoding="utf-8") as metrics:
        for step in range(step_start, cfg.total_steps):
            t0 = time.perf_counter()
            lr = lr_at(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = torch.from_numpy(data_rng.integers(0, n_regions, size=b)).to(device)

            if cfg.objective == "mem":
                tf_ids = data_rng.integers(0, 8, size=b)
                masked, visible = _batch_masks(data_rng, b, spec.s, k)
                batch = x_all[idx]
                batch = batch[arange_b, torch.from_numpy(inv_transforms[tf_ids])]
                masked_t = torch.from_numpy(masked).to(device)
                visible_t = torch.from_numpy(visible).to(device)
                patch, _ = model.encode_batch(batch, visible_t)
                recon = model.decode_batch(patch, visible_t)
                mem = masked_cosine_loss(recon, batch, masked_t, weights)
                contrastive = None
                loss = mem
            else:
                n_off = len(windows)
                source = x_all[idx]
                views = []
                cls_views = []
                for _ in range(2):
                    offs = data_rng.integers(0, n_off, size=b)
                    tf_ids = data_rng.integers(0, 8, size=b)
                    masked, visible = _batch_masks(data_rng, b, spec.s, k)
                    gather = np.take_along_axis(
                        windows[offs], inv_transforms[tf_ids], axis=1
                    )
                    vals = source[arange_b, torch.from_numpy(gather)]
                    views.append(
                        (vals, torch.from_numpy(masked), torch.from_numpy(visible))
                    )
                mem_terms = []
                for vals, masked_t, visible_t in views:
                    patch, cls = model.encode_batch(vals, visible_t)
                    recon = model.decode_batch(patch, visible_t)
                    mem_terms.append(masked_cosine_loss(recon, vals, masked_t, weights))
                    cls_views.append(cls.reshape(b, -1))
                mem = (mem_terms[0] + mem_terms[1]) / 2
                z = trainables["projector"](cls_views[0])
                z_prime = trainables["projector"](cls_views[1])
                contrastive = ntxent_loss(
                    z, z_prime, cfg.temperature, symmetric=cfg.symmetric_contrastive
                )
                loss = mem + cfg.contrastive_weight * contrastive

            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at step {step}: seed {cfg.seed}, "
                    f"batch stream 'pretrain-data', objective {cfg.objective}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            elapsed = time.perf_counter() - t0
            entry = {
                "step": step,
                "lr": lr,
                "loss": float(loss.detach()),
                "mem": float(mem.detach()),
                "contrastive": (
                    float(contrastive.detach()) if contrastive is not None else None
                ),
            }
            history.append(entry)
            metrics.write(
                json.dumps({**entry, "samples_per_s": b / elapsed}) + "\n"
            )
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save(step + 1, out_dir / f"checkpoint_step{step + 1}.pt")
        save(cfg.total_steps, checkpoint_path)

    return {
        "checkpoint": str(checkpoint_path),
        "fingerprint": fingerprint,
        "steps": cfg.total_steps,
        "final_loss": history[-1]["loss"] if history else None,
        "history": history,
        "metrics_path": str(metrics_path),
    }
