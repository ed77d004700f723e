"""Region mixing encoder and decoder.

A transformer over tile-embedding sequences: linear input projection,
learned position encodings indexed by canonical token position, a fixed
set of class tokens acting as registers, pre-norm blocks with SwiGLU
feed-forwards, and masked-autoencoding support where masked tokens are
removed before the encoder and re-inserted as a shared learned mask token
before the decoder.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import RegionSpec, mask_size


@dataclass(frozen=True)
class MixerConfig:
    spec: RegionSpec
    hidden_dim: int = 1536
    encoder_layers: int = 12
    heads: int = 12
    mlp_ratio: float = 2.0
    decoder_layers: int = 2
    decoder_dim: int = 1536
    n_class_tokens: int = 4

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} must be divisible by heads {self.heads}"
            )
        if self.decoder_dim % self.heads != 0:
            raise ValueError(
                f"decoder_dim {self.decoder_dim} must be divisible by heads {self.heads}"
            )
        for name in ("hidden_dim", "encoder_layers", "heads", "n_class_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.decoder_layers < 0:
            raise ValueError("decoder_layers must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "MixerConfig":
        doc = dict(doc)
        doc["spec"] = RegionSpec(**doc["spec"])
        return cls(**doc)


@dataclass
class MaskPlan:
    """Masked patch-token indices for one sample, sorted ascending."""

    masked: np.ndarray
    r: float

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=np.int64)
        if self.masked.ndim != 1:
            raise ValueError("masked indices must be a flat index vector")
        if len(self.masked) and (
            (np.diff(self.masked) <= 0).any() or self.masked[0] < 0
        ):
            raise ValueError("masked indices must be strictly increasing and >= 0")

    @property
    def k(self) -> int:
        return len(self.masked)

    def visible(self, s: int) -> np.ndarray:
        vis = np.setdiff1d(np.arange(s, dtype=np.int64), self.masked)
        return vis


def sample_mask(spec: RegionSpec, r: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform mask over all patch tokens, all levels pooled; k = floor(s * r).

    Class tokens are not part of the canonical sequence and can never be
    masked.
    """
    k = mask_size(spec.s, r)
    masked = np.sort(rng.choice(spec.s, size=k, replace=False))
    return MaskPlan(masked=masked, r=r)


@dataclass
class EncodedRegion:
    """Encoder output under a mask: visible patch latents plus class latents."""

    visible_latents: torch.Tensor  # (s - k, hidden)
    class_latents: torch.Tensor  # (n_class_tokens, hidden)


@dataclass
class MixerOutputs:
    """Unmasked inference outputs."""

    contextualized: torch.Tensor  # (s, hidden)
    compressed: torch.Tensor  # (n_class_tokens * hidden,)


class SwiGLU(nn.Module):
    """Gated feed-forward: value branch modulated by a SiLU gate."""

    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        inner = int(dim * mlp_ratio)
        self.gate = nn.Linear(dim, inner)
        self.value = nn.Linear(dim, inner)
        self.out = nn.Linear(inner, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(F.silu(self.gate(x)) * self.value(x))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # (b, heads, n, head_dim)
        if need_weights:
            attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
            out = attn @ v
        else:
            attn = None
            out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, n, c)
        return self.proj(out), attn


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = SwiGLU(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        attn_out, weights = self.attn(self.norm1(x), need_weights=need_weights)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, weights


class MixingEncoder(nn.Module):
    """Encoder, decoder, and the token bookkeeping shared by both.

    Batched methods take (batch, tokens, dim) tensors with per-sample
    visible-index vectors; masked positions are physically absent from the
    encoder, so its outputs cannot depend on masked input values.
    """

    def __init__(self, config: MixerConfig):
        super().__init__()
        self.config = config
        spec = config.spec
        h, dd = config.hidden_dim, config.decoder_dim

        self.input_proj = nn.Linear(spec.d, h)
        self.pos_embed = nn.Parameter(torch.zeros(spec.s, h))
        self.cls_tokens = nn.Parameter(torch.zeros(config.n_class_tokens, h))
        self.cls_pos = nn.Parameter(torch.zeros(config.n_class_tokens, h))
        self.blocks = nn.ModuleList(
            Block(h, config.heads, config.mlp_ratio)
            for _ in range(config.encoder_layers)
        )
        self.norm = nn.LayerNorm(h)

        self.decoder_bridge = nn.Linear(h, dd) if dd != h else nn.Identity()
        self.mask_token = nn.Parameter(torch.zeros(dd))
        self.decoder_pos = nn.Parameter(torch.zeros(spec.s, dd))
        self.decoder_blocks = nn.ModuleList(
            Block(dd, config.heads, config.mlp_ratio)
            for _ in range(config.decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(dd)
        self.head = nn.Linear(dd, spec.d)

        self.apply(self._init_module)
        for table in (self.pos_embed, self.cls_tokens, self.cls_pos, self.decoder_pos):
            nn.init.trunc_normal_(table, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @staticmethod
    def _init_module(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    @property
    def n_cls(self) -> int:
        return self.config.n_class_tokens

    def _run_encoder(self, tokens: torch.Tensor, need_weights: bool = False):
        b = tokens.shape[0]
        cls = (self.cls_tokens + self.cls_pos).unsqueeze(0).expand(b, -1, -1)
        seq = torch.cat([cls, tokens], dim=1)
        weights = []
        for block in self.blocks:
            seq, w = block(seq, need_weights=need_weights)
            if need_weights:
                weights.append(w)
        seq = self.norm(seq)
        return seq[:, self.n_cls :], seq[:, : self.n_cls], weights

    def encode_batch(self, x: torch.Tensor, visible_idx: torch.Tensor):
        """Encode visible tokens only.

        x: (b, s, d); visible_idx: (b, s - k) long, ascending per row.
        Returns (visible latents (b, s-k, h), class latents (b, n_cls, h)).
        """
        self._check_input(x)
        vis = torch.take_along_dim(x, visible_idx[..., None], dim=1)
        tokens = self.input_proj(vis) + self.pos_embed[visible_idx]
        patch, cls, _ = self._run_encoder(tokens)
        return patch, cls

    def decode_batch(
        self, visible_latents: torch.Tensor, visible_idx: torch.Tensor
    ) -> torch.Tensor:
        """Scatter visible latents and mask tokens to canonical order and decode.

        Returns the (b, s, d) reconstruction.
        """
        s = self.config.spec.s
        b = visible_latents.shape[0]
        lat = self.decoder_bridge(visible_latents)
        dd = lat.shape[-1]
        full = self.mask_token.expand(b, s, dd).clone()
        full = full.scatter(1, visible_idx[..., None].expand(-1, -1, dd), lat)
        seq = full + self.decoder_pos
        for block in self.decoder_blocks:
            seq, _ = block(seq)
        return self.head(self.decoder_norm(seq))

    def forward_batch(self, x: torch.Tensor):
        """Full unmasked pass: (contextualized (b, s, h), compressed (b, n_cls * h))."""
        self._check_input(x)
        tokens = self.input_proj(x) + self.pos_embed
        patch, cls, _ = self._run_encoder(tokens)
        return patch, cls.reshape(x.shape[0], -1)

    def attention_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer attention probabilities for a full unmasked pass."""
        self._check_input(x)
        tokens = self.input_proj(x) + self.pos_embed
        _, _, weights = self._run_encoder(tokens, need_weights=True)
        return weights

    def _check_input(self, x: torch.Tensor) -> None:
        spec = self.config.spec
        if x.ndim != 3 or x.shape[1] != spec.s or x.shape[2] != spec.d:
            raise ValueError(
                f"expected input of shape (batch, {spec.s}, {spec.d}), got {tuple(x.shape)}"
            )


def _as_tensor(x, model: MixingEncoder) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)


def _check_plan(plan: MaskPlan, spec: RegionSpec) -> None:
    if plan.k and plan.masked[-1] >= spec.s:
        raise ValueError(
            f"mask index {int(plan.masked[-1])} out of range for sequence length {spec.s}"
        )


def encode(x, plan: MaskPlan, model: MixingEncoder) -> EncodedRegion:
    """Encode one region under a mask plan."""
    spec = model.config.spec
    _check_plan(plan, spec)
    xt = _as_tensor(x, model).unsqueeze(0)
    visible = torch.from_numpy(plan.visible(spec.s)).unsqueeze(0)
    patch, cls = model.encode_batch(xt, visible)
    return EncodedRegion(visible_latents=patch[0], class_latents=cls[0])


def decode(enc: EncodedRegion, plan: MaskPlan, model: MixingEncoder) -> torch.Tensor:
    """Reconstruct all s token embeddings from an encoded region."""
    spec = model.config.spec
    _check_plan(plan, spec)
    if enc.visible_latents.shape[0] != spec.s - plan.k:
        raise ValueError(
            f"encoded region has {enc.visible_latents.shape[0]} visible latents but the "
            f"mask plan implies {spec.s - plan.k}"
        )
    visible = torch.from_numpy(plan.visible(spec.s)).unsqueeze(0)
    return model.decode_batch(enc.visible_latents.unsqueeze(0), visible)[0]


def forward_inference(x, model: MixingEncoder) -> MixerOutputs:
    """Full unmasked pass over one region."""
    xt = _as_tensor(x, model).unsqueeze(0)
    with torch.no_grad():
        patch, compressed = model.forward_batch(xt)
    return MixerOutputs(contextualized=patch[0], compressed=compressed[0])


# --- checkpoints ----------------------------------------------------------

CHECKPOINT_KIND = "regionmix.mixer"


class CheckpointMismatchError(RuntimeError):
    """Resume attempted against a checkpoint with a different config fingerprint."""


def config_fingerprint(*configs) -> str:
    """Stable hash of one or more run-configuration objects."""

    def canon(obj):
        if hasattr(obj, "to_dict"):
            return obj.to_dict()
        if hasattr(obj, "__dataclass_fields__"):
            return asdict(obj)
        return obj

    blob = json.dumps([canon(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(
    path: str | Path,
    model: MixingEncoder,
    step: int,
    fingerprint: str,
    extra: dict | None = None,
) -> None:
    payload = {
        "kind": CHECKPOINT_KIND,
        "version": 1,
        "config": model.config.to_dict(),
        "state": model.state_dict(),
        "step": step,
        "fingerprint": fingerprint,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(
    path: str | Path, expected_fingerprint: str | None = None
) -> tuple[MixingEncoder, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a mixer checkpoint")
    if expected_fingerprint is not None and payload["fingerprint"] != expected_fingerprint:
        raise CheckpointMismatchError(
            f"{path}: fingerprint {payload['fingerprint'][:12]}... does not match "
            f"expected {expected_fingerprint[:12]}..."
        )
    config = MixerConfig.from_dict(payload["config"])
    model = MixingEncoder(config)
    model.load_state_dict(payload["state"], strict=True)
    meta = {
        "step": payload["step"],
        "fingerprint": payload["fingerprint"],
        "extra": payload["extra"],
    }
    return model, meta
