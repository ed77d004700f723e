"""Synthetic embedding-pyramid benchmark with planted cross-scale signals.

Each coarsest tile of a region carries a latent bit ``a`` and each finest
tile a latent bit ``b``.  Token embeddings are Gaussian noise plus a fixed
unit direction keyed on (level, bit): levels below the finest inherit the
``a`` bit of their coarsest ancestor, the finest level carries ``b``.

Tasks:

* ``cross_scale`` — a specimen is positive iff one of its slides holds a
  region where some coarsest tile with a=1 has a finest descendant with
  b=1 (a spatially aligned conjunction).  The marginal counts of both bits
  are drawn from class-independent distributions, so any single level's
  token statistics carry no label information; only cross-magnification
  alignment does.
* ``single_scale`` — positive iff the specimen-wide frequency of b=1
  finest tiles exceeds a fixed threshold; linearly decodable from the
  finest level alone.

Generation is a pure function of (config, seed): every slide draws from
its own RNG stream derived by hashing (seed, slide_id), so output bytes do
not depend on generation order.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    RegionEmbedding,
    SlideRecord,
    Specimen,
    dataset_hash,
    slide_path,
    write_manifest,
    write_slide,
)
from .geometry import RegionSpec
from .metrics import auroc

TASKS = ("single_scale", "cross_scale")

# single_scale: per-class Bernoulli rates for b bits and the labeling
# threshold on the realized specimen-wide frequency.
SINGLE_SCALE_B_RATES = (0.08, 0.22)
SINGLE_SCALE_THRESHOLD = 0.15
SINGLE_SCALE_A_RATE = 0.2


@dataclass
class SynthConfig:
    spec: RegionSpec = RegionSpec(t=3, l=3, d=1280)
    n_specimens: dict[str, int] = field(
        default_factory=lambda: {"train": 120, "tune": 40, "test": 120}
    )
    regions_per_slide: tuple[int, int] = (2, 4)
    slides_per_specimen: tuple[int, int] = (1, 2)
    task: str = "cross_scale"
    signal_strength: float = 3.0
    noise_sigma: float = 1.0
    positive_rate: float = 0.5
    arm_rate: float = 0.5
    label_noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "cross_scale" and self.spec.l < 2:
            raise ValueError("cross_scale task needs at least two levels")
        total = sum(self.n_specimens.values())
        if total < 1 or any(n < 0 for n in self.n_specimens.values()):
            raise ValueError(f"need at least one specimen, got {self.n_specimens}")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError(f"positive_rate must be in (0, 1), got {self.positive_rate}")
        if not 0.0 <= self.arm_rate <= 1.0:
            raise ValueError(f"arm_rate must be in [0, 1], got {self.arm_rate}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError(f"label_noise must be in [0, 1], got {self.label_noise}")
        if self.noise_sigma <= 0:
            raise ValueError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if self.signal_strength < 0:
            raise ValueError(f"signal_strength must be >= 0, got {self.signal_strength}")
        for name, (lo, hi) in (
            ("regions_per_slide", self.regions_per_slide),
            ("slides_per_specimen", self.slides_per_specimen),
        ):
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} range must satisfy 1 <= lo <= hi, got ({lo}, {hi})")


def _stream(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream keyed on (seed, name); order-independent."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest, "little")))


def signal_directions(seed: int, l: int, d: int) -> np.ndarray:
    """Fixed unit directions keyed on (level, bit), shape (l, 2, d).

    Drawn from a dedicated sub-seed so datasets of any size generated from
    the same seed share the same signal geometry.
    """
    rng = _stream(seed, "signal-directions")
    dirs = rng.standard_normal((l, 2, d))
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


class _TokenKey:
    """Per-spec lookup tables mapping tokens to their latent-bit sources."""

    def __init__(self, spec: RegionSpec):
        self.spec = spec
        s = spec.s
        self.level_index = np.empty(s, dtype=np.int64)  # 0-based level
        self.coarse_ancestor = np.empty(s, dtype=np.int64)
        self.finest_local = np.full(s, -1, dtype=np.int64)
        for level in range(1, spec.l + 1):
            sl = spec.level_slice(level)
            g = spec.grid_side(level)
            scale = 2 ** (level - 1)
            local = np.arange(spec.level_sizes[level - 1])
            rows, cols = np.divmod(local, g)
            self.level_index[sl] = level - 1
            self.coarse_ancestor[sl] = (rows // scale) * spec.t + cols // scale
            if level == spec.l:
                self.finest_local[sl] = local
        self.n_coarse = spec.t * spec.t
        self.finest_per_coarse = 4 ** (spec.l - 1)
        self.n_finest = self.n_coarse * self.finest_per_coarse
        # finest local indices grouped by coarse ancestor, (n_coarse, finest_per_coarse)
        fg = spec.grid_side(spec.l)
        fscale = 2 ** (spec.l - 1)
        desc = np.empty((self.n_coarse, self.finest_per_coarse), dtype=np.int64)
        for coarse in range(self.n_coarse):
            r0, c0 = divmod(coarse, spec.t)
            rows = r0 * fscale + np.arange(fscale)
            cols = c0 * fscale + np.arange(fscale)
            desc[coarse] = (rows[:, None] * fg + cols[None, :]).reshape(-1)
        self.descendants = desc


def _region_latents_cross(rng: np.random.Generator, key: _TokenKey, armed: bool):
    """Draw a and b bit placements for one region of the cross-scale task.

    Count distributions are identical for armed and unarmed regions; only
    the joint placement differs, so single-level statistics are matched
    across classes.
    """
    max_a = max(1, key.n_coarse // 3)
    n_a = int(rng.integers(1, max_a + 1))
    a_pos = rng.choice(key.n_coarse, size=n_a, replace=False)
    a_bits = np.zeros(key.n_coarse, dtype=np.int8)
    a_bits[a_pos] = 1
    n_b = int(rng.integers(1, 5))
    b_bits = np.zeros(key.n_finest, dtype=np.int8)
    armed_zone = key.descendants[a_pos].reshape(-1)
    if armed:
        anchor = int(rng.choice(armed_zone))
        rest = np.setdiff1d(np.arange(key.n_finest), [anchor])
        extra = rng.choice(rest, size=n_b - 1, replace=False)
        b_bits[anchor] = 1
        b_bits[extra] = 1
    else:
        safe_zone = np.setdiff1d(np.arange(key.n_finest), armed_zone)
        pos = rng.choice(safe_zone, size=n_b, replace=False)
        b_bits[pos] = 1
    return a_bits, b_bits


def _region_values(
    rng: np.random.Generator,
    key: _TokenKey,
    dirs: np.ndarray,
    a_bits: np.ndarray,
    b_bits: np.ndarray,
    signal_strength: float,
    noise_sigma: float,
) -> np.ndarray:
    spec = key.spec
    bits = np.where(
        key.level_index == spec.l - 1,
        b_bits[np.clip(key.finest_local, 0, None)],
        a_bits[key.coarse_ancestor],
    )
    values = noise_sigma * rng.standard_normal((spec.s, spec.d))
    values += signal_strength * dirs[key.level_index, bits]
    return values.astype(np.float32)


def _is_armed(key: _TokenKey, a_bits: np.ndarray, b_bits: np.ndarray) -> bool:
    """True iff some a=1 coarse tile has a b=1 finest descendant."""
    for coarse in np.flatnonzero(a_bits):
        if b_bits[key.descendants[coarse]].any():
            return True
    return False


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> dict:
    """Write train/tune/test splits of specimens and slide files.

    Output bytes are a pure function of the config (including its seed).
    Returns a summary with per-split counts and the dataset hash.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "slides").mkdir(parents=True, exist_ok=True)
    spec = cfg.spec
    key = _TokenKey(spec)
    dirs = signal_directions(cfg.seed, spec.l, spec.d)
    splits: dict[str, list[Specimen]] = {}
    latents: dict[str, list] = {}
    summary = {"out_dir": str(out_dir), "splits": {}, "task": cfg.task}
    for split, n_specimens in sorted(cfg.n_specimens.items()):
        specimens = []
        split_latents = []
        n_slides_total = 0
        n_regions_total = 0
        for i in range(n_specimens):
            specimen_id = f"{split}_s{i:05d}"
            sp_rng = _stream(cfg.seed, specimen_id)
            intended = int(sp_rng.random() < cfg.positive_rate)
            lo, hi = cfg.slides_per_specimen
            n_slides = int(sp_rng.integers(lo, hi + 1))
            slide_ids = [f"{specimen_id}_sl{j}" for j in range(n_slides)]
            slide_rngs = [_stream(cfg.seed, sid) for sid in slide_ids]
            rlo, rhi = cfg.regions_per_slide
            n_regions = [int(r.integers(rlo, rhi + 1)) for r in slide_rngs]
            total_regions = sum(n_regions)

            if cfg.task == "cross_scale":
                if intended:
                    armed = sp_rng.random(total_regions) < cfg.arm_rate
                    if not armed.any():
                        armed[0] = True
                else:
                    armed = np.zeros(total_regions, dtype=bool)
            else:
                p_b = SINGLE_SCALE_B_RATES[intended]

            slide_latents = []
            b_ones = 0
            finest_total = 0
            any_armed = False
            cursor = 0
            for sid, rng, n_reg in zip(slide_ids, slide_rngs, n_regions):
                regions = []
                region_armed = []
                for k in range(n_reg):
                    if cfg.task == "cross_scale":
                        a_bits, b_bits = _region_latents_cross(
                            rng, key, bool(armed[cursor + k])
                        )
                    else:
                        a_bits = (rng.random(key.n_coarse) < SINGLE_SCALE_A_RATE).astype(
                            np.int8
                        )
                        b_bits = (rng.random(key.n_finest) < p_b).astype(np.int8)
                    values = _region_values(
                        rng, key, dirs, a_bits, b_bits,
                        cfg.signal_strength, cfg.noise_sigma,
                    )
                    regions.append(
                        RegionEmbedding(
                            values=values,
                            region_id=k,
                            grid_row=spec.t * (k // 8),
                            grid_col=spec.t * (k % 8),
                        )
                    )
                    is_armed = _is_armed(key, a_bits, b_bits)
                    region_armed.append(int(is_armed))
                    any_armed = any_armed or is_armed
                    b_ones += int(b_bits.sum())
                    finest_total += key.n_finest
                cursor += n_reg
                record = SlideRecord(slide_id=sid, spec=spec, regions=regions)
                write_slide(record, slide_path(out_dir, sid))
                slide_latents.append({"slide_id": sid, "armed": region_armed})
                n_regions_total += n_reg
            n_slides_total += n_slides

            if cfg.task == "cross_scale":
                label = int(any_armed)
                if label != intended:
                    raise AssertionError(
                        f"{specimen_id}: planted latents contradict intended class"
                    )
            else:
                label = int(b_ones / finest_total > SINGLE_SCALE_THRESHOLD)
            if cfg.label_noise > 0 and sp_rng.random() < cfg.label_noise:
                label = 1 - label
            specimens.append(Specimen(specimen_id, slide_ids, label))
            split_latents.append(
                {
                    "specimen_id": specimen_id,
                    "intended": intended,
                    "label": label,
                    "b_frequency": b_ones / finest_total,
                    "slides": slide_latents,
                }
            )
        splits[split] = specimens
        latents[split] = split_latents
        summary["splits"][split] = {
            "specimens": n_specimens,
            "slides": n_slides_total,
            "regions": n_regions_total,
            "positive_rate": (
                float(np.mean([sp.label for sp in specimens])) if specimens else None
            ),
        }
    write_manifest(out_dir / "manifest.json", spec, splits)
    (out_dir / "latents.json").write_text(
        json.dumps({"task": cfg.task, "splits": latents}, indent=2, sort_keys=True) + "\n"
    )
    summary["dataset_hash"] = dataset_hash(out_dir)
    return summary


def _oracle_scores(entry: dict, task: str) -> float:
    if task == "cross_scale":
        return float(
            max(max(sl["armed"], default=0) for sl in entry["slides"])
        )
    return float(entry["b_frequency"])


def oracle_auroc(dataset_dir: str | Path, split: str = "test") -> float:
    """AUROC of the classifier that reads the planted latents directly.

    This bypasses the embeddings entirely and is the calibration ceiling
    for any model trained on the features.
    """
    dataset_dir = Path(dataset_dir)
    latents_path = dataset_dir / "latents.json"
    if not latents_path.exists():
        raise FileNotFoundError(f"no latents sidecar at {latents_path}")
    doc = json.loads(latents_path.read_text())
    if split not in doc["splits"]:
        raise ValueError(f"split {split!r} not present; have {sorted(doc['splits'])}")
    entries = doc["splits"][split]
    scores = [_oracle_scores(e, doc["task"]) for e in entries]
    labels = [e["label"] for e in entries]
    return auroc(scores, labels)


def single_level_probe(
    dataset_dir: str | Path,
    level: int,
    train_split: str = "train",
    eval_split: str = "test",
    seed: int = 0,
) -> float:
    """Test AUROC of a logistic probe on per-specimen mean embeddings of one level.

    Measures how much label information a single magnification exposes; the
    cross-scale task is built so this stays near chance at every level.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    from .dataio import load_split

    def features(split):
        spec, specimens, slides = load_split(dataset_dir, split)
        sl = spec.level_slice(level)
        feats = np.stack(
            [
                np.mean(
                    [
                        region.values[sl].mean(axis=0)
                        for sid in sp.slide_ids
                        for region in slides[sid].regions
                    ],
                    axis=0,
                )
                for sp in specimens
            ]
        )
        labels = np.array([sp.label for sp in specimens])
        return feats, labels

    x_train, y_train = features(train_split)
    x_eval, y_eval = features(eval_split)
    scaler = StandardScaler().fit(x_train)
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(scaler.transform(x_train), y_train)
    scores = clf.predict_proba(scaler.transform(x_eval))[:, 1]
    return auroc(scores, y_eval)
