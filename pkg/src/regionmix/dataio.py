"""Dataset records and the binary slide-file format.

A slide file packs every region embedding of one slide.  Layout, all
little-endian:

    magic   4 bytes  b"MMRE"
    version u32      1
    t       u32
    l       u32
    d       u32
    n_regions u32
    then per region:
        region_id u64, grid_row i32, grid_col i32,
        s * d float32 token values in canonical order

Files are self-describing: the region geometry is fully recoverable from
the header.  The manifest (``manifest.json``) lists the specimen splits
and maps specimens to slide ids; one ``<slide_id>.mmre`` file per slide
sits in the ``slides/`` directory next to it.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RegionSpec, TokenAddress, address_of, canonical_index

MAGIC = b"MMRE"
FORMAT_VERSION = 1
SLIDE_SUFFIX = ".mmre"
_HEADER = struct.Struct("<4sIIIII")


class SlideFormatError(ValueError):
    """A slide file violates the format; the message names the offending field."""


@dataclass
class RegionEmbedding:
    """One region's token matrix (s x d, canonical order) with grid provenance."""

    values: np.ndarray
    region_id: int = 0
    grid_row: int = 0
    grid_col: int = 0

    def check(self, spec: RegionSpec) -> None:
        if self.values.shape != (spec.s, spec.d):
            raise ValueError(
                f"region {self.region_id}: values shape {self.values.shape} does not "
                f"match spec (s={spec.s}, d={spec.d})"
            )
        if not np.isfinite(self.values).all():
            raise ValueError(f"region {self.region_id}: non-finite embedding values")


@dataclass
class SlideRecord:
    """All region embeddings of one slide, sharing one RegionSpec."""

    slide_id: str
    spec: RegionSpec
    regions: list[RegionEmbedding] = field(default_factory=list)


@dataclass
class Specimen:
    """A labeled group of slides; the unit of supervision."""

    specimen_id: str
    slide_ids: list[str]
    label: int

    def __post_init__(self):
        if not self.slide_ids:
            raise ValueError(f"specimen {self.specimen_id} has no slides")
        if self.label not in (0, 1):
            raise ValueError(f"specimen {self.specimen_id}: label must be 0 or 1")


def write_slide(record: SlideRecord, path: str | Path) -> int:
    """Write a slide file; returns the number of bytes written."""
    spec = record.spec
    for region in record.regions:
        region.check(spec)
    payload = bytearray()
    payload += _HEADER.pack(
        MAGIC, FORMAT_VERSION, spec.t, spec.l, spec.d, len(record.regions)
    )
    for region in record.regions:
        payload += struct.pack(
            "<Qii", region.region_id, region.grid_row, region.grid_col
        )
        payload += np.ascontiguousarray(region.values, dtype="<f4").tobytes()
    data = bytes(payload)
    Path(path).write_bytes(data)
    return len(data)


def read_slide(path: str | Path, expected_spec: RegionSpec | None = None) -> SlideRecord:
    """Read a slide file back; values round-trip bit-exactly."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise SlideFormatError(f"{path.name}: truncated header")
    magic, version, t, l, d, n_regions = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SlideFormatError(f"{path.name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SlideFormatError(f"{path.name}: unsupported version {version}")
    try:
        spec = RegionSpec(t=t, l=l, d=d)
    except ValueError as exc:
        raise SlideFormatError(f"{path.name}: invalid geometry header: {exc}") from exc
    if expected_spec is not None and spec != expected_spec:
        raise SlideFormatError(
            f"{path.name}: spec mismatch: header (t={t}, l={l}, d={d}), expected "
            f"(t={expected_spec.t}, l={expected_spec.l}, d={expected_spec.d})"
        )
    region_bytes = 16 + spec.s * spec.d * 4
    expected_len = _HEADER.size + n_regions * region_bytes
    if len(data) != expected_len:
        raise SlideFormatError(
            f"{path.name}: truncated payload: have {len(data)} bytes, "
            f"n_regions={n_regions} requires {expected_len}"
        )
    regions = []
    offset = _HEADER.size
    for _ in range(n_regions):
        region_id, grid_row, grid_col = struct.unpack_from("<Qii", data, offset)
        offset += 16
        values = np.frombuffer(
            data, dtype="<f4", count=spec.s * spec.d, offset=offset
        ).reshape(spec.s, spec.d)
        offset += spec.s * spec.d * 4
        regions.append(
            RegionEmbedding(
                values=values.copy(),
                region_id=region_id,
                grid_row=grid_row,
                grid_col=grid_col,
            )
        )
    return SlideRecord(slide_id=path.stem, spec=spec, regions=regions)


def slide_payload_length(spec: RegionSpec, n_regions: int) -> int:
    """Total file size implied by a header (for inspection and validation)."""
    return _HEADER.size + n_regions * (16 + spec.s * spec.d * 4)


def read_slide_header(path: str | Path) -> dict:
    """Decode just the header of a slide file."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise SlideFormatError(f"{path.name}: truncated header")
    magic, version, t, l, d, n_regions = _HEADER.unpack(head)
    if magic != MAGIC:
        raise SlideFormatError(f"{path.name}: bad magic {magic!r}")
    return {
        "magic": magic.decode("ascii"),
        "version": version,
        "t": t,
        "l": l,
        "d": d,
        "n_regions": n_regions,
    }


# --- manifest -----------------------------------------------------------


def write_manifest(
    path: str | Path, spec: RegionSpec, splits: dict[str, list[Specimen]]
) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": {"t": spec.t, "l": spec.l, "d": spec.d},
        "splits": {
            name: [
                {
                    "specimen_id": sp.specimen_id,
                    "label": sp.label,
                    "slide_ids": list(sp.slide_ids),
                }
                for sp in specimens
            ]
            for name, specimens in splits.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> tuple[RegionSpec, dict[str, list[Specimen]]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    spec = RegionSpec(**doc["spec"])
    splits = {
        name: [
            Specimen(
                specimen_id=entry["specimen_id"],
                slide_ids=list(entry["slide_ids"]),
                label=int(entry["label"]),
            )
            for entry in entries
        ]
        for name, entries in doc["splits"].items()
    }
    return spec, splits


def slide_path(dataset_dir: str | Path, slide_id: str) -> Path:
    return Path(dataset_dir) / "slides" / f"{slide_id}{SLIDE_SUFFIX}"


def load_split(
    dataset_dir: str | Path, split: str
) -> tuple[RegionSpec, list[Specimen], dict[str, SlideRecord]]:
    """Load one split's specimens together with their slide records."""
    dataset_dir = Path(dataset_dir)
    spec, splits = read_manifest(dataset_dir / "manifest.json")
    if split not in splits:
        raise ValueError(f"split {split!r} not present; have {sorted(splits)}")
    specimens = splits[split]
    slides = {}
    for sp in specimens:
        for slide_id in sp.slide_ids:
            if slide_id not in slides:
                slides[slide_id] = read_slide(
                    slide_path(dataset_dir, slide_id), expected_spec=spec
                )
    return spec, specimens, slides


def load_split_regions(dataset_dir: str | Path, split: str) -> tuple[RegionSpec, np.ndarray]:
    """Stack every region of a split into one (n, s, d) float32 array.

    Labels are ignored; this is the pretraining corpus view of a dataset.
    """
    spec, _, slides = load_split(dataset_dir, split)
    stacks = [
        region.values
        for slide_id in sorted(slides)
        for region in slides[slide_id].regions
    ]
    if not stacks:
        raise ValueError(f"split {split!r} contains no regions")
    return spec, np.stack(stacks).astype(np.float32)


def dataset_hash(dataset_dir: str | Path) -> str:
    """Order-independent digest of a dataset directory's content."""
    dataset_dir = Path(dataset_dir)
    digest = hashlib.sha256()
    names = sorted(
        p.relative_to(dataset_dir).as_posix()
        for p in dataset_dir.rglob("*")
        if p.is_file()
    )
    for name in names:
        digest.update(name.encode())
        digest.update(hashlib.sha256((dataset_dir / name).read_bytes()).digest())
    return digest.hexdigest()


# --- plain-text tile import ----------------------------------------------


def import_tiles(
    input_path: str | Path,
    out_dir: str | Path,
    spec: RegionSpec,
) -> dict:
    """Pack per-tile text records into slide files.

    Each input line is ``slide_id level row col v1 .. vd`` with rows and
    columns in slide-global tile coordinates of that level.  The coarsest
    grid is partitioned into t x t windows anchored at (0, 0); every
    window that receives any token must receive all of them (a complete
    pyramid), otherwise the import fails naming the first missing token.
    """
    out_dir = Path(out_dir)
    slides_dir = out_dir / "slides"
    slides_dir.mkdir(parents=True, exist_ok=True)
    # slide_id -> (region_row, region_col) -> (values, fill mask)
    pending: dict[str, dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]] = {}
    with open(input_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4 + spec.d:
                raise ValueError(
                    f"line {lineno}: expected 4 + d={spec.d} fields, got {len(parts)}"
                )
            slide_id, level_s, row_s, col_s = parts[:4]
            level, row, col = int(level_s), int(row_s), int(col_s)
            if not 1 <= level <= spec.l:
                raise ValueError(f"line {lineno}: level {level} outside [1, {spec.l}]")
            if row < 0 or col < 0:
                raise ValueError(f"line {lineno}: negative tile coordinates")
            scale = 2 ** (level - 1)
            coarse_row, coarse_col = row // scale, col // scale
            window = (coarse_row // spec.t, coarse_col // spec.t)
            local = TokenAddress(
                level=level,
                row=row - window[0] * spec.t * scale,
                col=col - window[1] * spec.t * scale,
            )
            token = canonical_index(local, spec)
            regions = pending.setdefault(slide_id, {})
            if window not in regions:
                regions[window] = (
                    np.zeros((spec.s, spec.d), dtype=np.float32),
                    np.zeros(spec.s, dtype=bool),
                )
            values, filled = regions[window]
            if filled[token]:
                raise ValueError(
                    f"line {lineno}: duplicate token (slide {slide_id}, level {level}, "
                    f"row {row}, col {col})"
                )
            values[token] = np.asarray([float(v) for v in parts[4:]], dtype=np.float32)
            filled[token] = True
    if not pending:
        raise ValueError("no tile records found in input")
    summary = {"slides": [], "n_regions": 0}
    for slide_id in sorted(pending):
        regions = []
        for idx, window in enumerate(sorted(pending[slide_id])):
            values, filled = pending[slide_id][window]
            if not filled.all():
                missing = int(np.flatnonzero(~filled)[0])
                addr = address_of(missing, spec)
                raise ValueError(
                    f"slide {slide_id}: incomplete pyramid in region window "
                    f"{window}: missing token at level {addr.level}, "
                    f"row {addr.row}, col {addr.col}"
                )
            regions.append(
                RegionEmbedding(
                    values=values,
                    region_id=idx,
                    grid_row=window[0] * spec.t,
                    grid_col=window[1] * spec.t,
                )
            )
        record = SlideRecord(slide_id=slide_id, spec=spec, regions=regions)
        write_slide(record, slides_dir / f"{slide_id}{SLIDE_SUFFIX}")
        summary["slides"].append(slide_id)
        summary["n_regions"] += len(regions)
    # Imported dumps carry no task labels; each slide becomes a train-split
    # specimen with a placeholder label so the corpus is loadable as-is.
    splits = {
        "train": [
            Specimen(specimen_id=slide_id, slide_ids=[slide_id], label=0)
            for slide_id in summary["slides"]
        ]
    }
    write_manifest(out_dir / "manifest.json", spec, splits)
    return summary
