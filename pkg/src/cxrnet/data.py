"""Manifest ingestion, cohort extraction, seeded splitting, image loading,
and synthetic dataset generation.

Manifest CSVs follow the CheXpert column convention: Path, Sex, Age,
Frontal/Lateral, AP/PA, then one column per pathology with cells "1.0"
(positive), "0.0" (negative), "-1.0" (uncertain), or empty (unmentioned).
Cohort files are CSV "path,label,split" with a JSON sidecar recording how
they were produced.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError
from .tensor import Tensor

_METADATA_COLUMNS = ("Path", "Sex", "Age", "Frontal/Lateral", "AP/PA")
_REQUIRED_COLUMNS = ("Path", "Frontal/Lateral", "AP/PA")
_PATIENT_RE = re.compile(r"patient\d+")

POSITIVE, NEGATIVE, UNCERTAIN, UNMENTIONED = "positive", "negative", "uncertain", "unmentioned"


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    view: str  # "frontal" | "lateral"
    projection: str  # "ap" | "pa" | "unknown"
    patient_id: str
    labels: dict[str, str]


def _parse_label(cell: str, row: int, column: str) -> str:
    text = cell.strip()
    if not text:
        return UNMENTIONED
    try:
        value = float(text)
    except ValueError:
        value = None
    mapping = {1.0: POSITIVE, 0.0: NEGATIVE, -1.0: UNCERTAIN}
    if value not in mapping:
        raise DataError(f"row {row}: unparseable label {cell!r} in column {column!r}")
    return mapping[value]


def parse_manifest(source) -> list[ManifestRecord]:
    """Read a manifest from a path or an iterable of CSV lines.

    Pathology columns are every column outside the metadata set; the
    patient id is the path segment matching "patientNNN", or the whole
    path when absent. Row numbers in errors count the header as row 1.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as f:
            return parse_manifest(f)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("manifest is empty") from None
    missing = [c for c in _REQUIRED_COLUMNS if c not in header]
    if missing:
        raise DataError(f"manifest is missing mandatory columns: {', '.join(missing)}")
    col = {name: header.index(name) for name in header}
    pathologies = [c for c in header if c not in _METADATA_COLUMNS]

    records = []
    for row_num, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"row {row_num}: expected {len(header)} cells, got {len(row)}")
        path = row[col["Path"]].strip()
        if not path:
            raise DataError(f"row {row_num}: empty Path")
        view_text = row[col["Frontal/Lateral"]].strip().lower()
        if view_text not in ("frontal", "lateral"):
            raise DataError(f"row {row_num}: view must be Frontal or Lateral, got {row[col['Frontal/Lateral']]!r}")
        proj_text = row[col["AP/PA"]].strip().lower()
        projection = proj_text if proj_text in ("ap", "pa") else "unknown"
        match = _PATIENT_RE.search(path)
        labels = {p: _parse_label(row[col[p]], row_num, p) for p in pathologies}
        records.append(
            ManifestRecord(
                path=path,
                view=view_text,
                projection=projection,
                patient_id=match.group(0) if match else path,
                labels=labels,
            )
        )
    return records


@dataclass(frozen=True)
class LabeledRecord:
    path: str
    patient_id: str
    label: int  # 1 positive, 0 negative


def extract_cohort(
    records: Sequence[ManifestRecord],
    pathology: str,
    uncertain_policy: str = "exclude",
    view_filter: str = "frontal_only",
) -> list[LabeledRecord]:
    """Binary-labeled records for one pathology.

    The view filter runs first; then uncertain and unmentioned labels are
    both resolved by the policy (exclude drops them, as_negative and
    as_positive relabel them)."""
    if uncertain_policy not in ("exclude", "as_negative", "as_positive"):
        raise DataError(f"unknown uncertain policy {uncertain_policy!r}")
    if view_filter not in ("frontal_only", "all"):
        raise DataError(f"unknown view filter {view_filter!r}")
    if not records:
        raise DataError("no manifest records")
    known = records[0].labels.keys()
    matches = [p for p in known if p.lower() == pathology.lower()]
    if not matches:
        raise DataError(f"unknown pathology {pathology!r} (manifest has: {', '.join(sorted(known))})")
    column = matches[0]

    kept = [r for r in records if view_filter == "all" or r.view == "frontal"]
    resolved = {"exclude": None, "as_negative": 0, "as_positive": 1}[uncertain_policy]
    out = []
    for r in kept:
        label = r.labels[column]
        if label == POSITIVE:
            binary = 1
        elif label == NEGATIVE:
            binary = 0
        elif resolved is None:
            continue
        else:
            binary = resolved
        out.append(LabeledRecord(r.path, r.patient_id, binary))
    if not out:
        raise DataError(f"cohort for {pathology!r} is empty after filtering")
    return out


SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class CohortRecord:
    path: str
    label: int
    split: str


@dataclass(frozen=True)
class Cohort:
    pathology: str
    records: tuple[CohortRecord, ...]
    seed: int
    policy: str
    split_unit: str
    root: str | None = None

    def resolve(self, path: str) -> Path:
        """Image paths are stored relative to the dataset root."""
        return Path(self.root) / path if self.root else Path(path)

    def counts(self, split: str) -> tuple[int, int]:
        pos = sum(1 for r in self.records if r.split == split and r.label == 1)
        neg = sum(1 for r in self.records if r.split == split and r.label == 0)
        return pos, neg


def _split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    exact = [r * n for r in ratios]
    sizes = [math.floor(e) for e in exact]
    remainder = n - sum(sizes)
    # Largest fractional part first; ties keep split order (train, val, test).
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def split(
    records: Sequence[LabeledRecord],
    ratios: Sequence[float] = (0.64, 0.16, 0.20),
    seed: int = 0,
    unit: str = "per_image",
    pathology: str = "",
    policy: str = "exclude",
) -> Cohort:
    """Seeded shuffle then contiguous assignment with floor sizes and
    largest-fraction remainders. per_patient keeps all of a patient's
    images in one split."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLIT_NAMES):
        raise DataError(f"expected {len(SPLIT_NAMES)} ratios, got {len(ratios)}")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be positive and sum to 1, got {ratios}")
    if unit not in ("per_image", "per_patient"):
        raise DataError(f"unknown split unit {unit!r}")

    if unit == "per_image":
        units: list[list[LabeledRecord]] = [[r] for r in records]
    else:
        groups: dict[str, list[LabeledRecord]] = {}
        for r in records:
            groups.setdefault(r.patient_id, []).append(r)
        units = list(groups.values())  # first-appearance patient order
    if len(units) < len(SPLIT_NAMES):
        raise DataError(f"need at least {len(SPLIT_NAMES)} split units, got {len(units)}")

    perm = np.random.default_rng(seed).permutation(len(units))
    sizes = _split_sizes(len(units), ratios)
    out: list[CohortRecord] = []
    cursor = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for k in perm[cursor : cursor + size]:
            for r in units[k]:
                out.append(CohortRecord(r.path, r.label, name))
        cursor += size
    return Cohort(pathology, tuple(out), seed, policy, unit)


def write_cohort_csv(cohort: Cohort, path, ratios: Sequence[float] = (0.64, 0.16, 0.20)) -> None:
    """cohort.csv plus a .meta.json sidecar carrying provenance (pathology,
    seed, policy, split unit, dataset root)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for r in cohort.records:
            writer.writerow([r.path, r.label, r.split])
    meta = {
        "pathology": cohort.pathology,
        "seed": cohort.seed,
        "policy": cohort.policy,
        "split_unit": cohort.split_unit,
        "ratios": list(ratios),
        "root": cohort.root,
    }
    sidecar = path.with_name(path.stem + ".meta.json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_cohort_csv(path) -> Cohort:
    path = Path(path)
    sidecar = path.with_name(path.stem + ".meta.json")
    meta = {}
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise DataError(f"{path}: expected header path,label,split, got {header}")
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path} row {row_num}: expected 3 cells, got {len(row)}")
            p, label, split_name = row
            if label not in ("0", "1"):
                raise DataError(f"{path} row {row_num}: label must be 0 or 1, got {label!r}")
            if split_name not in SPLIT_NAMES:
                raise DataError(f"{path} row {row_num}: unknown split {split_name!r}")
            records.append(CohortRecord(p, int(label), split_name))
    if not records:
        raise DataError(f"{path}: cohort is empty")
    return Cohort(
        pathology=meta.get("pathology", ""),
        records=tuple(records),
        seed=int(meta.get("seed", 0)),
        policy=meta.get("policy", "exclude"),
        split_unit=meta.get("split_unit", "per_image"),
        root=meta.get("root") or str(path.parent),
    )


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample; sample positions follow the
    half-pixel-center convention src = (dst + 0.5) * scale - 0.5."""
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.astype(np.float32, copy=True)

    def axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, wy = axis_coords(in_h, out_h)
    x0, x1, wx = axis_coords(in_w, out_w)
    rows = img[y0] * (1.0 - wy)[:, None] + img[y1] * wy[:, None]
    out = rows[:, x0] * (1.0 - wx)[None, :] + rows[:, x1] * wx[None, :]
    return out.astype(np.float32)


def load_image(path, target_side: int) -> Tensor:
    """Decode, take luminance, resize bilinearly to the target side, and
    scale to [0,1]. Returns a 1 x S x S tensor."""
    try:
        with Image.open(path) as img:
            if img.width == 0 or img.height == 0:
                raise DataError(f"{path}: zero-sized image")
            if img.mode != "L":
                # ITU-R 601-2 luminance: 0.299 R + 0.587 G + 0.114 B
                img = img.convert("L")
            arr = np.asarray(img, dtype=np.float32)
    except UnidentifiedImageError as exc:
        raise DataError(f"{path}: not a readable image ({exc})") from exc
    except FileNotFoundError as exc:
        raise DataError(f"{path}: file not found") from exc
    if arr.size == 0:
        raise DataError(f"{path}: zero-sized image")
    resized = _resize_bilinear(arr / 255.0, target_side, target_side)
    return Tensor(np.clip(resized, 0.0, 1.0)[None, :, :])


@dataclass(frozen=True)
class SyntheticSpec:
    side: int = 32
    counts: tuple[int, int, int] = (800, 200, 250)  # train / val / test draws
    positive_fraction: float = 0.112
    radius_range: tuple[float, float] = (4.0, 7.0)
    contrast_range: tuple[float, float] = (0.30, 0.45)
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(n) for n in self.counts))
        if not 0.0 < self.positive_fraction < 1.0:
            raise DataError(f"positive_fraction must be in (0,1), got {self.positive_fraction}")
        r_lo, r_hi = self.radius_range
        if r_lo < 2.0 or r_hi < r_lo:
            raise DataError(f"radius range must satisfy 2 <= lo <= hi, got {self.radius_range}")
        c_lo, c_hi = self.contrast_range
        if not 0.0 < c_lo <= c_hi <= 0.45:
            raise DataError(f"contrast range must satisfy 0 < lo <= hi <= 0.45, got {self.contrast_range}")
        if not 0.0 <= self.noise_std <= 0.1:
            raise DataError(f"noise_std must be in [0, 0.1], got {self.noise_std}")
        if any(n < 0 for n in self.counts) or sum(self.counts) < 1:
            raise DataError(f"counts must be nonnegative with a positive sum, got {self.counts}")
        if self.side < 2 * math.ceil(r_hi) + 2:
            raise DataError(f"side {self.side} too small for blobs of radius {r_hi}")


PATHOLOGY_COLUMN = "Lung Lesion"


def synth_image(rng: np.random.Generator, spec: SyntheticSpec, positive: bool) -> tuple[np.ndarray, dict]:
    """One 8-bit image: a smooth low-frequency background plus pixel noise,
    and for positives a bright blob (flat core, cosine rim) whose peak sits
    at background mean + contrast. Returns (uint8 image, draw info)."""
    grid = rng.uniform(0.2, 0.5, size=(5, 5))
    img = _resize_bilinear(grid, spec.side, spec.side).astype(np.float64)
    img += rng.normal(0.0, spec.noise_std, size=(spec.side, spec.side))
    img = np.clip(img, 0.0, 1.0)
    bg_mean = float(img.mean())
    info = {"bg_mean": bg_mean, "positive": positive}
    if positive:
        radius = rng.uniform(*spec.radius_range)
        contrast = rng.uniform(*spec.contrast_range)
        margin = math.ceil(radius)
        cy = int(rng.integers(margin, spec.side - margin))
        cx = int(rng.integers(margin, spec.side - margin))
        yy, xx = np.ogrid[: spec.side, : spec.side]
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        # Flat inside 0.6 r, cosine falloff to zero at r; exactly 1 at center.
        t = np.clip((dist / radius - 0.6) / 0.4, 0.0, 1.0)
        falloff = 0.5 * (1.0 + np.cos(math.pi * t))
        target = min(bg_mean + contrast, 1.0)
        img = img + falloff * np.maximum(target - img, 0.0)
        info.update(radius=radius, contrast=contrast, center=(cy, cx))
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8), info


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write images, a CheXpert-format manifest, and a JSON copy of the
    spec; returns the manifest path. Within each count group, positives
    (round(fraction * count) of them) come first. Bit-identical output for
    identical specs."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    rows = []
    patient = 0
    for count in spec.counts:
        n_pos = round(spec.positive_fraction * count)
        for i in range(count):
            patient += 1
            positive = i < n_pos
            image, _ = synth_image(rng, spec, positive)
            rel = f"images/patient{patient:05d}/study1/view1_frontal.png"
            file_path = out / rel
            file_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(image, mode="L").save(file_path)
            rows.append([rel, "Unknown", "0", "Frontal", "AP", "1.0" if positive else "0.0"])

    manifest = out / "manifest.csv"
    with open(manifest, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["Path", "Sex", "Age", "Frontal/Lateral", "AP/PA", PATHOLOGY_COLUMN])
        writer.writerows(rows)
    spec_json = {
        "side": spec.side,
        "counts": list(spec.counts),
        "positive_fraction": spec.positive_fraction,
        "radius_range": list(spec.radius_range),
        "contrast_range": list(spec.contrast_range),
        "noise_std": spec.noise_std,
        "seed": spec.seed,
    }
    (out / "synthetic_spec.json").write_text(json.dumps(spec_json, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
