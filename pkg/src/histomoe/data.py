"""Dataset indexing, preprocessing and stratified splitting.

Handles three sample sources behind one descriptor type: BreaKHis-style
directory trees, procedurally generated desk-scale textures, and in-memory
arrays (used by the sklearn-style estimator). Splits are stratified on a
class-and-magnification key and are deterministic for a fixed seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SUBTYPES = (
    "adenosis",
    "fibroadenoma",
    "phyllodes_tumor",
    "tubular_adenoma",
    "ductal_carcinoma",
    "lobular_carcinoma",
    "mucinous_carcinoma",
    "papillary_carcinoma",
)
N_CLASSES = len(SUBTYPES)
N_BENIGN = 4
MAGNIFICATIONS = (40, 100, 200, 400)
IMAGE_SIZE = 224
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


class DataError(ValueError):
    """Raised for unreadable inputs or degenerate dataset statistics."""


def superclass_of(subtype: int) -> str:
    if not 0 <= subtype < N_CLASSES:
        raise ValueError(f"subtype {subtype} out of range [0, {N_CLASSES})")
    return "benign" if subtype < N_BENIGN else "malignant"


def make_stratum_key(subtype: int, magnification: int) -> str:
    return f"{subtype}_{magnification}"


@dataclass(frozen=True)
class SampleRef:
    """Descriptor of one image: a file path or a synthetic generator seed."""

    sample_id: str
    subtype: int
    magnification: int
    patient_id: str
    path: str | None = None
    synth_seed: int | None = None

    @property
    def stratum_key(self) -> str:
        return make_stratum_key(self.subtype, self.magnification)

    @property
    def superclass(self) -> str:
        return superclass_of(self.subtype)


@dataclass
class ImageSample:
    """A preprocessed image with its labels and stratum key."""

    pixels: np.ndarray  # (3, 224, 224) float32, z-scored
    subtype: int
    superclass: str
    magnification: int
    patient_id: str
    stratum_key: str


@dataclass
class DatasetIndex:
    """A list of sample descriptors plus optional normalization statistics."""

    samples: list[SampleRef] = field(default_factory=list)
    normalization_stats: tuple[np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.subtype for s in self.samples], dtype=np.int64)

    def magnifications(self) -> np.ndarray:
        return np.array([s.magnification for s in self.samples], dtype=np.int64)

    def strata(self) -> list[str]:
        return [s.stratum_key for s in self.samples]

    def present_magnifications(self) -> list[int]:
        return sorted({s.magnification for s in self.samples})

    def counts(self) -> dict[tuple[int, int], int]:
        """Per (subtype, magnification) cell counts."""
        out: dict[tuple[int, int], int] = {}
        for s in self.samples:
            key = (s.subtype, s.magnification)
            out[key] = out.get(key, 0) + 1
        return out

    def count_superclass(self, name: str) -> int:
        return sum(1 for s in self.samples if s.superclass == name)

    def subset(self, indices: Iterable[int]) -> "DatasetIndex":
        return DatasetIndex([self.samples[i] for i in indices], self.normalization_stats)

    def filter_magnification(self, magnification: int) -> "DatasetIndex":
        keep = [i for i, s in enumerate(self.samples) if s.magnification == magnification]
        return self.subset(keep)

    def with_stats(self, stats: tuple[np.ndarray, np.ndarray]) -> "DatasetIndex":
        return DatasetIndex(list(self.samples), stats)


# ---------------------------------------------------------------------------
# BreaKHis directory scanning
# ---------------------------------------------------------------------------

_MAG_FOLDER = {"40X": 40, "100X": 100, "200X": 200, "400X": 400}
_SUPERCLASS_DIRS = ("benign", "malignant")


def scan_breakhis(root_path: str | Path) -> DatasetIndex:
    """Walk a BreaKHis layout: {benign,malignant}/<method>/<subtype>/<patient>/<mag>/*.png."""
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    subtype_index = {name: i for i, name in enumerate(SUBTYPES)}
    samples: list[SampleRef] = []
    skipped_mag_folders = 0
    for super_name in _SUPERCLASS_DIRS:
        super_dir = root / super_name
        if not super_dir.is_dir():
            continue
        for method_dir in sorted(p for p in super_dir.iterdir() if p.is_dir()):
            for subtype_dir in sorted(p for p in method_dir.iterdir() if p.is_dir()):
                subtype = subtype_index.get(subtype_dir.name.lower())
                if subtype is None:
                    warnings.warn(f"unrecognized subtype folder skipped: {subtype_dir}")
                    continue
                for patient_dir in sorted(p for p in subtype_dir.iterdir() if p.is_dir()):
                    for mag_dir in sorted(p for p in patient_dir.iterdir() if p.is_dir()):
                        mag = _MAG_FOLDER.get(mag_dir.name.upper())
                        if mag is None:
                            skipped_mag_folders += 1
                            continue
                        for f in sorted(p for p in mag_dir.iterdir() if p.is_file()):
                            if f.suffix.lower() not in IMAGE_EXTENSIONS:
                                continue
                            samples.append(
                                SampleRef(
                                    sample_id=f.stem,
                                    subtype=subtype,
                                    magnification=mag,
                                    patient_id=patient_dir.name,
                                    path=str(f),
                                )
                            )
    if skipped_mag_folders:
        warnings.warn(f"skipped {skipped_mag_folders} unrecognized magnification folders")
    if not samples:
        warnings.warn(f"no images found under {root}")
    return DatasetIndex(samples)


# ---------------------------------------------------------------------------
# Synthetic desk-scale textures
# ---------------------------------------------------------------------------

# Per-class generator parameters. Blob count rises monotonically (and
# geometrically, so adjacent classes keep a constant ratio); the two
# superclasses differ in the blob/stripe amplitude mix. Colors are
# class-independent so the class signal lives in spatial structure.
def class_texture_params(subtype: int) -> dict:
    benign = subtype < N_BENIGN
    return {
        "n_blobs": int(round(5 * 1.62**subtype)),
        "blob_radius": 4.5,
        "blob_amp": 0.95 if benign else 0.6,
        "stripe_wavelength": 44.0 - 4.0 * subtype,
        "stripe_amp": 0.10 if benign else 0.45,
    }


_BG_COLOR = np.array([0.86, 0.72, 0.82], dtype=np.float64)
_FG_COLOR = np.array([0.38, 0.22, 0.52], dtype=np.float64)


def render_texture(subtype: int, magnification: int, seed: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Procedural texture for one sample, float32 (3, size, size) in [0, 1].

    Magnification acts as a zoom on structure size (base 100x), so the same
    class looks coarser at 400x and finer at 40x while its blob count stays
    fixed.
    """
    rng = np.random.default_rng(seed)
    p = class_texture_params(subtype)
    zoom = magnification / 100.0

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    density = np.zeros((size, size), dtype=np.float64)

    n_blobs = p["n_blobs"]
    radius = p["blob_radius"] * zoom**0.25  # structures grow with magnification, gently
    for _ in range(n_blobs):
        cy = rng.uniform(0.08 * size, 0.92 * size)
        cx = rng.uniform(0.08 * size, 0.92 * size)
        r = radius * rng.uniform(0.9, 1.1)
        density += p["blob_amp"] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))

    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wavelength = p["stripe_wavelength"] * zoom
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    density += p["stripe_amp"] * 0.5 * (1.0 + np.sin(2.0 * np.pi * proj / wavelength + phase))

    density += rng.normal(0.0, 0.025, (size, size))
    density = np.clip(density, 0.0, 1.0)

    img = _BG_COLOR[:, None, None] * (1.0 - density) + _FG_COLOR[:, None, None] * density
    img = img * rng.uniform(0.98, 1.02) + rng.uniform(-0.015, 0.015)
    img += rng.normal(0.0, 0.008, (3, size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _sample_seed(master_seed: int, subtype: int, magnification: int, i: int) -> int:
    ss = np.random.SeedSequence([master_seed, subtype, magnification, i])
    words = ss.generate_state(2, dtype=np.uint64)
    return int(words[0] ^ (words[1] >> 1))


def generate_synthetic_dataset(
    n_per_class: int,
    magnifications: Sequence[int] = MAGNIFICATIONS,
    seed: int = 0,
) -> DatasetIndex:
    """Procedural 8-class dataset with n_per_class samples per (class, magnification) cell."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    samples: list[SampleRef] = []
    for subtype in range(N_CLASSES):
        for mag in magnifications:
            for i in range(n_per_class):
                samples.append(
                    SampleRef(
                        sample_id=f"syn_c{subtype}_m{mag}_{i:04d}",
                        subtype=subtype,
                        magnification=int(mag),
                        patient_id=f"synpat_c{subtype}_{i // 5}",
                        synth_seed=_sample_seed(seed, subtype, int(mag), i),
                    )
                )
    return DatasetIndex(samples)


# ---------------------------------------------------------------------------
# Loading and normalization
# ---------------------------------------------------------------------------

def load_raw(ref: SampleRef, size: int = IMAGE_SIZE) -> np.ndarray:
    """Raw pixels for a descriptor: float32 (3, size, size) in [0, 1], pre-normalization."""
    if ref.path is None:
        if ref.synth_seed is None:
            raise DataError(f"descriptor {ref.sample_id} has neither path nor synth seed")
        return render_texture(ref.subtype, ref.magnification, ref.synth_seed, size)
    try:
        with Image.open(ref.path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:  # noqa: BLE001 - file identity must reach the caller
        raise DataError(f"cannot decode image: {ref.path}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def compute_normalization_stats(index: DatasetIndex) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over the given (training) descriptors.

    Statistics must be fitted on the train split only and then applied
    unchanged to validation/test data.
    """
    if len(index) == 0:
        raise DataError("cannot compute normalization stats on an empty split")
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for ref in index.samples:
        raw = load_raw(ref).astype(np.float64)
        total += raw.sum(axis=(1, 2))
        total_sq += (raw * raw).sum(axis=(1, 2))
        count += raw.shape[1] * raw.shape[2]
    mu = total / count
    var = total_sq / count - mu * mu
    var = np.maximum(var, 0.0)
    sigma = np.sqrt(var)
    if np.any(sigma <= 1e-8):
        raise DataError("zero variance: at least one channel is constant over the split")
    return mu, sigma


def normalize_pixels(raw: np.ndarray, stats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Z-score normalization: (value - mean) / std, per channel."""
    mu, sigma = stats
    mu = np.asarray(mu, dtype=np.float32).reshape(3, 1, 1)
    sigma = np.asarray(sigma, dtype=np.float32).reshape(3, 1, 1)
    return (raw.astype(np.float32) - mu) / sigma


def denormalize_pixels(pixels: np.ndarray, stats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    mu, sigma = stats
    mu = np.asarray(mu, dtype=np.float32).reshape(3, 1, 1)
    sigma = np.asarray(sigma, dtype=np.float32).reshape(3, 1, 1)
    return pixels * sigma + mu

def preprocess(ref: SampleRef, stats: tuple[np.ndarray, np.ndarray]) -> ImageSample:
    """Load (or generate), resize to 224x224 and z-score one sample."""
    pixels = normalize_pixels(load_raw(ref), stats)
    return ImageSample(
        pixels=pixels,
        subtype=ref.subtype,
        superclass=ref.superclass,
        magnification=ref.magnification,
        patient_id=ref.patient_id,
        stratum_key=ref.stratum_key,
    )


def materialize(index: DatasetIndex, stats: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack a whole index into (X, y) arrays. X is float32 (N, 3, 224, 224)."""
    if stats is None:
        stats = index.normalization_stats
    if stats is None:
        raise DataError("no normalization stats: fit them on the train split first")
    xs = np.stack([normalize_pixels(load_raw(ref), stats) for ref in index.samples])
    return xs, index.labels()


# ---------------------------------------------------------------------------
# Stratified splitting
# ---------------------------------------------------------------------------

def _group_by(keys: Sequence[str]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    return dict(sorted(groups.items()))


def stratified_holdout_indices(
    strata: Sequence[str], test_fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    """Largest-remainder stratified holdout.

    Per-stratum test counts are the floor or ceil of the exact quota
    (within +-1 of round(fraction * stratum size)) and the total test count
    is exactly round(test_fraction * N).
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(strata)
    groups = _group_by(strata)
    target = int(round(test_fraction * n))

    quotas = {k: test_fraction * len(v) for k, v in groups.items()}
    n_test: dict[str, int] = {}
    caps: dict[str, int] = {}
    for k, members in groups.items():
        if len(members) == 1:
            warnings.warn(f"stratum {k} has a single sample; placed in train")
            caps[k] = 0
        else:
            caps[k] = len(members) - 1  # always keep at least one train sample
        n_test[k] = min(int(np.floor(quotas[k])), caps[k])

    remaining = target - sum(n_test.values())
    # Distribute the remainder by largest fractional part, then refill any
    # leftover against capacity (stable order keeps this deterministic).
    order = sorted(groups, key=lambda k: (-(quotas[k] - np.floor(quotas[k])), k))
    for k in order:
        if remaining <= 0:
            break
        if n_test[k] < caps[k]:
            n_test[k] += 1
            remaining -= 1
    for k in order:
        while remaining > 0 and n_test[k] < caps[k]:
            n_test[k] += 1
            remaining -= 1

    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for k, members in groups.items():
        perm = rng.permutation(len(members))
        take = n_test[k]
        for pos, j in enumerate(perm):
            (test_idx if pos < take else train_idx).append(members[j])
    return sorted(train_idx), sorted(test_idx)


def _patient_disjoint_indices(
    index: DatasetIndex, test_fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    by_patient: dict[str, list[int]] = {}
    for i, s in enumerate(index.samples):
        by_patient.setdefault(s.patient_id, []).append(i)
    patients = sorted(by_patient)
    rng = np.random.default_rng(seed)
    rng.shuffle(patients)
    target = int(round(test_fraction * len(index)))
    test_idx: list[int] = []
    for p in patients:
        if len(test_idx) >= target:
            break
        test_idx.extend(by_patient[p])
    test_set = set(test_idx)
    train_idx = [i for i in range(len(index)) if i not in test_set]
    warnings.warn("patient-disjoint split: per-stratum proportions are approximate")
    return sorted(train_idx), sorted(test_idx)


def stratified_split(
    index: DatasetIndex,
    test_fraction: float,
    seed: int,
    patient_disjoint: bool = False,
) -> tuple[DatasetIndex, DatasetIndex]:
    """Split an index into train/test, stratified on (subtype, magnification)."""
    if patient_disjoint:
        train_idx, test_idx = _patient_disjoint_indices(index, test_fraction, seed)
    else:
        train_idx, test_idx = stratified_holdout_indices(index.strata(), test_fraction, seed)
    return index.subset(train_idx), index.subset(test_idx)


def stratified_kfold_indices(
    strata: Sequence[str], k: int, seed: int
) -> list[tuple[list[int], list[int]]]:
    """Round-robin stratified k folds over precomputed stratum keys."""
    if k < 2:
        raise ValueError("k must be >= 2")
    groups = _group_by(strata)
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for g, (key, members) in enumerate(groups.items()):
        perm = rng.permutation(len(members))
        for pos, j in enumerate(perm):
            folds[(pos + g) % k].append(members[j])
    out = []
    for i in range(k):
        val = sorted(folds[i])
        val_set = set(val)
        train = [j for j in range(len(strata)) if j not in val_set]
        out.append((train, val))
    return out


def kfold_split(
    index: DatasetIndex, k: int, seed: int
) -> list[tuple[DatasetIndex, DatasetIndex]]:
    """Stratified k-fold split of a training index.

    Falls back to subtype-only stratification when the smallest
    class-and-magnification stratum has fewer than k members.
    """
    strata = index.strata()
    smallest = min(len(v) for v in _group_by(strata).values())
    if smallest < k:
        warnings.warn(
            f"smallest stratum has {smallest} < k={k} samples; "
            "falling back to subtype-only stratification"
        )
        strata = [str(s.subtype) for s in index.samples]
    pairs = stratified_kfold_indices(strata, k, seed)
    return [(index.subset(tr), index.subset(va)) for tr, va in pairs]


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def _ref_source(ref: SampleRef) -> str:
    return ref.path if ref.path is not None else f"synth:{ref.synth_seed}"


def write_manifest(path: str | Path, entries: Sequence[tuple[SampleRef, str]]) -> None:
    """Persist (descriptor, role) rows as tab-separated lines; byte-stable for a fixed seed."""
    lines = []
    for ref, role in entries:
        lines.append(
            "\t".join(
                [
                    _ref_source(ref),
                    ref.sample_id,
                    str(ref.subtype),
                    str(ref.magnification),
                    ref.patient_id,
                    ref.stratum_key,
                    role,
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[tuple[SampleRef, str]]:
    entries: list[tuple[SampleRef, str]] = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        source, sample_id, subtype, mag, patient, _stratum, role = line.split("\t")
        if source.startswith("synth:"):
            ref = SampleRef(sample_id, int(subtype), int(mag), patient, synth_seed=int(source[6:]))
        else:
            ref = SampleRef(sample_id, int(subtype), int(mag), patient, path=source)
        entries.append((ref, role))
    return entries


def manifest_roles(entries: Sequence[tuple[SampleRef, str]]) -> dict[str, DatasetIndex]:
    roles: dict[str, list[SampleRef]] = {}
    for ref, role in entries:
        roles.setdefault(role, []).append(ref)
    return {role: DatasetIndex(refs) for role, refs in roles.items()}
