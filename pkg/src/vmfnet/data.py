"""Synthetic multi-domain cardiac-like phantoms, their on-disk format and splits.

Each subject is a stack of 2D slices showing an inner disk (label 1, LV
analog), a ring around it (label 2, MYO analog) and a crescent hugging one
side (label 3, RV analog) inside an elliptical body. Domains differ only in
the acquisition chain applied to the rendered anatomy: contrast, gamma,
a smooth multiplicative bias field, blur and noise.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, CorruptDatasetError, DatasetError, DatasetVersionError

FORMAT_VERSION = "vmfnet-dataset/1"
NUM_CLASSES = 3  # foreground classes; labels are 0..NUM_CLASSES
CLASS_NAMES = {1: "LV", 2: "MYO", 3: "RV"}
MIN_CLASS_AREA = 20

# Tissue intensities of the clean rendering, before the domain chain.
_BACKGROUND, _BODY, _BLOOD, _MUSCLE, _RV_BLOOD = 0.05, 0.45, 0.9, 0.2, 0.78


@dataclass(frozen=True)
class DomainSpec:
    """Acquisition parameters of one synthetic scanner.

    Bounds: gamma in [0.3, 3], contrast in [0.2, 2], bias_amplitude in
    [0, 0.5], noise_sigma in [0, 0.2], blur_sigma in [0, 3], offset in
    [-0.3, 0.3], eccentricity range within [0, 0.8].
    """

    gamma: float = 1.0
    contrast: float = 1.0
    offset: float = 0.0
    bias_amplitude: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    eccentricity: tuple[float, float] = (0.0, 0.3)

    def __post_init__(self):
        checks = [
            (0.3 <= self.gamma <= 3.0, "gamma"),
            (0.2 <= self.contrast <= 2.0, "contrast"),
            (-0.3 <= self.offset <= 0.3, "offset"),
            (0.0 <= self.bias_amplitude <= 0.5, "bias_amplitude"),
            (0.0 <= self.noise_sigma <= 0.2, "noise_sigma"),
            (0.0 <= self.blur_sigma <= 3.0, "blur_sigma"),
            (0.0 <= self.eccentricity[0] <= self.eccentricity[1] <= 0.8, "eccentricity"),
        ]
        bad = [name for ok, name in checks if not ok]
        if bad:
            raise ConfigError(f"domain parameters out of bounds: {bad}")


DEFAULT_DOMAINS: dict[str, DomainSpec] = {
    "A": DomainSpec(gamma=1.0, contrast=1.0, offset=0.0, bias_amplitude=0.05,
                    noise_sigma=0.02, blur_sigma=0.0, eccentricity=(0.0, 0.3)),
    "B": DomainSpec(gamma=0.6, contrast=0.8, offset=0.05, bias_amplitude=0.2,
                    noise_sigma=0.04, blur_sigma=0.6, eccentricity=(0.1, 0.4)),
    "C": DomainSpec(gamma=1.6, contrast=1.2, offset=-0.05, bias_amplitude=0.1,
                    noise_sigma=0.01, blur_sigma=1.0, eccentricity=(0.0, 0.25)),
    "D": DomainSpec(gamma=1.0, contrast=0.6, offset=0.15, bias_amplitude=0.3,
                    noise_sigma=0.06, blur_sigma=0.3, eccentricity=(0.15, 0.45)),
}


@dataclass
class Sample:
    image: np.ndarray  # float32 [H, W] in [0, 1]
    mask: np.ndarray | None  # uint8 [H, W] with labels 0..NUM_CLASSES
    domain_id: str
    subject_id: str
    slice_index: int
    labeled: bool = True


@dataclass
class Dataset:
    samples: list[Sample]
    num_classes: int = NUM_CLASSES
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def domains(self) -> list[str]:
        return sorted({s.domain_id for s in self.samples})

    def subjects(self, domain_id: str | None = None) -> list[str]:
        return sorted({s.subject_id for s in self.samples if domain_id in (None, s.domain_id)})

    def subject_samples(self, subject_id: str) -> list[Sample]:
        return sorted(
            (s for s in self.samples if s.subject_id == subject_id), key=lambda s: s.slice_index
        )

    def by_domain(self, domain_id: str) -> "Dataset":
        return Dataset([s for s in self.samples if s.domain_id == domain_id], self.num_classes, self.meta)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.samples[0].image.shape


# ---------------------------------------------------------------- rendering


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def render_anatomy(size: int, pose: dict) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize one clean slice. Returns (intensity, labels)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = size / 64.0
    cy, cx = pose["cy"] * scale, pose["cx"] * scale
    r = pose["lv_radius"] * scale
    wall = pose["wall"] * scale
    ecc, ang = pose["eccentricity"], pose["angle"]
    squash = math.sqrt(1.0 - ecc * ecc)

    image = np.full((size, size), _BACKGROUND)
    labels = np.zeros((size, size), np.uint8)

    body = _ellipse(yy, xx, size / 2, size / 2, 0.44 * size, 0.47 * size, pose["body_angle"])
    image[body] = _BODY

    outer = _ellipse(yy, xx, cy, cx, (r + wall) * squash, r + wall, ang)
    # RV: a larger ellipse offset sideways, minus the LV+MYO complex and a margin
    ox = cx + math.cos(pose["rv_angle"]) * (r + wall) * 0.9
    oy = cy + math.sin(pose["rv_angle"]) * (r + wall) * 0.9
    rv_outer = _ellipse(yy, xx, oy, ox, (r + wall) * 1.15, (r + wall) * 1.35, pose["rv_angle"] + math.pi / 2)
    rv_clear = _ellipse(yy, xx, cy, cx, (r + 1.6 * wall) * squash, r + 1.6 * wall, ang)
    rv = rv_outer & ~rv_clear
    image[rv] = _RV_BLOOD
    labels[rv] = 3

    image[outer] = _MUSCLE
    labels[outer] = 2
    inner = _ellipse(yy, xx, cy, cx, r * squash, r, ang)
    image[inner] = _BLOOD
    labels[inner] = 1

    # unlabeled distractors: a bright blob and a dark one elsewhere in the body
    for (by, bx, br), val in zip(pose["blobs"], (0.85, 0.15)):
        blob = _ellipse(yy, xx, by * scale, bx * scale, br * scale, br * scale * 1.3, 0.0)
        blob &= body & (labels == 0) & ~rv_clear
        image[blob] = val
    return image, labels


def _random_pose(rng: np.random.Generator, spec: DomainSpec) -> dict:
    return {
        "cy": rng.uniform(26, 38),
        "cx": rng.uniform(26, 38),
        "lv_radius": rng.uniform(6.0, 8.5),
        "wall": rng.uniform(2.5, 3.5),
        "eccentricity": rng.uniform(*spec.eccentricity),
        "angle": rng.uniform(0, math.pi),
        "rv_angle": rng.uniform(math.pi - 0.6, math.pi + 0.6),
        "body_angle": rng.uniform(-0.3, 0.3),
        "blobs": [(rng.uniform(12, 52), rng.uniform(44, 54), rng.uniform(3, 5)) for _ in range(2)],
    }


def _slice_pose(pose: dict, k: int, n: int) -> dict:
    # apex-to-base: structures shrink towards the last slice
    t = k / max(n - 1, 1)
    out = dict(pose)
    out["lv_radius"] = pose["lv_radius"] * (1.0 - 0.3 * t)
    out["wall"] = pose["wall"] * (1.0 - 0.15 * t)
    out["cy"] = pose["cy"] + 0.8 * t
    return out


def apply_domain(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply a domain's acquisition chain to a clean [0, 1] image."""
    size = image.shape[0]
    x = image.copy()
    if spec.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, spec.blur_sigma, mode="nearest")
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    theta = rng.uniform(0, 2 * math.pi)
    ramp = math.cos(theta) * xx + math.sin(theta) * yy
    bias = 1.0 + spec.bias_amplitude * (2 * ramp - 0.5 * (xx**2 + yy**2))
    x = np.clip(x * bias, 0.0, 1.0) ** spec.gamma
    x = spec.contrast * (x - 0.5) + 0.5 + spec.offset
    x = x + rng.normal(0.0, spec.noise_sigma, x.shape) if spec.noise_sigma > 0 else x
    return np.clip(x, 0.0, 1.0)


def _class_areas(labels: np.ndarray) -> list[int]:
    return [int((labels == c).sum()) for c in range(1, NUM_CLASSES + 1)]


def generate_subject(
    domain: str, spec: DomainSpec, subject_index: int, num_slices: int, size: int, seed: int
) -> list[Sample]:
    rng = np.random.default_rng([seed, ord(domain[0]), subject_index])
    min_area = MIN_CLASS_AREA * (size / 64.0) ** 2
    for _ in range(100):
        pose = _random_pose(rng, spec)
        slices = [render_anatomy(size, _slice_pose(pose, k, num_slices)) for k in range(num_slices)]
        if all(min(_class_areas(lab)) >= min_area for _, lab in slices):
            break
    else:  # pragma: no cover - poses are sized so this never triggers
        raise RuntimeError("could not render a phantom with all classes present")
    subject_id = f"{domain}{subject_index:02d}"
    out = []
    for k, (clean, labels) in enumerate(slices):
        img = apply_domain(clean, spec, rng)
        img = np.round(img * 255).astype(np.uint8).astype(np.float32) / 255.0
        out.append(Sample(img, labels, domain, subject_id, k, True))
    return out


def _png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array, mode="L").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _domain_ids(num_domains: int) -> list[str]:
    if not 1 <= num_domains <= 26:
        raise ConfigError(f"num_domains must be in [1, 26], got {num_domains}")
    return [chr(ord("A") + i) for i in range(num_domains)]


def domain_specs(num_domains: int) -> dict[str, DomainSpec]:
    """Specs for the first ``num_domains`` domains; extras beyond D are interpolated."""
    ids = _domain_ids(num_domains)
    base = list(DEFAULT_DOMAINS.values())
    out = {}
    for i, d in enumerate(ids):
        if d in DEFAULT_DOMAINS:
            out[d] = DEFAULT_DOMAINS[d]
        else:
            a, b = base[i % 4], base[(i + 1) % 4]
            out[d] = DomainSpec(
                gamma=(a.gamma + b.gamma) / 2, contrast=(a.contrast + b.contrast) / 2,
                offset=(a.offset + b.offset) / 2, bias_amplitude=(a.bias_amplitude + b.bias_amplitude) / 2,
                noise_sigma=(a.noise_sigma + b.noise_sigma) / 2, blur_sigma=(a.blur_sigma + b.blur_sigma) / 2,
                eccentricity=a.eccentricity,
            )
    return out


def generate_samples(
    num_domains: int = 4,
    subjects_per_domain: int = 10,
    slices_per_subject: int = 8,
    seed: int = 0,
    size: int = 64,
) -> Dataset:
    """Generate a dataset in memory (8-bit quantized, identical to what is written)."""
    for name, v in [("subjects_per_domain", subjects_per_domain), ("slices_per_subject", slices_per_subject)]:
        if v < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")
    if size < 32 or size > 512:
        raise ConfigError(f"image size must be in [32, 512], got {size}")
    specs = domain_specs(num_domains)
    samples = []
    for d, spec in specs.items():
        for j in range(subjects_per_domain):
            samples += generate_subject(d, spec, j, slices_per_subject, size, seed)
    meta = {
        "generator": {
            "num_domains": num_domains, "subjects_per_domain": subjects_per_domain,
            "slices_per_subject": slices_per_subject, "seed": seed, "size": size,
        },
        "domains": {d: {**asdict(s), "eccentricity": list(s.eccentricity)} for d, s in specs.items()},
    }
    return Dataset(samples, NUM_CLASSES, meta)


def generate(
    out_dir: str | Path,
    num_domains: int = 4,
    subjects_per_domain: int = 10,
    slices_per_subject: int = 8,
    seed: int = 0,
    size: int = 64,
) -> Path:
    """Render a dataset and write it to ``out_dir`` with a manifest."""
    ds = generate_samples(num_domains, subjects_per_domain, slices_per_subject, seed, size)
    return save(ds, out_dir)


def save(ds: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for s in ds.samples:
            rel = Path(f"domain_{s.domain_id}") / f"subject_{s.subject_id}"
            (out / rel).mkdir(parents=True, exist_ok=True)
            img_rel = rel / f"slice_{s.slice_index}.png"
            img_bytes = _png_bytes(np.round(s.image * 255).astype(np.uint8))
            (out / img_rel).write_bytes(img_bytes)
            entry = {
                "domain": s.domain_id, "subject": s.subject_id, "slice": s.slice_index,
                "labeled": s.labeled, "image": img_rel.as_posix(),
                "image_sha256": hashlib.sha256(img_bytes).hexdigest(),
            }
            if s.mask is not None:
                mask_rel = rel / f"slice_{s.slice_index}_mask.png"
                mask_bytes = _png_bytes(s.mask.astype(np.uint8))
                (out / mask_rel).write_bytes(mask_bytes)
                entry["mask"] = mask_rel.as_posix()
                entry["mask_sha256"] = hashlib.sha256(mask_bytes).hexdigest()
            entries.append(entry)
        manifest = {
            "format_version": FORMAT_VERSION,
            "num_classes": ds.num_classes,
            **ds.meta,
            "domain_ids": ds.domains,
            "samples": entries,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {out}: {e}") from e
    return out


def _read_png(root: Path, rel: str, checksum: str | None) -> np.ndarray:
    path = root / rel
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CorruptDatasetError(f"missing file {path}") from None
    if checksum is not None and hashlib.sha256(raw).hexdigest() != checksum:
        raise CorruptDatasetError(f"checksum mismatch for {path}")
    try:
        with Image.open(io.BytesIO(raw)) as im:
            return np.asarray(im)
    except Exception as e:
        raise CorruptDatasetError(f"cannot decode {path}: {e}") from e


def load(path: str | Path, verify: bool = True) -> Dataset:
    """Load and validate a dataset directory written by :func:`generate`."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CorruptDatasetError(f"unreadable manifest {manifest_path}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported dataset format {version!r}, expected {FORMAT_VERSION!r}")
    num_classes = int(manifest.get("num_classes", NUM_CLASSES))
    samples, shape = [], None
    for e in manifest["samples"]:
        img = _read_png(root, e["image"], e.get("image_sha256") if verify else None)
        if img.ndim != 2 or img.dtype != np.uint8:
            raise CorruptDatasetError(f"{root / e['image']} is not 8-bit grayscale")
        shape = shape or img.shape
        if img.shape != shape:
            raise CorruptDatasetError(f"{root / e['image']} has shape {img.shape}, expected {shape}")
        mask = None
        if "mask" in e:
            mask = _read_png(root, e["mask"], e.get("mask_sha256") if verify else None)
            if mask.shape != shape:
                raise CorruptDatasetError(f"{root / e['mask']} has shape {mask.shape}, expected {shape}")
            if mask.max() > num_classes:
                raise CorruptDatasetError(f"{root / e['mask']} has labels above {num_classes}")
        elif e.get("labeled"):
            raise CorruptDatasetError(f"labeled sample {e['image']} lists no mask")
        samples.append(Sample(
            img.astype(np.float32) / 255.0, mask, e["domain"], e["subject"], int(e["slice"]), bool(e["labeled"]),
        ))
    subjects = {}
    for s in samples:
        if subjects.setdefault(s.subject_id, s.domain_id) != s.domain_id:
            raise CorruptDatasetError(f"subject {s.subject_id} appears in several domains")
    meta = {k: manifest[k] for k in ("generator", "domains") if k in manifest}
    return Dataset(samples, num_classes, meta)


def labeled_count(fraction: float, n: int) -> int:
    # round first so 0.3 * 10 = 3.0000000000000004 does not ceil to 4
    return min(n, math.ceil(round(fraction * n, 9)))


def split(
    ds: Dataset, holdout_domain: str, labeled_fraction: float, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Leave-one-domain-out split with per-domain labeled-subject selection.

    The test set is every subject of ``holdout_domain``. In every source
    domain the first ``ceil(fraction * N)`` subjects of a seeded shuffle
    keep their masks as labeled; the rest become unlabeled.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise ConfigError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    if holdout_domain not in ds.domains:
        raise ConfigError(f"holdout domain {holdout_domain!r} not in dataset; valid domains: {ds.domains}")
    rng = np.random.default_rng(seed)
    labeled: set[str] = set()
    for d in ds.domains:
        if d == holdout_domain:
            continue
        subjects = ds.subjects(d)
        order = rng.permutation(len(subjects))
        labeled.update(subjects[i] for i in order[: labeled_count(labeled_fraction, len(subjects))])
    train, test = [], []
    for s in ds.samples:
        if s.domain_id == holdout_domain:
            test.append(replace(s, labeled=s.mask is not None))
        else:
            train.append(replace(s, labeled=s.subject_id in labeled and s.mask is not None))
    return Dataset(train, ds.num_classes, ds.meta), Dataset(test, ds.num_classes, ds.meta)


def intensity_histogram(image: np.ndarray, bins: int = 32) -> np.ndarray:
    hist, _ = np.histogram(image, bins=bins, range=(0.0, 1.0))
    return hist / hist.sum()
