"""Segmentation metrics, held-out evaluation, the domain-alignment probe and
likelihood-channel visualization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree

from .data import Dataset
from .errors import ConfigError, ShapeError
from .networks import VMFNet

HD_VARIANTS = ("modified", "standard")
_CROSS = ndimage.generate_binary_structure(2, 1)


def dice_score(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Dice overlap in percent for one class; 100 when both sets are empty."""
    p = np.asarray(pred) == class_id
    t = np.asarray(truth) == class_id
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} and truth {t.shape} differ")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 100.0
    return 200.0 * int((p & t).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with at least one 4-neighbour outside it (image edge counts as outside)."""
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, _CROSS, border_value=0)


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a``, the distance to the nearest point of ``b``."""
    return cKDTree(b).query(a)[0]


def hausdorff(pred: np.ndarray, truth: np.ndarray, class_id: int, variant: str = "modified") -> float:
    """Hausdorff distance (pixels) between the class boundaries.

    ``standard`` is the max of the two directed maxima; ``modified``
    (Dubuisson and Jain) the max of the two directed means. Returns NaN when
    either mask has no pixel of ``class_id``; callers count and exclude it.
    """
    if variant not in HD_VARIANTS:
        raise ValueError(f"variant must be one of {HD_VARIANTS}, got {variant!r}")
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} and truth {truth.shape} differ")
    a = np.argwhere(boundary(pred == class_id)).astype(np.float64)
    b = np.argwhere(boundary(truth == class_id)).astype(np.float64)
    if len(a) == 0 or len(b) == 0:
        return math.nan
    dab, dba = _directed(a, b), _directed(b, a)
    if variant == "standard":
        return float(max(dab.max(), dba.max()))
    return float(max(dab.mean(), dba.mean()))


@dataclass
class MetricReport:
    """Per-subject Dice (%) and HD (pixels) with their aggregates.

    Standard deviations are population (ddof=0) over subjects. Subject-class
    HD values that are undefined are NaN in ``per_subject`` and are excluded
    from the aggregates; ``hd_undefined`` counts them.
    """

    classes: list[int]
    hd_variant: str
    per_subject: list[dict] = field(default_factory=list)

    def _matrix(self, key: str) -> np.ndarray:
        return np.array([[row[key][c] for c in self.classes] for row in self.per_subject], dtype=float)

    @property
    def class_dice(self) -> dict[int, tuple[float, float]]:
        m = self._matrix("dice")
        return {c: (float(m[:, i].mean()), float(m[:, i].std())) for i, c in enumerate(self.classes)}

    @property
    def class_hd(self) -> dict[int, tuple[float, float]]:
        m = self._matrix("hd")
        out = {}
        for i, c in enumerate(self.classes):
            col = m[:, i][~np.isnan(m[:, i])]
            out[c] = (float(col.mean()), float(col.std())) if len(col) else (math.nan, math.nan)
        return out

    @property
    def subject_mean_dice(self) -> np.ndarray:
        return self._matrix("dice").mean(axis=1)

    @property
    def mean_dice(self) -> float:
        return float(self.subject_mean_dice.mean())

    @property
    def std_dice(self) -> float:
        return float(self.subject_mean_dice.std())

    @property
    def subject_mean_hd(self) -> np.ndarray:
        m = self._matrix("hd")
        with np.errstate(all="ignore"):
            return np.array([row[~np.isnan(row)].mean() if (~np.isnan(row)).any() else np.nan for row in m])

    @property
    def mean_hd(self) -> float:
        v = self.subject_mean_hd
        v = v[~np.isnan(v)]
        return float(v.mean()) if len(v) else math.nan

    @property
    def std_hd(self) -> float:
        v = self.subject_mean_hd
        v = v[~np.isnan(v)]
        return float(v.std()) if len(v) else math.nan

    @property
    def hd_undefined(self) -> int:
        return int(sum(row["hd_undefined"] for row in self.per_subject))

    def records(self) -> list[dict]:
        """Machine-readable rows: one per subject plus a summary row."""
        rows = [
            {"kind": "subject", **row,
             "dice": {str(c): v for c, v in row["dice"].items()},
             "hd": {str(c): (None if math.isnan(v) else v) for c, v in row["hd"].items()}}
            for row in self.per_subject
        ]
        rows.append({
            "kind": "summary", "hd_variant": self.hd_variant,
            "mean_dice": self.mean_dice, "std_dice": self.std_dice,
            "mean_hd": self.mean_hd, "std_hd": self.std_hd,
            "class_dice": {str(c): v for c, v in self.class_dice.items()},
            "class_hd": {str(c): v for c, v in self.class_hd.items()},
            "hd_undefined": self.hd_undefined,
        })
        return rows

    def table(self, names: dict[int, str] | None = None) -> str:
        names = names or {}
        head = ["subject"] + [f"Dice {names.get(c, c)}" for c in self.classes] + ["Dice mean", f"HD({self.hd_variant})"]
        lines = ["\t".join(head)]
        for row, md, mh in zip(self.per_subject, self.subject_mean_dice, self.subject_mean_hd):
            cells = [row["subject"]] + [f"{row['dice'][c]:.2f}" for c in self.classes] + [f"{md:.2f}", f"{mh:.2f}"]
            lines.append("\t".join(cells))
        cd = self.class_dice
        lines.append("\t".join(
            ["mean"] + [f"{cd[c][0]:.2f}±{cd[c][1]:.1f}" for c in self.classes]
            + [f"{self.mean_dice:.2f}±{self.std_dice:.1f}", f"{self.mean_hd:.2f}±{self.std_hd:.1f}"]
        ))
        if self.hd_undefined:
            lines.append(f"# {self.hd_undefined} undefined HD values excluded")
        return "\n".join(lines)


def subject_metrics(
    pred: np.ndarray, truth: np.ndarray, classes: list[int], hd_variant: str = "modified"
) -> tuple[dict, dict, int]:
    """Dice over the whole slice stack, HD averaged over slices where defined.

    ``pred`` and ``truth`` are ``[S, H, W]`` label stacks of one subject.
    """
    dice = {c: dice_score(pred, truth, c) for c in classes}
    hd, undefined = {}, 0
    for c in classes:
        vals = [hausdorff(p, t, c, hd_variant) for p, t in zip(pred, truth)]
        defined = [v for v in vals if not math.isnan(v)]
        if defined:
            hd[c] = float(np.mean(defined))
        else:
            hd[c] = math.nan
            undefined += 1
    return dice, hd, undefined


def report_from_predictions(
    dataset: Dataset, predictions: dict[str, np.ndarray], hd_variant: str = "modified"
) -> MetricReport:
    """Build a report from per-subject label stacks keyed by subject id."""
    classes = list(range(1, dataset.num_classes + 1))
    report = MetricReport(classes, hd_variant)
    for subj in dataset.subjects():
        samples = dataset.subject_samples(subj)
        truth = np.stack([s.mask for s in samples])
        dice, hd, undefined = subject_metrics(predictions[subj], truth, classes, hd_variant)
        report.per_subject.append({
            "subject": subj, "domain": samples[0].domain_id,
            "dice": dice, "hd": hd, "hd_undefined": undefined,
        })
    return report


@torch.no_grad()
def predict_subject(model: VMFNet, images: np.ndarray) -> np.ndarray:
    """Hard label stack ``[S, H, W]`` for a stack of ``[S, H, W]`` images."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.asarray(images)[:, None]).to(dtype)
    labels = model.predict_labels(x).numpy().astype(np.uint8)
    model.train(was_training)
    return labels


def evaluate(model: VMFNet, dataset: Dataset, hd_variant: str = "modified") -> MetricReport:
    preds = {}
    for subj in dataset.subjects():
        imgs = np.stack([s.image for s in dataset.subject_samples(subj)])
        preds[subj] = predict_subject(model, imgs)
    return report_from_predictions(dataset, preds, hd_variant)


# ----------------------------------------------------------------- alignment probe

REPRESENTATIONS = ("image", "features", "likelihoods")


@torch.no_grad()
def pooled_representation(model: VMFNet | None, dataset: Dataset, representation: str) -> np.ndarray:
    """Foreground-masked average of a representation, one row per sample."""
    if representation not in REPRESENTATIONS:
        raise ConfigError(f"representation must be one of {REPRESENTATIONS}, got {representation!r}")
    if any(s.mask is None for s in dataset.samples):
        raise ConfigError("alignment probe needs masks for every sample")
    x = torch.from_numpy(np.stack([s.image for s in dataset.samples])[:, None]).double()
    fg = torch.from_numpy(np.stack([s.mask > 0 for s in dataset.samples])[:, None]).double()
    if representation == "image":
        rep = x
    else:
        if model is None:
            raise ConfigError(f"representation {representation!r} needs a model")
        model.eval()
        dtype = next(model.parameters()).dtype
        rows = []
        for i in range(0, len(x), 32):
            z, lik, _ = model.decompose(x[i:i + 32].to(dtype))
            rows.append((z if representation == "features" else lik).double())
        rep = torch.cat(rows)
        # a feature position counts as foreground if it covers any foreground pixel
        fg = F.max_pool2d(fg, 2)
    area = fg.sum(dim=(2, 3)).clamp_min(1.0)
    return ((rep * fg).sum(dim=(2, 3)) / area).numpy()


def _subject_split(dataset: Dataset, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """60/20/20 train/val/test split of subjects within every domain."""
    role = {}
    for d in dataset.domains:
        subjects = dataset.subjects(d)
        if len(subjects) < 3:
            raise ConfigError(f"domain {d} has {len(subjects)} subjects; the probe needs >= 3")
        order = [subjects[i] for i in rng.permutation(len(subjects))]
        n_val = max(1, round(0.2 * len(order)))
        n_test = max(1, round(0.2 * len(order)))
        for s in order[:n_test]:
            role[s] = 2
        for s in order[n_test:n_test + n_val]:
            role[s] = 1
        for s in order[n_test + n_val:]:
            role[s] = 0
    r = np.array([role[s.subject_id] for s in dataset.samples])
    return r == 0, r == 1, r == 2


def probe_cross_entropy(
    x: np.ndarray,
    y: np.ndarray,
    masks: tuple[np.ndarray, np.ndarray, np.ndarray],
    num_classes: int,
    seed: int = 0,
    hidden: int = 32,
    epochs: int = 300,
    lr: float = 1e-2,
    weight_decay: float = 1e-4,
) -> float:
    """Train a two-layer perceptron and return its held-out cross-entropy.

    The output layer starts at zero so epoch 0 predicts the uniform
    distribution; the epoch with the lowest validation loss is kept.
    """
    train_m, val_m, test_m = masks
    gen = torch.Generator().manual_seed(seed)
    mean, std = x[train_m].mean(0), x[train_m].std(0) + 1e-8
    xt = torch.from_numpy((x - mean) / std).float()
    yt = torch.from_numpy(y).long()
    net = torch.nn.Sequential(torch.nn.Linear(x.shape[1], hidden), torch.nn.ReLU(), torch.nn.Linear(hidden, num_classes))
    with torch.no_grad():
        torch.nn.init.kaiming_uniform_(net[0].weight, nonlinearity="relu", generator=gen)
        net[0].bias.zero_()
        net[2].weight.zero_()
        net[2].bias.zero_()
    opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)
    tr, va, te = (torch.from_numpy(m) for m in masks)

    def ce(m):
        with torch.no_grad():
            return float(F.cross_entropy(net(xt[m]), yt[m]))

    best_val, best_state = ce(va), {k: v.clone() for k, v in net.state_dict().items()}
    for _ in range(epochs):
        opt.zero_grad()
        F.cross_entropy(net(xt[tr]), yt[tr]).backward()
        opt.step()
        v = ce(va)
        if v < best_val:
            best_val, best_state = v, {k: v_.clone() for k, v_ in net.state_dict().items()}
    net.load_state_dict(best_state)
    return ce(te)


def alignment_probe(
    model: VMFNet | None,
    dataset: Dataset,
    representation: str,
    seed: int = 0,
    shuffle_labels: bool = False,
) -> float:
    """Held-out cross-entropy of a domain classifier on a pooled representation.

    Higher means the domains are harder to tell apart, i.e. better aligned.
    Foreground comes from the dataset masks.
    """
    domains = dataset.domains
    if len(domains) < 2:
        raise ConfigError(f"alignment probe needs >= 2 domains, got {domains}")
    x = pooled_representation(model, dataset, representation)
    y = np.array([domains.index(s.domain_id) for s in dataset.samples])
    rng = np.random.default_rng([seed, 0x9B0])
    masks = _subject_split(dataset, rng)
    if shuffle_labels:
        y = rng.permutation(y)
    return probe_cross_entropy(x, y, masks, len(domains), seed=seed)


# ----------------------------------------------------------------- visualization

_CLASS_COLOURS = np.array([[0, 0, 0], [230, 40, 40], [40, 200, 60], [50, 90, 240]] + [[240, 200, 40]] * 16)


def _to_uint8(a: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 255]; a constant array maps to zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, np.uint8)
    return np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)


def rank_channels(likelihoods: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Kernel indices sorted by mean activation inside the predicted foreground.

    ``likelihoods`` is ``[J, h, w]`` and ``labels`` is ``[H, W]`` at an
    integer multiple of the likelihood resolution. Falls back to the whole
    field when nothing is predicted as foreground. Ties keep kernel order.
    """
    j, h, w = likelihoods.shape
    fy, fx = labels.shape[0] // h, labels.shape[1] // w
    fg = (labels > 0).reshape(h, fy, w, fx).any(axis=(1, 3))
    if not fg.any():
        fg = np.ones((h, w), bool)
    score = likelihoods[:, fg].mean(axis=1)
    return np.argsort(-score, kind="stable")


def write_visualization(
    image: np.ndarray,
    reconstruction: np.ndarray,
    labels: np.ndarray,
    likelihoods: np.ndarray,
    out_dir: str | Path,
    top_k: int = 8,
) -> list[Path]:
    """Write input, reconstruction, prediction overlay and the top-k likelihood channels.

    File names: ``input.png``, ``reconstruction.png``, ``prediction.png`` and
    ``likelihood_rank<r>_kernel<j>.png`` for ranks 1..top_k.
    """
    num_kernels = likelihoods.shape[0]
    if not 1 <= top_k <= num_kernels:
        raise ConfigError(f"top_k must be in [1, {num_kernels}], got {top_k}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    def save(arr, name, mode="L"):
        p = out / name
        Image.fromarray(arr, mode=mode).save(p)
        paths.append(p)

    save(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), "input.png")
    save(np.round(np.clip(reconstruction, 0, 1) * 255).astype(np.uint8), "reconstruction.png")
    grey = np.repeat(np.clip(image, 0, 1)[..., None] * 255, 3, axis=2)
    colour = _CLASS_COLOURS[labels]
    overlay = np.where(labels[..., None] > 0, 0.5 * grey + 0.5 * colour, grey)
    save(np.round(overlay).astype(np.uint8), "prediction.png", mode="RGB")

    fy = image.shape[0] // likelihoods.shape[1]
    fx = image.shape[1] // likelihoods.shape[2]
    for rank, j in enumerate(rank_channels(likelihoods, labels)[:top_k], start=1):
        channel = np.kron(likelihoods[j], np.ones((fy, fx)))  # nearest upsampling
        save(_to_uint8(channel), f"likelihood_rank{rank}_kernel{j}.png")
    return paths


@torch.no_grad()
def export_likelihood_maps(model: VMFNet, image: np.ndarray, out_dir: str | Path, top_k: int = 8) -> list[Path]:
    """Run ``model`` on one ``[H, W]`` image and write its visualization files."""
    if not 1 <= top_k <= model.config.num_kernels:
        raise ConfigError(f"top_k must be in [1, {model.config.num_kernels}], got {top_k}")
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.asarray(image)[None, None]).to(dtype)
    out = model(x)
    labels = out.segmentation.argmax(dim=1)[0].numpy()
    return write_visualization(
        np.asarray(image), out.reconstruction[0, 0].double().numpy(), labels,
        out.likelihoods[0].double().numpy(), out_dir, top_k,
    )
