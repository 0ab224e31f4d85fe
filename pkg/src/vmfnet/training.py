"""Composite objective, semi-supervised batching and the training driver."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml

from .checkpoint import ModelState, save_checkpoint
from .data import Dataset, split
from .errors import ConfigError, InvalidInputError
from .losses import dice_loss, one_hot, reconstruction_loss
from .networks import ModelConfig, VMFNet
from .vmf import vmf_loss

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 2000
    batch_size: int = 4
    lambda_dice: float = 1.0  # weight when a mask exists; 0 otherwise
    labeled_fraction: float = 1.0
    seed: int = 0
    use_rec_loss: bool = True
    use_vmf_loss: bool = True
    log_every: int = 100
    checkpoint_every: int = 500
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_config(path: str | Path) -> TrainConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return TrainConfig.from_dict(raw)


def dump_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


@dataclass
class LossReport:
    dice_loss: float | None
    rec_loss: float
    vmf_loss: float
    total: float
    labeled_count_in_batch: int


@dataclass
class Batch:
    images: torch.Tensor  # [N, C, H, W]
    labels: torch.Tensor  # [N, H, W], meaningful only where labeled
    labeled: torch.Tensor  # [N] bool

    def __len__(self) -> int:
        return self.images.shape[0]


def make_batch(samples, dtype=torch.float32) -> Batch:
    if not samples:
        raise InvalidInputError("cannot build an empty batch")
    images = torch.from_numpy(np.stack([s.image for s in samples])[:, None]).to(dtype)
    labels = torch.from_numpy(
        np.stack([s.mask if s.mask is not None else np.zeros_like(s.image, np.uint8) for s in samples])
    ).long()
    labeled = torch.tensor([bool(s.labeled and s.mask is not None) for s in samples])
    return Batch(images, labels, labeled)


def forward_loss(
    model: VMFNet,
    batch: Batch,
    lambda_dice: float = 1.0,
    use_rec: bool = True,
    use_vmf: bool = True,
) -> tuple[torch.Tensor, LossReport]:
    """Full pipeline plus the gated objective.

    The Dice term is averaged over labeled samples only and is absent when
    the batch has none; reconstruction and vMF terms use every sample.
    """
    if len(batch) == 0:
        raise InvalidInputError("empty batch")
    out = model(batch.images)
    rec = reconstruction_loss(batch.images, out.reconstruction)
    clu = vmf_loss(out.features, out.kernels)
    total = torch.zeros((), dtype=rec.dtype)
    if use_rec:
        total = total + rec
    if use_vmf:
        total = total + clu
    n_lab = int(batch.labeled.sum())
    dice = None
    if n_lab:
        seg = out.segmentation[batch.labeled]
        truth = one_hot(batch.labels[batch.labeled], seg.shape[1]).to(seg.dtype)
        dice = dice_loss(seg, truth)
        total = total + lambda_dice * dice
    report = LossReport(
        None if dice is None else dice.item(), rec.item(), clu.item(), total.item(), n_lab
    )
    return total, report


class BatchSampler:
    """Uniform over source subjects, then uniform over the subject's slices."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 0xB47C])
        by_subject: dict[str, list[int]] = {}
        for i, s in enumerate(dataset.samples):
            by_subject.setdefault(s.subject_id, []).append(i)
        self.subjects = [by_subject[k] for k in sorted(by_subject)]

    def next_indices(self) -> list[int]:
        out = []
        for _ in range(self.batch_size):
            subj = self.subjects[self.rng.integers(len(self.subjects))]
            out.append(subj[self.rng.integers(len(subj))])
        return out


@dataclass
class TrainResult:
    state: ModelState
    log: list[dict]
    train_set: Dataset
    test_set: Dataset


def _window_record(iteration: int, reports: list[LossReport], t0: float) -> dict:
    dice = [r.dice_loss for r in reports if r.dice_loss is not None]
    return {
        "iteration": iteration,
        "dice_loss": float(np.mean(dice)) if dice else None,
        "rec_loss": float(np.mean([r.rec_loss for r in reports])),
        "vmf_loss": float(np.mean([r.vmf_loss for r in reports])),
        "total": float(np.mean([r.total for r in reports])),
        "labeled_count": int(sum(r.labeled_count_in_batch for r in reports)),
        "wall_clock": round(time.perf_counter() - t0, 3),
    }


def build_optimizer(model: VMFNet, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def fit(
    config: TrainConfig,
    train_set: Dataset,
    out_dir: str | Path | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[ModelState, list[dict]]:
    """Optimize a fresh model on an already-split training set."""
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    torch.manual_seed(config.seed)
    model = VMFNet(config.model, seed=config.seed)
    model.train()
    opt = build_optimizer(model, config.learning_rate)
    sampler = BatchSampler(train_set, config.batch_size, config.seed)
    all_batch = make_batch(train_set.samples)

    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        dump_config(config, out / "config.yaml")
        metrics_file = open(out / "metrics.jsonl", "w")

    def snapshot(it: int) -> ModelState:
        return ModelState(model, opt.state_dict(), it, config.seed, {"train_config": config.to_dict()})

    records, window = [], []
    t0 = time.perf_counter()
    try:
        for it in range(1, config.iterations + 1):
            idx = torch.as_tensor(sampler.next_indices())
            batch = Batch(all_batch.images[idx], all_batch.labels[idx], all_batch.labeled[idx])
            total, report = forward_loss(
                model, batch, config.lambda_dice, config.use_rec_loss, config.use_vmf_loss
            )
            opt.zero_grad(set_to_none=True)
            if total.requires_grad:
                total.backward()
            opt.step()
            window.append(report)
            if it % config.log_every == 0 or it == config.iterations:
                rec = _window_record(it, window, t0)
                window = []
                records.append(rec)
                log.info("iter %d total %.4f", it, rec["total"])
                if metrics_file:
                    metrics_file.write(json.dumps(rec) + "\n")
                    metrics_file.flush()
                if on_record:
                    on_record(rec)
            if out is not None and (it % config.checkpoint_every == 0):
                save_checkpoint(out / "checkpoints" / f"iter_{it:06d}.ckpt", snapshot(it))
    finally:
        if metrics_file:
            metrics_file.close()
    model.eval()
    state = snapshot(config.iterations)
    if out is not None:
        save_checkpoint(out / "checkpoints" / "final.ckpt", state)
    return state, records


def train(
    config: TrainConfig,
    dataset: Dataset,
    holdout_domain: str,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Leave-one-domain-out training: hold out one domain, train on the rest."""
    if len(dataset.domains) < 2:
        raise ConfigError(f"need at least 2 domains, dataset has {dataset.domains}")
    if holdout_domain not in dataset.domains:
        raise ConfigError(
            f"holdout domain {holdout_domain!r} not in dataset; valid domains: {dataset.domains}"
        )
    train_set, test_set = split(dataset, holdout_domain, config.labeled_fraction, config.seed)
    state, records = fit(config, train_set, out_dir)
    state.meta["holdout_domain"] = holdout_domain
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoints" / "final.ckpt", state)
    return TrainResult(state, records, train_set, test_set)


ABLATION_VARIANTS = {
    "full": (True, True),
    "no_rec": (False, True),
    "no_vmf": (True, False),
    "neither": (False, False),
}


def run_ablation(
    config: TrainConfig,
    dataset: Dataset,
    holdout_domain: str,
    variants: dict[str, tuple[bool, bool]] | None = None,
    hd_variant: str = "modified",
) -> list[dict]:
    """Train the loss-ablation variants with identical seeds and batches.

    Returns one row per variant with held-out mean foreground Dice and HD.
    """
    from .evaluation import evaluate

    rows = []
    for name, (use_rec, use_vmf) in (variants or ABLATION_VARIANTS).items():
        cfg = replace(config, use_rec_loss=use_rec, use_vmf_loss=use_vmf)
        result = train(cfg, dataset, holdout_domain)
        report = evaluate(result.state.model, result.test_set, hd_variant=hd_variant)
        rows.append({
            "variant": name,
            "use_rec_loss": use_rec,
            "use_vmf_loss": use_vmf,
            "dice": report.mean_dice,
            "hd": report.mean_hd,
            "final_total_loss": result.log[-1]["total"] if result.log else None,
        })
    return rows
