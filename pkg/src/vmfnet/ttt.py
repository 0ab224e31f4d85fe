"""Per-subject test-time training on the reconstruction loss."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset
from .errors import ConfigError, InvalidInputError
from .evaluation import MetricReport, predict_subject, report_from_predictions
from .losses import reconstruction_loss
from .networks import VMFNet
from .vmf import recompose


@dataclass
class TTTConfig:
    iterations: int = 15
    learning_rate: float = 1e-6
    # keep the unadapted model among the candidates so selection never
    # picks a worse reconstruction than no adaptation at all
    include_initial: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations == 0 and not self.include_initial:
            raise ConfigError("zero iterations without the initial state leaves no candidate")


@dataclass
class Adaptation:
    model: VMFNet
    predictions: np.ndarray  # [S, H, W] labels from the selected snapshot
    errors: list[float]  # reconstruction error of snapshot k (0 = unadapted)
    selected: int

    @property
    def initial_error(self) -> float:
        return self.errors[0]

    @property
    def selected_error(self) -> float:
        return self.errors[self.selected]


def _adapted_parameters(model: VMFNet) -> list[torch.nn.Parameter]:
    return [*model.encoder.parameters(), *model.reconstructor.parameters()]


def _frozen_state(model: VMFNet) -> dict[str, torch.Tensor]:
    return {
        **{f"kernels.{k}": v for k, v in model.kernels.state_dict().items()},
        **{f"task.{k}": v for k, v in model.task.state_dict().items()},
    }


def reconstruction_error(model: VMFNet, x: torch.Tensor) -> torch.Tensor:
    _, lik, mu = model.decompose(x)
    return reconstruction_loss(x, model.reconstruct(recompose(lik, mu)))


def adapt_subject(model: VMFNet, images: np.ndarray, config: TTTConfig | None = None) -> Adaptation:
    """Fine-tune encoder and reconstructor on one subject, then predict.

    Works on a private copy; ``model`` itself is never modified. Kernels and
    the task head are frozen and batch-norm statistics stay at their
    trained values (eval-mode forward) while gradients still reach the conv
    weights. All slices of the subject form one batch per step.
    """
    config = config or TTTConfig()
    images = np.asarray(images)
    if images.ndim != 3 or len(images) == 0:
        raise InvalidInputError(f"expected a non-empty [S, H, W] image stack, got shape {images.shape}")
    work = copy.deepcopy(model)
    work.eval()
    for p in work.parameters():
        p.requires_grad_(False)
    params = _adapted_parameters(work)
    for p in params:
        p.requires_grad_(True)
    frozen_before = {k: v.clone() for k, v in _frozen_state(work).items()}

    dtype = next(work.parameters()).dtype
    x = torch.from_numpy(images[:, None]).to(dtype)
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    errors, snapshots = [], []
    for step in range(config.iterations + 1):
        loss = reconstruction_error(work, x)
        errors.append(loss.item())
        snapshots.append([p.detach().clone() for p in params])
        if step == config.iterations:
            break
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    first = 0 if config.include_initial else 1
    selected = first + int(np.argmin(errors[first:]))
    with torch.no_grad():
        for p, v in zip(params, snapshots[selected]):
            p.copy_(v)
        for p in work.parameters():
            p.requires_grad_(False)
    for k, v in _frozen_state(work).items():
        if not torch.equal(v, frozen_before[k]):
            raise RuntimeError(f"frozen tensor {k} changed during test-time training")
    predictions = work.predict_labels(x).numpy().astype(np.uint8)
    return Adaptation(work, predictions, errors, selected)


@dataclass
class TTTReport:
    baseline: MetricReport
    adapted: MetricReport
    rows: list[dict] = field(default_factory=list)
    traces: list[dict] = field(default_factory=list)

    def table(self) -> str:
        lines = ["subject\tdice_base\tdice_ttt\thd_base\thd_ttt\trec_before\trec_after\tselected"]
        for r in self.rows:
            lines.append(
                f"{r['subject']}\t{r['dice_baseline']:.2f}\t{r['dice_ttt']:.2f}\t{r['hd_baseline']:.2f}\t"
                f"{r['hd_ttt']:.2f}\t{r['rec_error_before']:.5f}\t{r['rec_error_after']:.5f}\t{r['selected_step']}"
            )
        lines.append(
            f"mean\t{self.baseline.mean_dice:.2f}\t{self.adapted.mean_dice:.2f}\t"
            f"{self.baseline.mean_hd:.2f}\t{self.adapted.mean_hd:.2f}\t"
            f"{np.mean([r['rec_error_before'] for r in self.rows]):.5f}\t"
            f"{np.mean([r['rec_error_after'] for r in self.rows]):.5f}\t-"
        )
        return "\n".join(lines)


def ttt_evaluate(
    model: VMFNet,
    test_set: Dataset,
    config: TTTConfig | None = None,
    hd_variant: str = "modified",
) -> TTTReport:
    """Paired per-subject metrics without and with test-time training."""
    config = config or TTTConfig()
    base_preds, ttt_preds, adaptations = {}, {}, {}
    for subj in test_set.subjects():
        images = np.stack([s.image for s in test_set.subject_samples(subj)])
        a = adapt_subject(model, images, config)
        base_preds[subj] = predict_subject(model, images)
        ttt_preds[subj] = a.predictions
        adaptations[subj] = a
    baseline = report_from_predictions(test_set, base_preds, hd_variant)
    adapted = report_from_predictions(test_set, ttt_preds, hd_variant)
    report = TTTReport(baseline, adapted)
    for b, t, bd, td, bh, th in zip(
        baseline.per_subject, adapted.per_subject,
        baseline.subject_mean_dice, adapted.subject_mean_dice,
        baseline.subject_mean_hd, adapted.subject_mean_hd,
    ):
        a = adaptations[b["subject"]]
        report.rows.append({
            "subject": b["subject"], "domain": b["domain"],
            "dice_baseline": float(bd), "dice_ttt": float(td),
            "hd_baseline": float(bh), "hd_ttt": float(th),
            "rec_error_before": a.initial_error, "rec_error_after": a.selected_error,
            "selected_step": a.selected,
        })
        report.traces.append({"subject": b["subject"], "errors": a.errors, "selected_step": a.selected})
    return report

