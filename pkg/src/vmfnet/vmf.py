"""von-Mises-Fisher kernel decomposition of feature maps.

All tensors are channel-first and batched, matching torch convolution
layouts: feature fields are ``[N, D, H, W]``, likelihood fields are
``[N, J, H, W]`` and kernel banks are ``[J, D]``.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import DegenerateKernelError, InvalidInputError, ShapeError

EPS = 1e-8
DEFAULT_SIGMA = 30.0
DEFAULT_NUM_KERNELS = 12
LIKELIHOOD_NORMS = ("l1", "l2")


def _check_field(z: torch.Tensor, name: str = "z") -> None:
    if z.dim() != 4:
        raise ShapeError(f"{name} must be [N, C, H, W], got shape {tuple(z.shape)}")


def _check_kernels(z: torch.Tensor, mu: torch.Tensor) -> None:
    _check_field(z)
    if mu.dim() != 2:
        raise ShapeError(f"kernel bank must be [J, D], got shape {tuple(mu.shape)}")
    if z.shape[1] != mu.shape[1]:
        raise ShapeError(
            f"feature dim {z.shape[1]} does not match kernel dim {mu.shape[1]}"
        )


def normalize_features(raw: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """L2-normalize every position vector along the channel axis.

    Vectors shorter than ``eps`` are divided by ``eps`` instead, so an
    all-zero position stays zero rather than turning into NaN.
    """
    _check_field(raw, "raw")
    if not torch.isfinite(raw).all():
        raise InvalidInputError("feature tensor contains non-finite values")
    norm = torch.linalg.vector_norm(raw, dim=1, keepdim=True)
    return raw / norm.clamp_min(eps)


def project_kernels(mu: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Return the bank with every row rescaled to unit L2 norm."""
    if mu.dim() != 2:
        raise ShapeError(f"kernel bank must be [J, D], got shape {tuple(mu.shape)}")
    norm = torch.linalg.vector_norm(mu, dim=1, keepdim=True)
    bad = (norm <= eps).flatten()
    if bad.any():
        rows = bad.nonzero().flatten().tolist()
        raise DegenerateKernelError(f"kernel rows {rows} have norm <= {eps}")
    return mu / norm


def cosine_map(z: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """Inner products mu_j . z_i as a ``[N, J, H, W]`` map."""
    _check_kernels(z, mu)
    return torch.einsum("ndhw,jd->njhw", z, mu)


def vmf_likelihoods(
    z: torch.Tensor,
    mu: torch.Tensor,
    sigma: float = DEFAULT_SIGMA,
    norm: str = "l1",
) -> torch.Tensor:
    """Per-position normalized vMF likelihoods.

    ``exp(sigma * mu_j . z_i)`` is divided by its channel sum (``norm="l1"``,
    equivalently a softmax) or by its channel L2 norm (``norm="l2"``). The
    vMF normalizing constant cancels in both cases and is never computed.
    """
    logits = sigma * cosine_map(z, mu)
    if norm == "l1":
        return torch.softmax(logits, dim=1)
    if norm == "l2":
        shifted = torch.exp(logits - logits.amax(dim=1, keepdim=True))
        return shifted / torch.linalg.vector_norm(shifted, dim=1, keepdim=True)
    raise ValueError(f"norm must be one of {LIKELIHOOD_NORMS}, got {norm!r}")


def first_max_onehot(x: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """One-hot of the maximum along ``dim``; ties go to the lowest index."""
    is_max = x == x.amax(dim=dim, keepdim=True)
    return is_max & (is_max.cumsum(dim=dim) == 1)


def vmf_loss(z: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """Cluster loss: negative mean over positions of the best kernel match.

    Averaged over the batch as well, so the value stays in [-1, 1].
    """
    cos = cosine_map(z, mu)
    best = (cos * first_max_onehot(cos.detach())).sum(dim=1)
    return -best.mean()


def recompose(likelihoods: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """Likelihood-weighted combination of kernels at every position."""
    _check_field(likelihoods, "likelihoods")
    if mu.dim() != 2 or likelihoods.shape[1] != mu.shape[0]:
        raise ShapeError(
            f"likelihood channels {likelihoods.shape[1]} do not match "
            f"kernel bank {tuple(mu.shape)}"
        )
    return torch.einsum("njhw,jd->ndhw", likelihoods, mu)


def random_unit_kernels(
    num_kernels: int, dim: int, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Draw kernels uniformly on the unit sphere."""
    mu = torch.randn(num_kernels, dim, generator=generator)
    return project_kernels(mu)


class KernelBank(nn.Module):
    """Learnable vMF mean directions with a fixed concentration.

    The stored parameter is unconstrained; :meth:`forward` returns the
    row-normalized bank, so every consumer sees unit-norm kernels.
    """

    def __init__(
        self,
        num_kernels: int = DEFAULT_NUM_KERNELS,
        dim: int = 64,
        sigma: float = DEFAULT_SIGMA,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if num_kernels < 2:
            raise ValueError(f"need at least 2 kernels, got {num_kernels}")
        if not sigma > 0 or not math.isfinite(sigma):
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.sigma = float(sigma)
        self.weight = nn.Parameter(random_unit_kernels(num_kernels, dim, generator))

    @property
    def num_kernels(self) -> int:
        return self.weight.shape[0]

    def forward(self) -> torch.Tensor:
        return project_kernels(self.weight)

    def extra_repr(self) -> str:
        return f"num_kernels={self.weight.shape[0]}, dim={self.weight.shape[1]}, sigma={self.sigma}"
