import numpy as np
import torch


def field_to_torch(field, dtype=torch.float64):
    """[H][W][D] nested list -> [1, D, H, W] tensor."""
    return torch.tensor(field, dtype=dtype).permute(2, 0, 1).unsqueeze(0)


def torch_to_field(t):
    """[1, C, H, W] tensor -> [H][W][C] nested list."""
    return t[0].permute(1, 2, 0).tolist()


def rel_err(a, b):
    """Norm-wise relative error ||a - b|| / ||b||."""
    a = torch.as_tensor(a, dtype=torch.float64).flatten()
    b = torch.as_tensor(b, dtype=torch.float64).flatten()
    return float(torch.linalg.vector_norm(a - b) / torch.linalg.vector_norm(b).clamp_min(1e-300))


def central_difference(f, tensor, indices, step):
    """d f / d tensor[idx] by central differences, for each flat index.

    ``f`` is re-evaluated under ``torch.no_grad`` with ``tensor`` perturbed
    in place; the original value is restored afterwards.
    """
    flat = tensor.data.view(-1)
    out = []
    with torch.no_grad():
        for i in indices:
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(f())
            flat[i] = orig - step
            down = float(f())
            flat[i] = orig
            out.append((up - down) / (2 * step))
    return torch.tensor(out, dtype=torch.float64)


def analytic_grad(f, tensor, indices):
    if tensor.grad is not None:
        tensor.grad = None
    f().backward()
    return tensor.grad.detach().reshape(-1)[list(indices)].double()


def sample_indices(tensor, n, seed=0):
    rng = np.random.default_rng(seed)
    numel = tensor.numel()
    return sorted(rng.choice(numel, size=min(n, numel), replace=False).tolist())


# (criterion number, passed, detail) rows printed at the end of the session
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []
