"""Central finite-difference oracle shared by the gradient checks."""

import torch


def fd_relative_errors(loss_fn, params: dict, coords_per_tensor: int = 6, eps: float = 1e-5, seed: int = 0,
                       floor: float = 1e-5):
    """Compare autograd against central differences on sampled coordinates.

    Returns {name: relative error} with error = |a - n| / max(|a|, |n|, floor)
    over the sampled coordinates (as vectors). The floor covers tensors whose
    true gradient is identically zero, e.g. attention key biases.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    errors = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        idx = torch.randperm(flat.numel(), generator=gen)[:coords_per_tensor]
        analytic, numeric = [], []
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(g.view(-1)[i].item())
        a = torch.tensor(analytic, dtype=torch.float64)
        n = torch.tensor(numeric, dtype=torch.float64)
        scale = max(a.norm().item(), n.norm().item(), floor)
        errors[name] = (a - n).norm().item() / scale
    return errors


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []
