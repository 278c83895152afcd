"""Central finite-difference gradient checks shared by unit and acceptance tests."""

import numpy as np
import torch


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_tensor_grad(loss_fn, tensor: torch.Tensor, n_coords: int = 10, h: float = 1e-5,
                      seed: int = 0) -> list[float]:
    """Relative errors at ``n_coords`` random coordinates of ``tensor`` (float64, requires_grad)."""
    assert tensor.dtype == torch.float64
    tensor.grad = None
    loss = loss_fn()
    (grad,) = torch.autograd.grad(loss, tensor)
    rng = np.random.default_rng(seed)
    flat = tensor.data.view(-1)
    picks = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    errors = []
    with torch.no_grad():
        for i in picks:
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            errors.append(relative_error(grad.view(-1)[i].item(), (up - down) / (2 * h)))
    return errors


def check_module_grads(loss_fn, named_tensors, n_coords: int = 10, h: float = 1e-5, seed: int = 0):
    """``{name: max relative error}`` over every tensor in ``named_tensors``."""
    return {name: max(check_tensor_grad(loss_fn, t, n_coords, h, seed + k))
            for k, (name, t) in enumerate(named_tensors)}
