"""Finite-difference helpers shared by gradient tests."""

from __future__ import annotations

import torch


def coordinate_fd_grad(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar fn w.r.t. every coordinate."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_err(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    denom = torch.maximum(
        torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor)
    )
    return ((analytic - numeric).abs() / denom).max().item()


def directional_fd(fn, tensors: list[torch.Tensor], direction: list[torch.Tensor], eps: float = 1e-6) -> float:
    """Central finite difference of scalar fn along a parameter-space direction."""
    with torch.no_grad():
        for t, d in zip(tensors, direction):
            t += eps * d
        hi = fn().item()
        for t, d in zip(tensors, direction):
            t -= 2.0 * eps * d
        lo = fn().item()
        for t, d in zip(tensors, direction):
            t += eps * d
    return (hi - lo) / (2.0 * eps)
