"""Shared numerical primitives: L2 normalization, prototype logits, projection
heads, the desk-scale reference encoder and a finite-difference gradient check."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import DegenerateVector, DimensionMismatch, InvalidConfig, NonFiniteLoss

EPS_NORM = 1e-12


def l2_normalize(v, dim: int = -1):
    """Return ``v / ||v||`` along ``dim``.

    Accepts numpy arrays and torch tensors (differentiable). Raises
    :class:`DegenerateVector` when any norm is at or below ``EPS_NORM``; a
    near-zero embedding signals encoder collapse and is never clamped.
    """
    if isinstance(v, torch.Tensor):
        norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
        if bool((norm <= EPS_NORM).any()):
            raise DegenerateVector("cannot normalize a vector with norm <= 1e-12")
        return v / norm
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=dim, keepdims=True)
    if np.any(norm <= EPS_NORM):
        raise DegenerateVector("cannot normalize a vector with norm <= 1e-12")
    return v / norm


def prototype_logits(z, prototypes, logit_scale: float = 1.0):
    """Dot products of embedding(s) ``z`` with each row of ``prototypes``.

    ``z`` is ``(d,)`` or ``(n, d)``; ``prototypes`` is ``(K, d)``. The result is
    scaled by ``logit_scale``.
    """
    if z.shape[-1] != prototypes.shape[-1]:
        raise DimensionMismatch(
            f"embedding dim {z.shape[-1]} != prototype dim {prototypes.shape[-1]}"
        )
    return logit_scale * (z @ prototypes.T)


class ProjectionHead(nn.Module):
    """Projection applied before contrastive comparisons.

    ``kind="identity"`` passes inputs through untouched; ``kind="mlp"`` is a
    one-hidden-layer MLP whose output is L2-normalized.
    """

    def __init__(self, kind: str = "identity", dim: int | None = None, hidden: int = 64,
                 out_dim: int | None = None):
        super().__init__()
        if kind not in ("identity", "mlp"):
            raise InvalidConfig(f"unknown projection head {kind!r}")
        self.kind = kind
        if kind == "mlp":
            if dim is None:
                raise InvalidConfig("mlp projection head needs an input dim")
            self.net = nn.Sequential(
                nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, out_dim or dim)
            )

    def forward(self, z):
        if self.kind == "identity":
            return z
        return l2_normalize(self.net(z))


class MLPEncoder(nn.Module):
    """Two-layer fully connected encoder with a tanh nonlinearity.

    With ``normalize=True`` the last operation is L2 normalization, so every
    output is a unit vector. ``backbone`` is the first layer; optimizers may give
    it a reduced step size.
    """

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, normalize: bool = True):
        super().__init__()
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self.normalize = normalize
        self.backbone = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.Tanh())
        self.head = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        z = self.head(self.backbone(x))
        return l2_normalize(z) if self.normalize else z

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "hidden_dim": self.hidden_dim,
                "out_dim": self.out_dim, "normalize": self.normalize}


def flat_parameters(*modules: nn.Module) -> torch.Tensor:
    """Concatenate the parameters of ``modules`` into one detached vector."""
    return torch.cat([p.detach().reshape(-1) for m in modules for p in m.parameters()])


def functional_loss(modules: list[nn.Module], loss: Callable[[], torch.Tensor]):
    """Turn a closure over module parameters into ``f(theta) -> loss``.

    ``theta`` is a flat vector laid out as in :func:`flat_parameters`. The
    closure is evaluated with the modules' parameters swapped for slices of
    ``theta`` (via :func:`torch.func.functional_call` semantics), so autograd
    differentiates the loss with respect to ``theta``.
    """
    params = [(m, name, p.shape) for m in modules for name, p in m.named_parameters()]

    def f(theta: torch.Tensor) -> torch.Tensor:
        offset = 0
        originals = []
        for m, name, shape in params:
            n = int(np.prod(shape))
            chunk = theta[offset:offset + n].view(shape)
            offset += n
            originals.append(_swap(m, name, chunk))
        try:
            return loss()
        finally:
            for (m, name, _), orig in zip(params, originals):
                _restore(m, name, orig)

    return f


def _swap(module, name, tensor):
    *path, leaf = name.split(".")
    for p in path:
        module = getattr(module, p)
    orig = module._parameters[leaf]
    del module._parameters[leaf]
    setattr(module, leaf, tensor)
    return orig


def _restore(module, name, orig):
    *path, leaf = name.split(".")
    for p in path:
        module = getattr(module, p)
    delattr(module, leaf)
    module._parameters[leaf] = orig


def finite_difference_check(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    params,
    probes: int = 10,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst relative error between autograd and central differences.

    Each probe draws a random unit direction ``u`` and compares the analytic
    directional derivative ``grad . u`` with
    ``(f(theta + h u) - f(theta - h u)) / 2h``. Arithmetic is float64.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    theta = torch.as_tensor(params, dtype=torch.float64).detach().clone().requires_grad_(True)
    value = loss_fn(theta)
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"loss is {value.item()}")
    (grad,) = torch.autograd.grad(value, theta)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            u = torch.randn(theta.shape, generator=gen, dtype=torch.float64)
            u /= torch.linalg.vector_norm(u)
            plus, minus = loss_fn(theta + step * u), loss_fn(theta - step * u)
            if not (torch.isfinite(plus) and torch.isfinite(minus)):
                raise NonFiniteLoss("loss became non-finite during probing")
            numeric = ((plus - minus) / (2 * step)).item()
            analytic = float(grad @ u)
            denom = max(abs(numeric), abs(analytic), 1e-10)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
