"""Central finite-difference gradient checks for modules and functions."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    scale = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor))
    return (analytic - numeric).abs() / scale


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    step: float = 1e-5,
    max_coords: int = 40,
    floor: float = 1e-6,
    seed: int = 0,
    kink_tolerant: bool = False,
    magnitude: float | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` takes no arguments and returns a scalar computed from ``tensors``
    (leaf tensors with ``requires_grad``, double precision). At most
    ``max_coords`` randomly chosen coordinates per tensor are perturbed.
    The denominator floor is ``floor * max(1, magnitude)`` where
    ``magnitude`` (default ``|fn()|``) is the size of the terms summed into
    ``fn``: central differences carry round-off of order
    eps * magnitude / step, so coordinates whose true gradient is zero
    (e.g. a key bias under softmax) would otherwise report spurious
    relative errors.

    ``kink_tolerant`` is for piecewise-smooth functions (ReLU networks): a
    coordinate is also accepted when the analytic value matches one of the
    one-sided differences, which happens when the central stencil straddles
    an activation kink. A wrong gradient matches none of the three.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    if out.dim() != 0:
        raise ValueError("fn must return a scalar")
    grads = torch.autograd.grad(out, list(tensors), allow_unused=True)
    f0 = out.item()
    floor = floor * max(1.0, abs(f0) if magnitude is None else magnitude)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            flat, gflat = t.view(-1), g.reshape(-1)
            n = flat.numel()
            idx = torch.randperm(n, generator=gen)[: min(n, max_coords)]
            analytic, central, forward, backward = [], [], [], []
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + step
                plus = fn().item()
                flat[i] = orig - step
                minus = fn().item()
                flat[i] = orig
                central.append((plus - minus) / (2 * step))
                forward.append((plus - f0) / step)
                backward.append((f0 - minus) / step)
                analytic.append(gflat[i].item())
            a = torch.tensor(analytic, dtype=torch.float64)
            err = relative_error(a, torch.tensor(central, dtype=torch.float64), floor)
            if kink_tolerant:
                for side in (forward, backward):
                    err = torch.minimum(err, relative_error(a, torch.tensor(side, dtype=torch.float64), floor))
            worst = max(worst, float(err.max()))
    return worst


def module_gradcheck(module: torch.nn.Module, inputs: Sequence[torch.Tensor], step: float = 1e-5,
                     max_coords: int = 40, seed: int = 0, include_params: bool = True,
                     max_tensors: int | None = None, kink_tolerant: bool = False) -> float:
    """Finite-difference check of ``sum(w * module(*inputs))`` for a fixed random ``w``.

    The module and inputs are cast to double; ``module`` should be in a
    deterministic mode (no dropout). Batch norm in training mode is fine.
    ``max_tensors`` limits the check to a seeded random subset of the
    parameter tensors (inputs are always checked).
    """
    module = module.double()
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    with torch.no_grad():
        probe = module(*inputs)
    outs = probe if isinstance(probe, (list, tuple)) else [probe]
    gen = torch.Generator().manual_seed(seed + 1)
    weights = [torch.randn(o.shape, generator=gen, dtype=torch.float64) for o in outs]
    magnitude = float(sum((w * o).abs().sum() for w, o in zip(weights, outs)))

    def fn():
        res = module(*inputs)
        res = res if isinstance(res, (list, tuple)) else [res]
        return sum((w * r).sum() for w, r in zip(weights, res))

    tensors = list(inputs)
    if include_params:
        params = [p for p in module.parameters() if p.requires_grad]
        if max_tensors is not None and max_tensors < len(params):
            pick = torch.randperm(len(params), generator=torch.Generator().manual_seed(seed + 2))[:max_tensors]
            params = [params[i] for i in sorted(pick.tolist())]
        tensors += params
    return finite_difference_check(fn, tensors, step=step, max_coords=max_coords, seed=seed,
                                   kink_tolerant=kink_tolerant, magnitude=magnitude)
