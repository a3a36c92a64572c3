"""Finite-difference verification of analytic gradients.

Runs in double precision against central differences on a random subset of
parameter coordinates. Inputs are rejected (and resampled with fresh noise)
whenever two revisits tie at a fusion site, where the temporal max has no
unique subgradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import FusionSegmenter


class GradientCheckError(RuntimeError):
    """Could not obtain a tie-free sample for the fusion sites."""


@dataclass(frozen=True)
class GradCheckResult:
    passed: bool
    max_rel_error: float
    n_checked: int
    retries: int
    tolerance: float
    n_skipped_nonsmooth: int = 0


def gradient_check(
    model: FusionSegmenter,
    stack: torch.Tensor,
    target: torch.Tensor,
    tolerance: float = 1e-3,
    n_params: int = 10,
    eps: float = 1e-5,
    seed: int = 0,
    max_retries: int = 8,
    tie_gap: float = 0.0,
    denom_floor: float = 1e-6,
    grad_scale: float = 1.0,
) -> GradCheckResult:
    """Compare backprop gradients to central differences of the loss.

    Samples whose fused features tie exactly across revisits (margin <=
    ``tie_gap``, e.g. duplicated revisits) have no unique subgradient and
    are perturbed with fresh noise before checking. ``grad_scale``
    deliberately corrupts the analytic side and exists only so the harness
    can verify that it fails when it should.

    Batch-norm running statistics are calibrated to the probe sample first;
    untrained stats (mean 0, var 1) would let activations and gradients
    decay exponentially with depth in eval mode and make the comparison
    numerically vacuous.
    """
    model = model.double().eval()
    stack = stack.double()
    target = target.double()
    gen = torch.Generator().manual_seed(seed)
    _calibrate_batchnorm(model, stack)

    retries = 0
    noise_scale = 1e-3 * float(stack.std()) + 1e-6
    while model.fusion_gap(stack) <= tie_gap:
        retries += 1
        if retries > max_retries:
            raise GradientCheckError(
                f"fusion ties persisted after {max_retries} resamples"
            )
        stack = stack + noise_scale * torch.randn(
            stack.shape, generator=gen, dtype=stack.dtype
        )

    if model.head_kind == "segmentation":
        loss_fn = lambda out: F.binary_cross_entropy_with_logits(out, target)
    else:
        loss_fn = lambda out: F.mse_loss(out, target)

    model.zero_grad(set_to_none=True)
    loss = loss_fn(model(stack))
    loss.backward()

    params = [p for p in model.parameters() if p.requires_grad]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    order = torch.randperm(total, generator=gen).tolist()

    max_rel, n_checked, n_skipped = 0.0, 0, 0
    with torch.no_grad():
        for flat in order:
            if n_checked >= n_params:
                break
            param_idx, offset = _locate(sizes, flat)
            p = params[param_idx]
            view = p.view(-1)
            # a parameter the loss never touched has zero gradient
            analytic = (
                0.0 if p.grad is None else float(p.grad.view(-1)[offset])
            ) * grad_scale
            original = float(view[offset])

            def central(h: float) -> float:
                view[offset] = original + h
                plus = float(loss_fn(model(stack)))
                view[offset] = original - h
                minus = float(loss_fn(model(stack)))
                view[offset] = original
                return (plus - minus) / (2.0 * h)

            numeric = central(eps)
            half = central(eps / 2.0)
            # if the two step sizes disagree, the loss has a kink (ReLU,
            # pooling or fusion switch) inside the probe interval and no
            # finite difference is meaningful at this coordinate
            scale = max(abs(numeric), abs(half), denom_floor)
            if abs(numeric - half) / scale > tolerance / 2.0:
                n_skipped += 1
                continue
            # the floor keeps cancellation noise on near-zero gradients from
            # registering as relative error
            denom = max(abs(analytic), abs(numeric), denom_floor)
            max_rel = max(max_rel, abs(analytic - numeric) / denom)
            n_checked += 1

    return GradCheckResult(
        passed=max_rel < tolerance and n_checked > 0,
        max_rel_error=max_rel,
        n_checked=n_checked,
        retries=retries,
        tolerance=tolerance,
        n_skipped_nonsmooth=n_skipped,
    )


def _locate(sizes: list[int], flat: int) -> tuple[int, int]:
    for i, size in enumerate(sizes):
        if flat < size:
            return i, flat
        flat -= size
    raise IndexError(flat)


def _calibrate_batchnorm(model: nn.Module, stack: torch.Tensor) -> None:
    """Set batch-norm running stats to the probe batch's statistics."""
    norms = [
        m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)
    ]
    if not norms:
        return
    momenta = [m.momentum for m in norms]
    model.train()
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.eval()
    for m in norms:
        m.momentum = 1.0
    with torch.no_grad():
        model(stack)
    for m, momentum in zip(norms, momenta):
        m.momentum = momentum
    model.eval()
