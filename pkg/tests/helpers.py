"""Shared test utilities: small bundles, checksums and the finite-difference gradient check."""

from __future__ import annotations

import numpy as np
import torch

from splitguard.datasets import SyntheticAttributeSpec, generate_synthetic
from splitguard.models import ArchitectureSpec, SplitModel, parameter_checksum
from splitguard.privacy import PrivacyConfig
from splitguard.training import TrainConfig, ce_logits, pretrain_edge

# gradient-check model: small enough (< 5k parameters) for exhaustive central differences
GRADCHECK_SPEC = ArchitectureSpec(width=(8, 16, 16, 32, 32), exit_channels=4)


def small_bundle(seed=0, sizes=(192, 128, 96), **kw):
    return generate_synthetic(SyntheticAttributeSpec(seed=seed, **kw), sizes)


def checksums(model):
    return {
        "E": parameter_checksum(model.edge),
        "G": parameter_checksum(model.exit_analyzer),
        "D": parameter_checksum(model.exit_adversary),
    }


def analyzer_objective(model, x, y, z, noise, lam):
    """``L_G`` for a batch with the Laplace draw frozen to ``noise``."""
    x_e = model.clip(model.extract(x)) + noise
    return ce_logits(model.exit_analyzer(x_e), y) - lam * ce_logits(model.exit_adversary(x_e), z)


def edge_gradient_check(seed=0, batch=8, lam=6.0, eps=1.0, T=20.0, h=1e-6):
    """Analytic dL_G/dtheta_E against central differences, in float64.

    Returns (relative errors per coordinate, number of edge parameters).
    """
    torch.manual_seed(seed)
    model = SplitModel(GRADCHECK_SPEC, PrivacyConfig(eps, T), seed).double()
    model.train()  # exit BN uses batch statistics, as in training; float64 keeps it deterministic
    g = torch.Generator().manual_seed(seed + 1)
    x = torch.rand(batch, *GRADCHECK_SPEC.input_shape, generator=g, dtype=torch.float64)
    y = torch.randint(0, 2, (batch,), generator=g)
    z = torch.randint(0, 2, (batch,), generator=g)
    with torch.no_grad():
        noise = model.add_noise(torch.zeros(batch, *model.feature_shape, dtype=torch.float64), g)
    params = list(model.edge.parameters())
    loss = analyzer_objective(model, x, y, z, noise, lam)
    analytic = torch.autograd.grad(loss, params)
    rel = []
    with torch.no_grad():
        for p, ga in zip(params, analytic):
            flat, gflat = p.view(-1), ga.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = analyzer_objective(model, x, y, z, noise, lam).item()
                flat[i] = old - h
                down = analyzer_objective(model, x, y, z, noise, lam).item()
                flat[i] = old
                num = (up - down) / (2 * h)
                a = gflat[i].item()
                scale = max(abs(a), abs(num))
                rel.append(0.0 if scale < 1e-9 else abs(a - num) / scale)
    return np.array(rel), sum(p.numel() for p in params)


def audit_freeze(bundle, epochs=3, seed=0, m_a=3, eps=1.0):
    """Pre-train while checking the freeze contract after every step; returns (violations, steps)."""
    model = SplitModel(ArchitectureSpec(), PrivacyConfig(eps, 20.0), seed)
    state = {"prev": checksums(model), "violations": 0, "steps": 0}

    def hook(kind, m):
        cur = checksums(m)
        prev = state["prev"]
        frozen = ("D",) if kind == "analyzer" else ("E", "G")
        state["violations"] += sum(cur[k] != prev[k] for k in frozen)
        state["steps"] += 1
        state["prev"] = cur

    pretrain_edge(model, bundle, TrainConfig(n_p=epochs, m_a=m_a, seed=seed), step_hook=hook)
    return state["violations"], state["steps"]

