"""Attacks on released feature maps.

* Simultaneous attack: a classifier ``A`` (predicts ``z``) and a decoder ``R``
  (predicts ``x``) trained one epoch per analyzer epoch on the attacker's own
  split, pushed through the current edge, then scored on the user's released
  feature maps of that epoch.
* White-box inversion: with leaked edge parameters, gradient descent on
  ``||E(u) - x_E||^2 + alpha * TV(u)``.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import Split
from .errors import ConfigError, NumericError, ProtocolError
from .models import AttackerModels, SplitModel, build_attackers
from .training import ReleasedFeatures, ce_logits, stream

log = logging.getLogger(__name__)


@dataclass
class AttackState:
    """Attacker networks, their optimizers and the per-epoch results on user feature maps."""

    models: AttackerModels
    opt_cls: torch.optim.Optimizer
    opt_rec: torch.optim.Optimizer
    noise: torch.Generator
    order: torch.Generator
    batch_size: int = 64
    noise_on: bool = True
    cls_acc: list = field(default_factory=list)
    rec_mse: list = field(default_factory=list)

    @property
    def classifier(self):
        return self.models.classifier

    @property
    def reconstructor(self):
        return self.models.reconstructor


def make_attack_state(model: SplitModel, seed: int, lr: float = 1e-3, batch_size: int = 64, noise_on: bool = True) -> AttackState:
    models = build_attackers(model.spec, model, seed)
    return AttackState(
        models,
        torch.optim.Adam(models.classifier.parameters(), lr=lr),
        torch.optim.Adam(models.reconstructor.parameters(), lr=lr),
        stream(seed, "attack_noise"),
        torch.Generator().manual_seed(seed * 7919 + 5),
        batch_size,
        noise_on,
    )


def reconstruction_loss(pred, target):
    """``L_R``: squared error averaged over every pixel and channel."""
    return F.mse_loss(pred, target)


def _query_edge(model: SplitModel, x, state: AttackState):
    """The attacker's black-box query: the edge's release for its own images."""
    with torch.no_grad():
        return model.forward_edge(x, noise_on=state.noise_on and model.private, generator=state.noise)


def train_attackers_one_epoch(state: AttackState, model: SplitModel, attacker_data: Split):
    """One pass of ``A`` on ``(E(x'), z')`` and ``R`` on ``(E(x'), x')``."""
    x_all = torch.tensor(attacker_data.images)
    z_all = torch.tensor(attacker_data.z)
    perm = torch.randperm(len(z_all), generator=state.order)
    was_training = model.training
    model.eval()
    cls, rec = state.classifier, state.reconstructor
    cls.train()
    rec.train()
    la = lr_ = 0.0
    try:
        for i in range(0, len(perm), state.batch_size):
            idx = perm[i : i + state.batch_size]
            xb, zb = x_all[idx], z_all[idx]
            feats = _query_edge(model, xb, state)
            loss_a = ce_logits(cls(feats), zb)
            state.opt_cls.zero_grad(set_to_none=True)
            loss_a.backward()
            state.opt_cls.step()
            loss_r = reconstruction_loss(rec(feats), xb)
            state.opt_rec.zero_grad(set_to_none=True)
            loss_r.backward()
            state.opt_rec.step()
            la += loss_a.item() * len(idx)
            lr_ += loss_r.item() * len(idx)
    finally:
        model.train(was_training)
    n = len(perm)
    return la / n, lr_ / n


def evaluate_attackers(state: AttackState, features, images=None, z=None, batch_size: int = 256):
    """Score ``A`` and ``R`` on given feature maps.

    ``images`` and ``z`` are ground truth held by the evaluator, used only for
    scoring under ``no_grad``; a real attacker would not have them.
    """
    cls, rec = state.classifier, state.reconstructor
    cls.eval()
    rec.eval()
    correct, sq, n_pix = 0, 0.0, 0
    with torch.no_grad():
        for i in range(0, len(features), batch_size):
            f = features[i : i + batch_size]
            if z is not None:
                correct += int((cls(f).argmax(1) == z[i : i + batch_size]).sum())
            if images is not None:
                diff = rec(f).double() - images[i : i + batch_size].double()
                sq += float((diff**2).sum())
                n_pix += diff.numel()
    acc = correct / len(features) if z is not None else math.nan
    err = sq / n_pix if images is not None else math.nan
    return acc, err


def reconstruct(state: AttackState, features, batch_size: int = 256):
    state.reconstructor.eval()
    with torch.no_grad():
        return torch.cat([state.reconstructor(features[i : i + batch_size]) for i in range(0, len(features), batch_size)])


def attack_epoch(state: AttackState, model: SplitModel, attacker_data: Split, user_features, user_images_for_eval=None, user_z_for_eval=None):
    """One simultaneous-attack epoch: train on the attacker split, then score on the user's released features."""
    feats = user_features.features if isinstance(user_features, ReleasedFeatures) else torch.as_tensor(user_features)
    if tuple(feats.shape[1:]) != tuple(model.feature_shape):
        raise ProtocolError(
            ProtocolError.SHAPE, f"user feature maps {tuple(feats.shape[1:])} do not match edge output {tuple(model.feature_shape)}"
        )
    train_attackers_one_epoch(state, model, attacker_data)
    imgs = None if user_images_for_eval is None else torch.tensor(np.asarray(user_images_for_eval))
    z = None if user_z_for_eval is None else torch.tensor(np.asarray(user_z_for_eval)).long()
    acc, err = evaluate_attackers(state, feats, imgs, z)
    state.cls_acc.append(acc)
    state.rec_mse.append(err)
    return state, {"attack_cls_acc": acc, "attack_rec_mse": err}


# ---------------------------------------------------------------------------
# white-box inversion


def tv_loss(u) -> torch.Tensor:
    """Anisotropic L1 total variation over the last two axes, summed over everything else."""
    u = torch.as_tensor(u)
    return (u[..., 1:, :] - u[..., :-1, :]).abs().sum() + (u[..., :, 1:] - u[..., :, :-1]).abs().sum()


@dataclass
class WhiteBoxConfig:
    steps: int = 2000
    alpha: float = 0.01
    # fraction of 1 / ||J||^2 when normalize_step is on, absolute otherwise
    step_size: float = 0.5
    init: str = "uniform"
    seed: int = 0
    # divide the step by the squared spectral norm of the edge Jacobian (when > 1)
    normalize_step: bool = True
    power_iters: int = 20

    def validate(self):
        if self.steps < 1:
            raise ConfigError("white-box steps must be at least 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if self.init not in ("uniform", "zeros"):
            raise ConfigError(f"init must be 'uniform' or 'zeros', got {self.init!r}")
        return self


@dataclass
class WhiteBoxResult:
    u: torch.Tensor
    objective: list
    step_size: float

    @property
    def final_objective(self):
        return self.objective[-1]

    def non_increasing_fraction(self):
        obj = np.asarray(self.objective)
        return float(np.mean(np.diff(obj) <= 0)) if len(obj) > 1 else 1.0


def whitebox_objective(model: SplitModel, u, x_e, alpha):
    """``sum_i ||E(u_i) - x_E,i||^2 + alpha * TV(u)`` with the victim's noise off."""
    return ((model.forward_edge(u, noise_on=False) - x_e) ** 2).sum() + alpha * tv_loss(u)


def _init_u(model, x_e, cfg):
    shape = (x_e.shape[0], *model.spec.input_shape)
    if cfg.init == "uniform":
        return torch.rand(shape, generator=torch.Generator().manual_seed(cfg.seed), dtype=x_e.dtype)
    return torch.zeros(shape, dtype=x_e.dtype)


def edge_jacobian_sq_norm(model: SplitModel, u, iters: int = 20) -> float:
    """Power-iteration estimate of the largest eigenvalue of ``J^T J`` for ``E`` at ``u``."""
    f = lambda v: model.forward_edge(v, noise_on=False)  # noqa: E731
    v = torch.randn(u.shape, generator=torch.Generator().manual_seed(0), dtype=u.dtype)
    v = v / v.norm()
    lam = 0.0
    for _ in range(iters):
        _, jv = torch.func.jvp(f, (u,), (v,))
        _, vjp = torch.func.vjp(f, u)
        (w,) = vjp(jv)
        lam = float(w.norm())
        if lam == 0.0 or not math.isfinite(lam):
            break
        v = w / lam
    return lam


def _descend(model, x_e, cfg, step):
    u = _init_u(model, x_e, cfg)
    u.requires_grad_(True)
    hist = []
    for _ in range(cfg.steps):
        obj = whitebox_objective(model, u, x_e, cfg.alpha)
        if not torch.isfinite(obj):
            raise NumericError("non-finite white-box objective")
        hist.append(obj.item())
        (g,) = torch.autograd.grad(obj, u)
        with torch.no_grad():
            u -= step * g
    with torch.no_grad():
        hist.append(whitebox_objective(model, u, x_e, cfg.alpha).item())
    if not math.isfinite(hist[-1]):
        raise NumericError("non-finite white-box objective")
    return u.detach(), hist


def _leaked_edge(model: SplitModel) -> SplitModel:
    """The attacker's float64 replica of the leaked model; the victim is never touched."""
    replica = copy.deepcopy(model).double().eval()
    for p in replica.parameters():
        p.requires_grad_(False)
    return replica


def whitebox_reconstruct(model: SplitModel, x_e, cfg: WhiteBoxConfig | None = None) -> WhiteBoxResult:
    """Invert released features with the leaked edge; returns ``u*`` clipped to [0, 1].

    Descent runs in float64: the residual is dominated by the victim's noise,
    so per-step decreases are far below float32 resolution of the objective.
    A non-finite objective halves the step size and retries once.
    """
    cfg = (cfg or WhiteBoxConfig()).validate()
    x_e = torch.as_tensor(x_e).detach()
    if tuple(x_e.shape[1:]) != tuple(model.feature_shape):
        raise ProtocolError(ProtocolError.SHAPE, f"feature maps {tuple(x_e.shape[1:])} do not match edge output {tuple(model.feature_shape)}")
    out_dtype = x_e.dtype
    x_e = x_e.double()
    replica = _leaked_edge(model)
    step = cfg.step_size
    if cfg.normalize_step:
        step = cfg.step_size / max(1.0, edge_jacobian_sq_norm(replica, _init_u(replica, x_e, cfg), cfg.power_iters))
    try:
        u, hist = _descend(replica, x_e, cfg, step)
    except NumericError:
        step = step / 2
        log.warning("white-box objective diverged; retrying with step %g", step)
        u, hist = _descend(replica, x_e, cfg, step)
    return WhiteBoxResult(u.clamp(0.0, 1.0).to(out_dtype), hist, step)
