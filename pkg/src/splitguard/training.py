"""Adversarial edge pre-training, edge-cloud training and the non-private baseline.

The edge owns the extractor ``E`` and the two early exits (analyzer ``G``,
adversary ``D``).  One epoch of adversarial training is

1. for each mini-batch: update ``E`` (and ``G`` while pre-training) on
   ``CE(y) - lam * CE(z)``, keeping ``D`` fixed;
2. then ``m_a`` updates of ``D`` alone on ``CE(z)``, each on a fresh noise draw
   of the same mini-batch.

During edge-cloud training the analyzer term comes from the cloud: the edge
sends the noisy feature map and ``y``; the cloud returns the gradient of its
loss with respect to the feature map.  ``z`` never leaves the edge.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import channel as ch
from .datasets import DatasetBundle, training_context
from .errors import ConfigError, DivergenceError, ProtocolError, TransportError
from .models import ArchitectureSpec, SplitModel, build_split_model

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
DIVERGENCE_LIMIT = 1e4
DIVERGENCE_PATIENCE = 3

# offsets for the per-purpose random streams derived from the run seed
_STREAM = {"pretrain_noise": 11, "train_noise": 12, "attack_noise": 13, "eval_noise": 14, "pretrain_order": 21, "train_order": 22}


def stream(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed((int(seed) * 104729 + _STREAM[name]) % (2**63 - 1))


@dataclass
class TrainConfig:
    n_p: int = 5
    n_t: int = 50
    lam: float = 6.0
    m_a: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    lr_edge: float = 1e-3
    lr_cloud: float = 1e-3
    lr_adversary: float = 2e-3
    seed: int = 7
    noise_on: bool = True
    checkpoint_every: int = 0
    epoch_retries: int = 1

    def validate(self):
        if self.n_p < 0 or self.n_t < 0:
            raise ConfigError("n_p and n_t must be non-negative")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.m_a < 1:
            raise ConfigError("m_a must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self


@dataclass
class EpochLog:
    epoch: int
    phase: str = "edge_cloud"
    analyzer_acc: float = float("nan")
    exit_adv_acc: float = float("nan")
    L_G: float = float("nan")
    L_D: float = float("nan")
    attack_cls_acc: float = float("nan")
    attack_rec_mse: float = float("nan")

    def to_dict(self):
        return asdict(self)


CSV_COLUMNS = ["epoch", "analyzer_acc", "exit_adv_acc", "L_G", "L_D", "attack_cls_acc", "attack_rec_mse"]


def write_logs_csv(path, logs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase"] + CSV_COLUMNS)
        for lg in logs:
            w.writerow([lg.phase] + [repr(getattr(lg, c)) if isinstance(getattr(lg, c), float) else getattr(lg, c) for c in CSV_COLUMNS])


def write_logs_json(path, logs):
    with open(path, "w") as fh:
        json.dump([_finite_or_none(lg.to_dict()) for lg in logs], fh, indent=1)


def _finite_or_none(d):
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


# ---------------------------------------------------------------------------
# losses


def cross_entropy(target_onehot, probs, floor: float = LOG_FLOOR):
    """``sum_k -t_k log p_k`` with ``p`` clamped at ``floor``; batches are averaged."""
    t = torch.as_tensor(target_onehot, dtype=torch.float64) if not isinstance(target_onehot, torch.Tensor) else target_onehot
    p = torch.as_tensor(probs, dtype=torch.float64) if not isinstance(probs, torch.Tensor) else probs
    per = -(t * torch.log(torch.clamp(p, min=floor))).sum(dim=-1)
    return per.mean() if per.dim() > 0 else per


def analyzer_loss(y, y_prob, z, z_prob, lam: float):
    """Edge analyzer loss: ``CE(y, y_prob) - lam * CE(z, z_prob)``."""
    return cross_entropy(y, y_prob) - lam * cross_entropy(z, z_prob)


def adversary_loss(z, z_prob):
    """Edge adversary loss: ``CE(z, z_prob)``."""
    return cross_entropy(z, z_prob)


def ce_logits(logits, labels):
    k = logits.shape[-1]
    return cross_entropy(F.one_hot(labels, k).to(logits.dtype), torch.softmax(logits, dim=-1))


def _optimizer(cfg: TrainConfig, params, lr):
    params = list(params)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)


def _batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)], order


def _correct(logits, labels):
    return int((logits.argmax(dim=1) == labels).sum())


class _DivergenceWatch:
    def __init__(self):
        self.run = 0

    def check(self, value, where):
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss ({value}) at {where}")
        self.run = self.run + 1 if abs(value) > DIVERGENCE_LIMIT else 0
        if self.run >= DIVERGENCE_PATIENCE:
            raise DivergenceError(f"|L_G| > {DIVERGENCE_LIMIT:g} for {self.run} consecutive steps at {where}")


# ---------------------------------------------------------------------------
# shared edge pieces


def call_frozen_buffers(module, x):
    """Forward ``module`` in its current mode without touching its buffers (BN running stats).

    Used for the adversary exit during the analyzer step, which must leave ``D`` intact.
    """
    state = dict(module.named_parameters())
    state.update({k: v.clone() for k, v in module.named_buffers()})
    return torch.func.functional_call(module, state, (x,))


def adversary_steps(model, feats_clean, zb, opt_d, m_a, noise_on, generator, step_hook=None):
    """``m_a`` updates of the adversary exit on fresh noise draws of fixed clean features.

    ``E`` and ``G`` are frozen during these steps, so recomputing the clean
    features would give the same tensor; only the noise changes.
    """
    feats_clean = feats_clean.detach()
    losses, correct = [], 0
    for _ in range(m_a):
        x_e = model.add_noise(feats_clean, generator) if noise_on else feats_clean
        logits = model.exit_adversary(x_e)
        loss_d = ce_logits(logits, zb)
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()
        losses.append(loss_d.item())
        correct += _correct(logits, zb)
        if step_hook:
            step_hook("adversary", model)
    return float(np.mean(losses)), correct / (m_a * len(zb))


def pretrain_edge(model: SplitModel, bundle: DatasetBundle, cfg: TrainConfig, *, step_hook=None):
    """Adversarial pre-training of the edge with both early exits.

    ``step_hook(kind, model)`` is called after every ``'analyzer'`` update and
    after each of the ``m_a`` ``'adversary'`` updates (used to audit the
    freeze contract).
    """
    cfg.validate()
    if model.exit_analyzer is None:
        raise ConfigError("pre-training needs a model with early exits")
    logs = []
    if cfg.n_p == 0:
        return model, logs
    images = torch.tensor(bundle.user_train.images)
    ys = torch.tensor(bundle.user_train.y)
    zs = torch.tensor(bundle.user_train.z)
    opt_e = _optimizer(cfg, model.edge.parameters(), cfg.lr_edge)
    opt_g = _optimizer(cfg, model.exit_analyzer.parameters(), cfg.lr_edge)
    opt_d = _optimizer(cfg, model.exit_adversary.parameters(), cfg.lr_adversary)
    noise = stream(cfg.seed, "pretrain_noise")
    order_gen = stream(cfg.seed, "pretrain_order")
    watch = _DivergenceWatch()
    model.train()
    with training_context():
        for epoch in range(1, cfg.n_p + 1):
            batches, _ = _batches(len(ys), cfg.batch_size, order_gen)
            lg_sum = ld_sum = 0.0
            g_correct = d_acc_sum = 0
            for b, idx in enumerate(batches):
                xb, yb, zb = images[idx], ys[idx], zs[idx]
                feats_clean = model.clip(model.extract(xb))
                x_e = model.add_noise(feats_clean, noise) if cfg.noise_on else feats_clean
                y_logits = model.exit_analyzer(x_e)
                z_logits = call_frozen_buffers(model.exit_adversary, x_e)
                loss_g = ce_logits(y_logits, yb) - cfg.lam * ce_logits(z_logits, zb)
                watch.check(loss_g.item(), f"pretrain epoch {epoch} batch {b}")
                opt_e.zero_grad(set_to_none=True)
                opt_g.zero_grad(set_to_none=True)
                loss_g.backward()
                opt_e.step()
                opt_g.step()
                model.exit_adversary.zero_grad(set_to_none=True)
                if step_hook:
                    step_hook("analyzer", model)
                loss_d, d_acc = adversary_steps(model, feats_clean, zb, opt_d, cfg.m_a, cfg.noise_on, noise, step_hook)
                lg_sum += loss_g.item() * len(idx)
                ld_sum += loss_d * len(idx)
                g_correct += _correct(y_logits, yb)
                d_acc_sum += d_acc * len(idx)
            n = len(ys)
            logs.append(EpochLog(epoch, "pretrain", g_correct / n, d_acc_sum / n, lg_sum / n, ld_sum / n))
            log.info("pretrain epoch %d: G acc %.3f D acc %.3f", epoch, logs[-1].analyzer_acc, logs[-1].exit_adv_acc)
    return model, logs


# ---------------------------------------------------------------------------
# cloud party


@dataclass
class ReleasedFeatures:
    """Snapshot of every feature map the cloud received in one epoch, in batch order."""

    epoch: int
    features: torch.Tensor
    batch_ids: list
    order: torch.Tensor | None = None


class CloudServer:
    """Cloud analyzer behind an endpoint, run on its own thread.

    Besides serving the analyzer it keeps every received feature map of the
    current epoch (what a curious cloud would store) and publishes the
    snapshot on ``released`` at the end of the epoch.
    """

    def __init__(self, analyzer, endpoint, cfg: TrainConfig):
        self.analyzer = analyzer
        self.endpoint = endpoint
        self.cfg = cfg
        self.opt = _optimizer(cfg, analyzer.parameters(), cfg.lr_cloud)
        self.released: queue.Queue = queue.Queue()
        self.error: BaseException | None = None
        self._thread = None
        self._snapshot = None
        self._epoch = None
        self._reset_epoch()

    def _reset_epoch(self):
        self._pending = {}
        self._feats, self._bids = [], []
        self._loss_sum = 0.0
        self._correct = 0
        self._seen = 0

    def start(self):
        self._thread = threading.Thread(target=self._serve, name="cloud-server", daemon=True)
        self._thread.start()
        return self

    def join(self, timeout=None):
        if self._thread is not None:
            self._thread.join(timeout)

    def _serve(self):
        try:
            self.analyzer.train()
            while True:
                frame = self.endpoint.recv()
                if frame.msg_type == ch.MsgType.CONTROL:
                    op = float(frame.payload[0])
                    if op == ch.CTRL_SHUTDOWN:
                        self.endpoint.send(ch.control(ch.CTRL_ACK, frame.epoch))
                        return
                    if op == ch.CTRL_EPOCH_BEGIN:
                        self._begin(frame.epoch)
                        self.endpoint.send(ch.control(ch.CTRL_ACK, frame.epoch))
                    elif op == ch.CTRL_EPOCH_END:
                        self._end(frame.epoch)
                    else:
                        raise ProtocolError(ProtocolError.BAD_TYPE, f"unknown control opcode {op}")
                elif frame.msg_type == ch.MsgType.FEATURES:
                    self._pending[(frame.epoch, frame.batch_id)] = frame
                elif frame.msg_type == ch.MsgType.LABELS:
                    self._step(frame)
                else:
                    raise ProtocolError(ProtocolError.BAD_TYPE, f"cloud cannot handle msg_type {frame.msg_type}")
        except BaseException as exc:  # surfaced to the edge through the timeout
            self.error = exc
            self.endpoint.close()

    def _begin(self, epoch):
        if epoch == self._epoch and self._snapshot is not None:
            # the edge is retrying this epoch: roll back to its start
            self.analyzer.load_state_dict(self._snapshot[0])
            self.opt.load_state_dict(self._snapshot[1])
        else:
            self._snapshot = (copy.deepcopy(self.analyzer.state_dict()), copy.deepcopy(self.opt.state_dict()))
        self._epoch = epoch
        self._reset_epoch()

    def _step(self, label_frame):
        key = (label_frame.epoch, label_frame.batch_id)
        feat_frame = self._pending.pop(key, None)
        if feat_frame is None:
            raise ProtocolError(ProtocolError.SHAPE, f"labels for {key} arrived without features")
        x_e = torch.tensor(feat_frame.payload).requires_grad_(True)
        yb = torch.tensor(label_frame.payload).long()
        logits = self.analyzer(x_e)
        loss = ce_logits(logits, yb)
        if not torch.isfinite(loss):
            self.endpoint.send(ch.control(ch.CTRL_ERROR, label_frame.epoch, label_frame.batch_id, float("nan")))
            return
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        grad = x_e.grad.detach().numpy()
        self.endpoint.send(ch.Frame(ch.MsgType.GRADIENT, label_frame.epoch, label_frame.batch_id, grad))
        n = len(yb)
        self._loss_sum += loss.item() * n
        self._correct += _correct(logits.detach(), yb)
        self._seen += n
        self._feats.append(torch.tensor(feat_frame.payload))
        self._bids.append(feat_frame.batch_id)

    def _end(self, epoch):
        n = max(self._seen, 1)
        self.endpoint.send(ch.control(ch.CTRL_ACK, epoch, 0, self._loss_sum / n, self._correct / n))
        feats = torch.cat(self._feats) if self._feats else torch.zeros(0)
        self.released.put(ReleasedFeatures(epoch, feats, list(self._bids)))


# ---------------------------------------------------------------------------
# edge-cloud loop


def _expect(endpoint, msg_type, epoch, batch_id=None):
    frame = endpoint.recv()
    if frame.msg_type == ch.MsgType.CONTROL and float(frame.payload[0]) == ch.CTRL_ERROR:
        raise DivergenceError(f"cloud reported a non-finite loss at epoch {frame.epoch} batch {frame.batch_id}")
    if frame.msg_type != msg_type or frame.epoch != epoch or (batch_id is not None and frame.batch_id != batch_id):
        raise ProtocolError(
            ProtocolError.SHAPE,
            f"expected type {int(msg_type)} for ({epoch}, {batch_id}), got type {frame.msg_type} for ({frame.epoch}, {frame.batch_id})",
        )
    return frame


def _run_epoch(model, private, cfg, endpoint, epoch, images, ys, zs, batches, opt_e, opt_d, noise, watch, release_hook):
    endpoint.send(ch.control(ch.CTRL_EPOCH_BEGIN, epoch))
    _expect(endpoint, ch.MsgType.CONTROL, epoch)
    adv_sum = ld_sum = d_acc_sum = 0.0
    for b, idx in enumerate(batches):
        xb, yb, zb = images[idx], ys[idx], zs[idx]
        feats_clean = model.clip(model.extract(xb))
        x_e = model.add_noise(feats_clean, noise) if (private and cfg.noise_on) else feats_clean
        if release_hook is not None:
            release_hook(feats_clean.detach(), x_e.detach())
        endpoint.send(ch.Frame(ch.MsgType.FEATURES, epoch, b, x_e.detach().numpy()))
        endpoint.send(ch.Frame(ch.MsgType.LABELS, epoch, b, yb.numpy().astype(np.float32)))
        grad_frame = _expect(endpoint, ch.MsgType.GRADIENT, epoch, b)
        grad = torch.tensor(grad_frame.payload)
        if grad.shape != x_e.shape:
            raise ProtocolError(ProtocolError.SHAPE, f"gradient dims {tuple(grad.shape)} != feature dims {tuple(x_e.shape)}")
        if not torch.isfinite(grad).all():
            raise DivergenceError(f"non-finite gradient from cloud at epoch {epoch} batch {b}")
        opt_e.zero_grad(set_to_none=True)
        if private:
            adv = -cfg.lam * ce_logits(call_frozen_buffers(model.exit_adversary, x_e), zb)
            watch.check(adv.item(), f"epoch {epoch} batch {b}")
            torch.autograd.backward([x_e, adv], [grad, None])
            model.exit_adversary.zero_grad(set_to_none=True)
        else:
            adv = torch.zeros(())
            x_e.backward(grad)
        opt_e.step()
        if private:
            loss_d, d_acc = adversary_steps(model, feats_clean, zb, opt_d, cfg.m_a, cfg.noise_on, noise)
            ld_sum += loss_d * len(idx)
            d_acc_sum += d_acc * len(idx)
        adv_sum += adv.item() * len(idx)
    endpoint.send(ch.control(ch.CTRL_EPOCH_END, epoch))
    ack = _expect(endpoint, ch.MsgType.CONTROL, epoch)
    cloud_loss, cloud_acc = float(ack.payload[1]), float(ack.payload[2])
    n = len(ys)
    lg = cloud_loss + adv_sum / n
    watch.check(lg, f"epoch {epoch}")
    nan = float("nan")
    return EpochLog(
        epoch,
        "edge_cloud" if private else "baseline",
        cloud_acc,
        d_acc_sum / n if private else nan,
        lg,
        ld_sum / n if private else nan,
    )


def _edge_cloud(model, bundle, cfg, endpoints, private, on_epoch_end, release_hook):
    cfg.validate()
    if endpoints is None:
        endpoints = ch.loopback_transport()
    edge_end, cloud_end = endpoints
    images = torch.tensor(bundle.user_train.images)
    ys = torch.tensor(bundle.user_train.y)
    zs = torch.tensor(bundle.user_train.z)
    server = CloudServer(model.cloud, cloud_end, cfg).start()
    opt_e = _optimizer(cfg, model.edge.parameters(), cfg.lr_edge)
    opt_d = _optimizer(cfg, model.exit_adversary.parameters(), cfg.lr_adversary) if private else None
    noise = stream(cfg.seed, "train_noise")
    order_gen = stream(cfg.seed, "train_order")
    watch = _DivergenceWatch()
    logs = []
    model.train()
    try:
        for epoch in range(1, cfg.n_t + 1):
            batches, order = _batches(len(ys), cfg.batch_size, order_gen)
            snapshot = _edge_snapshot(model, opt_e, opt_d, noise)
            for attempt in range(cfg.epoch_retries + 1):
                try:
                    with training_context():
                        entry = _run_epoch(
                            model, private, cfg, edge_end, epoch, images, ys, zs, batches, opt_e, opt_d, noise, watch, release_hook
                        )
                    break
                except TransportError as exc:
                    if isinstance(exc, ProtocolError) or attempt == cfg.epoch_retries or server.error is not None:
                        exc.retries = attempt
                        if server.error is not None and exc.__cause__ is None:
                            raise TransportError(f"{exc} (cloud side: {server.error!r})", retries=attempt) from server.error
                        raise
                    log.warning("epoch %d transport failure (%s); retrying", epoch, exc)
                    _edge_restore(model, opt_e, opt_d, noise, snapshot)
            released = server.released.get(timeout=edge_end.timeout_s)
            released.order = order
            if on_epoch_end is not None:
                extra = on_epoch_end(epoch, released, model) or {}
                for k, v in extra.items():
                    setattr(entry, k, v)
            logs.append(entry)
            log.info("epoch %d: analyzer acc %.3f", epoch, entry.analyzer_acc)
        edge_end.send(ch.control(ch.CTRL_SHUTDOWN))
        edge_end.recv()
    finally:
        server.join(timeout=5)
        edge_end.close()
        cloud_end.close()
    return model, logs


def _edge_snapshot(model, opt_e, opt_d, noise):
    return (
        copy.deepcopy(model.state_dict()),
        copy.deepcopy(opt_e.state_dict()),
        copy.deepcopy(opt_d.state_dict()) if opt_d else None,
        noise.get_state(),
    )


def _edge_restore(model, opt_e, opt_d, noise, snap):
    model.load_state_dict(snap[0])
    opt_e.load_state_dict(snap[1])
    if opt_d is not None:
        opt_d.load_state_dict(snap[2])
    noise.set_state(snap[3])


def train_edge_cloud(
    model: SplitModel,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    channel=None,
    *,
    on_epoch_end: Callable | None = None,
    release_hook: Callable | None = None,
):
    """``n_t`` epochs of edge-cloud training with the adversarial exit kept running at the edge.

    ``channel`` is an ``(edge, cloud)`` endpoint pair; loopback by default.
    ``on_epoch_end(epoch, released, model)`` may return extra EpochLog fields
    (the attack metrics).  ``release_hook(pre_noise, released)`` sees every
    feature map before it is sent.
    """
    if not model.private:
        raise ConfigError("train_edge_cloud needs a model with a privacy config; use train_baseline otherwise")
    return _edge_cloud(model, bundle, cfg, channel, True, on_epoch_end, release_hook)


def train_baseline(
    spec: ArchitectureSpec,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    channel=None,
    *,
    on_epoch_end: Callable | None = None,
    release_hook: Callable | None = None,
):
    """Same split network trained with plain cross-entropy: no clip, no noise, no adversary."""
    model = SplitModel(spec, None, cfg.seed, with_exits=False)
    return _edge_cloud(model, bundle, cfg, channel, False, on_epoch_end, release_hook)
