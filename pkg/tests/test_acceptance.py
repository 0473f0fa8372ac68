"""Acceptance suite: one test per numbered criterion, summarised by conftest at the end of the run.

The end-to-end criteria share one set of seeded experiments (3 seeds x baseline and
private at epsilon 0.5, 1 and 2).  Set ``SPLITGUARD_ACCEPTANCE_CACHE`` to a directory
to reuse finished experiments across pytest sessions.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from helpers import audit_freeze, edge_gradient_check, small_bundle

from splitguard import channel as ch
from splitguard import harness
from splitguard.attacks import WhiteBoxConfig, tv_loss, whitebox_reconstruct
from splitguard.datasets import SyntheticAttributeSpec
from splitguard.errors import ProtocolError
from splitguard.metrics import psnr, ssim
from splitguard.models import ArchitectureSpec, SplitModel, count_parameters, estimate_maccs
from splitguard.privacy import PrivacyConfig, clip_per_sample, dp_ratio_test
from splitguard.training import adversary_loss, analyzer_loss

SEEDS = (0, 1, 2)
EPSILONS = (0.5, 1.0, 2.0)
E2E = {"train": {"n_p": 5, "n_t": 20, "lam": 6.0, "m_a": 10}, "privacy": {"threshold": 20.0}, "dataset": {"sizes": [2000, 2000, 1000]}}


def _detail(record_property, text):
    record_property("detail", text)


def _pts(v):
    return f"{100 * v:.1f}"


# ---------------------------------------------------------------------------
# shared experiments


def _run_one(seed, eps):
    cfg = harness.build_config({**E2E, "seed": seed})
    bundle = harness.build_bundle(cfg)
    t = time.perf_counter()
    res = harness.run_training(cfg.with_epsilon(eps) if eps else cfg, eps is not None, bundle)
    row = harness.summary_row(res)
    row["seconds"] = time.perf_counter() - t
    row["attack_curve"] = [lg.attack_cls_acc for lg in res.logs]
    return row


@pytest.fixture(scope="session")
def experiments():
    cache = os.environ.get("SPLITGUARD_ACCEPTANCE_CACHE")
    path = Path(cache) / "experiments.json" if cache else None
    # defaults are part of the key so a cache never outlives a change to them
    defaults = [repr(ArchitectureSpec()), repr(WhiteBoxConfig()), repr(SyntheticAttributeSpec())]
    key = json.dumps({"cfg": E2E, "seeds": SEEDS, "eps": EPSILONS, "defaults": defaults}, sort_keys=True)
    if path is not None and path.is_file():
        blob = json.loads(path.read_text())
        if blob["key"] == key:
            return blob["rows"]
    rows = [_run_one(seed, eps) for seed in SEEDS for eps in (None,) + EPSILONS]
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"key": key, "rows": rows}, indent=1))
    return rows


def _select(rows, eps):
    return [r for r in rows if r["epsilon"] == eps]


def _mean(rows, field):
    return float(np.mean([r[field] for r in rows]))


# ---------------------------------------------------------------------------
# 1-5: mechanism, losses, gradients and freeze contract


@pytest.mark.criterion(1)
def test_criterion_01_dp_bound(record_property):
    t = time.perf_counter()
    reps = [dp_ratio_test(1.0, eps, 1.0, -1.0, n_samples=1_000_000) for eps in EPSILONS]
    secs = time.perf_counter() - t
    _detail(record_property, "empirical eps " + ", ".join(f"{r.epsilon_empirical:.3f}/{r.epsilon_claimed:g}" for r in reps) + f" in {secs:.1f}s")
    for r in reps:
        assert r.status == "pass" and r.epsilon_empirical <= 1.15 * r.epsilon_claimed
    assert secs < 30


@pytest.mark.criterion(2)
def test_criterion_02_clip_invariant(record_property):
    g = torch.Generator().manual_seed(0)
    violations = 0
    for T in (0.5, 1.0, 20.0, 100.0):
        x = torch.randn(10_000, 16, generator=g) * torch.logspace(-2, 3, 10_000).unsqueeze(1)
        violations += int((clip_per_sample(x, T).abs().amax(1) > T * (1 + 1e-6)).sum())
    hand = clip_per_sample(torch.tensor([[30.0, -10.0, 5.0]]), 20.0)[0]
    _detail(record_property, f"{violations} violations over 4x10^4 tensors, hand case {[round(float(v), 4) for v in hand]}")
    assert violations == 0
    assert torch.allclose(hand, torch.tensor([20.0, -6.6667, 3.3333]), atol=1e-4)


@pytest.mark.criterion(3)
def test_criterion_03_closed_forms(record_property):
    lg = float(analyzer_loss([1, 0], [0.5, 0.5], [0, 1], [0.5, 0.5], 6.0))
    ld = float(adversary_loss([0, 1], [0.5, 0.5]))
    tv = float(tv_loss(torch.tensor([[[0.0, 1.0], [0.0, 1.0]]])))
    a = np.full((3, 8, 8), 0.5)
    p = psnr(a, a + 0.1)
    img = np.random.default_rng(0).random((3, 32, 32))
    s = ssim(img, img)
    _detail(record_property, f"L_G={lg:.6f} L_D={ld:.6f} TV={tv:g} PSNR={p:.6f} SSIM={s:.12f}")
    assert lg == pytest.approx(-5 * math.log(2), abs=1e-6)
    assert ld == pytest.approx(math.log(2), abs=1e-6)
    assert tv == 2.0
    assert p == pytest.approx(20.0, abs=1e-6)
    assert s == pytest.approx(1.0, abs=1e-9)


@pytest.mark.criterion(4)
def test_criterion_04_gradient_check(record_property):
    t = time.perf_counter()
    rel, n = edge_gradient_check()
    secs = time.perf_counter() - t
    frac = float(np.mean(rel <= 1e-3))
    _detail(record_property, f"{100 * frac:.2f}% of {n} edge coordinates within 1e-3 in {secs:.0f}s")
    assert n <= 5000 and frac >= 0.95 and secs < 120


@pytest.mark.criterion(5)
def test_criterion_05_freeze_contract(record_property):
    violations, steps = audit_freeze(small_bundle(seed=2), epochs=3, m_a=10)
    _detail(record_property, f"{violations} violations over {steps} audited steps (m_a=10)")
    assert steps > 0 and violations == 0


# ---------------------------------------------------------------------------
# 6-8: seeded end-to-end experiments


@pytest.mark.criterion(6)
def test_criterion_06_privacy_ordering(experiments, record_property):
    base, priv = _select(experiments, None), _select(experiments, 0.5)
    secs = sum(r["seconds"] for r in base + priv)
    lines = []
    ok = secs < 20 * 60
    for b, p in zip(base, priv):
        triv = b["trivial_sensitive"]
        worst = max(p["max_attack_cls_acc"], p["attacker_acc"])
        ok &= b["attacker_acc"] >= triv + 0.25
        ok &= worst <= triv + 0.12
        ok &= p["analyzer_acc"] >= b["analyzer_acc"] - 0.06
        lines.append(
            f"s{b['seed']}: base att {_pts(b['attacker_acc'])}, priv att max {_pts(worst)} (trivial {_pts(triv)}), "
            f"analyzer {_pts(p['analyzer_acc'])} vs {_pts(b['analyzer_acc'])}"
        )
    _detail(record_property, "; ".join(lines) + f"; {secs / 60:.1f} min")
    assert ok


@pytest.mark.criterion(7)
def test_criterion_07_reconstruction_ordering(experiments, record_property):
    base, priv = _select(experiments, None), _select(experiments, 1.0)
    b_deep, p_deep = _mean(base, "deep_ssim"), _mean(priv, "deep_ssim")
    b_wb, p_wb = _mean(base, "whitebox_ssim"), _mean(priv, "whitebox_ssim")
    _detail(record_property, f"deep SSIM {b_deep:.3f} -> {p_deep:.3f} (gap {b_deep - p_deep:.3f}); white-box {b_wb:.3f} -> {p_wb:.3f} (gap {b_wb - p_wb:.3f})")
    assert b_deep >= 0.55 and p_deep <= 0.45 and b_deep - p_deep >= 0.15
    assert b_wb - p_wb >= 0.10


def _inversions(values):
    """Sizes of the drops in a sequence that should be non-decreasing."""
    return [a - b for a, b in zip(values, values[1:]) if b < a]


@pytest.mark.criterion(8)
def test_criterion_08_epsilon_monotonicity(experiments, record_property):
    att = [_mean(_select(experiments, e), "attacker_acc") for e in EPSILONS]
    ana = [_mean(_select(experiments, e), "analyzer_acc") for e in EPSILONS]
    _detail(record_property, "attacker " + " <= ".join(_pts(v) for v in att) + "; analyzer " + " <= ".join(_pts(v) for v in ana))
    for seq in (att, ana):
        drops = _inversions(seq)
        assert len(drops) <= 1 and all(d <= 0.01 for d in drops)


# ---------------------------------------------------------------------------
# 9-11: accounting, channel, white-box sanity


@pytest.mark.criterion(9)
def test_criterion_09_accounting(record_property):
    priv = PrivacyConfig(1.0, 20.0)
    vgg = SplitModel(ArchitectureSpec("vgg11-like", input_shape=(3, 64, 64)), priv, 0)
    edge, cloud, maccs = count_parameters(vgg, "edge"), count_parameters(vgg, "cloud"), estimate_maccs(vgg, "edge")
    tiny = SplitModel(ArchitectureSpec(), priv, 0)

    def conv(cin, cout):
        return cin * cout * 9 + cout

    def head(k):
        # 3x3 conv to 8 channels, BN, linear over the 8x8 map
        return conv(32, 8) + 16 + 8 * 8 * 8 * k + k

    tiny_edge = conv(3, 16) + conv(16, 32) + 2 * head(2)
    tiny_cloud = conv(32, 32) + 64 + conv(32, 64) + 128 + 1024 * 64 + 64 + 64 * 2 + 2
    _detail(
        record_property,
        f"vgg11-like edge {edge / 1e6:.3f}M, cloud {cloud / 1e6:.2f}M, edge MACCs {maccs / 1e6:.1f}M; "
        f"tiny-cnn {count_parameters(tiny, 'edge')}/{count_parameters(tiny, 'cloud')} vs {tiny_edge}/{tiny_cloud}",
    )
    assert abs(edge - 0.46e6) / 0.46e6 <= 0.10 and abs(cloud - 10.17e6) / 10.17e6 <= 0.10
    assert abs(maccs - 533.39e6) / 533.39e6 <= 0.15
    assert count_parameters(tiny, "edge") == tiny_edge and count_parameters(tiny, "cloud") == tiny_cloud


def _paired_logs(kind, out):
    cfg = harness.build_config(
        {"seed": 5, "dataset": {"sizes": [256, 256, 128]}, "train": {"n_p": 1, "n_t": 3, "m_a": 2}, "attack": {"whitebox": False}, "transport": {"kind": kind}}
    )
    harness.run_training(cfg, True, out_dir=out)
    return (out / "logs.csv").read_bytes()


@pytest.mark.criterion(10)
def test_criterion_10_channel(tmp_path, record_property):
    rng = np.random.default_rng(0)
    exact = rejected = 0
    for _ in range(1000):
        dims = tuple(int(d) for d in rng.integers(1, 6, size=int(rng.integers(1, 5))))
        f = ch.Frame(int(rng.integers(0, 4)), int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)), rng.standard_normal(dims).astype(np.float32))
        data = ch.encode(f)
        g = ch.decode(data)
        exact += g == f and g.payload.tobytes() == f.payload.tobytes()
        bad = bytearray(data)
        bad[int(rng.integers(16 + 4 * len(dims), len(data) - 4))] ^= 0x10
        try:
            ch.decode(bytes(bad))
        except ProtocolError as exc:
            rejected += exc.code == ProtocolError.CRC
    loop = _paired_logs("loopback", tmp_path / "loopback")
    sock = _paired_logs("socket", tmp_path / "socket")
    _detail(record_property, f"{exact}/1000 bit-exact, {rejected}/1000 corrupted frames rejected (crc), CSVs identical: {loop == sock}")
    assert exact == 1000 and rejected == 1000 and loop == sock


@pytest.mark.criterion(11)
def test_criterion_11_whitebox_sanity(record_property):
    ident = SplitModel(ArchitectureSpec(split_point=0), PrivacyConfig(1.0, 20.0), 0)
    x = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    res_id = whitebox_reconstruct(ident, ident.forward_edge(x, noise_on=False), WhiteBoxConfig(alpha=0.0))
    tiny = SplitModel(ArchitectureSpec(), PrivacyConfig(1.0, 20.0), 3)
    x = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    res = whitebox_reconstruct(tiny, tiny.forward_edge(x, noise_on=False), WhiteBoxConfig(steps=2000))
    frac = res.non_increasing_fraction()
    _detail(record_property, f"identity objective {res_id.final_objective:.2e}; tiny-cnn non-increasing on {100 * frac:.2f}% of {len(res.objective) - 1} steps")
    assert res_id.final_objective < 1e-8
    assert len(res.objective) == 2001 and frac >= 0.99
