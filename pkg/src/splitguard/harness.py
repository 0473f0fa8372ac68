"""Run configuration, the three execution steps, epsilon sweeps and report/plot emission.

A run directory holds ``config.json`` (resolved configuration), ``logs.csv`` /
``logs.json`` (per-epoch records, pre-training first), ``metrics.json``
(schema-checked), ``checkpoints/`` and PNG figures.  Everything written to
``metrics.json`` is a deterministic function of configuration and seed.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import tomli
import torch

from . import channel as ch
from .attacks import AttackState, WhiteBoxConfig, attack_epoch, evaluate_attackers, make_attack_state, reconstruct, whitebox_reconstruct
from .datasets import DatasetBundle, SyntheticAttributeSpec, generate_synthetic, load_external, trivial_classifier
from .errors import ConfigError, SchemaError
from .metrics import accuracy, similarity_report
from .models import ArchitectureSpec, SplitModel, count_parameters, estimate_maccs, load_checkpoint, save_checkpoint
from .privacy import PrivacyConfig, dp_ratio_test
from .training import EpochLog, TrainConfig, pretrain_edge, stream, train_baseline, train_edge_cloud, write_logs_csv, write_logs_json

log = logging.getLogger(__name__)

OUT_ENV = "SPLITGUARD_OUT"
METRICS_FORMAT = "splitguard-metrics/1"

DEFAULTS = {
    "seed": 7,
    "dataset": {
        "kind": "synthetic",
        "path": "",
        "table": "attributes.csv",
        "desired_attr": "desired",
        "sensitive_attr": "sensitive",
        "sizes": [2000, 2000, 1000],
        "image_size": 32,
        "synthetic": {},
    },
    "arch": {"family": "tiny-cnn"},
    "privacy": {"threshold": 20.0, "epsilon": 1.0},
    "train": {"n_p": 5, "n_t": 50, "lam": 6.0, "m_a": 10},
    "attack": {"simultaneous": True, "lr": 1e-3, "batch_size": 64, "whitebox": True, "whitebox_images": 16, "grid_images": 8},
    "whitebox": {},
    "transport": {"kind": "loopback", "host": "127.0.0.1", "port": 0, "timeout_s": 60.0},
    "sweep": {"epsilons": [0.5, 1.0, 2.0], "seeds": [7]},
    "dp_verify": {"threshold": 1.0, "epsilons": [0.5, 1.0, 2.0], "n_samples": 1_000_000, "n_bins": 50},
}


def _schema(name):
    return json.loads(resources.files("splitguard").joinpath("schemas", name).read_text())


def _deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    seed: int
    output_dir: str | None
    dataset: dict
    arch: dict
    privacy: PrivacyConfig
    train: TrainConfig
    attack: dict
    whitebox: WhiteBoxConfig
    transport: dict
    sweep: dict
    dp_verify: dict
    raw: dict = field(repr=False, default_factory=dict)

    def with_seed(self, seed: int) -> RunConfig:
        return build_config(_deep_merge(self.raw, {"seed": int(seed)}))

    def with_epsilon(self, eps: float) -> RunConfig:
        return build_config(_deep_merge(self.raw, {"privacy": {"epsilon": float(eps)}}))

    def to_dict(self):
        return copy.deepcopy(self.raw)


def validate_config_dict(d: dict):
    try:
        jsonschema.validate(d, _schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def build_config(d: dict | None = None) -> RunConfig:
    """Validate a (partial) config mapping, fill defaults and build the typed sections."""
    d = d or {}
    validate_config_dict(d)
    raw = _deep_merge(DEFAULTS, d)
    seed = int(raw["seed"])
    train = TrainConfig(**{**raw["train"], "seed": seed}).validate()
    wb = WhiteBoxConfig(**{**raw["whitebox"], "seed": seed}).validate()
    privacy = PrivacyConfig(raw["privacy"]["epsilon"], raw["privacy"]["threshold"])
    return RunConfig(
        seed, raw.get("output_dir"), raw["dataset"], raw["arch"], privacy, train, raw["attack"], wb, raw["transport"], raw["sweep"], raw["dp_verify"], raw
    )


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a TOML config file (optional), apply overrides and validate against the shipped schema."""
    d = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                d = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_config(_deep_merge(d, overrides or {}))


def default_config_toml() -> str:
    """The default configuration as TOML text, for ``splitguard init``-style bootstrapping and docs."""
    lines = [f"seed = {DEFAULTS['seed']}", ""]
    for section, values in DEFAULTS.items():
        if not isinstance(values, dict):
            continue
        lines.append(f"[{section}]")
        for k, v in values.items():
            if not isinstance(v, dict):
                lines.append(f"{k} = {json.dumps(v)}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# data and models


def build_bundle(cfg: RunConfig) -> DatasetBundle:
    ds = cfg.dataset
    seed = int(ds.get("seed", cfg.seed))
    if ds["kind"] == "synthetic":
        spec = SyntheticAttributeSpec(image_size=ds["image_size"], seed=seed, **ds["synthetic"])
        return generate_synthetic(spec, ds["sizes"])
    if not ds["path"]:
        raise ConfigError("dataset.path is required for external datasets")
    return load_external(
        ds["path"], ds["desired_attr"], ds["sensitive_attr"], ds["sizes"], seed=seed, image_size=ds["image_size"], table=ds["table"]
    )


def arch_spec(cfg: RunConfig, bundle: DatasetBundle) -> ArchitectureSpec:
    return ArchitectureSpec(input_shape=bundle.shape, k_desired=bundle.k_desired, k_sensitive=bundle.k_sensitive, **cfg.arch).validate()


def make_channel(cfg: RunConfig):
    t = cfg.transport
    return ch.make_transport(t["kind"], t["host"], t["port"], t["timeout_s"])


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    variant: str
    seed: int
    epsilon: float | None
    model: SplitModel
    attack: AttackState | None
    pretrain_logs: list
    logs: list
    metrics: dict
    recon_examples: dict = field(default_factory=dict)

    @property
    def all_logs(self):
        return self.pretrain_logs + self.logs


def _released_test_features(model: SplitModel, x, seed: int, batch_size: int = 256):
    gen = stream(seed, "eval_noise")
    with torch.no_grad():
        return torch.cat([model.forward_edge(x[i : i + batch_size], noise_on=model.private, generator=gen) for i in range(0, len(x), batch_size)])


def evaluate_run(model: SplitModel, attack: AttackState | None, bundle: DatasetBundle, cfg: RunConfig, whitebox: bool | None = None):
    """Step 3 on the unseen test split: analyzer accuracy, attacker accuracy and reconstructions.

    Returns ``(test_metrics, examples)`` where ``examples`` maps row names to image tensors for grids.
    """
    test = bundle.test
    x = torch.tensor(test.images)
    y, z = torch.tensor(test.y), torch.tensor(test.z).long()
    was = model.training
    model.eval()
    try:
        feats = _released_test_features(model, x, cfg.seed)
        with torch.no_grad():
            logits = torch.cat([model.cloud(feats[i : i + 256]) for i in range(0, len(feats), 256)])
        out = {"analyzer_acc": accuracy(logits, y), "attacker_acc": None, "reconstruction": None, "whitebox": None}
        k = min(cfg.attack["grid_images"], len(x))
        examples = {"original": x[:k]}
        if attack is not None:
            acc, _ = evaluate_attackers(attack, feats, None, z)
            rec = reconstruct(attack, feats)
            out["attacker_acc"] = acc
            out["reconstruction"] = similarity_report(x, rec).to_dict()
            examples["deep"] = rec[:k]
        if cfg.attack["whitebox"] if whitebox is None else whitebox:
            n = min(cfg.attack["whitebox_images"], len(x))
            res = whitebox_reconstruct(model, feats[:n], cfg.whitebox)
            out["whitebox"] = similarity_report(x[:n], res.u).to_dict()
            examples["whitebox"] = res.u[:k]
    finally:
        model.train(was)
    return out, examples


def evaluate_exits(model: SplitModel, bundle: DatasetBundle, seed: int) -> dict:
    """Test-split accuracy of the edge exits on released features, with the model as it stands."""
    was = model.training
    model.eval()
    try:
        feats = _released_test_features(model, torch.tensor(bundle.test.images), seed)
        with torch.no_grad():
            g, d = model.exit_analyzer(feats), model.exit_adversary(feats)
    finally:
        model.train(was)
    return {"exit_analyzer_acc": accuracy(g, torch.tensor(bundle.test.y)), "exit_adversary_acc": accuracy(d, torch.tensor(bundle.test.z))}


def _final(logs, name):
    vals = [getattr(lg, name) for lg in logs if math.isfinite(getattr(lg, name))]
    return vals[-1] if vals else None


def _max(logs, name):
    vals = [getattr(lg, name) for lg in logs if math.isfinite(getattr(lg, name))]
    return max(vals) if vals else None


def build_metrics(result_variant, cfg, bundle, model, pretrain_logs, logs, test_metrics):
    private = result_variant == "private"
    return {
        "format": METRICS_FORMAT,
        "variant": result_variant,
        "seed": cfg.seed,
        "epsilon": cfg.privacy.epsilon if private else None,
        "threshold": cfg.privacy.threshold if private else None,
        "trivial": {"desired": trivial_classifier(bundle, "desired"), "sensitive": trivial_classifier(bundle, "sensitive")},
        "test": test_metrics,
        "train": {
            "pretrain_epochs": len(pretrain_logs),
            "epochs": len(logs),
            "final_analyzer_acc": _final(logs, "analyzer_acc"),
            "max_attack_cls_acc": _max(logs, "attack_cls_acc"),
            "final_attack_rec_mse": _final(logs, "attack_rec_mse"),
        },
        "accounting": {
            "edge_params": count_parameters(model, "edge"),
            "cloud_params": count_parameters(model, "cloud"),
            "edge_maccs_train": estimate_maccs(model, "edge", "train"),
            "edge_maccs_inference": estimate_maccs(model, "edge", "inference"),
        },
    }


def validate_metrics(metrics: dict):
    try:
        jsonschema.validate(metrics, _schema("metrics.schema.json"))
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"metrics do not match {METRICS_FORMAT}: {exc.message}") from None


def _attack_hook(state: AttackState | None, bundle: DatasetBundle, ckpt_dir: Path | None, every: int):
    def hook(epoch, released, model):
        extra = {}
        if state is not None:
            idx = released.order.numpy()
            # ground truth held by the evaluator for scoring only
            _, extra = attack_epoch(state, model, bundle.attacker_train, released, bundle.user_train.images[idx], bundle.user_train.z[idx])
        if ckpt_dir is not None and every and epoch % every == 0:
            save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.pt", model, state.models if state else None, {"epoch": epoch})
        return extra

    return hook


def run_pretrain(cfg: RunConfig, bundle: DatasetBundle | None = None, out_dir=None):
    """Step 1: adversarial pre-training of the edge.  Returns ``(model, logs)``."""
    bundle = bundle or build_bundle(cfg)
    model = SplitModel(arch_spec(cfg, bundle), cfg.privacy, cfg.seed)
    model, logs = pretrain_edge(model, bundle, cfg.train)
    if out_dir is not None:
        out = _prepare(out_dir, cfg)
        write_logs_csv(out / "logs.csv", logs)
        write_logs_json(out / "logs.json", logs)
        save_checkpoint(out / "checkpoints" / "pretrained.pt", model, None, {"phase": "pretrain"})
    return model, logs


def run_training(cfg: RunConfig, private: bool = True, bundle: DatasetBundle | None = None, out_dir=None, model: SplitModel | None = None):
    """Steps 1 to 2-3: pre-training (private only), edge-cloud training with the simultaneous attack, then test evaluation."""
    bundle = bundle or build_bundle(cfg)
    spec = arch_spec(cfg, bundle)
    out = _prepare(out_dir, cfg) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out else None
    pre_logs = []
    if private:
        if model is None:
            model = SplitModel(spec, cfg.privacy, cfg.seed)
            model, pre_logs = pretrain_edge(model, bundle, cfg.train)
        probe = model
    else:
        # same construction as train_baseline, used only for attacker shapes
        probe = SplitModel(spec, None, cfg.seed, with_exits=False)
    state = None
    if cfg.attack["simultaneous"]:
        state = make_attack_state(probe, cfg.seed, cfg.attack["lr"], cfg.attack["batch_size"])
    hook = _attack_hook(state, bundle, ckpt_dir, cfg.train.checkpoint_every)
    channel = make_channel(cfg)
    if private:
        model, logs = train_edge_cloud(model, bundle, cfg.train, channel, on_epoch_end=hook)
    else:
        model, logs = train_baseline(spec, bundle, cfg.train, channel, on_epoch_end=hook)
    test_metrics, examples = evaluate_run(model, state, bundle, cfg)
    variant = "private" if private else "baseline"
    metrics = build_metrics(variant, cfg, bundle, model, pre_logs, logs, test_metrics)
    validate_metrics(metrics)
    result = RunResult(variant, cfg.seed, cfg.privacy.epsilon if private else None, model, state, pre_logs, logs, metrics, examples)
    if out is not None:
        write_run(out, result, bundle)
    return result


def _prepare(out_dir, cfg: RunConfig) -> Path:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    return out


def write_metrics(path, metrics):
    validate_metrics(metrics)
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)


def write_run(out: Path, result: RunResult, bundle: DatasetBundle):
    from . import report

    write_logs_csv(out / "logs.csv", result.all_logs)
    write_logs_json(out / "logs.json", result.all_logs)
    write_metrics(out / "metrics.json", result.metrics)
    save_checkpoint(out / "checkpoints" / "final.pt", result.model, result.attack.models if result.attack else None, {"variant": result.variant})
    report.plot_attack_curves(out / "attack_curves.png", {result.variant: result.logs}, result.metrics["trivial"]["sensitive"])
    rows = [("original", result.recon_examples["original"])]
    rows += [(f"{result.variant} {k}", v) for k, v in result.recon_examples.items() if k != "original"]
    report.image_grid(out / "reconstructions.png", rows)


def evaluate_checkpoint(cfg: RunConfig, checkpoint, bundle: DatasetBundle | None = None, whitebox: bool = False):
    """Step 3 from a saved checkpoint; refuses checkpoints whose architecture disagrees with the config."""
    bundle = bundle or build_bundle(cfg)
    model, attackers, _ = load_checkpoint(checkpoint, expect_spec=arch_spec(cfg, bundle))
    state = None
    if attackers is not None:
        state = make_attack_state(model, cfg.seed, cfg.attack["lr"], cfg.attack["batch_size"])
        state.models = attackers
    test_metrics, examples = evaluate_run(model, state, bundle, cfg, whitebox=whitebox)
    return model, test_metrics, examples


# ---------------------------------------------------------------------------
# sweeps and DP verification


def run_sweep(cfg: RunConfig, epsilons=None, seeds=None, out_dir=None):
    """One baseline plus one private run per epsilon, for every seed.

    Returns the list of per-run summary rows.  A failing sub-run aborts the
    sweep; rows finished so far stay in ``sweep.json`` / ``sweep.csv``.
    """
    from . import report

    epsilons = list(epsilons or cfg.sweep["epsilons"])
    seeds = list(seeds or cfg.sweep["seeds"])
    if not epsilons:
        raise ConfigError("sweep needs at least one epsilon")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, curves, grids = [], {}, {}
    try:
        for seed in seeds:
            scfg = cfg.with_seed(seed)
            bundle = build_bundle(scfg)
            runs = [("baseline", None)] + [("private", e) for e in epsilons]
            for variant, eps in runs:
                rcfg = scfg.with_epsilon(eps) if eps is not None else scfg
                name = "baseline" if eps is None else f"eps{eps:g}"
                sub = out / f"seed{seed}" / name if out is not None else None
                res = run_training(rcfg, variant == "private", bundle, sub)
                rows.append(summary_row(res))
                curves.setdefault(name, []).append(res.logs)
                if seed == seeds[0]:
                    grids.setdefault("original", res.recon_examples["original"])
                    if "deep" in res.recon_examples:
                        grids[name] = res.recon_examples["deep"]
    finally:
        if out is not None and rows:
            _write_rows(out, rows)
            report.plot_tradeoff(out / "tradeoff.png", rows)
            report.plot_attack_curves(out / "attack_curves.png", curves, rows[0]["trivial_sensitive"])
            report.image_grid(out / "reconstructions.png", list(grids.items()))
    return rows


def summary_row(res: RunResult) -> dict:
    m = res.metrics
    rec = m["test"]["reconstruction"] or {}
    wb = m["test"]["whitebox"] or {}
    return {
        "seed": res.seed,
        "variant": res.variant,
        "epsilon": res.epsilon,
        "analyzer_acc": m["test"]["analyzer_acc"],
        "attacker_acc": m["test"]["attacker_acc"],
        "max_attack_cls_acc": m["train"]["max_attack_cls_acc"],
        "deep_ssim": rec.get("ssim"),
        "deep_psnr_db": rec.get("psnr_db"),
        "whitebox_ssim": wb.get("ssim"),
        "trivial_sensitive": m["trivial"]["sensitive"],
        "trivial_desired": m["trivial"]["desired"],
    }


def _write_rows(out: Path, rows):
    with open(out / "sweep.json", "w") as fh:
        json.dump(rows, fh, indent=1)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def run_dp_verify(cfg: RunConfig, out_dir=None):
    """Empirical density-ratio test on the diameter input pair ``(T, -T)`` for each configured epsilon."""
    d = cfg.dp_verify
    T = float(d["threshold"])
    reports = []
    for eps in d["epsilons"]:
        kw = {k: d[k] for k in ("n_bins", "min_count", "slack") if k in d}
        reports.append(dp_ratio_test(T, float(eps), T, -T, n_samples=int(d["n_samples"]), seed=cfg.seed, **kw).to_dict())
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "dp_verify.json", "w") as fh:
            json.dump(reports, fh, indent=1)
    return reports


def default_out_dir(command: str, seed: int) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-seed{seed}"


def logs_from_json(path) -> list:
    with open(path) as fh:
        rows = json.load(fh)
    return [EpochLog(**{k: (float("nan") if v is None else v) for k, v in r.items()}) for r in rows]


__all__ = [
    "DEFAULTS",
    "OUT_ENV",
    "RunConfig",
    "RunResult",
    "build_bundle",
    "build_config",
    "evaluate_checkpoint",
    "evaluate_run",
    "load_config",
    "run_dp_verify",
    "run_pretrain",
    "run_sweep",
    "run_training",
    "validate_metrics",
]
