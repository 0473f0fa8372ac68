"""Split architectures, attacker networks and per-party cost accounting."""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import ConfigError, NumericError, SchemaError
from .privacy import PrivacyConfig, clip_per_sample, laplace_like

FAMILIES = ("tiny-cnn", "vgg11-like", "resnet18-like")
_DEFAULT_SPLIT = {"tiny-cnn": 2, "vgg11-like": 3, "resnet18-like": 3}
_DEPTH = {"tiny-cnn": 4, "vgg11-like": 8, "resnet18-like": 8}
_DEFAULT_EXIT_CH = {"tiny-cnn": 8, "vgg11-like": 16, "resnet18-like": 16}
# tanh outputs sit in [-gain, gain], half the default clip threshold
_TINY_EDGE_GAIN = {"relu": 100.0, "tanh": 10.0}
EDGE_ACTIVATIONS = ("relu", "tanh")

# offsets that give every component its own initialisation stream
_COMPONENT_SEED = {"edge": 1, "exit_analyzer": 2, "exit_adversary": 3, "cloud": 4, "attack_cls": 5, "attack_rec": 6}


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str = "tiny-cnn"
    split_point: int | None = None
    input_shape: tuple = (3, 32, 32)
    k_desired: int = 2
    k_sensitive: int = 2
    # tiny-cnn only: four conv widths then the hidden linear width
    width: tuple = (16, 32, 32, 64, 64)
    exit_channels: int | None = None
    # fixed multiplier on the edge output; keeps activations on the scale of the clip threshold
    edge_gain: float | None = None
    # tiny-cnn only: activation closing the last edge layer
    edge_activation: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "width", tuple(int(v) for v in self.width))
        if self.split_point is None:
            object.__setattr__(self, "split_point", _DEFAULT_SPLIT.get(self.family, 0))
        if self.exit_channels is None:
            object.__setattr__(self, "exit_channels", _DEFAULT_EXIT_CH.get(self.family, 8))
        tiny_edge = self.family == "tiny-cnn" and self.split_point > 0
        if self.edge_activation is None:
            object.__setattr__(self, "edge_activation", "tanh" if tiny_edge else "relu")
        if self.edge_gain is None:
            gain = _TINY_EDGE_GAIN.get(self.edge_activation, 1.0) if tiny_edge else 1.0
            object.__setattr__(self, "edge_gain", gain)
        object.__setattr__(self, "edge_gain", float(self.edge_gain))

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if not 0 <= self.split_point <= _DEPTH[self.family]:
            raise ConfigError(f"split_point {self.split_point} outside [0, {_DEPTH[self.family]}] for {self.family}")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (C, H, W)")
        if self.k_desired < 2 or self.k_sensitive < 2:
            raise ConfigError("class counts must be at least 2")
        if not self.edge_gain > 0:
            raise ConfigError("edge_gain must be positive")
        if self.edge_activation not in EDGE_ACTIVATIONS:
            raise ConfigError(f"edge_activation must be one of {EDGE_ACTIVATIONS}")
        if self.edge_activation != "relu" and self.family != "tiny-cnn":
            raise ConfigError("edge_activation is only configurable for tiny-cnn")
        if self.family == "tiny-cnn" and len(self.width) != 5:
            raise ConfigError("tiny-cnn width needs 5 entries")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("input_shape", "width"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@contextlib.contextmanager
def seeded(seed: int):
    """Run the block with torch's global generator temporarily seeded."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def component_seed(seed: int, component: str) -> int:
    return (int(seed) * 7919 + _COMPONENT_SEED[component]) % (2**31 - 1)


# ---------------------------------------------------------------------------
# building blocks


@dataclass
class Stage:
    """One edge stage as seen by the reconstructor: channels in/out and downsampling."""

    in_ch: int
    out_ch: int
    down: int


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def _tiny_blocks(spec):
    c = spec.input_shape[0]
    widths = spec.width[:4]
    strides = (2, 2, 1, 2)
    blocks, stages = [], []
    for i, (w, s) in enumerate(zip(widths, strides)):
        # cloud-side layers normalise their (noisy) input scale
        norm = [nn.BatchNorm2d(w)] if i >= spec.split_point else []
        # a bounded ending lets many released elements sit near the clip bound at once
        act = nn.Tanh() if i == spec.split_point - 1 and spec.edge_activation == "tanh" else nn.ReLU()
        blocks.append(nn.Sequential(nn.Conv2d(c, w, 3, s, 1), *norm, act))
        stages.append(Stage(c, w, s))
        c = w
    return blocks, stages


def _tiny_head(spec, in_shape, k):
    c, h, w = in_shape
    return nn.Sequential(nn.Flatten(), nn.Linear(c * h * w, spec.width[4]), nn.ReLU(), nn.Linear(spec.width[4], k))


_VGG11 = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")


def _vgg_blocks(spec):
    c = spec.input_shape[0]
    blocks, stages = [], []
    cfg = list(_VGG11)
    i = 0
    while i < len(cfg):
        w = cfg[i]
        layers = [nn.Conv2d(c, w, 3, 1, 1), nn.BatchNorm2d(w), nn.ReLU()]
        down = 1
        if i + 1 < len(cfg) and cfg[i + 1] == "M":
            layers.append(nn.MaxPool2d(2))
            down = 2
            i += 1
        blocks.append(nn.Sequential(*layers))
        stages.append(Stage(c, w, down))
        c = w
        i += 1
    return blocks, stages


def _vgg_head(spec, in_shape, k):
    c, h, w = in_shape
    return nn.Sequential(
        nn.Flatten(), nn.Linear(c * h * w, 512), nn.ReLU(), nn.Linear(512, 512), nn.ReLU(), nn.Linear(512, k)
    )


def _resnet_blocks(spec):
    c = spec.input_shape[0]
    stem = nn.Sequential(nn.Conv2d(c, 64, 7, 2, 3, bias=False), nn.BatchNorm2d(64), nn.ReLU(), nn.MaxPool2d(3, 2, 1))
    blocks, stages = [], []
    c = 64
    for w, s in ((64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)):
        blocks.append(BasicBlock(c, w, s))
        stages.append(Stage(c, w, s))
        c = w
    return stem, Stage(spec.input_shape[0], 64, 4), blocks, stages


def _resnet_head(spec, in_shape, k):
    return nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(in_shape[0], k))


def _shape_after(module, in_shape):
    with torch.no_grad():
        was = module.training
        module.eval()
        out = module(torch.zeros((1,) + tuple(in_shape)))
        module.train(was)
    return tuple(out.shape[1:])


def _build_trunk(spec):
    """Return (edge modules, edge stages, cloud modules, cloud head builder)."""
    if spec.family == "tiny-cnn":
        blocks, stages = _tiny_blocks(spec)
        k = spec.split_point
        return blocks[:k], stages[:k], blocks[k:], _tiny_head
    if spec.family == "vgg11-like":
        blocks, stages = _vgg_blocks(spec)
        k = spec.split_point
        return blocks[:k], stages[:k], blocks[k:], _vgg_head
    stem, stem_stage, blocks, stages = _resnet_blocks(spec)
    k = spec.split_point
    return [stem] + blocks[:k], [stem_stage] + stages[:k], blocks[k:], _resnet_head


def _build_cloud(spec, edge_out_shape, k, seed, component):
    with seeded(component_seed(seed, component)):
        _, _, cloud_blocks, head_fn = _build_trunk(spec)
        trunk = nn.Sequential(*cloud_blocks)
        head = head_fn(spec, _shape_after(trunk, edge_out_shape), k)
        return nn.Sequential(*cloud_blocks, *head)


class Gain(nn.Module):
    """Fixed, non-trainable output multiplier."""

    def __init__(self, gain: float):
        super().__init__()
        self.gain = float(gain)

    def forward(self, x):
        return x * self.gain

    def extra_repr(self):
        return f"gain={self.gain:g}"


class ExitHead(nn.Sequential):
    """Early exit: one channel-reducing conv, then one linear layer to logits."""

    def __init__(self, in_shape, k, channels, batch_norm=True):
        c, h, w = in_shape
        layers = [nn.Conv2d(c, channels, 3, 1, 1)]
        if batch_norm:
            layers.append(nn.BatchNorm2d(channels))
        layers += [nn.ReLU(), nn.Flatten(), nn.Linear(channels * h * w, k)]
        super().__init__(*layers)


class SplitModel(nn.Module):
    """Edge extractor (layers + clip + Laplace noise), two early exits and the cloud analyzer.

    ``privacy=None`` builds the non-private variant: no clipping and no noise.
    """

    def __init__(self, spec: ArchitectureSpec, privacy: PrivacyConfig | None, seed: int = 0, with_exits=True):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.privacy = privacy
        self.seed = seed
        with seeded(component_seed(seed, "edge")):
            edge_blocks, self.stages, _, _ = _build_trunk(spec)
            if spec.edge_gain != 1.0:
                edge_blocks = list(edge_blocks) + [Gain(spec.edge_gain)]
            self.edge = nn.Sequential(*edge_blocks)
        self.feature_shape = _shape_after(self.edge, spec.input_shape)
        self.exit_analyzer = self.exit_adversary = None
        if with_exits:
            with seeded(component_seed(seed, "exit_analyzer")):
                self.exit_analyzer = ExitHead(self.feature_shape, spec.k_desired, spec.exit_channels)
            with seeded(component_seed(seed, "exit_adversary")):
                self.exit_adversary = ExitHead(self.feature_shape, spec.k_sensitive, spec.exit_channels)
        self.cloud = _build_cloud(spec, self.feature_shape, spec.k_desired, seed, "cloud")

    @property
    def private(self):
        return self.privacy is not None

    def extract(self, x):
        """Feature-extraction layers only (no clip, no noise)."""
        return self.edge(x)

    def clip(self, feats):
        if self.privacy is None:
            return feats
        return clip_per_sample(feats, self.privacy.threshold)

    def add_noise(self, clipped, generator=None):
        if self.privacy is None:
            return clipped
        return clipped + laplace_like(clipped, self.privacy.scale, generator)

    def forward_edge(self, x, noise_on=True, generator=None):
        out = self.clip(self.extract(x))
        if not torch.isfinite(out).all():
            raise NumericError("non-finite edge activations")
        return self.add_noise(out, generator) if noise_on else out

    def forward(self, x, noise_on=True, generator=None):
        return self.cloud(self.forward_edge(x, noise_on, generator))

    def party_modules(self, party):
        if party == "edge":
            return [m for m in (self.edge, self.exit_analyzer, self.exit_adversary) if m is not None]
        if party == "cloud":
            return [self.cloud]
        raise ConfigError(f"party must be 'edge' or 'cloud', got {party!r}")


def build_split_model(spec: ArchitectureSpec, privacy: PrivacyConfig | None, seed: int = 0) -> SplitModel:
    return SplitModel(spec, privacy, seed)


class Reconstructor(nn.Module):
    """Decoder that undoes each edge stage in reverse order and ends in a sigmoid."""

    def __init__(self, stages, feature_shape, input_shape):
        super().__init__()
        layers = []
        rev = list(reversed(stages))
        if not rev:
            # identity edge: a single 3x3 conv still maps features to images
            rev = [Stage(input_shape[0], feature_shape[0], 1)]
        for i, st in enumerate(rev):
            last = i == len(rev) - 1
            cin, cout = st.out_ch, st.in_ch
            down = st.down
            while down > 1:
                layers += [nn.ConvTranspose2d(cin, cin, 4, 2, 1), nn.ReLU()]
                down //= 2
            layers.append(nn.Conv2d(cin, cout, 3, 1, 1))
            layers += [nn.Sigmoid()] if last else [nn.BatchNorm2d(cout), nn.ReLU()]
        self.net = nn.Sequential(*layers)
        self.input_shape = tuple(input_shape)

    def forward(self, x):
        return self.net(x)


class TinyReconstructor(nn.Module):
    """Transposed-conv mirror of stride-2 conv stages (tiny-cnn)."""

    def __init__(self, stages):
        super().__init__()
        layers = []
        rev = list(reversed(stages))
        for i, st in enumerate(rev):
            last = i == len(rev) - 1
            if st.down == 2:
                layers.append(nn.ConvTranspose2d(st.out_ch, st.in_ch, 3, 2, 1, output_padding=1))
            else:
                layers.append(nn.Conv2d(st.out_ch, st.in_ch, 3, 1, 1))
            layers += [nn.Sigmoid()] if last else [nn.BatchNorm2d(st.in_ch), nn.ReLU()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


@dataclass
class AttackerModels:
    classifier: nn.Module
    reconstructor: nn.Module


def build_attackers(spec: ArchitectureSpec, model: SplitModel, seed: int | None = None) -> AttackerModels:
    """Classifier with the cloud analyzer's topology (``k_sensitive`` logits) and a decoder mirroring the edge."""
    seed = model.seed if seed is None else seed
    cls = _build_cloud(spec, model.feature_shape, spec.k_sensitive, seed, "attack_cls")
    with seeded(component_seed(seed, "attack_rec")):
        if spec.family == "tiny-cnn" and model.stages:
            rec = TinyReconstructor(model.stages)
        else:
            rec = Reconstructor(model.stages, model.feature_shape, spec.input_shape)
    return AttackerModels(cls, rec)


# ---------------------------------------------------------------------------
# accounting


def _count(modules):
    return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)


def count_parameters(model, party: str = "edge") -> int:
    """Trainable parameters held by one party.

    For a :class:`SplitModel`: edge = extractor + both exits (clip and noise
    have none), cloud = analyzer.  For :class:`AttackerModels` every attacker
    lives in the cloud.
    """
    if isinstance(model, AttackerModels):
        if party != "cloud":
            return 0
        return _count([model.classifier, model.reconstructor])
    if isinstance(model, SplitModel):
        return _count(model.party_modules(party))
    if isinstance(model, nn.Module):
        return _count([model])
    raise TypeError(f"cannot count parameters of {type(model).__name__}")


def _forward_maccs(module, x):
    total = 0

    def hook(m, inp, out):
        nonlocal total
        if isinstance(m, nn.Conv2d):
            k = m.kernel_size[0] * m.kernel_size[1]
            total += out.numel() // out.shape[0] * (m.in_channels // m.groups) * k
        elif isinstance(m, nn.ConvTranspose2d):
            k = m.kernel_size[0] * m.kernel_size[1]
            total += inp[0].numel() // inp[0].shape[0] * (m.out_channels // m.groups) * k
        elif isinstance(m, nn.Linear):
            total += m.in_features * m.out_features

    handles = [m.register_forward_hook(hook) for m in module.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))]
    try:
        was = module.training
        module.eval()
        with torch.no_grad():
            out = module(x)
        module.train(was)
    finally:
        for h in handles:
            h.remove()
    return total, out


def estimate_maccs(model, party: str = "edge", batch_mode: str = "train") -> int:
    """Multiply-accumulates per sample.

    Only convolutions and linear layers are counted.  ``batch_mode='train'``
    charges the backward pass at twice the forward cost (3x forward total);
    ``'inference'`` returns the forward count.
    """
    if batch_mode not in ("train", "inference"):
        raise ConfigError("batch_mode must be 'train' or 'inference'")
    factor = 3 if batch_mode == "train" else 1
    x = torch.zeros((1,) + tuple(model.spec.input_shape))
    edge_maccs, feats = _forward_maccs(model.edge, x)
    if party == "edge":
        heads = sum(_forward_maccs(h, feats)[0] for h in (model.exit_analyzer, model.exit_adversary) if h is not None)
        return factor * (edge_maccs + heads)
    if party == "cloud":
        return factor * _forward_maccs(model.cloud, feats)[0]
    raise ConfigError(f"party must be 'edge' or 'cloud', got {party!r}")


def parameter_checksum(module_or_modules) -> str:
    """SHA-256 over the raw bytes of every parameter and buffer, in registration order."""
    mods = module_or_modules if isinstance(module_or_modules, (list, tuple)) else [module_or_modules]
    h = hashlib.sha256()
    for m in mods:
        for name, t in list(m.named_parameters()) + list(m.named_buffers()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "splitguard-checkpoint/1"


def save_checkpoint(path, model: SplitModel, attackers: AttackerModels | None = None, extra: dict | None = None):
    """Single-file archive: per-party state dicts plus spec and privacy config as JSON."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "arch": json.dumps(model.spec.to_dict(), sort_keys=True),
        "privacy": json.dumps(model.privacy.to_dict() if model.privacy else None, sort_keys=True),
        "seed": model.seed,
        "with_exits": model.exit_analyzer is not None,
        "parties": {
            "edge": {
                "extractor": model.edge.state_dict(),
                "exit_analyzer": model.exit_analyzer.state_dict() if model.exit_analyzer else None,
                "exit_adversary": model.exit_adversary.state_dict() if model.exit_adversary else None,
            },
            "cloud": {"analyzer": model.cloud.state_dict()},
        },
        "attackers": None
        if attackers is None
        else {"classifier": attackers.classifier.state_dict(), "reconstructor": attackers.reconstructor.state_dict()},
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    torch.save(blob, path)


def load_checkpoint(path, expect_spec: ArchitectureSpec | None = None):
    """Return ``(model, attackers_or_None, extra)``; raise if the embedded spec differs from ``expect_spec``."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    spec = ArchitectureSpec.from_dict(json.loads(blob["arch"]))
    if expect_spec is not None and spec != expect_spec:
        raise ConfigError(f"checkpoint architecture {spec} does not match config {expect_spec}")
    priv = json.loads(blob["privacy"])
    privacy = PrivacyConfig(**priv) if priv else None
    model = SplitModel(spec, privacy, blob["seed"], with_exits=blob.get("with_exits", True))
    edge = blob["parties"]["edge"]
    model.edge.load_state_dict(edge["extractor"])
    if edge["exit_analyzer"] is not None:
        model.exit_analyzer.load_state_dict(edge["exit_analyzer"])
        model.exit_adversary.load_state_dict(edge["exit_adversary"])
    model.cloud.load_state_dict(blob["parties"]["cloud"]["analyzer"])
    attackers = None
    if blob["attackers"] is not None:
        attackers = build_attackers(spec, model)
        attackers.classifier.load_state_dict(blob["attackers"]["classifier"])
        attackers.reconstructor.load_state_dict(blob["attackers"]["reconstructor"])
    return model, attackers, json.loads(blob["extra"])
