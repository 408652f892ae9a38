"""Encoder / feature-pyramid decoder segmentation network and its checkpoints.

The encoder is a stack of stride-2 stages, either convolutional or
Mix-Transformer style (overlapping patch embedding, spatially reduced
self-attention, Mix-FFN).  The decoder is the usual FPN head: 1x1 lateral
projections, top-down upsample-and-add, 3x3 smoothing, upsampling to the
input resolution and a 1x1 prediction head producing one logit map.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import ConfigError, DataError

CONV_STAGE = "conv"
ATTENTION_STAGE = "attention"


class CheckpointMismatchError(ConfigError):
    kind = "checkpoint_mismatch"


class PretrainedWeightsError(ConfigError):
    kind = "pretrained_weights_error"


@dataclass(frozen=True)
class ModelConfig:
    encoder_stages: int = 3
    stage_widths: tuple[int, ...] = (8, 16, 32)
    encoder_kind: tuple[str, ...] = (CONV_STAGE, CONV_STAGE, CONV_STAGE)
    pyramid_width: int = 16
    use_pretrained_encoder: bool = False
    attention_heads: tuple[int, ...] = (1, 1, 1)
    reduction_ratios: tuple[int, ...] = (4, 2, 1)
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        for name in ("stage_widths", "encoder_kind", "attention_heads", "reduction_ratios"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = self.encoder_stages
        if n < 3:
            raise ConfigError("encoder_stages must be >= 3", encoder_stages=n)
        for name in ("stage_widths", "encoder_kind", "attention_heads", "reduction_ratios"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"len({name}) must equal encoder_stages", **{name: getattr(self, name)})
        if min(self.stage_widths) < 1 or self.pyramid_width < 1:
            raise ConfigError("channel widths must be >= 1")
        if any(k not in (CONV_STAGE, ATTENTION_STAGE) for k in self.encoder_kind):
            raise ConfigError("encoder_kind entries must be 'conv' or 'attention'",
                              encoder_kind=self.encoder_kind)
        for w, h, kind in zip(self.stage_widths, self.attention_heads, self.encoder_kind):
            if kind == ATTENTION_STAGE and (h < 1 or w % h):
                raise ConfigError("attention heads must divide the stage width", width=w, heads=h)
        if min(self.reduction_ratios) < 1 or self.mlp_ratio < 1:
            raise ConfigError("reduction ratios and mlp_ratio must be >= 1")

    @property
    def divisor(self) -> int:
        return 2 ** self.encoder_stages

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        return cls(**dict(d))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "desk-attention": ModelConfig(encoder_kind=(ATTENTION_STAGE,) * 3),
    # <= 1k parameters, for finite-difference gradient checks
    "micro": ModelConfig(stage_widths=(3, 4, 4), pyramid_width=4),
    "micro-attention": ModelConfig(stage_widths=(4, 4, 4), encoder_kind=(ATTENTION_STAGE,) * 3,
                                   pyramid_width=4, reduction_ratios=(2, 1, 1), mlp_ratio=1),
    # MiT-B2-like widths behind a 256-channel pyramid
    "paper": ModelConfig(encoder_stages=4, stage_widths=(64, 128, 320, 512),
                         encoder_kind=(ATTENTION_STAGE,) * 4, pyramid_width=256,
                         attention_heads=(1, 2, 5, 8), reduction_ratios=(8, 4, 2, 1)),
}


def model_config_for(preset: str) -> ModelConfig:
    try:
        return PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown model preset {preset!r}", choices=sorted(PRESETS)) from None


def _groups(channels: int) -> int:
    return math.gcd(channels, 4)


class ConvStage(nn.Module):
    def __init__(self, cin: int, cout: int) -> None:
        super().__init__()
        self.down = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.norm1(self.down(x)))
        return F.relu(self.norm2(self.conv(x)))


class EfficientAttention(nn.Module):
    """Multi-head self-attention whose keys/values come from a strided reduction of the map."""

    def __init__(self, dim: int, heads: int, reduction: int) -> None:
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.reduction = reduction
        if reduction > 1:
            self.sr = nn.Conv2d(dim, dim, reduction, stride=reduction)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        d = c // self.heads
        q = self.q(x).reshape(b, n, self.heads, d).transpose(1, 2)
        if self.reduction > 1:
            r = self.sr(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
            r = self.sr_norm(r)
        else:
            r = x
        k, v = self.kv(r).reshape(b, -1, 2, self.heads, d).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class MixFFN(nn.Module):
    def __init__(self, dim: int, ratio: int) -> None:
        super().__init__()
        hidden = dim * ratio
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, _ = x.shape
        x = self.fc1(x)
        x = self.dw(x.transpose(1, 2).reshape(b, -1, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class AttentionStage(nn.Module):
    def __init__(self, cin: int, cout: int, heads: int, reduction: int, mlp_ratio: int) -> None:
        super().__init__()
        self.embed = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.embed_norm = nn.LayerNorm(cout)
        self.norm1 = nn.LayerNorm(cout)
        self.attn = EfficientAttention(cout, heads, reduction)
        self.norm2 = nn.LayerNorm(cout)
        self.ffn = MixFFN(cout, mlp_ratio)
        self.out_norm = nn.LayerNorm(cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.embed(x)
        b, c, h, w = x.shape
        t = self.embed_norm(x.flatten(2).transpose(1, 2))
        t = t + self.attn(self.norm1(t), h, w)
        t = t + self.ffn(self.norm2(t), h, w)
        return self.out_norm(t).transpose(1, 2).reshape(b, c, h, w)


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        stages = []
        cin = 3
        for i, cout in enumerate(config.stage_widths):
            if config.encoder_kind[i] == CONV_STAGE:
                stages.append(ConvStage(cin, cout))
            else:
                stages.append(AttentionStage(cin, cout, config.attention_heads[i],
                                             config.reduction_ratios[i], config.mlp_ratio))
            cin = cout
        self.encoder = nn.ModuleList(stages)
        p = config.pyramid_width
        self.lateral = nn.ModuleList(nn.Conv2d(c, p, 1) for c in config.stage_widths)
        self.smooth = nn.Conv2d(p, p, 3, padding=1)
        self.head = nn.Conv2d(p, 1, 1)

    def fingerprint(self) -> str:
        return _fingerprint(self.config, ((n, tuple(t.shape)) for n, t in self.named_parameters()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        div = self.config.divisor
        if h % div or w % div:
            raise DataError(f"input size {h}x{w} must be divisible by {div}", divisor=div)
        feats = []
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        top = self.lateral[-1](feats[-1])
        for lateral, feat in zip(reversed(self.lateral[:-1]), reversed(feats[:-1])):
            top = lateral(feat) + F.interpolate(top, scale_factor=2.0, mode="nearest")
        y = F.relu(self.smooth(top))
        y = F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)
        return self.head(y)


def _fingerprint(config: ModelConfig, names_shapes) -> str:
    h = hashlib.sha256(config.canonical_json().encode())
    for name, shape in names_shapes:
        h.update(f"\n{name}:{'x'.join(map(str, shape))}".encode())
    return h.hexdigest()


def fingerprint(config: ModelConfig) -> str:
    """Hash of the canonical config plus every parameter name and shape."""
    with torch.device("meta"):
        shell = SegmentationModel(config)
    return shell.fingerprint()


def parameter_count(config: ModelConfig) -> int:
    with torch.device("meta"):
        shell = SegmentationModel(config)
    return sum(p.numel() for p in shell.parameters())


def _init_parameters(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                w = module.weight
                fan_in = w[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.GroupNorm, nn.LayerNorm)):
                module.weight.fill_(1.0)
                module.bias.zero_()


def parameter_set(model: nn.Module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((n, p.detach().cpu().numpy().copy()) for n, p in model.named_parameters())


def parameter_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr)
        h.update(f"{name}:{arr.dtype.str}:{arr.shape}".encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def build_model(config: ModelConfig, init_seed: int = 0, pretrained: Mapping[str, np.ndarray] | str | Path | None = None,
                dtype: torch.dtype = torch.float64):
    """Build a model with seeded fan-in uniform weights and zero biases.

    When ``config.use_pretrained_encoder`` is set, ``pretrained`` (a mapping
    or an ``.npz`` path keyed by parameter name) overwrites the encoder.
    Returns ``(model, parameter_set)``.
    """
    model = SegmentationModel(config).to(dtype)
    _init_parameters(model, init_seed)
    if config.use_pretrained_encoder:
        if pretrained is None:
            raise PretrainedWeightsError("pretrained encoder requested but no weights were supplied")
        if not isinstance(pretrained, Mapping):
            path = Path(pretrained)
            if not path.is_file():
                raise PretrainedWeightsError(f"pretrained weight file not found: {path}", path=str(path))
            with np.load(path) as npz:
                pretrained = {k: npz[k] for k in npz.files}
        own = dict(model.named_parameters())
        with torch.no_grad():
            for name, arr in pretrained.items():
                if not name.startswith("encoder."):
                    continue
                if name not in own:
                    raise PretrainedWeightsError(f"pretrained entry {name!r} has no matching parameter", name=name)
                if tuple(own[name].shape) != tuple(np.shape(arr)):
                    raise PretrainedWeightsError(
                        f"pretrained entry {name!r} has shape {np.shape(arr)}, model expects "
                        f"{tuple(own[name].shape)}", name=name)
                own[name].copy_(torch.as_tensor(np.asarray(arr)))
    return model, parameter_set(model)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.metadata["fingerprint"]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.metadata["config"])

    def digest(self) -> str:
        return parameter_digest(self.params)


def make_checkpoint(model: SegmentationModel, **metadata: Any) -> Checkpoint:
    meta = {"fingerprint": model.fingerprint(), "config": model.config.to_dict()}
    meta.update(metadata)
    return Checkpoint(parameter_set(model), meta)


def save_checkpoint(checkpoint: Checkpoint, directory: str | Path) -> Path:
    """Write one ``.npy`` per parameter plus ``metadata.json``; metadata is written last."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in checkpoint.params.items():
        np.save(directory / f"{name}.npy", arr, allow_pickle=False)
    meta = dict(checkpoint.metadata)
    meta["parameters"] = list(checkpoint.params)
    (directory / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    meta_path = directory / "metadata.json"
    if not meta_path.is_file():
        raise DataError(f"no checkpoint at {directory}", path=str(directory))
    meta = json.loads(meta_path.read_text())
    names = meta.pop("parameters")
    params = OrderedDict((n, np.load(directory / f"{n}.npy", allow_pickle=False)) for n in names)
    return Checkpoint(params, meta)


@dataclass
class LoadReport:
    loaded: list[str]
    skipped: list[str]
    missing: list[str]


def load_parameters(model: SegmentationModel, checkpoint: Checkpoint, strict: bool = True) -> LoadReport:
    """Copy checkpoint arrays into ``model`` in place.

    ``strict`` demands identical fingerprints.  Otherwise entries whose names
    match are loaded; checkpoint entries without a counterpart are listed in
    ``skipped`` and model parameters left untouched in ``missing``.  A name
    match with a different shape is always an error.
    """
    if strict and checkpoint.metadata.get("fingerprint") != model.fingerprint():
        raise CheckpointMismatchError("checkpoint fingerprint does not match the model architecture",
                                      checkpoint=checkpoint.metadata.get("fingerprint"),
                                      model=model.fingerprint())
    own = dict(model.named_parameters())
    loaded, skipped = [], []
    with torch.no_grad():
        for name, arr in checkpoint.params.items():
            if name not in own:
                skipped.append(name)
                continue
            if tuple(own[name].shape) != tuple(arr.shape):
                raise CheckpointMismatchError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)}, model {tuple(own[name].shape)}",
                    name=name)
            own[name].copy_(torch.from_numpy(np.asarray(arr)))
            loaded.append(name)
    missing = [n for n in own if n not in checkpoint.params]
    return LoadReport(loaded, skipped, missing)


def model_from_checkpoint(checkpoint: Checkpoint, dtype: torch.dtype | None = None) -> SegmentationModel:
    if dtype is None:
        first = next(iter(checkpoint.params.values()))
        dtype = torch.float64 if first.dtype == np.float64 else torch.float32
    model, _ = build_model(checkpoint.model_config, 0, dtype=dtype)
    load_parameters(model, checkpoint, strict=True)
    return model
