"""ExpNet classifier: residual stages interleaved with Gaze-Shift, then fusion."""

from __future__ import annotations

import contextlib
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .gaze_shift import CrossAttention, GazeShift
from .nefirf import SaliencyMap, _SaliencyBase
from .nn import MLP, Affine, Conv, Linear, Module
from .serialize import load_tensor, save_tensor
from .tensor import Tensor, as_tensor

FUSION_MODES = ("mlp_add", "cross_attention")


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "on", "yes"):
        return True
    if lowered in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce_fields(cls, values: Dict[str, str], source: str) -> dict:
    """Convert string values to the dataclass field types; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    defaults = cls()
    out = {}
    for key, text in values.items():
        current = getattr(defaults, key)
        try:
            if isinstance(current, bool):
                out[key] = _parse_bool(text)
            elif isinstance(current, tuple):
                out[key] = tuple(int(v) for v in text.split(",") if v.strip())
            elif isinstance(current, int):
                out[key] = int(text)
            elif isinstance(current, float):
                out[key] = float(text)
            else:
                out[key] = text
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {text!r}") from exc
    return out


def format_key_values(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "on" if value else "off"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture shape.  Defaults are the desk-scale ExpNet-small."""

    stages: int = 4
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    blocks: Tuple[int, ...] = (2, 2, 2, 2)
    p: int = 4
    fusion: str = "mlp_add"
    num_classes: int = 4
    image_size: int = 64
    hidden: int = 128
    heads: int = 4
    fusion_width: int = 128
    # ablation toggles: focal split, cross-attention impression, conditioned sine, band filters
    focal: bool = True
    ci: bool = True
    sine: bool = True
    band: bool = True
    seed: int = 0

    def __post_init__(self):
        s = self.stages
        if s < 2:
            raise ConfigError("stages must be >= 2")
        if len(self.widths) != s or len(self.blocks) != s:
            raise ConfigError(f"widths and blocks need {s} entries")
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage widths must double, got {self.widths}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.p < 2:
            raise ConfigError("p must be >= 2")
        if self.hidden % self.heads or self.fusion_width % self.heads:
            raise ConfigError("hidden and fusion_width must be divisible by heads")
        for i in range(s - 1):
            size = self.stage_size(i)
            if size % self.p or (size // self.p) % 2:
                raise ConfigError(
                    f"stage {i + 1} extent {size} needs an even patch size for p={self.p}"
                )

    def stage_size(self, i: int) -> int:
        return self.image_size >> i

    def downsampling(self, stage_index: int) -> int:
        """Cumulative spatial reduction at the input of Gaze-Shift ``stage_index`` (1-based)."""
        if not 1 <= stage_index <= self.stages - 1:
            raise ConfigError(f"no Gaze-Shift stage {stage_index}")
        return 1 << (stage_index - 1)

    @classmethod
    def from_text(cls, text: str, source: str = "<model config>") -> "ModelConfig":
        return cls(**coerce_fields(cls, parse_key_values(text, source), source))

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def to_text(self) -> str:
        return format_key_values(self)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ExpNetOutput:
    logits: Tensor
    impressions: List[Tensor]
    saliency_maps: List[SaliencyMap]
    focal_embedding: Tensor


class ResidualBlock(Module):
    """Pre-activation block: ``x + conv(relu(norm(conv(relu(norm(x))))))``."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.norm1 = Affine(channels)
        # followed by instance norm, so a bias would be dead
        self.conv1 = Conv(rng, channels, channels, bias=False)
        self.norm2 = Affine(channels)
        self.conv2 = Conv(rng, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ops.relu(self.norm1(ops.instance_normalize(x))))
        h = self.conv2(ops.relu(self.norm2(ops.instance_normalize(h))))
        return x + h


class ResidualStage(Module):
    def __init__(self, rng: np.random.Generator, channels: int, blocks: int):
        self.blocks = [ResidualBlock(rng, channels) for _ in range(blocks)]
        self._channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self._channels:
            raise ValueError(f"stage expects {self._channels} channels, got {x.shape[-1]}")
        for block in self.blocks:
            x = block(x)
        return x


def residual_stage_forward(f, stage: ResidualStage) -> Tensor:
    f = as_tensor(f)
    if f.ndim == 3:
        return ops.reshape(stage(ops.reshape(f, (1,) + f.shape)), f.shape)
    return stage(f)


class PlainDownsample(Module):
    """Gaze-Shift disabled: 2-stride max pool then a channel-doubling conv."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.conv = Conv(rng, channels, 2 * channels)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(ops.max_pool2d(x, 2, 2))


class MLPAddFusion(Module):
    """Per-source two-layer adapters to the fusion width, summed."""

    def __init__(self, rng: np.random.Generator, focal_dim: int, impression_dims: Sequence[int],
                 width: int):
        self.focal = MLP(rng, focal_dim, width, width)
        self.impressions = [MLP(rng, d, width, width) for d in impression_dims]

    def __call__(self, focal: Tensor, impressions: Sequence[Tensor]) -> Tensor:
        fused = self.focal(focal)
        for adapter, e in zip(self.impressions, impressions):
            fused = fused + adapter(e)
        return fused


class CrossAttentionFusion(Module):
    """The focal embedding queries the impression tokens; result added back."""

    def __init__(self, rng: np.random.Generator, focal_dim: int, impression_dims: Sequence[int],
                 width: int, heads: int):
        self.focal = Linear(rng, focal_dim, width)
        self.impressions = [Linear(rng, d, width) for d in impression_dims]
        self.attention = CrossAttention(rng, width, heads)

    def __call__(self, focal: Tensor, impressions: Sequence[Tensor]) -> Tensor:
        q = self.focal(focal)
        n, width = q.shape
        tokens = ops.concat(
            [ops.reshape(a(e), (n, 1, width)) for a, e in zip(self.impressions, impressions)],
            axis=1,
        )
        out, _ = self.attention.attend(ops.reshape(q, (n, 1, width)), tokens)
        return q + ops.reshape(out, (n, width))


def fuse_embeddings(focal, impressions: Sequence, fusion: Module) -> Tensor:
    if not impressions:
        raise ValueError("fuse_embeddings: empty impression list")
    focal = as_tensor(focal)
    single = focal.ndim == 1
    if single:
        focal = ops.reshape(focal, (1,) + focal.shape)
        impressions = [ops.reshape(as_tensor(e), (1,) + e.shape) for e in impressions]
    fused = fusion(focal, impressions)
    return ops.reshape(fused, fused.shape[1:]) if single else fused


class ExpNet(Module):
    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self._config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        self.stem = Conv(rng, 3, c.widths[0])
        self.stages = [ResidualStage(rng, w, b) for w, b in zip(c.widths, c.blocks)]
        self.shifts: List[Module] = []
        for i in range(c.stages - 1):
            if c.focal:
                self.shifts.append(GazeShift(
                    rng, c.widths[i], c.stage_size(i), c.p, c.hidden, c.heads, i + 1,
                    ci=c.ci, sine=c.sine, band=c.band,
                ))
            else:
                self.shifts.append(PlainDownsample(rng, c.widths[i]))
        impression_dims = [c.hidden] * (c.stages - 1) if c.focal else []
        if c.fusion == "cross_attention" and impression_dims:
            self.fusion = CrossAttentionFusion(rng, c.widths[-1], impression_dims,
                                               c.fusion_width, c.heads)
        else:
            self.fusion = MLPAddFusion(rng, c.widths[-1], impression_dims, c.fusion_width)
        self.head = Linear(rng, c.fusion_width, c.num_classes)

    @property
    def cfg(self) -> ModelConfig:
        return self._config

    def __call__(self, images) -> ExpNetOutput:
        images = as_tensor(images)
        single = images.ndim == 3
        if single:
            images = ops.reshape(images, (1,) + images.shape)
        c = self._config
        if images.shape[1:] != (c.image_size, c.image_size, 3):
            raise ValueError(f"expected images of {c.image_size}x{c.image_size}x3, got {images.shape}")
        x = self.stem(images)
        impressions, maps = [], []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == len(self.shifts):
                break
            shift = self.shifts[i]
            if isinstance(shift, GazeShift):
                out = shift(x)
                x = out.focal_next
                impressions.append(out.impression)
                maps.append(out.saliency)
            else:
                x = shift(x)
        focal = ops.global_average_pool(ops.relu(x))
        fused = self.fusion(focal, impressions)
        logits = self.head(fused)
        if single:
            logits = ops.reshape(logits, logits.shape[1:])
        return ExpNetOutput(logits, impressions, maps, focal)

    @contextlib.contextmanager
    def frozen_saliency(self, jitter: float = 0.0, seed: int = 0) -> Iterator[None]:
        """Hold each threshold's (binary - score) offset fixed across forwards.

        Inside the block the forward is a smooth function whose exact gradient
        is the straight-through gradient, so finite differences can check it.
        A nonzero ``jitter`` adds a fixed small positive amount to every mask
        entry; this breaks the max-pool ties between zeroed context pixels,
        which are otherwise a kink of the surrogate at the base point.
        """
        modules = [s.saliency for s in self.shifts if isinstance(s, GazeShift)]
        for i, m in enumerate(modules):
            m._frozen = {"jitter": jitter, "seed": (seed, i)}
        try:
            yield
        finally:
            for m in modules:
                m._frozen = None


def expnet_forward(image, params: ExpNet, config: Optional[ModelConfig] = None) -> ExpNetOutput:
    if config is not None and config != params.cfg:
        raise ValueError("config does not match the model's configuration")
    return params(image)


def training_loss(output: ExpNetOutput, label) -> Tensor:
    return ops.cross_entropy(output.logits, label)


def save_checkpoint(model: ExpNet, directory, epoch: int, seed: int,
                    extra: Optional[Dict[str, str]] = None) -> Path:
    """Directory with ``manifest.txt`` plus one tensor file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for name, p in model.named_parameters():
        save_tensor(directory / f"{name}.expt", p.data)
        names.append(name)
    lines = [model.cfg.to_text().rstrip("\n"), f"epoch={epoch}", f"train_seed={seed}"]
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    lines.append(f"parameters={','.join(names)}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def load_checkpoint(directory) -> Tuple[ExpNet, Dict[str, str]]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"{directory}: no manifest")
    values = parse_key_values(manifest.read_text(), str(manifest))
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    config = ModelConfig(**coerce_fields(
        ModelConfig, {k: v for k, v in values.items() if k in model_keys}, str(manifest)))
    model = ExpNet(config)
    names = values.get("parameters", "").split(",")
    state = {name: load_tensor(directory / f"{name}.expt") for name in names if name}
    model.load_state_dict(state)
    meta = {k: v for k, v in values.items() if k not in model_keys}
    return model, meta
