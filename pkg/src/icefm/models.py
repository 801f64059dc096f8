"""Toy segmentation backbones with named parameter roles and checkpoint I/O.

Two families, sized for CPU experiments:

* ``vit_tiny`` -- patchify conv, pre-norm transformer blocks with separate
  q/k/v/out projections (so per-projection adapters can attach), fixed 2-D
  sin/cos position encoding, and a per-token linear decode head upsampled
  back to pixel resolution.
* ``unet`` -- conv encoder/decoder with skip connections.

Every parameter path starts with ``encoder.`` or ``decoder.`` (adapters add
``prompts`` / ``lora_*`` leaves), and ``parameter_groups`` classifies each
path into a role; fine-tuning strategies are defined purely as predicates
over those roles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, ConfigError

CHECKPOINT_FORMAT_VERSION = 1

ROLES = (
    "encoder_weight", "encoder_bias", "attn_q", "attn_k", "attn_v", "attn_out",
    "mlp", "norm", "decoder", "prompt", "lora",
)


@dataclass
class VitConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4


@dataclass
class UnetConfig:
    stage_channels: list[int] = field(default_factory=lambda: [32, 32, 64, 64])


@dataclass
class ModelSpec:
    name: str
    kind: str  # "vit_tiny" | "unet"
    in_channels: int
    class_count: int
    vit: VitConfig | None = None
    unet: UnetConfig | None = None

    def __post_init__(self):
        if self.kind == "vit_tiny" and self.vit is None:
            self.vit = VitConfig()
        if self.kind == "unet" and self.unet is None:
            self.unet = UnetConfig()

    def validate(self) -> None:
        if self.kind not in ("vit_tiny", "unet"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.in_channels not in (2, 3):
            raise ConfigError(f"in_channels must be 2 or 3, got {self.in_channels}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.kind == "vit_tiny":
            v = self.vit
            if v.patch_size < 1 or v.embed_dim < 1 or v.depth < 1 or v.heads < 1:
                raise ConfigError("vit fields must be positive")
            if v.embed_dim % v.heads != 0:
                raise ConfigError(
                    f"embed_dim {v.embed_dim} not divisible by heads {v.heads}")
        else:
            u = self.unet
            if len(u.stage_channels) < 2:
                raise ConfigError("unet needs at least 2 stages")
            if any(c < 1 for c in u.stage_channels):
                raise ConfigError("unet stage_channels must be positive")

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind,
             "in_channels": self.in_channels, "class_count": self.class_count}
        if self.kind == "vit_tiny":
            d["vit"] = asdict(self.vit)
        else:
            d["unet"] = asdict(self.unet)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        try:
            spec = cls(
                name=data["name"], kind=data["kind"],
                in_channels=data["in_channels"], class_count=data["class_count"],
                vit=VitConfig(**data["vit"]) if data.get("vit") else None,
                unet=UnetConfig(**data["unet"]) if data.get("unet") else None,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid model spec ({exc})") from exc
        spec.validate()
        return spec


def vit_tiny_spec(name: str = "vit_tiny", in_channels: int = 2,
                  class_count: int = 6, **vit_kwargs) -> ModelSpec:
    return ModelSpec(name=name, kind="vit_tiny", in_channels=in_channels,
                     class_count=class_count, vit=VitConfig(**vit_kwargs))


def unet_spec(name: str = "unet", in_channels: int = 2,
              class_count: int = 6, **unet_kwargs) -> ModelSpec:
    return ModelSpec(name=name, kind="unet", in_channels=in_channels,
                     class_count=class_count, unet=UnetConfig(**unet_kwargs))


# ---------------------------------------------------------------------------
# vit


@lru_cache(maxsize=32)
def sincos_position_encoding(grid_h: int, grid_w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sin/cos table, shape (grid_h*grid_w, dim). Not a parameter,
    so the encoder works at any input size divisible by the patch size."""
    if dim % 4 != 0:
        raise ConfigError(f"position encoding needs dim divisible by 4, got {dim}")
    half = dim // 2

    def encode(pos: torch.Tensor) -> torch.Tensor:
        omega = torch.arange(half // 2, dtype=torch.float64) / (half // 2)
        omega = 1.0 / (10000.0 ** omega)
        out = pos[:, None] * omega[None, :]
        return torch.cat([torch.sin(out), torch.cos(out)], dim=1)

    rows = torch.arange(grid_h, dtype=torch.float64).repeat_interleave(grid_w)
    cols = torch.arange(grid_w, dtype=torch.float64).repeat(grid_h)
    table = torch.cat([encode(rows), encode(cols)], dim=1).to(torch.float32)
    return table


class SelfAttention(nn.Module):
    """Multi-head attention with separate q/k/v/out linear projections."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class VitEncoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        v = spec.vit
        self.patch_size = v.patch_size
        self.embed_dim = v.embed_dim
        self.patch_embed = nn.Conv2d(spec.in_channels, v.embed_dim,
                                     kernel_size=v.patch_size, stride=v.patch_size)
        self.blocks = nn.ModuleList(
            TransformerBlock(v.embed_dim, v.heads, v.mlp_ratio) for _ in range(v.depth))
        self.norm = nn.LayerNorm(v.embed_dim)

    def embed(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        b, c, h, w = x.shape
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"input {h}x{w} not divisible by vit patch size {self.patch_size}")
        tokens = self.patch_embed(x)  # (B, D, gh, gw)
        gh, gw = tokens.shape[2], tokens.shape[3]
        tokens = tokens.flatten(2).transpose(1, 2)  # (B, N, D)
        pos = sincos_position_encoding(gh, gw, self.embed_dim)
        return tokens + pos.to(tokens.dtype), gh, gw


class TokenDecoder(nn.Module):
    """Per-token linear classifier, nearest-upsampled back to pixels."""

    def __init__(self, embed_dim: int, class_count: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(embed_dim, class_count)

    def forward(self, tokens: torch.Tensor, gh: int, gw: int) -> torch.Tensor:
        b = tokens.shape[0]
        logits = self.proj(tokens)  # (B, N, K)
        logits = logits.transpose(1, 2).reshape(b, -1, gh, gw)
        return F.interpolate(logits, scale_factor=self.patch_size, mode="nearest")


class TinyViT(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = VitEncoder(spec)
        self.decoder = TokenDecoder(spec.vit.embed_dim, spec.class_count,
                                    spec.vit.patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens, gh, gw = self.encoder.embed(x)
        for block in self.encoder.blocks:
            tokens = block(tokens)
        tokens = self.encoder.norm(tokens)
        return self.decoder(tokens, gh, gw)


# ---------------------------------------------------------------------------
# unet


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class UnetEncoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        chans = spec.unet.stage_channels
        ins = [spec.in_channels] + chans[:-1]
        self.stages = nn.ModuleList(_conv_block(i, o) for i, o in zip(ins, chans))
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, stage in enumerate(self.stages):
            if i:
                x = self.pool(x)
            x = stage(x)
            feats.append(x)
        return feats


class UnetDecoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        chans = spec.unet.stage_channels
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for lo, hi in zip(chans[-2::-1], chans[::-1]):
            self.ups.append(nn.ConvTranspose2d(hi, lo, 2, stride=2))
            self.blocks.append(_conv_block(2 * lo, lo))
        self.head = nn.Conv2d(chans[0], spec.class_count, 1)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, feats[-2::-1]):
            x = up(x)
            x = block(torch.cat([skip, x], dim=1))
        return self.head(x)


class UNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = UnetEncoder(spec)
        self.decoder = UnetDecoder(spec)
        self.min_divisor = 2 ** (len(spec.unet.stage_channels) - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.min_divisor or w % self.min_divisor:
            raise ConfigError(
                f"input {h}x{w} not divisible by unet downsampling factor {self.min_divisor}")
        return self.decoder(self.encoder(x))


# ---------------------------------------------------------------------------
# construction / parameter roles


def build(spec: ModelSpec, seed: int = 0) -> nn.Module:
    """Deterministic construction: same spec and seed give identical weights."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.kind == "vit_tiny":
            model = TinyViT(spec)
        else:
            model = UNet(spec)
    return model


@dataclass
class ParameterGroup:
    path: str
    role: str
    count: int


def classify_role(path: str) -> str:
    parts = path.split(".")
    leaf = parts[-1]
    parent = parts[-2] if len(parts) >= 2 else ""
    if leaf in ("lora_a", "lora_b"):
        return "lora"
    if path == "prompts" or leaf == "prompts":
        return "prompt"
    if path.startswith("decoder."):
        return "decoder"
    if leaf == "bias":
        return "encoder_bias"
    for proj, role in ((".attn.q", "attn_q"), (".attn.k", "attn_k"),
                       (".attn.v", "attn_v"), (".attn.out", "attn_out")):
        if proj + "." in path:
            return role
    if ".mlp." in path:
        return "mlp"
    if parent.startswith("norm"):
        return "norm"
    return "encoder_weight"


def parameter_groups(model: nn.Module) -> list[ParameterGroup]:
    """Every named parameter, classified into exactly one role.

    Covers 100% of parameters by construction: unknown encoder tensors fall
    back to ``encoder_weight``.
    """
    groups = [ParameterGroup(name, classify_role(name), p.numel())
              for name, p in model.named_parameters()]
    total = sum(g.count for g in groups)
    model_total = sum(p.numel() for p in model.parameters())
    if total != model_total:
        raise RuntimeError(
            f"parameter grouping lost tensors: {total} != {model_total}")
    return groups


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters()
               if p.requires_grad or not trainable_only)


# ---------------------------------------------------------------------------
# checkpoints

# Strategies that change model structure register a rebuild hook here so a
# checkpoint can be restored without importing the strategy module up front.
_STRATEGY_BUILDERS: dict[str, callable] = {}


def register_strategy_builder(strategy: str, builder) -> None:
    """builder(spec: ModelSpec, strategy_config: dict) -> nn.Module"""
    _STRATEGY_BUILDERS[strategy] = builder


def save_checkpoint(model: nn.Module, meta: dict, path: str | Path) -> None:
    """Versioned container: model spec + run metadata + full state dict."""
    spec = getattr(model, "spec", None)
    if spec is None:
        raise CheckpointError("model has no attached ModelSpec; cannot checkpoint")
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "meta": dict(meta),
        "state": model.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expected_spec: ModelSpec | None = None
                    ) -> tuple[nn.Module, dict]:
    """Rebuild the model (re-applying any structural strategy) and restore
    weights bit-exactly. Returns (model, meta)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: not an icefm checkpoint")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {payload['format_version']}")
    spec = ModelSpec.from_dict(payload["spec"])
    if expected_spec is not None:
        got, want = spec.to_dict(), expected_spec.to_dict()
        if got != want:
            diffs = [k for k in want if got.get(k) != want.get(k)]
            raise CheckpointError(
                f"{path}: checkpoint spec does not match expected model "
                f"(differs in {diffs}; e.g. class_count {got.get('class_count')} "
                f"vs {want.get('class_count')})")
    meta = payload["meta"]
    strategy = meta.get("strategy", "full")
    if strategy in _STRATEGY_BUILDERS:
        model = _STRATEGY_BUILDERS[strategy](spec, meta.get("strategy_config", {}))
    else:
        model = build(spec, seed=0)
    try:
        model.load_state_dict(payload["state"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state dict mismatch ({exc})") from exc
    model.eval()
    return model, meta
