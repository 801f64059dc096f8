"""Fine-tuning strategies over the toy backbones.

A strategy is a partition of the model's parameters into trainable and
frozen sets, plus (for prompt tuning and low-rank adapters) a structural
extension that adds new parameters. Five strategies:

* ``full`` -- everything trains.
* ``frozen_encoder`` -- linear probe: only the decode head trains.
* ``bitfit`` -- encoder bias terms plus the decode head.
* ``vpt`` -- learnable prompt tokens prepended to the token sequence
  (deep variant: fresh prompts at every block, stripped after each);
  encoder weights stay frozen, prompts and decode head train.
* ``lora`` -- rank-r adapters on the attention q/v projections; only the
  adapters and the decode head train.

``apply_*`` functions return a TrainPlan whose trainable/frozen sets cover
every parameter exactly once; decoder parameters are trainable under every
strategy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from .errors import ConfigError, UnsupportedArchitectureError
from .models import (ModelSpec, TinyViT, build, parameter_groups,
                     register_strategy_builder)

STRATEGIES = ("full", "frozen_encoder", "bitfit", "vpt", "lora")


@dataclass
class VptConfig:
    prompt_length: int = 10
    per_layer: bool = True  # deep variant; False keeps one prompt set through all blocks

    def validate(self) -> None:
        if self.prompt_length < 0:
            raise ConfigError(f"prompt_length must be >= 0, got {self.prompt_length}")


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 16.0
    dropout: float = 0.2
    targets: tuple[str, ...] = ("attn_q", "attn_v")

    def validate(self) -> None:
        if self.rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"lora alpha must be > 0, got {self.alpha}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"lora dropout must lie in [0, 1), got {self.dropout}")
        bad = set(self.targets) - {"attn_q", "attn_v"}
        if bad or not self.targets:
            raise ConfigError(
                f"lora targets must be a non-empty subset of {{attn_q, attn_v}}, got {self.targets}")


@dataclass
class TrainPlan:
    """A model plus the exact parameter partition a trainer must respect."""

    model: nn.Module
    strategy: str
    trainable: set[str]
    frozen: set[str]
    added_param_count: int
    strategy_config: dict = field(default_factory=dict)

    def validate(self) -> None:
        names = {n for n, _ in self.model.named_parameters()}
        if self.trainable & self.frozen:
            raise ConfigError(
                f"trainable/frozen overlap: {sorted(self.trainable & self.frozen)}")
        if self.trainable | self.frozen != names:
            missing = names - (self.trainable | self.frozen)
            extra = (self.trainable | self.frozen) - names
            raise ConfigError(
                f"parameter partition incomplete (missing {sorted(missing)}, "
                f"unknown {sorted(extra)})")
        decoder_paths = {n for n in names if n.startswith("decoder.")}
        if not decoder_paths <= self.trainable:
            raise ConfigError("decoder parameters must be trainable under every strategy")

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.model.named_parameters() if n in self.trainable]

    def trainable_param_count(self) -> int:
        return sum(p.numel() for n, p in self.model.named_parameters()
                   if n in self.trainable)

    def total_param_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())


def _finish_plan(model: nn.Module, strategy: str, trainable_roles: set[str],
                 added: int, strategy_config: dict | None = None) -> TrainPlan:
    groups = parameter_groups(model)
    trainable = {g.path for g in groups if g.role in trainable_roles}
    frozen = {g.path for g in groups} - trainable
    plan = TrainPlan(model=model, strategy=strategy, trainable=trainable,
                     frozen=frozen, added_param_count=added,
                     strategy_config=strategy_config or {})
    plan.validate()
    for name, p in model.named_parameters():
        p.requires_grad_(name in plan.trainable)
    return plan


# ---------------------------------------------------------------------------
# full / frozen / bitfit


def apply_full(model: nn.Module) -> TrainPlan:
    return _finish_plan(model, "full", set(
        g.role for g in parameter_groups(model)), added=0)


def apply_frozen_encoder(model: nn.Module) -> TrainPlan:
    return _finish_plan(model, "frozen_encoder", {"decoder"}, added=0)


def apply_bitfit(model: nn.Module) -> TrainPlan:
    roles = {g.role for g in parameter_groups(model)}
    if "encoder_bias" not in roles:
        warnings.warn(
            "model has no encoder bias terms; bitfit reduces to decoder-only tuning",
            RuntimeWarning, stacklevel=2)
        return _finish_plan(model, "bitfit", {"decoder"}, added=0)
    return _finish_plan(model, "bitfit", {"encoder_bias", "decoder"}, added=0)


# ---------------------------------------------------------------------------
# vpt


class PromptedViT(nn.Module):
    """TinyViT with learnable prompt tokens.

    Deep variant: at every block, that block's prompts are prepended to the
    token sequence and the prompt positions are discarded from the output,
    so block l+1 sees its own fresh prompts. Shallow variant: one prompt set
    is prepended once and carried through, discarded before decoding. With
    prompt_length 0 the forward pass reduces exactly to the plain model.
    """

    def __init__(self, base: TinyViT, cfg: VptConfig, seed: int = 0):
        super().__init__()
        # reuse the base submodules so parameter paths stay encoder.*/decoder.*
        self.encoder = base.encoder
        self.decoder = base.decoder
        self.spec = base.spec
        self.per_layer = cfg.per_layer
        self.prompt_length = cfg.prompt_length
        depth = len(base.encoder.blocks)
        layers = depth if cfg.per_layer else 1
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            init = torch.empty(layers, cfg.prompt_length,
                               base.encoder.embed_dim).uniform_(-0.1, 0.1)
        self.prompts = nn.Parameter(init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens, gh, gw = self.encoder.embed(x)
        b = tokens.shape[0]
        p = self.prompt_length
        if self.per_layer:
            for i, block in enumerate(self.encoder.blocks):
                prompts = self.prompts[i].unsqueeze(0).expand(b, -1, -1)
                tokens = block(torch.cat([prompts, tokens], dim=1))[:, p:]
        else:
            prompts = self.prompts[0].unsqueeze(0).expand(b, -1, -1)
            tokens = torch.cat([prompts, tokens], dim=1)
            for block in self.encoder.blocks:
                tokens = block(tokens)
            tokens = tokens[:, p:]
        tokens = self.encoder.norm(tokens)
        return self.decoder(tokens, gh, gw)


def apply_vpt(model: nn.Module, cfg: VptConfig | None = None, seed: int = 0) -> TrainPlan:
    if not isinstance(model, TinyViT):
        raise UnsupportedArchitectureError(
            f"vpt requires a token-based encoder; got {type(model).__name__}")
    cfg = cfg or VptConfig()
    cfg.validate()
    before = sum(p.numel() for p in model.parameters())
    wrapped = PromptedViT(model, cfg, seed=seed)
    added = sum(p.numel() for p in wrapped.parameters()) - before
    return _finish_plan(wrapped, "vpt", {"prompt", "decoder"}, added,
                        strategy_config=asdict(cfg))


# ---------------------------------------------------------------------------
# lora


class LoraLinear(nn.Module):
    """y = base(x) + (alpha/r) * B A dropout(x); A ~ N(0, 0.02), B = 0.

    With B zero-initialized the adapter contributes exactly zero, so a fresh
    LoRA model computes the same function as its base. Dropout acts on the
    adapter input only and only in train mode; the base path is untouched.
    """

    def __init__(self, base: nn.Linear, cfg: LoraConfig, generator: torch.Generator):
        super().__init__()
        self.base = base
        self.scale = cfg.alpha / cfg.rank
        self.lora_a = nn.Parameter(
            torch.randn(cfg.rank, base.in_features, generator=generator) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, cfg.rank))
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        adapter = (self.dropout(x) @ self.lora_a.t()) @ self.lora_b.t()
        return self.base(x) + adapter * self.scale


def apply_lora(model: nn.Module, cfg: LoraConfig | None = None, seed: int = 0) -> TrainPlan:
    if not isinstance(model, TinyViT):
        raise UnsupportedArchitectureError(
            f"lora targets attention projections; {type(model).__name__} has none")
    cfg = cfg or LoraConfig()
    cfg.validate()
    before = sum(p.numel() for p in model.parameters())
    gen = torch.Generator().manual_seed(seed)
    attr_for = {"attn_q": "q", "attn_v": "v"}
    for block in model.encoder.blocks:
        for target in cfg.targets:
            attr = attr_for[target]
            setattr(block.attn, attr,
                    LoraLinear(getattr(block.attn, attr), cfg, gen))
    added = sum(p.numel() for p in model.parameters()) - before
    return _finish_plan(model, "lora", {"lora", "decoder"}, added,
                        strategy_config=asdict(cfg))


# ---------------------------------------------------------------------------
# dispatch / checkpoint rebuild


def apply_strategy(model: nn.Module, strategy: str, seed: int = 0,
                   vpt: VptConfig | None = None,
                   lora: LoraConfig | None = None) -> TrainPlan:
    if strategy == "full":
        return apply_full(model)
    if strategy == "frozen_encoder":
        return apply_frozen_encoder(model)
    if strategy == "bitfit":
        return apply_bitfit(model)
    if strategy == "vpt":
        return apply_vpt(model, vpt, seed=seed)
    if strategy == "lora":
        return apply_lora(model, lora, seed=seed)
    raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def _rebuild_vpt(spec: ModelSpec, strategy_config: dict) -> nn.Module:
    cfg = VptConfig(**{k: v for k, v in strategy_config.items()
                       if k in VptConfig.__dataclass_fields__})
    return apply_vpt(build(spec, seed=0), cfg).model


def _rebuild_lora(spec: ModelSpec, strategy_config: dict) -> nn.Module:
    data = {k: v for k, v in strategy_config.items()
            if k in LoraConfig.__dataclass_fields__}
    if "targets" in data:
        data["targets"] = tuple(data["targets"])
    return apply_lora(build(spec, seed=0), LoraConfig(**data)).model


register_strategy_builder("vpt", _rebuild_vpt)
register_strategy_builder("lora", _rebuild_lora)
