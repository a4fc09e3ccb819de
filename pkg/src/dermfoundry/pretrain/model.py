"""Student encoder, masked-latent regressor and frozen teacher."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import ConfigError, ValidationError
from .masking import PatchGridSpec


@dataclass(frozen=True)
class ArchConfig:
    image_side: int = 224
    patch_side: int = 16
    in_chans: int = 3
    embed_dim: int = 1024
    depth: int = 24
    num_heads: int = 16
    mlp_ratio: float = 4.0
    layer_scale_init: float = 1e-5
    drop_path: float = 0.2
    regressor_depth: int = 4
    regressor_dim: int = 1024
    regressor_heads: int = 16
    regressor_layer_scale_init: float = 1e-5
    target_dim: int = 768
    teacher_image_side: int = 196
    teacher_dim: int = 768
    teacher_depth: int = 1
    teacher_heads: int = 12
    teacher_seed: int = 1234

    @classmethod
    def vit_large(cls) -> "ArchConfig":
        return cls()

    @classmethod
    def fixture(cls) -> "ArchConfig":
        """Desk-scale model: 8x8 grid, width 64, 2 encoder blocks, 1 regressor block."""
        return cls(
            image_side=32,
            patch_side=4,
            embed_dim=64,
            depth=2,
            num_heads=4,
            layer_scale_init=0.1,
            drop_path=0.0,
            regressor_depth=1,
            regressor_dim=64,
            regressor_heads=4,
            regressor_layer_scale_init=0.1,
            target_dim=48,
            teacher_image_side=24,
            teacher_dim=48,
            teacher_depth=1,
            teacher_heads=4,
        )

    @property
    def grid_spec(self) -> PatchGridSpec:
        return PatchGridSpec(self.image_side, self.patch_side, self.teacher_image_side)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ArchConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def arch_from_hyperparameters(hp: Mapping[str, Any]) -> ArchConfig:
    """Build an ArchConfig from a preset plus table-style overrides."""
    preset = hp.get("encoder_preset", "fixture")
    if preset == "fixture":
        arch = ArchConfig.fixture()
    elif preset == "vit_large":
        arch = ArchConfig.vit_large()
    else:
        raise ConfigError(f"unknown encoder_preset {preset!r}")
    mapping = {
        "first_input_size": "image_side",
        "second_input_size": "teacher_image_side",
        "patch_size": "patch_side",
        "encoder_embed_dimension": "embed_dim",
        "encoder_depth": "depth",
        "encoder_number_of_heads": "num_heads",
        "number_of_output_dimensions": "target_dim",
        "layer_scale_init_value": "layer_scale_init",
        "decoder_layer_scale_init_value": "regressor_layer_scale_init",
        "regressor_depth": "regressor_depth",
        "decoder_embed_dimension": "regressor_dim",
        "decoder_number_of_heads": "regressor_heads",
        "drop_path": "drop_path",
    }
    updates = {field: hp[key] for key, field in mapping.items() if hp.get(key) is not None}
    if "target_dim" in updates:
        updates.setdefault("teacher_dim", updates["target_dim"])
    return replace(arch, **updates)


def sincos_pos_embed(dim: int, grid: int) -> torch.Tensor:
    """Fixed 2-D sine-cosine position table, (grid*grid, dim)."""
    if dim % 4:
        raise ValidationError(f"embedding dim {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    out_y = np.outer(ys.ravel(), omega)
    out_x = np.outer(xs.ravel(), omega)
    table = np.concatenate([np.sin(out_y), np.cos(out_y), np.sin(out_x), np.cos(out_x)], axis=1)
    return torch.from_numpy(table).float()


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        return x * x.new_empty(shape).bernoulli_(keep) / keep


class Attention(nn.Module):
    """Multi-head attention with separate query and key/value inputs."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValidationError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        B, Nq, D = x.shape
        Nk = context.shape[1]
        h = self.num_heads
        q = self.q(x).reshape(B, Nq, h, D // h).transpose(1, 2)
        k, v = self.kv(context).reshape(B, Nk, 2, h, D // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, D)
        return self.proj(out)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class Block(nn.Module):
    """Pre-norm transformer block with layer scale and stochastic depth."""

    def __init__(self, dim, num_heads, mlp_ratio=4.0, layer_scale_init=1e-5, drop_path=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.gamma1 = nn.Parameter(torch.full((dim,), float(layer_scale_init)))
        self.gamma2 = nn.Parameter(torch.full((dim,), float(layer_scale_init)))
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        x = x + self.drop_path(self.gamma1 * self.attn(self.norm1(x)))
        return x + self.drop_path(self.gamma2 * self.mlp(self.norm2(x)))


class PatchEmbed(nn.Module):
    def __init__(self, patch_side: int, in_chans: int, dim: int):
        super().__init__()
        self.patch_side = patch_side
        self.proj = nn.Linear(in_chans * patch_side * patch_side, dim)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, N, C*p*p), row-major patch order."""
        B, C, H, W = images.shape
        p = self.patch_side
        if H % p or W % p:
            raise ValidationError(f"image {H}x{W} not divisible by patch {p}")
        x = images.reshape(B, C, H // p, p, W // p, p)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(B, (H // p) * (W // p), C * p * p)

    def forward(self, images, index=None):
        patches = self.patchify(images)
        if index is not None:
            # drop patches before projection so excluded pixels never enter
            patches = torch.gather(patches, 1, index[..., None].expand(-1, -1, patches.shape[-1]))
        return self.proj(patches)


def _mask_index(mask: torch.Tensor | np.ndarray, batch: int, keep: bool) -> torch.Tensor:
    """Per-sample ordered indices of masked (keep=True) or visible positions."""
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask).bool()
    if m.ndim == 1:
        m = m[None].expand(batch, -1)
    sel = m if keep else ~m
    counts = sel.sum(1)
    if len(counts) and not bool((counts == counts[0]).all()):
        raise ValidationError("all masks in a batch must select the same number of patches")
    n = int(counts[0]) if len(counts) else 0
    order = torch.argsort((~sel).to(torch.int8), dim=1, stable=True)
    return order[:, :n]


class ViTEncoder(nn.Module):
    """Plain ViT over patch tokens (no class token; pooled by the caller)."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        spec = arch.grid_spec
        self.patch_embed = PatchEmbed(arch.patch_side, arch.in_chans, arch.embed_dim)
        self.register_buffer("pos_embed", sincos_pos_embed(arch.embed_dim, spec.grid), persistent=False)
        dpr = np.linspace(0, arch.drop_path, arch.depth) if arch.depth else []
        self.blocks = nn.ModuleList(
            Block(arch.embed_dim, arch.num_heads, arch.mlp_ratio, arch.layer_scale_init, float(d)) for d in dpr
        )
        self.norm = nn.LayerNorm(arch.embed_dim)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def tokens(self, images, index=None):
        x = self.patch_embed(images, index)
        pos = self.pos_embed.to(x.dtype)
        if index is None:
            return x + pos
        return x + pos[index]

    def forward(self, images, mask=None):
        """Encode visible patches only; ``mask`` marks positions to drop."""
        index = None
        if mask is not None:
            index = _mask_index(mask, images.shape[0], keep=False)
            if index.shape[1] == 0:
                raise ValidationError("mask hides every patch; no visible tokens to encode")
        x = self.tokens(images, index)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward_intermediates(self, images, depths):
        """Token maps after each block index in ``depths`` (1-based), plus final norm."""
        x = self.tokens(images)
        wanted = set(depths)
        outs = []
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in wanted:
                outs.append(self.norm(x) if i == self.depth else x)
        return outs

    def pooled(self, images):
        return self.forward(images).mean(dim=1)


class RegressorLayer(nn.Module):
    """Mask queries attend to [visible latents ; previous-layer queries]."""

    def __init__(self, dim, num_heads, mlp_ratio=4.0, layer_scale_init=1e-5):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.gamma1 = nn.Parameter(torch.full((dim,), float(layer_scale_init)))
        self.gamma2 = nn.Parameter(torch.full((dim,), float(layer_scale_init)))

    def forward(self, queries, visible):
        context = self.norm_kv(torch.cat([visible, queries], dim=1))
        q = queries + self.gamma1 * self.attn(self.norm_q(queries), context)
        return q + self.gamma2 * self.mlp(self.norm2(q))


class MaskRegressor(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        dim = arch.regressor_dim
        self.in_proj = nn.Identity() if dim == arch.embed_dim else nn.Linear(arch.embed_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.register_buffer("pos_embed", sincos_pos_embed(dim, arch.grid_spec.grid), persistent=False)
        self.layers = nn.ModuleList(
            RegressorLayer(dim, arch.regressor_heads, arch.mlp_ratio, arch.regressor_layer_scale_init)
            for _ in range(arch.regressor_depth)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, visible_latents, mask):
        B = visible_latents.shape[0]
        vis_idx = _mask_index(mask, B, keep=False)
        msk_idx = _mask_index(mask, B, keep=True)
        dim = self.mask_token.shape[0]
        if msk_idx.shape[1] == 0:
            return visible_latents.new_zeros(B, 0, dim)
        pos = self.pos_embed.to(visible_latents.dtype)
        visible = self.in_proj(visible_latents) + pos[vis_idx]
        queries = self.mask_token.to(visible.dtype) + pos[msk_idx]
        for layer in self.layers:
            queries = layer(queries, visible)
        return self.norm(queries)

    def forward_positions(self, visible_latents, visible_pos, masked_pos):
        """Same computation with explicit (possibly permuted) position indices."""
        pos = self.pos_embed.to(visible_latents.dtype)
        visible = self.in_proj(visible_latents) + pos[visible_pos]
        queries = self.mask_token.to(visible.dtype) + pos[masked_pos]
        for layer in self.layers:
            queries = layer(queries, visible)
        return self.norm(queries)


class RandomFrozenTeacher(nn.Module):
    """Randomly initialized patch encoder standing in for the vision-language teacher."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(arch.teacher_seed)
        try:
            spec = arch.grid_spec
            self.image_side = arch.teacher_image_side
            self.patch_embed = PatchEmbed(spec.teacher_patch_side, arch.in_chans, arch.teacher_dim)
            self.register_buffer("pos_embed", sincos_pos_embed(arch.teacher_dim, spec.grid), persistent=False)
            self.blocks = nn.ModuleList(
                Block(arch.teacher_dim, arch.teacher_heads, 4.0, 1.0, 0.0) for _ in range(arch.teacher_depth)
            )
            self.norm = nn.LayerNorm(arch.teacher_dim)
            self.head = nn.Linear(arch.teacher_dim, arch.target_dim)
        finally:
            torch.random.set_rng_state(gen_state)
        freeze(self)

    def forward(self, images):
        x = self.patch_embed(images) + self.pos_embed.to(images.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))

    def train(self, mode: bool = True):
        return super().train(False)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


class TeacherUnavailableError(ConfigError):
    pass


def build_teacher(arch: ArchConfig, kind: str = "random") -> nn.Module:
    """``random`` -> frozen fixture teacher; otherwise a path to a saved module."""
    if kind == "random":
        return RandomFrozenTeacher(arch)
    path = Path(kind)
    if not path.exists():
        raise TeacherUnavailableError(
            f"teacher weights {kind!r} not found; set teacher_model='random' to use the frozen fixture teacher"
        )
    teacher = torch.load(path, weights_only=False)
    if not isinstance(teacher, nn.Module):
        raise TeacherUnavailableError(f"{kind!r} does not contain a torch module")
    return freeze(teacher)


def resize_for_teacher(images: torch.Tensor, side: int, mode: str = "bicubic") -> torch.Tensor:
    if images.shape[-1] == side and images.shape[-2] == side:
        return images
    kw = {"align_corners": False} if mode in ("bilinear", "bicubic") else {}
    return F.interpolate(images, size=(side, side), mode=mode, **kw)


class PretrainModel(nn.Module):
    """Student encoder + mask regressor + projections into the teacher's latent space."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.encoder = ViTEncoder(arch)
        self.regressor = MaskRegressor(arch)
        self.proj_visible = nn.Linear(arch.embed_dim, arch.target_dim)
        self.proj_masked = nn.Linear(arch.regressor_dim, arch.target_dim)
        self.apply(_init_weights)

    def forward(self, images, mask):
        visible = self.encoder(images, mask)
        predicted = self.regressor(visible, mask)
        return self.proj_visible(visible), self.proj_masked(predicted)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def build_encoder(arch: ArchConfig) -> ViTEncoder:
    enc = ViTEncoder(arch)
    enc.apply(_init_weights)
    return enc


def encoder_state_from_pretrain(state: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Strip the ``encoder.`` prefix from a pretraining checkpoint."""
    if any(k.startswith("encoder.") for k in state):
        return {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    return dict(state)
