"""Tiny ViT masked autoencoder and the variational approximation network."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

from mimae.autodiff import (
    Tensor,
    activation,
    broadcast_to,
    concat,
    layer_norm,
    scatter_rows,
    softmax,
)
from mimae.errors import ContractError, ShapeError
from mimae.masking import apply_mask

LN_EPS = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 64
    encoder_depth: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 2
    num_heads: int = 4
    latent_dim: int = 64
    approx_hidden_dim: int = 128
    sigma_floor: float = 1e-4
    mlp_ratio: int = 4
    latent_pool: str = "cls"  # or "mean" over patch tokens

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads or self.decoder_dim % self.num_heads:
            raise ContractError(f"embed_dim {self.embed_dim} and decoder_dim {self.decoder_dim} "
                                f"must be divisible by num_heads {self.num_heads}")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ContractError("2-D sin-cos position embeddings need dimensions divisible by 4")
        if self.latent_dim != self.embed_dim:
            raise ContractError(f"latent_dim {self.latent_dim} must equal embed_dim {self.embed_dim}: "
                                "the latent is a pooled encoder token")
        if not self.sigma_floor > 0:
            raise ContractError(f"sigma_floor must be positive, got {self.sigma_floor}")
        if self.latent_pool not in ("cls", "mean"):
            raise ContractError(f"latent_pool must be 'cls' or 'mean', got {self.latent_pool!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def input_dim(self) -> int:
        return self.channels * self.image_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ helpers
def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.einsum("m,d->md", pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid: int, cls_token: bool = True) -> np.ndarray:
    """Fixed 2-D sin-cos position table, (grid*grid [+1], dim); the class row is zeros."""
    gh, gw = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64))
    emb = np.concatenate([sincos_1d(dim // 2, gh), sincos_1d(dim // 2, gw)], axis=1)
    if cls_token:
        emb = np.concatenate([np.zeros((1, dim)), emb], axis=0)
    return emb.astype(np.float32)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, P, p*p*C), patches row-major, pixels ordered (p, q, c)."""
    B, C, H, W = images.shape
    p = patch_size
    h, w = H // p, W // p
    x = images.reshape(B, C, h, p, w, p)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(B, h * w, p * p * C)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    B, P, _ = patches.shape
    p = patch_size
    h = w = int(round(math.sqrt(P)))
    x = patches.reshape(B, h, w, p, p, channels).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(B, channels, h * p, w * p)


def masked_inputs(images: np.ndarray, masks: np.ndarray, patch_size: int) -> np.ndarray:
    """Flattened images with masked patches zeroed.

    ``masks`` is (B, N, P); returns (N, B, C*H*W), the inputs of the
    approximation network for every view.
    """
    B, C, H, W = images.shape
    N, P = masks.shape[1], masks.shape[2]
    patches = patchify(images, patch_size)  # (B, P, K)
    keep = (1 - masks).astype(images.dtype)  # (B, N, P)
    views = patches[:, None, :, :] * keep[..., None]  # (B, N, P, K)
    views = views.reshape(B * N, P, -1)
    flat = unpatchify(views, patch_size, C).reshape(B, N, -1)
    return np.ascontiguousarray(flat.transpose(1, 0, 2))


# ------------------------------------------------------------------ modules
class Module:
    """Parameter container: tensors that require grad, child modules, lists of modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def buffers(self) -> Iterator[tuple[Module, str]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and not value.requires_grad:
                yield self, name
            elif isinstance(value, Module):
                yield from value.buffers()
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for child in value:
                    yield from child.buffers()

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place; returns ``self``."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for owner, name in self.buffers():
            buf = getattr(owner, name)
            setattr(owner, name, Tensor(buf.data.astype(dtype)))
        return self

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias_init: float = 0.0):
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        self.weight = _param(rng.uniform(-limit, limit, size=(in_dim, out_dim)))
        self.bias = _param(np.full(out_dim, bias_init))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, LN_EPS)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        H = self.heads
        hd = D // H

        def split(t):
            return t.reshape(B, T, H, hd).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        attn = softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.proj(out)


class Block(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(activation(self.fc1(self.norm2(x)), "gelu"))


def _is_decoder(name: str) -> bool:
    return name.startswith("decoder") or name == "mask_token"


class LatentBatch(NamedTuple):
    tokens: Tensor  # (B, V+1, D), class token first
    z_vec: Tensor  # (B, latent_dim)
    mask_id: int | None = None


class GaussianPosterior(NamedTuple):
    mu: Tensor
    sigma: Tensor


class MAE(Module):
    """Patch embedding, ViT encoder with class token, and a lightweight decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        self.patch_proj = Linear(c.patch_dim, c.embed_dim, rng)
        self.cls_token = _param(rng.normal(0.0, 0.02, size=(1, 1, c.embed_dim)))
        self.pos_embed = Tensor(sincos_2d(c.embed_dim, c.grid)[None])  # (1, P+1, D), fixed
        self.blocks = [Block(c.embed_dim, c.num_heads, c.mlp_ratio, rng) for _ in range(c.encoder_depth)]
        self.norm = LayerNorm(c.embed_dim)

        self.decoder_embed = Linear(c.embed_dim, c.decoder_dim, rng)
        self.mask_token = _param(rng.normal(0.0, 0.02, size=(1, 1, c.decoder_dim)))
        self.decoder_pos_embed = Tensor(sincos_2d(c.decoder_dim, c.grid)[None])
        self.decoder_blocks = [Block(c.decoder_dim, c.num_heads, c.mlp_ratio, rng)
                               for _ in range(c.decoder_depth)]
        self.decoder_norm = LayerNorm(c.decoder_dim)
        self.decoder_pred = Linear(c.decoder_dim, c.patch_dim, rng)

    # parameter groups used for gradient routing
    def encoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if not _is_decoder(k)}

    def decoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if _is_decoder(k)}

    def patch_embed(self, images) -> Tensor:
        """(B, C, H, W) -> (B, P, embed_dim) with position embeddings added."""
        images = images.data if isinstance(images, Tensor) else np.asarray(images)
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise ShapeError(f"expected images of shape (B, {c.channels}, {c.image_size}, "
                             f"{c.image_size}), got {images.shape}")
        patches = Tensor(patchify(images, c.patch_size).astype(self.patch_proj.weight.dtype, copy=False))
        return self.patch_proj(patches) + self.pos_embed[:, 1:, :]

    def encode(self, visible_tokens: Tensor, mask_id: int | None = None) -> LatentBatch:
        B, V, D = visible_tokens.shape
        if V < 1:
            raise ContractError("encode needs at least one visible token")
        cls = broadcast_to(self.cls_token + self.pos_embed[:, :1, :], (B, 1, D))
        x = concat([cls, visible_tokens], axis=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        if self.config.latent_pool == "cls":
            z = x[:, 0, :]
        else:
            z = x[:, 1:, :].mean(axis=1)
        return LatentBatch(x, z, mask_id)

    def decode(self, latent: LatentBatch, index: np.ndarray) -> Tensor:
        """Predict every patch, (B, P, patch_dim), from encoder tokens.

        ``index`` is the (B, V) visible-patch index map returned by
        :func:`mimae.masking.apply_mask` for the encoded view.
        """
        c = self.config
        tokens = latent.tokens
        B = tokens.shape[0]
        if index.shape != (B, tokens.shape[1] - 1):
            raise ShapeError(f"index map {index.shape} does not match encoder tokens {tokens.shape}")
        x = self.decoder_embed(tokens)
        base = broadcast_to(self.mask_token, (B, c.num_patches, c.decoder_dim))
        full = scatter_rows(base, x[:, 1:, :], index)
        x = concat([x[:, :1, :], full], axis=1) + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            x = blk(x)
        x = self.decoder_pred(self.decoder_norm(x))
        return x[:, 1:, :]

    def forward_view(self, embedded: Tensor, mask: np.ndarray, mask_id: int | None = None):
        """Encode and decode one masked view; returns (LatentBatch, prediction, index map)."""
        visible, index = apply_mask(embedded, mask)
        latent = self.encode(visible, mask_id)
        return latent, self.decode(latent, index), index

    def features(self, images) -> Tensor:
        """Pooled latent of the unmasked images (all patches visible)."""
        return self.encode(self.patch_embed(images)).z_vec


class ApproxNet(Module):
    """Diagonal-Gaussian q(z | x): separate mean and scale branches.

    mean:  FC -> GELU -> FC -> FC -> LeakyReLU
    scale: FC -> GELU -> FC -> FC -> ReLU, plus ``sigma_floor``
    """

    def __init__(self, input_dim: int, hidden_dim: int, latent_dim: int, sigma_floor: float = 1e-4,
                 seed: int = 0, sigma_bias: float = 1.0):
        rng = np.random.default_rng(seed)
        self.sigma_floor = sigma_floor
        self.mu1 = Linear(input_dim, hidden_dim, rng)
        self.mu2 = Linear(hidden_dim, hidden_dim, rng)
        self.mu3 = Linear(hidden_dim, latent_dim, rng)
        self.sig1 = Linear(input_dim, hidden_dim, rng)
        self.sig2 = Linear(hidden_dim, hidden_dim, rng)
        # positive bias keeps the ReLU branch alive at initialization
        self.sig3 = Linear(hidden_dim, latent_dim, rng, bias_init=sigma_bias)

    def __call__(self, x) -> GaussianPosterior:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.mu1.weight.dtype))
        mu = activation(self.mu3(self.mu2(activation(self.mu1(x), "gelu"))), "leaky_relu")
        s = activation(self.sig3(self.sig2(activation(self.sig1(x), "gelu"))), "relu")
        return GaussianPosterior(mu, s + self.sigma_floor)


def approx_forward(net: ApproxNet, x_masked) -> GaussianPosterior:
    return net(x_masked)


def gaussian_log_prob(post: GaussianPosterior, z, sigma_floor: float | None = None) -> Tensor:
    """Diagonal-Gaussian log density summed over the last axis.

    ``-0.5 * sum_d [(z - mu)^2 / sigma^2 + log sigma^2 + log 2 pi]``, with
    ``sigma`` a standard deviation. Shapes broadcast.
    """
    mu, sigma = post
    if sigma_floor is not None and (sigma.data < sigma_floor * (1 - 1e-6)).any():
        raise ContractError(f"sigma below floor {sigma_floor}")
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, dtype=mu.dtype))
    if z.shape[-1] != mu.shape[-1]:
        raise ShapeError(f"latent dims differ: z {z.shape} vs mu {mu.shape}")
    d = z - mu
    quad = (d * d) / (sigma * sigma)
    return ((quad + 2.0 * sigma.log()) + LOG_2PI).sum(axis=-1) * -0.5
