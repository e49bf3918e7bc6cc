"""Compact text-conditioned diffusion UNet with attention capture taps.

The network mirrors the topology that matters for export: self- and
cross-attention blocks at feature sides 64/32/16/8 on the way down, one
mid block at side 8, and a mirrored up path, so every resolution is seen
by at least two attention layers. Weights are synthesized deterministically
from a seed; a locally saved state dict can be loaded instead. The module
is a stand-in for a full pretrained UNet with the same capture surface,
not a generative model of any quality.
"""

import hashlib
import math

import numpy as np
import torch
from torch import nn

NUM_TIMESTEPS = 1000
SIDES = (64, 32, 16, 8)
CHANNELS = 32
HEADS = 2
TEXT_DIM = 64
TIME_DIM = 128

BOS = "<|start|>"
EOS = "<|end|>"

_BETAS = np.linspace(1e-4, 0.02, NUM_TIMESTEPS)
ALPHA_BARS = np.cumprod(1.0 - _BETAS)


def stable_seed(*parts) -> int:
    """Order-sensitive 63-bit seed from string parts, stable across runs."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos position code, shape (len(positions), dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half) / max(half - 1, 1))
    angles = positions.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class TextEncoder(nn.Module):
    """Hash-seeded token vectors plus positions, passed through one projection.

    Token embeddings are derived from sha256 of (seed, token string), so the
    prompt encoding is reproducible without a vocabulary file.
    """

    def __init__(self, seed: int, dim: int = TEXT_DIM):
        super().__init__()
        self.seed = seed
        self.dim = dim
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, dim)

    def token_vector(self, token: str) -> torch.Tensor:
        gen = torch.Generator().manual_seed(stable_seed("token", self.seed, token))
        return torch.randn(self.dim, generator=gen)

    def forward(self, sequence) -> torch.Tensor:
        base = torch.stack([self.token_vector(tok) for tok in sequence])
        base = base + sinusoidal(torch.arange(len(sequence)), self.dim)
        return self.proj(self.norm(base))[None]


class ResBlock(nn.Module):
    def __init__(self, ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.temb = nn.Linear(time_dim, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, h, temb):
        x = self.conv1(torch.nn.functional.silu(self.norm1(h)))
        x = x + self.temb(temb)[:, :, None, None]
        x = self.conv2(torch.nn.functional.silu(self.norm2(x)))
        return h + x


class AttnBlock(nn.Module):
    """Multi-head self attention over pixels followed by cross attention
    to the prompt tokens. Post-softmax probabilities are handed to the
    store before they mix the values, which is where capture happens."""

    def __init__(self, ch: int, ctx_dim: int, heads: int = HEADS):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, ch)
        self.sq = nn.Linear(ch, ch)
        self.sk = nn.Linear(ch, ch)
        self.sv = nn.Linear(ch, ch)
        self.so = nn.Linear(ch, ch)
        self.cq = nn.Linear(ch, ch)
        self.ck = nn.Linear(ctx_dim, ch)
        self.cv = nn.Linear(ctx_dim, ch)
        self.co = nn.Linear(ch, ch)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def _attend(self, q, k, v, out_proj, store, kind, tag, side):
        b, n = q.shape[0], q.shape[1]
        q, k, v = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / math.sqrt(q.shape[-1])
        probs = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
        if store is not None:
            store.put(kind, side, tag, probs)
        mixed = (probs @ v).transpose(1, 2).reshape(b, n, -1)
        return out_proj(mixed)

    def forward(self, h, ctx, store, tag):
        b, c, side, _ = h.shape
        x = self.norm(h).flatten(2).transpose(1, 2)
        x = x + self._attend(self.sq(x), self.sk(x), self.sv(x), self.so,
                             store, "self", tag, side)
        x = x + self._attend(self.cq(x), self.ck(ctx), self.cv(ctx), self.co,
                             store, "cross", tag, side)
        return h + x.transpose(1, 2).reshape(b, c, side, side)


class MiniUNet(nn.Module):
    def __init__(self, seed: int, ctx_dim: int = TEXT_DIM):
        super().__init__()
        ch = CHANNELS
        self.text = TextEncoder(seed, ctx_dim)
        self.stem = nn.Conv2d(3, ch, 3, padding=1)
        self.time = nn.Sequential(nn.Linear(TIME_DIM, TIME_DIM), nn.SiLU(),
                                  nn.Linear(TIME_DIM, TIME_DIM))
        self.down_res = nn.ModuleList(ResBlock(ch, TIME_DIM) for _ in SIDES)
        self.down_attn = nn.ModuleList(AttnBlock(ch, ctx_dim) for _ in SIDES)
        self.pool = nn.ModuleList(nn.Conv2d(ch, ch, 3, stride=2, padding=1)
                                  for _ in SIDES[:-1])
        self.mid_res = ResBlock(ch, TIME_DIM)
        self.mid_attn = AttnBlock(ch, ctx_dim)
        self.fuse = nn.ModuleList(nn.Conv2d(2 * ch, ch, 1) for _ in SIDES)
        self.up_res = nn.ModuleList(ResBlock(ch, TIME_DIM) for _ in SIDES)
        self.up_attn = nn.ModuleList(AttnBlock(ch, ctx_dim) for _ in SIDES)
        self.head = nn.Sequential(nn.GroupNorm(8, ch), nn.SiLU(),
                                  nn.Conv2d(ch, 3, 3, padding=1))

    def forward(self, x, timestep: int, ctx, store=None):
        temb = self.time(sinusoidal(torch.tensor([timestep]), TIME_DIM))
        h = self.stem(x)
        skips = []
        for i, side in enumerate(SIDES):
            h = self.down_res[i](h, temb)
            h = self.down_attn[i](h, ctx, store, f"down.{side}")
            skips.append(h)
            if i + 1 < len(SIDES):
                h = self.pool[i](h)
        h = self.mid_res(h, temb)
        h = self.mid_attn(h, ctx, store, f"mid.{SIDES[-1]}")
        for i, side in enumerate(reversed(SIDES)):
            h = self.fuse[i](torch.cat([h, skips.pop()], dim=1))
            h = self.up_res[i](h, temb)
            h = self.up_attn[i](h, ctx, store, f"up.{side}")
            if i + 1 < len(SIDES):
                h = nn.functional.interpolate(h, scale_factor=2.0, mode="nearest")
        return self.head(h)


def _init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic init keyed only by the seed and parameter names.

    Matrix-shaped weights get normal(0, fan_in^-1/2); 1-d norm weights 1;
    biases 0. Iteration order is the sorted parameter name, so the result
    does not depend on module construction order.
    """
    gen = torch.Generator().manual_seed(stable_seed("weights", seed))
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if p.dim() >= 2:
                fan_in = p[0].numel()
                p.normal_(0.0, fan_in ** -0.5, generator=gen)
            elif name.rsplit(".", 1)[-1] == "weight":
                p.fill_(1.0)
            else:
                p.zero_()


def build_model(seed: int, weights=None) -> MiniUNet:
    """Seed-initialized UNet, optionally overwritten by a local state dict."""
    model = MiniUNet(seed)
    _init_parameters(model, seed)
    if weights is not None:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model


def noisy_latent(x0: torch.Tensor, timestep: int, seed: int) -> torch.Tensor:
    """Forward-process sample x_t for the schedule, deterministic per
    (seed, timestep) so export order cannot change the tensors."""
    ab = float(ALPHA_BARS[timestep])
    gen = torch.Generator().manual_seed(stable_seed("noise", seed, timestep))
    eps = torch.randn(x0.shape, generator=gen)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
