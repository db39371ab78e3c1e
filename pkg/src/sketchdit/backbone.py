"""Toy DiT video denoiser.

Token stream = [text tokens | video tokens], one joint 3D full attention per
block (no spatial/temporal factorization). Video tokens are latent cells run
through a linear patch embedding plus a deterministic sinusoidal (t, y, x)
positional code; the timestep conditions every block through adaptive
scale/shift on the pre-norms. The v-prediction head is zero-initialized.

Control branches hook in through `residuals`: a dict {block index -> features}
or a callable polled at every block entry; whatever comes back is added to
that block's video-token input (text tokens are never touched).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import text as text_mod


@dataclass(frozen=True)
class BackboneConfig:
    blocks: int = 10
    dim: int = 64
    heads: int = 4
    ff_mult: int = 4
    latent_frames: int = 5
    latent_h: int = 4
    latent_w: int = 4
    latent_channels: int = 768
    vocab_size: int = len(text_mod.VOCAB)
    text_len: int = 16

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.blocks < 1:
            raise ValueError("need at least one block")

    @property
    def tokens_per_frame(self) -> int:
        return self.latent_h * self.latent_w

    @property
    def video_tokens(self) -> int:
        return self.latent_frames * self.tokens_per_frame

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def paper_scale() -> BackboneConfig:
    """30-block preset used only for parameter/FLOP accounting, never weights."""
    return BackboneConfig(
        blocks=30, dim=1920, heads=30, latent_frames=13, latent_h=60, latent_w=90
    )


def sincos_features(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal features: [..., dim] for integer positions [...]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1)
    )
    ang = pos.to(torch.float64)[..., None] * freqs
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if dim % 2:
        out = F.pad(out, (0, 1))
    return out


def video_pos_embedding(
    frame_indices: torch.Tensor, h: int, w: int, dim: int
) -> torch.Tensor:
    """Deterministic 3D positional code chunked as (t, y, x).

    frame_indices [T'] -> [T', h*w, dim]; [B, T'] -> [B, T', h*w, dim] with a
    per-sample time coordinate (used when single frames are declared at
    sample-specific time points).
    """
    batched = frame_indices.ndim == 2
    idx = frame_indices if batched else frame_indices[None]
    b, tp = idx.shape
    d_xy = dim // 3
    d_t = dim - 2 * d_xy
    t = sincos_features(idx, d_t)  # [B, T', d_t]
    y = sincos_features(torch.arange(h), d_xy)  # [h, d_xy]
    x = sincos_features(torch.arange(w), d_xy)  # [w, d_xy]
    out = torch.cat(
        [
            t[:, :, None, None, :].expand(b, tp, h, w, d_t),
            y[None, None, :, None, :].expand(b, tp, h, w, d_xy),
            x[None, None, None, :, :].expand(b, tp, h, w, d_xy),
        ],
        dim=-1,
    )
    out = out.reshape(b, tp, h * w, dim)
    return out if batched else out[0]


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, l, d = x.shape
    return x.reshape(b, l, heads, d // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, l, dh = x.shape
    return x.transpose(1, 2).reshape(b, l, h * dh)


def multihead_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    need_weights: bool = False,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Softmax attention over projected q/k/v, [B, L, d]; explicit weights so
    tests and dump tooling can see the softmax rows."""
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    w = torch.softmax(scores, dim=-1)
    out = merge_heads(w @ vh)
    return out, (w if need_weights else None)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1 = nn.Linear(dim, hidden)
        self.w2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.w2(F.gelu(self.w1(x)))


class DiTBlock(nn.Module):
    """Pre-norm attention + pre-norm feed-forward, both with residual adds and
    timestep scale/shift on the norms (modulation zero-initialized)."""

    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)
        self.ff = FeedForward(dim, dim * ff_mult)
        self.mod = nn.Linear(dim, 4 * dim)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        shift1, scale1, shift2, scale2 = self.mod(F.silu(t_emb)).chunk(4, dim=-1)
        h = self.norm1(x) * (1 + scale1[:, None]) + shift1[:, None]
        attn, _ = multihead_attention(self.wq(h), self.wk(h), self.wv(h), self.heads)
        x = x + self.wo(attn)
        h = self.norm2(x) * (1 + scale2[:, None]) + shift2[:, None]
        return x + self.ff(h)


def _as_residual_fn(residuals, blocks: int):
    if residuals is None:
        return None
    if callable(residuals):
        return residuals
    for i in residuals:
        if not 0 <= i < blocks:
            raise KeyError(f"residual for unknown block index {i} (have {blocks} blocks)")
    table = residuals
    return lambda i, h_frames, t_emb: table.get(i)


class Denoiser(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.latent_channels, cfg.dim)
        self.text_embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        nn.init.normal_(self.text_embed.weight, std=0.02)
        self.time_in = nn.Linear(cfg.dim, cfg.dim)
        self.time_out = nn.Linear(cfg.dim, cfg.dim)
        self.blocks = nn.ModuleList(
            DiTBlock(cfg.dim, cfg.heads, cfg.ff_mult) for _ in range(cfg.blocks)
        )
        self.head_norm = nn.LayerNorm(cfg.dim, elementwise_affine=False)
        self.head = nn.Linear(cfg.dim, cfg.latent_channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.pos_enabled = True  # test-only switch for equivariance checks
        self.check_finite = False  # training-time guard

    # -- conditioning pieces ------------------------------------------------

    def time_embedding(self, t) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.tensor([t])
        feats = sincos_features(t, self.cfg.dim).to(self.time_in.weight.dtype)
        return self.time_out(F.silu(self.time_in(feats)))

    def encode_text(self, text_ids: torch.Tensor) -> torch.Tensor:
        """[B, Lt] int64 -> [B, Lt, d]; Lt may be zero (unconditional)."""
        emb = self.text_embed(text_ids)
        if self.pos_enabled and text_ids.shape[1]:
            pos = sincos_features(torch.arange(text_ids.shape[1]), self.cfg.dim)
            emb = emb + pos.to(emb.dtype)
        return emb

    def _frame_indices(self, b: int, tp: int, frame_indices) -> torch.Tensor:
        if frame_indices is None:
            return torch.arange(tp)
        idx = torch.as_tensor(frame_indices)
        if idx.shape not in ((tp,), (b, tp)):
            raise ValueError(
                f"frame_indices must have shape ({tp},) or ({b}, {tp}), got {tuple(idx.shape)}"
            )
        return idx

    def patchify_video(self, z: torch.Tensor, frame_indices=None) -> torch.Tensor:
        """[B, T', h, w, D] -> [B, T'*h*w, d] with positional code added.

        frame_indices overrides the time coordinate per latent frame; single
        frames declared at a nonzero time point pass their group index here.
        """
        c = self.cfg
        b, tp, h, w, d = z.shape
        if (h, w, d) != (c.latent_h, c.latent_w, c.latent_channels):
            raise ValueError(f"latent shape {z.shape[1:]} does not match config")
        tok = self.patch_embed(z.reshape(b, tp * h * w, d))
        if self.pos_enabled:
            idx = self._frame_indices(b, tp, frame_indices)
            pos = video_pos_embedding(idx, h, w, c.dim)
            pos = pos.reshape(1, tp * h * w, c.dim) if idx.ndim == 1 else pos.reshape(b, tp * h * w, c.dim)
            tok = tok + pos.to(tok.dtype)
        return tok

    # -- main forward --------------------------------------------------------

    def forward(
        self,
        z: torch.Tensor,
        t,
        text_ids: torch.Tensor,
        residuals=None,
        frame_indices=None,
    ) -> torch.Tensor:
        """Predict v for noisy latent z at timestep t. residuals: dict keyed by
        block index, or callable (i, video tokens as [B,T',h*w,d], t_emb) ->
        [B, T'*h*w, d] or None, evaluated on the activations entering block i."""
        c = self.cfg
        b, tp = z.shape[0], z.shape[1]
        res_fn = _as_residual_fn(residuals, c.blocks)
        t_emb = self.time_embedding(t)
        if t_emb.shape[0] == 1 and b > 1:
            t_emb = t_emb.expand(b, -1)
        toks = torch.cat([self.encode_text(text_ids), self.patchify_video(z, frame_indices)], dim=1)
        lt = text_ids.shape[1]
        for i, block in enumerate(self.blocks):
            if res_fn is not None:
                h_frames = toks[:, lt:, :].reshape(b, tp, c.tokens_per_frame, c.dim)
                extra = res_fn(i, h_frames, t_emb)
                if extra is not None:
                    toks = torch.cat([toks[:, :lt], toks[:, lt:] + extra], dim=1)
            toks = block(toks, t_emb)
        if self.check_finite and not torch.isfinite(toks).all():
            raise RuntimeError(f"non-finite activation after block stack (t={t})")
        v = self.head(self.head_norm(toks[:, lt:, :]))
        return v.reshape(b, tp, c.latent_h, c.latent_w, c.latent_channels)
