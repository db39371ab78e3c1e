"""Sketch-guided video editing.

Editing reuses the sketch condition network and adds a second, video branch:
the source clip with the edited region zeroed out is encoded and patchified,
and each control block runs one further trainable DiT copy over those tokens
(the insertion pathway). The block output weights the sketch features by the
edited-region mask and the insertion features by its complement, concatenates
the two along channels, and projects back to model width through a
feed-forward whose last linear starts at zero, so a freshly initialized edit
network leaves the backbone untouched.

Masks are axis-aligned rectangles, optionally moving over time: held fixed,
linearly interpolated between two endpoints, or advected by a per-frame
velocity provider (at this scale the synthetic scene's ground-truth object
velocity; a flow estimator satisfies the same callable interface).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import codec
from .backbone import BackboneConfig, Denoiser, DiTBlock
from .control import (
    ControlConfig,
    InterFrameAttention,
    KeyframeSketchSet,
    OutputFeedForward,
    SketchControlBranch,
    SketchFeedForward,
    encode_sketch_condition,
)

MOVEMENTS = ("fixed", "linear", "flow")

# velocity(t, rect) -> (vx, vy): mean pixel velocity inside rect at frame t
VelocityFn = Callable[[int, tuple[int, int, int, int]], tuple[float, float]]


@dataclass(frozen=True)
class MaskSpec:
    """Rectangle edit region with a movement strategy over a frame range."""

    rect: tuple[int, int, int, int]  # (x, y, w, h) at frames[0]
    movement: str = "fixed"
    endpoint: tuple[int, int, int, int] | None = None  # rect at frames[1]-1 (linear)
    frames: tuple[int, int] = (0, 17)  # half-open [a, b)

    def __post_init__(self):
        if self.movement not in MOVEMENTS:
            raise ValueError(f"unknown movement {self.movement!r}, expected one of {MOVEMENTS}")
        x, y, w, h = self.rect
        if w <= 0 or h <= 0:
            raise ValueError(f"degenerate rectangle {self.rect}")
        if self.movement == "linear":
            if self.endpoint is None:
                raise ValueError("linear movement needs an endpoint rectangle")
            if self.endpoint[2] <= 0 or self.endpoint[3] <= 0:
                raise ValueError(f"degenerate endpoint rectangle {self.endpoint}")
        a, b = self.frames
        if not 0 <= a < b:
            raise ValueError(f"bad frame range {self.frames}")

    def to_dict(self) -> dict:
        d = {"rect": list(self.rect), "movement": self.movement, "frames": list(self.frames)}
        if self.endpoint is not None:
            d["endpoint"] = list(self.endpoint)
        return d

    @staticmethod
    def from_dict(d: dict) -> "MaskSpec":
        return MaskSpec(
            rect=tuple(d["rect"]),
            movement=d["movement"],
            endpoint=tuple(d["endpoint"]) if d.get("endpoint") is not None else None,
            frames=tuple(d.get("frames", (0, 17))),
        )


@dataclass
class MaskTrack:
    """Per-frame rectangles, already clipped to image bounds (None = no mask)."""

    rects: list[tuple[int, int, int, int] | None]
    height: int
    width: int

    def pixel_masks(self) -> np.ndarray:
        """Binary [T, H, W] with 1 over the edited region."""
        m = np.zeros((len(self.rects), self.height, self.width), dtype=np.uint8)
        for t, r in enumerate(self.rects):
            if r is not None:
                x, y, w, h = r
                m[t, y : y + h, x : x + w] = 1
        return m


def _clip_rect(x: float, y: float, w: float, h: float, width: int, height: int):
    x0 = max(int(round(x)), 0)
    y0 = max(int(round(y)), 0)
    x1 = min(int(round(x + w)), width)
    y1 = min(int(round(y + h)), height)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def mask_rectangle_track(
    spec: MaskSpec,
    t_total: int,
    height: int,
    width: int,
    velocity: VelocityFn | None = None,
) -> MaskTrack:
    """Expand a MaskSpec into one rectangle per frame.

    fixed holds the rectangle; linear rounds a per-frame interpolation of the
    two opposite corners between the endpoints; flow advances the rectangle by
    the provider's velocity between consecutive frames. Everything is clipped
    to the image bounds afterwards.
    """
    a, b = spec.frames
    b = min(b, t_total)
    rects: list[tuple[int, int, int, int] | None] = [None] * t_total
    x, y, w, h = spec.rect
    if spec.movement == "fixed":
        for t in range(a, b):
            rects[t] = _clip_rect(x, y, w, h, width, height)
    elif spec.movement == "linear":
        ex, ey, ew, eh = spec.endpoint
        span = max(b - 1 - a, 1)
        for t in range(a, b):
            alpha = (t - a) / span
            x0 = round(x + alpha * (ex - x))
            y0 = round(y + alpha * (ey - y))
            x1 = round(x + w + alpha * (ex + ew - x - w))
            y1 = round(y + h + alpha * (ey + eh - y - h))
            rects[t] = _clip_rect(x0, y0, x1 - x0, y1 - y0, width, height)
    else:
        if velocity is None:
            raise ValueError("flow movement needs a velocity provider")
        fx, fy = float(x), float(y)
        for t in range(a, b):
            rect = _clip_rect(fx, fy, w, h, width, height)
            rects[t] = rect
            vx, vy = velocity(t, rect if rect is not None else (int(fx), int(fy), w, h))
            fx += vx
            fy += vy
    return MaskTrack(rects=rects, height=height, width=width)


@dataclass
class MaskedVideoLatent:
    """Latent of the source clip with edited pixels zeroed, plus cell masks."""

    latent: np.ndarray  # [T', h, w, D]
    mask: np.ndarray  # [T', h, w] uint8, 1 = cell touches the edited region

    def __post_init__(self):
        if self.latent.shape[:3] != self.mask.shape:
            raise ValueError(
                f"latent grid {self.latent.shape[:3]} does not match mask {self.mask.shape}"
            )

    @property
    def inv_mask(self) -> np.ndarray:
        return 1 - self.mask


def mask_video(clip: np.ndarray, track: MaskTrack) -> MaskedVideoLatent:
    """Zero the edited pixels, then encode clip and mask to the latent grid."""
    masks = track.pixel_masks()
    if clip.shape[:3] != masks.shape:
        raise ValueError(f"clip {clip.shape} does not align with mask track {masks.shape}")
    masked = clip * (1 - masks)[..., None]
    return MaskedVideoLatent(latent=codec.encode_video(masked), mask=codec.encode_mask(masks))


def encode_masked_video(
    denoiser: Denoiser, masked: MaskedVideoLatent
) -> tuple[torch.Tensor, torch.Tensor]:
    """MaskedVideoLatent -> (v0 tokens [1, T'*hw, d], mask tokens [1, T'*hw, 1]).

    The latent is mapped from pixel range [0, 1] to the model's [-1, 1] signal
    range before patchifying, matching the representation the diffusion target
    uses, so the insertion copies (initialized from backbone blocks) see
    familiar token statistics. Token order matches patchify_video's
    frame-major flattening, so the mask rows line up with the insertion
    features they gate.
    """
    dtype = denoiser.patch_embed.weight.dtype
    lat = torch.from_numpy(np.ascontiguousarray(masked.latent)).to(dtype)[None] * 2.0 - 1.0
    v0 = denoiser.patchify_video(lat)
    m = torch.from_numpy(masked.mask.reshape(1, -1, 1)).to(dtype)
    return v0, m


class FusionFeedForward(nn.Module):
    """Projects the mask-weighted two-branch concat [.., 2d] back to d.

    Last linear zero-initialized: a fresh edit network is exactly invisible.
    """

    def __init__(self, dim: int, hidden: int = 0):
        super().__init__()
        hidden = hidden or dim
        self.w1 = nn.Linear(2 * dim, hidden)
        self.w2 = nn.Linear(hidden, dim)
        nn.init.zeros_(self.w2.weight)
        nn.init.zeros_(self.w2.bias)

    def forward(self, x):
        return self.w2(F.gelu(self.w1(x)))


def fuse_branches(
    c_tilde: torch.Tensor,  # [B, N, d] sketch pathway
    v_tilde: torch.Tensor,  # [B, N, d] insertion pathway
    mask: torch.Tensor,  # [B, N, 1], 1 = edited token
    ff: FusionFeedForward,
) -> torch.Tensor:
    if c_tilde.shape != v_tilde.shape:
        raise ValueError(f"branch shapes differ: {tuple(c_tilde.shape)} vs {tuple(v_tilde.shape)}")
    if mask.shape != (c_tilde.shape[0], c_tilde.shape[1], 1):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not broadcast over tokens")
    m = mask.to(c_tilde.dtype)
    return ff(torch.cat([c_tilde * m, v_tilde * (1 - m)], dim=-1))


class EditControlBlock(nn.Module):
    """Sketch control block plus the insertion DiT copy and mask fusion.

    With use_video_branch off (the "sketch only" ablation) the block is the
    generation control block applied to the editing task: no insertion copy,
    and the plain output feed-forward maps the attention features directly.
    """

    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        control_cfg: ControlConfig,
        use_video_branch: bool = True,
    ):
        super().__init__()
        d = backbone_cfg.dim
        hidden = control_cfg.out_hidden or d
        self.use_video_branch = use_video_branch
        self.ff = SketchFeedForward(d, backbone_cfg.ff_mult)
        self.copy = DiTBlock(d, backbone_cfg.heads, backbone_cfg.ff_mult)
        self.attn = InterFrameAttention(d, control_cfg.heads, control_cfg.variant)
        if use_video_branch:
            self.insertion = DiTBlock(d, backbone_cfg.heads, backbone_cfg.ff_mult)
            self.out_ff = FusionFeedForward(d, hidden)
        else:
            self.out_ff = OutputFeedForward(d, hidden, d)

    def forward(
        self,
        s_prev: torch.Tensor,  # [B, K, hw, d]
        v_prev: torch.Tensor | None,  # [B, T'*hw, d]
        h_frames: torch.Tensor,  # [B, T', hw, d]
        kappas: torch.Tensor,  # [B, K]
        t_emb: torch.Tensor,
        mask_tokens: torch.Tensor | None,  # [B, T'*hw, 1]
        need_weights: bool = False,
    ):
        b, k, hw, d = s_prev.shape
        s_i = self.ff(s_prev)
        c = self.copy(s_i.reshape(b, k * hw, d), t_emb).reshape(b, k, hw, d)
        c_tilde, w = self.attn(h_frames, kappas, c, need_weights)
        if not self.use_video_branch:
            return s_i, v_prev, self.out_ff(c_tilde), w
        v_i = self.insertion(v_prev, t_emb)
        h_bar = fuse_branches(c_tilde, v_i, mask_tokens, self.out_ff)
        return s_i, v_i, h_bar, w


class EditControlBranch(nn.Module):
    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        control_cfg: ControlConfig,
        use_video_branch: bool = True,
    ):
        super().__init__()
        control_cfg.validate_against(backbone_cfg)
        self.backbone_cfg = backbone_cfg
        self.control_cfg = control_cfg
        self.use_video_branch = use_video_branch
        self.blocks = nn.ModuleList(
            EditControlBlock(backbone_cfg, control_cfg, use_video_branch)
            for _ in control_cfg.placement
        )

    def init_from_backbone(self, denoiser: Denoiser) -> None:
        """From-scratch initialization (the "no generation pretraining" ablation):
        sketch copies and insertion copies both start at the paired backbone
        block's weights; everything else keeps its fresh init."""
        for blk, i in zip(self.blocks, self.control_cfg.placement):
            src = denoiser.blocks[i].state_dict()
            blk.copy.load_state_dict(src)
            if self.use_video_branch:
                blk.insertion.load_state_dict(src)

    def init_from_generation(self, denoiser: Denoiser, gen: SketchControlBranch) -> None:
        """The standard editing init: the whole sketch pathway comes from the
        trained generation branch, insertion copies from the backbone, and the
        fusion feed-forward stays fresh (its zero last layer keeps the network
        transparent until trained)."""
        if gen.control_cfg.placement != self.control_cfg.placement:
            raise ValueError(
                f"placement mismatch: generation {gen.control_cfg.placement}, "
                f"edit {self.control_cfg.placement}"
            )
        for blk, gen_blk, i in zip(self.blocks, gen.blocks, self.control_cfg.placement):
            blk.ff.load_state_dict(gen_blk.ff.state_dict())
            blk.copy.load_state_dict(gen_blk.copy.state_dict())
            blk.attn.load_state_dict(gen_blk.attn.state_dict())
            if self.use_video_branch:
                blk.insertion.load_state_dict(denoiser.blocks[i].state_dict())
            else:
                blk.out_ff.load_state_dict(gen_blk.out_ff.state_dict())

    def residual_fn(
        self,
        s0: torch.Tensor,
        v0: torch.Tensor | None,
        kappas: torch.Tensor,
        mask_tokens: torch.Tensor | None,
        capture: list | None = None,
    ):
        placement = self.control_cfg.placement
        if self.use_video_branch and (v0 is None or mask_tokens is None):
            raise ValueError("video branch needs masked-video tokens and a token mask")
        state = {"s": s0, "v": v0, "j": 0}

        def fn(i: int, h_frames: torch.Tensor, t_emb: torch.Tensor):
            j = state["j"]
            if j >= len(placement) or i != placement[j]:
                return None
            s_i, v_i, h_bar, w = self.blocks[j](
                state["s"], state["v"], h_frames, kappas, t_emb, mask_tokens,
                need_weights=capture is not None,
            )
            state["s"] = s_i
            state["v"] = v_i
            state["j"] = j + 1
            if capture is not None:
                capture.append({"block": i, "weights": w, "residual": h_bar.detach()})
            return h_bar

        return fn


def edit_forward(
    denoiser: Denoiser,
    branch: EditControlBranch,
    z: torch.Tensor,
    t,
    text_ids: torch.Tensor,
    s0: torch.Tensor,
    v0: torch.Tensor | None,
    kappas: torch.Tensor,
    mask_tokens: torch.Tensor | None,
    frame_indices=None,
    capture: list | None = None,
) -> torch.Tensor:
    return denoiser(
        z,
        t,
        text_ids,
        residuals=branch.residual_fn(s0, v0, kappas, mask_tokens, capture),
        frame_indices=frame_indices,
    )


def prepare_edit_inputs(
    denoiser: Denoiser,
    keyframes: KeyframeSketchSet,
    masked: MaskedVideoLatent,
) -> dict:
    """Bundle the conditioning tensors one edit forward needs (batch of 1)."""
    s0, kappas = encode_sketch_condition(denoiser, keyframes)
    v0, m = encode_masked_video(denoiser, masked)
    return {"s0": s0, "v0": v0, "kappas": torch.tensor([kappas]), "mask_tokens": m}
