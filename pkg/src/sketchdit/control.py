"""Sketch condition network.

A small stack of control blocks rides on the frozen denoiser: control block j
is paired with backbone block i = placement[j]. Each one advances the sketch
feature state with a pre-norm feed-forward, runs a trainable copy of backbone
block i over the sketch tokens only, spreads the resulting keyframe features
to every latent frame with inter-frame attention (queries from all frames'
hidden features, keys from the keyframe rows of those same hidden features,
values from the keyframe control features), and maps the result through an
output feed-forward whose last linear starts at zero, so an untrained branch
is exactly invisible to the backbone.

Sketch time points are pixel-frame indices; they act at latent-frame
granularity through the codec's temporal grouping (kappa = latent_group(t)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import codec
from .backbone import BackboneConfig, Denoiser, DiTBlock, multihead_attention

VARIANTS = ("interframe", "temporal_concat", "sketch_kv")


@dataclass(frozen=True)
class ControlConfig:
    placement: tuple[int, ...] = (0, 2, 4, 6, 8)
    variant: str = "interframe"
    heads: int = 4
    out_hidden: int = 0  # 0 means model dim
    fresh_qk: bool = True  # False copies the paired backbone block's W_q/W_k (kept frozen)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        p = self.placement
        if not p or any(b <= a for a, b in zip(p, p[1:])):
            raise ValueError(f"placement must be strictly increasing and non-empty, got {p}")
        if p[0] < 0:
            raise ValueError(f"negative placement index in {p}")

    def validate_against(self, backbone: BackboneConfig) -> None:
        if self.placement[-1] >= backbone.blocks:
            raise ValueError(
                f"placement {self.placement} out of range for {backbone.blocks} blocks"
            )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def config_from_dict(d: dict) -> ControlConfig:
    return ControlConfig(
        placement=tuple(d["placement"]),
        variant=d.get("variant", "interframe"),
        heads=int(d.get("heads", 4)),
        out_hidden=int(d.get("out_hidden", 0)),
        fresh_qk=bool(d.get("fresh_qk", True)),
    )


class KeyframeSketchSet:
    """1 or 2 binary sketches [H, W] with pixel-frame time points."""

    def __init__(self, sketches: list[np.ndarray], time_points: list[int], total_frames: int):
        if not 1 <= len(sketches) <= 2:
            raise ValueError(f"need 1 or 2 sketches, got {len(sketches)}")
        if len(sketches) != len(time_points):
            raise ValueError("one time point per sketch")
        if len(time_points) == 2 and not time_points[0] < time_points[1]:
            raise ValueError(f"time points must be increasing, got {time_points}")
        for t in time_points:
            if not 0 <= t < total_frames:
                raise ValueError(f"time point {t} outside [0, {total_frames})")
        shapes = {s.shape for s in sketches}
        if len(shapes) != 1 or any(s.ndim != 2 for s in sketches):
            raise ValueError(f"sketches must share one [H, W] shape, got {shapes}")
        self.sketches = [np.ascontiguousarray(s, dtype=np.uint8) for s in sketches]
        self.time_points = [int(t) for t in time_points]
        self.total_frames = int(total_frames)

    @property
    def kappas(self) -> list[int]:
        return [codec.latent_group(t) for t in self.time_points]

    def __len__(self) -> int:
        return len(self.sketches)


def sketch_latent_row(denoiser: Denoiser, sketch: np.ndarray, group: int) -> torch.Tensor:
    """One binary sketch -> its token row [1, h*w, d].

    The sketch is tiled to 3 channels, pushed through the codec as a
    single-frame clip, and patchified with the positional code of latent frame
    `group`, sharing the (frozen) patch embedding with the video stream. The
    trainer and the inference path both build rows through here so the
    conditioning representation can never drift between the two.
    """
    c = denoiser.cfg
    h_px, w_px = c.latent_h * codec.SPATIAL, c.latent_w * codec.SPATIAL
    if sketch.shape != (h_px, w_px):
        raise ValueError(f"sketch shape {sketch.shape} does not match video {h_px}x{w_px}")
    dtype = denoiser.patch_embed.weight.dtype
    clip = np.repeat(sketch.astype(np.float32)[None, :, :, None], 3, axis=3)
    lat = torch.from_numpy(codec.encode_video(clip)).to(dtype)[None]  # [1,1,h,w,D]
    return denoiser.patchify_video(lat, frame_indices=[group])  # [1, hw, d]


def encode_sketch_condition(
    denoiser: Denoiser, keyframes: KeyframeSketchSet
) -> tuple[torch.Tensor, list[int]]:
    """Sketches -> s0 [1, K, h*w, d] plus latent-frame indices."""
    rows = [
        sketch_latent_row(denoiser, sketch, kappa)
        for sketch, kappa in zip(keyframes.sketches, keyframes.kappas)
    ]
    return torch.stack(rows, dim=1), keyframes.kappas  # [1, K, hw, d]


class SketchFeedForward(nn.Module):
    """Pre-norm two-layer MLP (width mult*d) with residual; advances s_{i-1} -> s_i."""

    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.w1 = nn.Linear(dim, dim * mult)
        self.w2 = nn.Linear(dim * mult, dim)

    def forward(self, s):
        return s + self.w2(F.gelu(self.w1(self.norm(s))))


class InterFrameAttention(nn.Module):
    """Spread keyframe control features over every latent frame.

    Q from all frames' hidden features, K from the keyframe rows of the same
    hidden features, V from the keyframe control features; one joint softmax
    over the union of keyframe tokens. Projections are bias-free d x d maps.
    """

    def __init__(self, dim: int, heads: int, variant: str = "interframe"):
        super().__init__()
        self.heads = heads
        self.variant = variant
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)

    def forward(
        self,
        h_all: torch.Tensor,  # [B, T', hw, d]
        kappas: torch.Tensor,  # [B, K] latent-frame indices
        c_key: torch.Tensor,  # [B, K, hw, d]
        need_weights: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        b, tp, hw, d = h_all.shape
        k_count = kappas.shape[1]
        if c_key.shape[:2] != (b, k_count):
            raise ValueError(f"c_key shape {tuple(c_key.shape)} misaligned with kappas {tuple(kappas.shape)}")
        if kappas.min() < 0 or kappas.max() >= tp:
            raise ValueError(f"keyframe index out of range for {tp} latent frames")
        q_src = h_all.reshape(b, tp * hw, d)
        if self.variant == "temporal_concat":
            # no keyframe-restricted attention: sketch features are appended to
            # the frame features along the temporal axis and serve, with them,
            # as the joint attention context
            ctx = torch.cat([h_all, c_key], dim=1).reshape(b, (tp + k_count) * hw, d)
            k_src = v_src = ctx
        else:
            h_key = h_all[torch.arange(b)[:, None], kappas]  # [B, K, hw, d]
            k_src = (c_key if self.variant == "sketch_kv" else h_key).reshape(b, k_count * hw, d)
            v_src = c_key.reshape(b, k_count * hw, d)
        out, w = multihead_attention(
            self.wq(q_src), self.wk(k_src), self.wv(v_src), self.heads, need_weights
        )
        return out, w


class OutputFeedForward(nn.Module):
    """Maps attention output to residual features; last linear zero-initialized
    so a fresh branch contributes exactly nothing."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.w1 = nn.Linear(in_dim, hidden)
        self.w2 = nn.Linear(hidden, out_dim)
        nn.init.zeros_(self.w2.weight)
        nn.init.zeros_(self.w2.bias)

    def forward(self, x):
        return self.w2(F.gelu(self.w1(x)))


class SketchControlBlock(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, control_cfg: ControlConfig):
        super().__init__()
        d = backbone_cfg.dim
        hidden = control_cfg.out_hidden or d
        self.ff = SketchFeedForward(d, backbone_cfg.ff_mult)
        self.copy = DiTBlock(d, backbone_cfg.heads, backbone_cfg.ff_mult)
        self.attn = InterFrameAttention(d, control_cfg.heads, control_cfg.variant)
        self.out_ff = OutputFeedForward(d, hidden, d)

    def forward(
        self,
        s_prev: torch.Tensor,  # [B, K, hw, d]
        h_frames: torch.Tensor,  # [B, T', hw, d]
        kappas: torch.Tensor,  # [B, K]
        t_emb: torch.Tensor,
        need_weights: bool = False,
    ):
        b, k, hw, d = s_prev.shape
        s_i = self.ff(s_prev)
        c = self.copy(s_i.reshape(b, k * hw, d), t_emb).reshape(b, k, hw, d)
        c_tilde, w = self.attn(h_frames, kappas, c, need_weights)
        return s_i, self.out_ff(c_tilde), w


class SketchControlBranch(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, control_cfg: ControlConfig):
        super().__init__()
        control_cfg.validate_against(backbone_cfg)
        self.backbone_cfg = backbone_cfg
        self.control_cfg = control_cfg
        self.blocks = nn.ModuleList(
            SketchControlBlock(backbone_cfg, control_cfg) for _ in control_cfg.placement
        )

    def init_from_backbone(self, denoiser: Denoiser) -> None:
        """Copy each paired backbone block's weights into the DiT copy (and,
        when fresh_qk is off, its attention projections into W_q/W_k, frozen)."""
        for blk, i in zip(self.blocks, self.control_cfg.placement):
            src = denoiser.blocks[i]
            blk.copy.load_state_dict(src.state_dict())
            if not self.control_cfg.fresh_qk:
                with torch.no_grad():
                    blk.attn.wq.weight.copy_(src.wq.weight)
                    blk.attn.wk.weight.copy_(src.wk.weight)
                blk.attn.wq.weight.requires_grad_(False)
                blk.attn.wk.weight.requires_grad_(False)

    def residual_fn(self, s0: torch.Tensor, kappas: torch.Tensor, capture: list | None = None):
        """Closure for Denoiser.forward: advances the sketch state each time a
        placed block is entered and returns that block's residual features."""
        placement = self.control_cfg.placement
        state = {"s": s0, "j": 0}

        def fn(i: int, h_frames: torch.Tensor, t_emb: torch.Tensor):
            j = state["j"]
            if j >= len(placement) or i != placement[j]:
                return None
            s_i, h_bar, w = self.blocks[j](
                state["s"], h_frames, kappas, t_emb, need_weights=capture is not None
            )
            state["s"] = s_i
            state["j"] = j + 1
            if capture is not None:
                capture.append({"block": i, "weights": w.detach(), "residual": h_bar.detach()})
            return h_bar

        return fn


def controlled_forward(
    denoiser: Denoiser,
    branch: SketchControlBranch,
    z: torch.Tensor,
    t,
    text_ids: torch.Tensor,
    s0: torch.Tensor,
    kappas: torch.Tensor,
    frame_indices=None,
    capture: list | None = None,
) -> torch.Tensor:
    """One combined forward: the control branch reads each placed block's
    entering activations and its residuals are injected into the same pass."""
    return denoiser(
        z,
        t,
        text_ids,
        residuals=branch.residual_fn(s0, kappas, capture),
        frame_indices=frame_indices,
    )


def dump_attention_maps(
    denoiser: Denoiser,
    branch: SketchControlBranch,
    z: torch.Tensor,
    t,
    text_ids: torch.Tensor,
    keyframes: KeyframeSketchSet,
    block: int,
    frame: int,
) -> dict:
    """Inter-frame attention weights for one control block and query frame.

    Returns {"weights": [heads, hw, K*hw], "spatial": [K, heads, h, w], ...};
    spatial is the mean attention a query frame pays to each keyframe cell.
    """
    cfg = denoiser.cfg
    if branch.control_cfg.variant == "temporal_concat":
        raise ValueError("the temporal_concat variant has no inter-frame attention to dump")
    if block not in branch.control_cfg.placement:
        raise ValueError(f"block {block} not in placement {branch.control_cfg.placement}")
    if not 0 <= frame < z.shape[1]:
        raise ValueError(f"query frame {frame} out of range")
    s0, kappas = encode_sketch_condition(denoiser, keyframes)
    cap: list = []
    with torch.no_grad():
        controlled_forward(
            denoiser, branch, z, t, text_ids, s0, torch.tensor([kappas]), capture=cap
        )
    entry = next(e for e in cap if e["block"] == block)
    hw = cfg.tokens_per_frame
    w = entry["weights"][0, :, frame * hw : (frame + 1) * hw, :]  # [heads, hw, K*hw]
    k = len(keyframes)
    spatial = (
        w.mean(dim=1)  # [heads, K*hw]
        .reshape(-1, k, hw)
        .permute(1, 0, 2)
        .reshape(k, -1, cfg.latent_h, cfg.latent_w)
    )
    return {
        "block": block,
        "frame": frame,
        "kappas": kappas,
        "heads": w.shape[0],
        "weights": w.cpu().numpy(),
        "spatial": spatial.cpu().numpy(),
    }


def save_attention_dump(out_dir: str | Path, dump: dict) -> list[Path]:
    """Write PNG grids (per head and per-keyframe spatial means) + sidecar."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def to_png(arr: np.ndarray, path: Path, scale: int = 8):
        lo, hi = float(arr.min()), float(arr.max())
        norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
        img = Image.fromarray((norm * 255).astype(np.uint8), mode="L")
        img = img.resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
        img.save(path)
        written.append(path)

    b, f = dump["block"], dump["frame"]
    for h in range(dump["heads"]):
        to_png(dump["weights"][h], out / f"block{b}_frame{f}_head{h}.png")
    for ki in range(dump["spatial"].shape[0]):
        to_png(
            dump["spatial"][ki].mean(axis=0),
            out / f"block{b}_frame{f}_key{ki}_spatial.png",
        )
    sidecar = {
        "block": b,
        "frame": f,
        "heads": dump["heads"],
        "keyframe_latent_indices": dump["kappas"],
        "weight_files": [p.name for p in written],
    }
    side = out / f"block{b}_frame{f}.json"
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    written.append(side)
    np.save(out / f"block{b}_frame{f}_weights.npy", dump["weights"])
    written.append(out / f"block{b}_frame{f}_weights.npy")
    return written
