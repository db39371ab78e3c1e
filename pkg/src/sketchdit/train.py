"""Training stages: backbone pretraining, two-stage sketch conditioning, and
editing fine-tuning.

The backbone is trained once, text-conditionally, and then frozen for good:
every conditioned stage optimizes only its branch parameters and asserts a
cryptographic hash of the backbone before and after. Stage 1 of generation
training alternates homogeneous image and video batches (images are single
frames declared at random time points); stage 2 continues on video alone.
Editing fine-tunes from the generation checkpoint in a self-supervised
inpainting setup: random mask tracks hide part of the clip and the target is
the original.

Everything is deterministic from the config seed in single-thread mode: the
loss trace, the checkpoints, and the metrics CSV reproduce exactly.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import codec, diffusion
from .backbone import BackboneConfig, Denoiser
from .checkpoint import (
    Checkpoint,
    check_config,
    flat_state,
    load_checkpoint,
    load_into,
    module_sha256,
    save_checkpoint,
)
from .control import ControlConfig, SketchControlBranch, config_from_dict, sketch_latent_row
from .data import TrainingSample, ground_truth_velocity
from .editing import EditControlBranch, encode_masked_video, mask_rectangle_track, mask_video
from .text import encode as encode_text

STAGES = ("pretrain", "gen-stage1", "gen-stage2", "edit")
DEFAULT_STEPS = {"pretrain": 2000, "gen-stage1": 2000, "gen-stage2": 1000, "edit": 2000}


@dataclass
class TrainConfig:
    stage: str
    steps: int = 0  # 0 means the stage default
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.95)
    seed: int = 0
    p_drop: float = 0.1  # joint prompt+sketch conditioning dropout, whole batch
    use_images: bool = True  # stage 1 only; False is the "no image data" ablation
    image_ratio: int = 1  # image batches per video batch in stage 1
    from_scratch: bool = False  # edit only; True skips the generation init
    use_video_branch: bool = True  # edit only; False drops the insertion pathway

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if self.steps == 0:
            self.steps = DEFAULT_STEPS[self.stage]
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("steps and batch_size must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def config_from_file(path: str | Path) -> TrainConfig:
    """TrainConfig from a JSON or TOML file (by extension)."""
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".toml":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        d = tomllib.loads(raw.decode())
    else:
        d = json.loads(raw)
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# -- tensor assembly ----------------------------------------------------------


def clip_to_latent(clip: np.ndarray) -> torch.Tensor:
    """Pixel clip [T, H, W, 3] in [0,1] -> latent [T', h, w, D] in [-1, 1]."""
    return torch.from_numpy(codec.encode_video(np.ascontiguousarray(clip, np.float32))) * 2.0 - 1.0


def latent_to_clip(lat: torch.Tensor) -> np.ndarray:
    """Inverse of clip_to_latent, clamped back into pixel range."""
    arr = ((lat.detach().to(torch.float32) + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
    return codec.decode_video(np.ascontiguousarray(arr))


def _empty_ids(b: int) -> torch.Tensor:
    return torch.zeros((b, 0), dtype=torch.long)


def _prompt_ids(samples: list[TrainingSample], text_len: int) -> torch.Tensor:
    return torch.tensor([encode_text(s.prompt, pad_to=text_len) for s in samples])


def _sketch_condition(denoiser: Denoiser, samples: list[TrainingSample]):
    """Batched (s0 [B, K, hw, d], kappas [B, K]) from per-sample keyframes.

    Video samples with a single keyframe are padded to K=2 by duplicating it.
    Duplicating the whole key set leaves every softmax in the branch exactly
    equivalent to the unpadded computation (scores repeat, so the halved
    weights recombine over identical values), which keeps mixed-K batches in
    one tensor without changing any sample's function.
    """
    rows, kaps = [], []
    for s in samples:
        if s.kind == "image":
            groups = [codec.latent_group(s.declared_time)]
            grid_kappas = [0]  # the single latent frame; its time lives in the pos code
        else:
            groups = [codec.latent_group(t) for t in s.keyframe_times]
            grid_kappas = groups
        row = [sketch_latent_row(denoiser, sk, g)[0] for sk, g in zip(s.sketches, groups)]
        if s.kind == "video" and len(row) == 1:
            row = row * 2
            grid_kappas = grid_kappas * 2
        rows.append(torch.stack(row))
        kaps.append(grid_kappas)
    return torch.stack(rows), torch.tensor(kaps)


def build_batch(denoiser: Denoiser, samples: list[TrainingSample], editing: bool = False) -> dict:
    """Samples (all one kind) -> the tensors one training step consumes."""
    kinds = {s.kind for s in samples}
    if len(kinds) != 1:
        raise ValueError(f"batches must be homogeneous, got kinds {kinds}")
    cfg = denoiser.cfg
    x0 = torch.stack([clip_to_latent(s.clip) for s in samples])
    ids = _prompt_ids(samples, cfg.text_len)
    s0, kappas = _sketch_condition(denoiser, samples)
    frame_indices = None
    if kinds == {"image"}:
        frame_indices = torch.tensor([[codec.latent_group(s.declared_time)] for s in samples])
    batch = {"x0": x0, "ids": ids, "s0": s0, "kappas": kappas, "frame_indices": frame_indices}
    if editing:
        v_rows, m_rows = [], []
        for s in samples:
            if s.mask_spec is None or s.scene is None:
                raise ValueError("editing batches need samples with mask specs and scenes")
            track = mask_rectangle_track(
                s.mask_spec, s.clip.shape[0], s.scene.height, s.scene.width,
                velocity=ground_truth_velocity(s.scene),
            )
            v0, m = encode_masked_video(denoiser, mask_video(s.clip, track))
            v_rows.append(v0[0])
            m_rows.append(m[0])
        batch["v0"] = torch.stack(v_rows)
        batch["mask_tokens"] = torch.stack(m_rows)
    return batch


# -- loss pathways ------------------------------------------------------------


def pretrain_loss_fn(denoiser: Denoiser, batch: dict):
    def model_fn(z, t, cond):
        ids = batch["ids"] if cond else _empty_ids(z.shape[0])
        return denoiser(z, t, ids, frame_indices=batch["frame_indices"])

    return model_fn


def generation_loss_fn(denoiser: Denoiser, branch: SketchControlBranch, batch: dict):
    from .control import controlled_forward

    def model_fn(z, t, cond):
        if not cond:  # prompt and sketches drop together; plain backbone pass
            return denoiser(z, t, _empty_ids(z.shape[0]), frame_indices=batch["frame_indices"])
        return controlled_forward(
            denoiser, branch, z, t, batch["ids"], batch["s0"], batch["kappas"],
            frame_indices=batch["frame_indices"],
        )

    return model_fn


def editing_loss_fn(denoiser: Denoiser, branch: EditControlBranch, batch: dict):
    from .editing import edit_forward

    def model_fn(z, t, cond):
        if not cond:
            return denoiser(z, t, _empty_ids(z.shape[0]), frame_indices=batch["frame_indices"])
        return edit_forward(
            denoiser, branch, z, t, batch["ids"], batch["s0"],
            batch.get("v0"), batch["kappas"], batch.get("mask_tokens"),
            frame_indices=batch["frame_indices"],
        )

    return model_fn


# -- the loop -------------------------------------------------------------


@dataclass
class TrainResult:
    path: Path
    losses: list[float] = field(default_factory=list)
    stage: str = ""


class MetricsLog:
    """CSV metrics sink: step,loss,lr,stage."""

    def __init__(self, path: str | Path | None):
        self._file = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._file = open(path, "w", newline="")
            self._writer = csv.writer(self._file)
            self._writer.writerow(["step", "loss", "lr", "stage"])

    def row(self, step: int, loss: float, lr: float, stage: str):
        if self._file is not None:
            self._writer.writerow([step, f"{loss:.8f}", lr, stage])

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None


def _optimize(cfg: TrainConfig, params, batches, loss_fns, log: MetricsLog) -> list[float]:
    """Shared stage loop: batches[i] and loss_fns[i] pair up per step."""
    opt = torch.optim.AdamW(
        params, lr=cfg.lr, weight_decay=cfg.weight_decay, betas=cfg.betas
    )
    sched = diffusion.make_schedule()
    gen = torch.Generator().manual_seed(cfg.seed ^ 0x5EED)
    losses = []
    for step in range(cfg.steps):
        batch, model_fn = batches(step)
        loss, _ = diffusion.train_loss(
            model_fn, sched, batch["x0"], generator=gen, p_drop=cfg.p_drop
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = loss.item()
        losses.append(val)
        log.row(step, val, cfg.lr, cfg.stage)
    return losses


def _save(path, kind, configs, params, cfg: TrainConfig, losses) -> Path:
    tail = losses[-min(50, len(losses)) :]
    return save_checkpoint(
        path,
        kind=kind,
        configs=configs,
        schedule=diffusion.make_schedule().config(),
        params=params,
        meta={
            "stage": cfg.stage,
            "steps": cfg.steps,
            "seed": cfg.seed,
            "train_config": cfg.to_dict(),
            "final_loss": float(np.mean(tail)),
        },
    )


def _frozen(denoiser: Denoiser):
    denoiser.requires_grad_(False)
    return module_sha256(denoiser)


def _check_frozen(denoiser: Denoiser, pre_hash: str):
    if module_sha256(denoiser) != pre_hash:
        raise RuntimeError("backbone parameters changed during a conditioned stage")


def load_backbone(ckpt: Checkpoint) -> Denoiser:
    bb = BackboneConfig(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in ckpt.configs["backbone"].items()
    })
    denoiser = Denoiser(bb)
    load_into(denoiser, ckpt, "backbone")
    return denoiser


def pretrain_backbone(
    cfg: TrainConfig,
    corpus,
    out_path: str | Path,
    backbone_cfg: BackboneConfig | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Text-conditional v-prediction training of the bare backbone on video.

    This checkpoint is the frozen base every later stage rides on; nothing is
    frozen here (the frozen-parameter set of this phase is empty).
    """
    if cfg.stage != "pretrain":
        raise ValueError(f"config stage is {cfg.stage!r}, expected 'pretrain'")
    set_determinism(cfg.seed)
    bb = backbone_cfg or BackboneConfig()
    denoiser = Denoiser(bb)
    from .data import Loader

    loader = Loader(corpus, "video", cfg.batch_size, seed=cfg.seed)
    log = MetricsLog(log_path)
    try:
        def batches(step):
            batch = build_batch(denoiser, loader.next_batch())
            return batch, pretrain_loss_fn(denoiser, batch)

        losses = _optimize(cfg, denoiser.parameters(), batches, None, log)
    finally:
        log.close()
    path = _save(out_path, "backbone", {"backbone": bb.to_dict()}, flat_state(backbone=denoiser),
                 cfg, losses)
    return TrainResult(path=path, losses=losses, stage=cfg.stage)


def train_generation(
    cfg: TrainConfig,
    corpus,
    prev_ckpt: str | Path,
    out_path: str | Path,
    control_cfg: ControlConfig | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Stage 1 (hybrid image+video) or stage 2 (video only) of the sketch
    condition network; only branch parameters update."""
    if cfg.stage not in ("gen-stage1", "gen-stage2"):
        raise ValueError(f"config stage is {cfg.stage!r}, expected a generation stage")
    set_determinism(cfg.seed)
    ckpt = load_checkpoint(prev_ckpt)
    denoiser = load_backbone(ckpt)
    if cfg.stage == "gen-stage1":
        if ckpt.kind != "backbone":
            raise ValueError(f"stage 1 starts from a backbone checkpoint, got {ckpt.kind!r}")
        ctl = control_cfg or ControlConfig()
        branch = SketchControlBranch(denoiser.cfg, ctl)
        branch.init_from_backbone(denoiser)
    else:
        if ckpt.kind != "generation":
            raise ValueError(f"stage 2 continues a generation checkpoint, got {ckpt.kind!r}")
        ctl = config_from_dict(ckpt.configs["control"])
        if control_cfg is not None:
            check_config(ckpt, "control", control_cfg.to_dict())
        branch = SketchControlBranch(denoiser.cfg, ctl)
        load_into(branch, ckpt, "control")
    pre_hash = _frozen(denoiser)
    from .data import Loader

    video = Loader(corpus, "video", cfg.batch_size, seed=cfg.seed)
    hybrid = cfg.stage == "gen-stage1" and cfg.use_images
    image = Loader(corpus, "image", cfg.batch_size, seed=cfg.seed + 1) if hybrid else None
    log = MetricsLog(log_path)
    try:
        def batches(step):
            use_image = hybrid and step % (1 + cfg.image_ratio) >= 1
            samples = (image if use_image else video).next_batch()
            batch = build_batch(denoiser, samples)
            return batch, generation_loss_fn(denoiser, branch, batch)

        losses = _optimize(cfg, branch.parameters(), batches, None, log)
    finally:
        log.close()
    _check_frozen(denoiser, pre_hash)
    path = _save(
        out_path, "generation",
        {"backbone": denoiser.cfg.to_dict(), "control": ctl.to_dict()},
        flat_state(backbone=denoiser, control=branch), cfg, losses,
    )
    return TrainResult(path=path, losses=losses, stage=cfg.stage)


def train_editing(
    cfg: TrainConfig,
    corpus,
    prev_ckpt: str | Path,
    out_path: str | Path,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Self-supervised inpainting fine-tune of the editing network.

    Normally prev_ckpt is a trained generation checkpoint (the sketch pathway
    transfers, insertion copies start from backbone blocks). With from_scratch
    the sketch pathway starts from backbone copies instead, which requires
    only a backbone checkpoint.
    """
    if cfg.stage != "edit":
        raise ValueError(f"config stage is {cfg.stage!r}, expected 'edit'")
    set_determinism(cfg.seed)
    ckpt = load_checkpoint(prev_ckpt)
    denoiser = load_backbone(ckpt)
    if cfg.from_scratch:
        ctl = (
            config_from_dict(ckpt.configs["control"])
            if "control" in ckpt.configs and ckpt.configs["control"]
            else ControlConfig()
        )
        branch = EditControlBranch(denoiser.cfg, ctl, use_video_branch=cfg.use_video_branch)
        branch.init_from_backbone(denoiser)
    else:
        if ckpt.kind != "generation":
            raise ValueError(
                "editing fine-tunes from a generation checkpoint; "
                "pass from_scratch=True to start from a bare backbone"
            )
        ctl = config_from_dict(ckpt.configs["control"])
        gen = SketchControlBranch(denoiser.cfg, ctl)
        load_into(gen, ckpt, "control")
        branch = EditControlBranch(denoiser.cfg, ctl, use_video_branch=cfg.use_video_branch)
        branch.init_from_generation(denoiser, gen)
    pre_hash = _frozen(denoiser)
    from .data import Loader

    loader = Loader(corpus, "video", cfg.batch_size, seed=cfg.seed)
    log = MetricsLog(log_path)
    try:
        def batches(step):
            batch = build_batch(denoiser, loader.next_batch(), editing=True)
            return batch, editing_loss_fn(denoiser, branch, batch)

        losses = _optimize(cfg, branch.parameters(), batches, None, log)
    finally:
        log.close()
    _check_frozen(denoiser, pre_hash)
    path = _save(
        out_path, "edit",
        {
            "backbone": denoiser.cfg.to_dict(),
            "control": ctl.to_dict(),
            "edit": {"use_video_branch": cfg.use_video_branch},
        },
        flat_state(backbone=denoiser, edit=branch), cfg, losses,
    )
    return TrainResult(path=path, losses=losses, stage=cfg.stage)
