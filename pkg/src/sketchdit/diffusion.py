"""Noise schedule, v-prediction algebra, DDIM sampling/inversion, latent fusion.

The schedule is a cosine alpha-bar curve rescaled so the terminal step has
exactly zero signal (alpha_bar[T] == 0, pure-noise endpoint) while sqrt(alpha_bar[1])
is preserved. All schedule math is float64 numpy; coefficients are cast to the
caller's tensor dtype at the point of use.

Conventions, used everywhere below (sa = sqrt(alpha_bar_t), so = sqrt(1 - alpha_bar_t)):

    z_t = sa * x0 + so * eps          forward noising
    v   = sa * eps - so * x0          prediction target
    x0  = sa * z_t - so * v           recovery
    eps = so * z_t + sa * v

(z, v) at a fixed t is a rotation of (x0, eps), so converting between
timesteps is exact affine algebra; DDIM with eta=0 is just decompose at t,
recompose at t_prev.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

DEFAULT_T_TRAIN = 1000
DEFAULT_STEPS = 50

# model_fn(z, t, cond) -> v  with t an int64 tensor [B] (or python int) and
# cond selecting the conditioned vs unconditional branch
ModelFn = Callable[[torch.Tensor, torch.Tensor, bool], torch.Tensor]


def _cosine_alpha_bar(t_train: int, s: float = 0.008) -> np.ndarray:
    t = np.arange(t_train + 1, dtype=np.float64)
    f = np.cos((t / t_train + s) / (1.0 + s) * math.pi / 2.0) ** 2
    return f / f[0]


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    alpha_bar: np.ndarray  # float64, length t_train+1, alpha_bar[0] == 1

    def config(self) -> dict:
        return {"t_train": self.t_train, "kind": "cosine_zero_snr"}

    def sqrt_ab(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bar[np.asarray(t)])

    def sqrt_omb(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar[np.asarray(t)])

    def inference_steps(self, steps: int = DEFAULT_STEPS) -> list[int]:
        """Ascending timestep list, length steps+1, from 0 to t_train."""
        if not 1 <= steps <= self.t_train:
            raise ValueError(f"steps must be in [1, {self.t_train}], got {steps}")
        ts = np.round(np.linspace(0, self.t_train, steps + 1)).astype(np.int64)
        if (np.diff(ts) <= 0).any():
            raise ValueError(f"non-monotone step list for steps={steps}")
        return [int(t) for t in ts]


def make_schedule(t_train: int = DEFAULT_T_TRAIN) -> NoiseSchedule:
    """Cosine alpha-bar rescaled to a zero-SNR terminal step.

    The rescale acts on sqrt(alpha_bar): shift so the terminal value is 0,
    scale so the t=1 value is unchanged. alpha_bar[0] is pinned to 1.
    """
    if t_train < 2:
        raise ValueError(f"t_train must be >= 2, got {t_train}")
    ab = _cosine_alpha_bar(t_train)
    sab = np.sqrt(ab)
    first, last = sab[1], sab[t_train]
    sab = (sab - last) * (first / (first - last))
    ab = sab**2
    ab[0] = 1.0
    if not (np.diff(ab) < 0).all():
        raise ValueError("alpha_bar not strictly decreasing after rescale")
    assert ab[t_train] == 0.0, "terminal alpha_bar must be exactly zero"
    return NoiseSchedule(t_train=t_train, alpha_bar=ab)


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    if cfg.get("kind") != "cosine_zero_snr":
        raise ValueError(f"unknown schedule kind {cfg.get('kind')!r}")
    return make_schedule(int(cfg["t_train"]))


def _coef(schedule: NoiseSchedule, t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample (sqrt_ab, sqrt_omb) broadcast against `like`."""
    t_np = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    sa = torch.as_tensor(schedule.sqrt_ab(t_np), dtype=like.dtype, device=like.device)
    so = torch.as_tensor(schedule.sqrt_omb(t_np), dtype=like.dtype, device=like.device)
    if sa.ndim == 0:
        return sa, so
    shape = (sa.shape[0],) + (1,) * (like.ndim - 1)
    return sa.reshape(shape), so.reshape(shape)


def forward_noise(schedule: NoiseSchedule, x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    sa, so = _coef(schedule, t, x0)
    return sa * x0 + so * eps


def v_target(schedule: NoiseSchedule, x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    sa, so = _coef(schedule, t, x0)
    return sa * eps - so * x0


def x0_from_v(schedule: NoiseSchedule, z: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
    sa, so = _coef(schedule, t, z)
    return sa * z - so * v


def eps_from_v(schedule: NoiseSchedule, z: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
    sa, so = _coef(schedule, t, z)
    return so * z + sa * v


def ddim_step(schedule: NoiseSchedule, z: torch.Tensor, v: torch.Tensor, t, t_prev) -> torch.Tensor:
    """Deterministic DDIM update t -> t_prev given v expressed at t."""
    x0 = x0_from_v(schedule, z, v, t)
    eps = eps_from_v(schedule, z, v, t)
    sa, so = _coef(schedule, t_prev, z)
    return sa * x0 + so * eps


def cfg_combine(v_uncond: torch.Tensor, v_cond: torch.Tensor, scale: float) -> torch.Tensor:
    return v_uncond + scale * (v_cond - v_uncond)


@dataclass(frozen=True)
class FusionPolicy:
    """When and how sampling overwrites unedited latent cells from an inversion
    trajectory. Step indices count inference steps; by default 0-based and
    applied after that step's DDIM update (so index steps-1 pins the final
    latent). Both conventions are selectable for comparison."""

    indices: tuple[int, ...] = (25, 49)
    index_base: int = 0  # 0 or 1
    apply: str = "after"  # "after" | "before" the step's update

    def normalized(self, steps: int) -> tuple[int, ...]:
        if self.index_base not in (0, 1):
            raise ValueError(f"index_base must be 0 or 1, got {self.index_base}")
        if self.apply not in ("after", "before"):
            raise ValueError(f"apply must be 'after' or 'before', got {self.apply!r}")
        idx = tuple(sorted(i - self.index_base for i in self.indices))
        for i in idx:
            if not 0 <= i < steps:
                raise ValueError(f"fusion index {i} out of range for {steps} steps")
        return idx


def fuse_latent(z: torch.Tensor, z_ref: torch.Tensor, latent_mask: torch.Tensor) -> torch.Tensor:
    """z <- M*z + (1-M)*z_ref with M=1 marking edited cells. Idempotent."""
    m = latent_mask.to(dtype=z.dtype)
    while m.ndim < z.ndim:
        m = m.unsqueeze(0) if m.ndim < z.ndim - 1 else m.unsqueeze(-1)
    return m * z + (1.0 - m) * z_ref


def noise_like(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return torch.randn(tuple(shape), generator=g, dtype=dtype)


def sample_latent(
    model_fn: ModelFn,
    schedule: NoiseSchedule,
    shape: Sequence[int],
    *,
    steps: int = DEFAULT_STEPS,
    cfg_scale: float = 1.0,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    z_init: torch.Tensor | None = None,
    fusion: tuple[FusionPolicy, torch.Tensor, list[torch.Tensor]] | None = None,
) -> torch.Tensor:
    """DDIM sampling from pure noise (or z_init) down to t=0.

    fusion, when given, is (policy, latent_mask, trajectory) with trajectory[j]
    the inversion latent at ascending schedule point j; unedited cells are
    overwritten at the policy's steps.
    """
    if cfg_scale < 1.0:
        raise ValueError(f"cfg scale must be >= 1, got {cfg_scale}")
    ts = schedule.inference_steps(steps)
    z = noise_like(shape, seed, dtype) if z_init is None else z_init.clone()
    fuse_at: tuple[int, ...] = ()
    if fusion is not None:
        policy, latent_mask, traj = fusion
        if len(traj) != steps + 1:
            raise ValueError(f"trajectory length {len(traj)} != steps+1 = {steps + 1}")
        fuse_at = policy.normalized(steps)

    with torch.no_grad():
        for k in range(steps):
            t, t_prev = ts[steps - k], ts[steps - k - 1]
            if fusion is not None and policy.apply == "before" and k in fuse_at:
                z = fuse_latent(z, traj[steps - k], latent_mask)
            v = model_fn(z, t, True)
            if cfg_scale != 1.0:
                v = cfg_combine(model_fn(z, t, False), v, cfg_scale)
            z = ddim_step(schedule, z, v, t, t_prev)
            if fusion is not None and policy.apply == "after" and k in fuse_at:
                z = fuse_latent(z, traj[steps - k - 1], latent_mask)
    return z


def ddim_invert(
    model_fn: ModelFn,
    schedule: NoiseSchedule,
    z0: torch.Tensor,
    *,
    steps: int = DEFAULT_STEPS,
    refine: int = 2,
) -> list[torch.Tensor]:
    """Unguided inversion of DDIM sampling; returns [z at each schedule point].

    trajectory[0] is z0 (the encoded clip); trajectory[j] sits at the j-th
    ascending inference timestep. Each upward step evaluates the model at the
    *target* timestep (the same timestep the downward pass uses there; also
    keeps the model inside its trained range t >= 1). refine=0 reverses
    ddim_step directly; refine>=1 then fixed-point iterates the exact affine
    preimage of the downward update, which is what makes invert->sample
    round trips tight.
    """
    ts = schedule.inference_steps(steps)
    traj = [z0.clone()]
    z = z0.clone()
    with torch.no_grad():
        for j in range(1, steps + 1):
            t_lo, t_hi = ts[j - 1], ts[j]
            v = model_fn(z, t_hi, True)
            z_hi = ddim_step(schedule, z, v, t_lo, t_hi)
            for _ in range(refine):
                v = model_fn(z_hi, t_hi, True)
                z_hi = _invert_exact(schedule, z, v, t_lo, t_hi)
            z = z_hi
            traj.append(z.clone())
    return traj


def _invert_exact(schedule: NoiseSchedule, z_lo: torch.Tensor, v_hi: torch.Tensor, t_lo, t_hi) -> torch.Tensor:
    """Exact preimage of ddim_step(., v_hi, t_hi, t_lo) = z_lo.

    The downward update is z_lo = cos(d)*z_hi + sin(d)*v_hi with
    d = angle(t_lo) - angle(t_hi), cos(angle) = sqrt_ab; solve for z_hi.
    """
    sa_hi, so_hi = _coef(schedule, t_hi, z_lo)
    sa_lo, so_lo = _coef(schedule, t_lo, z_lo)
    cos_d = sa_lo * sa_hi + so_lo * so_hi
    sin_d = so_lo * sa_hi - sa_lo * so_hi
    return (z_lo - sin_d * v_hi) / cos_d


def train_loss(
    model_fn: ModelFn,
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    *,
    generator: torch.Generator,
    p_drop: float = 0.0,
) -> tuple[torch.Tensor, dict]:
    """v-prediction MSE on one batch; conditioning dropped (whole batch, so the
    unconditional pass sees a genuinely empty text segment) with prob p_drop."""
    b = x0.shape[0]
    t = torch.randint(1, schedule.t_train + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    cond = True
    if p_drop > 0 and torch.rand((), generator=generator).item() < p_drop:
        cond = False
    z_t = forward_noise(schedule, x0, eps, t)
    v = v_target(schedule, x0, eps, t)
    v_pred = model_fn(z_t, t, cond)
    loss = torch.mean((v_pred - v) ** 2)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss (t={t.tolist()}, cond={cond}, "
            f"|x0|max={x0.abs().max().item():.3g}, |v_pred|max={v_pred.abs().max().item():.3g})"
        )
    return loss, {"t": t, "cond": cond}
