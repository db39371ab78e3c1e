import math

import numpy as np
import pytest
import torch

from sketchdit import diffusion as dfn


def base_cosine_sqrt_ab(t_train, t, s=0.008):
    # independent recomputation of the pre-rescale cosine curve
    f = math.cos((t / t_train + s) / (1 + s) * math.pi / 2) ** 2
    f0 = math.cos((s / (1 + s)) * math.pi / 2) ** 2
    return math.sqrt(f / f0)


def test_schedule_endpoints_and_monotonicity():
    sch = dfn.make_schedule(1000)
    assert sch.alpha_bar[0] == 1.0
    assert sch.alpha_bar[1000] == 0.0  # exactly, not approximately
    assert (np.diff(sch.alpha_bar) < 0).all()
    assert sch.alpha_bar.dtype == np.float64


def test_schedule_preserves_first_step():
    for t_train in (100, 1000):
        sch = dfn.make_schedule(t_train)
        want = base_cosine_sqrt_ab(t_train, 1)
        assert abs(math.sqrt(sch.alpha_bar[1]) - want) < 1e-12


def test_schedule_roundtrip_config():
    sch = dfn.make_schedule(500)
    again = dfn.schedule_from_config(sch.config())
    assert (again.alpha_bar == sch.alpha_bar).all()


def test_inference_steps_uniform():
    sch = dfn.make_schedule(1000)
    ts = sch.inference_steps(50)
    assert len(ts) == 51
    assert ts[0] == 0 and ts[-1] == 1000
    assert ts[1] - ts[0] == 20
    with pytest.raises(ValueError):
        sch.inference_steps(0)
    with pytest.raises(ValueError):
        sch.inference_steps(1001)


def test_v_algebra_endpoints():
    sch = dfn.make_schedule(1000)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    # alpha_bar = 1 at t=0: v = eps, z = x0
    assert torch.allclose(dfn.v_target(sch, x0, eps, 0), eps)
    assert torch.allclose(dfn.forward_noise(sch, x0, eps, 0), x0)
    # alpha_bar = 0 at t=T: v = -x0, z = eps
    assert torch.allclose(dfn.v_target(sch, x0, eps, 1000), -x0)
    assert torch.allclose(dfn.forward_noise(sch, x0, eps, 1000), eps)


def test_v_algebra_involution_float64():
    sch = dfn.make_schedule(1000)
    g = torch.Generator().manual_seed(7)
    x0 = torch.randn(4, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 8, generator=g, dtype=torch.float64)
    for t in [1, 17, 250, 500, 999, 1000]:
        tt = torch.full((4,), t, dtype=torch.int64)
        z = dfn.forward_noise(sch, x0, eps, tt)
        v = dfn.v_target(sch, x0, eps, tt)
        assert (dfn.x0_from_v(sch, z, v, tt) - x0).abs().max() < 1e-12
        assert (dfn.eps_from_v(sch, z, v, tt) - eps).abs().max() < 1e-12


def test_ddim_step_fixed_point_and_recompose():
    sch = dfn.make_schedule(1000)
    g = torch.Generator().manual_seed(3)
    z = torch.randn(2, 8, generator=g, dtype=torch.float64)
    v = torch.randn(2, 8, generator=g, dtype=torch.float64)
    assert (dfn.ddim_step(sch, z, v, 500, 500) - z).abs().max() < 1e-12
    # decompose-recompose identity at the same t
    x0 = dfn.x0_from_v(sch, z, v, 500)
    eps = dfn.eps_from_v(sch, z, v, 500)
    sa, so = math.sqrt(sch.alpha_bar[500]), math.sqrt(1 - sch.alpha_bar[500])
    assert (sa * x0 + so * eps - z).abs().max() < 1e-9


def test_ddim_step_affine_invertibility():
    # (z, v) is a per-t rotation of (x0, eps); stepping back requires v
    # re-expressed at the new timestep. With the state-consistent v the round
    # trip is exact; this is the sense in which the update is invertible.
    sch = dfn.make_schedule(1000)
    g = torch.Generator().manual_seed(5)
    x0 = torch.randn(3, 6, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 6, generator=g, dtype=torch.float64)
    t, t_prev = 700, 420
    z_t = dfn.forward_noise(sch, x0, eps, t)
    v_t = dfn.v_target(sch, x0, eps, t)
    z_prev = dfn.ddim_step(sch, z_t, v_t, t, t_prev)
    assert (z_prev - dfn.forward_noise(sch, x0, eps, t_prev)).abs().max() < 1e-9
    v_prev = dfn.v_target(sch, x0, eps, t_prev)
    back = dfn.ddim_step(sch, z_prev, v_prev, t_prev, t)
    assert (back - z_t).abs().max() < 1e-9


def test_cfg_combine_affine_in_scale():
    g = torch.Generator().manual_seed(11)
    vu = torch.randn(5, 4, generator=g)
    vc = torch.randn(5, 4, generator=g)
    assert torch.allclose(dfn.cfg_combine(vu, vc, 1.0), vc)
    for s in [1.0, 2.5, 10.0, 20.0]:
        want = vu + s * (vc - vu)
        assert torch.allclose(dfn.cfg_combine(vu, vc, s), want)
    # slope is (vc - vu), pointwise
    d = dfn.cfg_combine(vu, vc, 7.0) - dfn.cfg_combine(vu, vc, 6.0)
    assert torch.allclose(d, vc - vu, atol=1e-6)


def test_fuse_latent_idempotent_and_saturating():
    g = torch.Generator().manual_seed(2)
    z = torch.randn(1, 5, 4, 4, 768, generator=g)
    ref = torch.randn(1, 5, 4, 4, 768, generator=g)
    m = (torch.rand(5, 4, 4, generator=g) < 0.3).to(torch.uint8)
    once = dfn.fuse_latent(z, ref, m)
    twice = dfn.fuse_latent(once, ref, m)
    assert (once == twice).all()
    mb = m.bool()[None, :, :, :, None].expand_as(z)
    assert (once[~mb] == ref[~mb]).all()
    assert (once[mb] == z[mb]).all()
    all_edited = torch.ones_like(m)
    assert (dfn.fuse_latent(z, ref, all_edited) == z).all()


class CallCounter:
    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, z, t, cond):
        self.calls.append((int(t) if not torch.is_tensor(t) else -1, cond))
        return self.fn(z, t, cond)


def linear_model(z, t, cond):
    return 0.5 * z - 0.25 * torch.roll(z, 1, dims=-1)


def test_sample_deterministic_and_cfg1_skips_uncond():
    sch = dfn.make_schedule(1000)
    m = CallCounter(linear_model)
    a = dfn.sample_latent(m, sch, (1, 2, 8), steps=10, cfg_scale=1.0, seed=42)
    assert all(cond for _, cond in m.calls)
    b = dfn.sample_latent(linear_model, sch, (1, 2, 8), steps=10, cfg_scale=1.0, seed=42)
    assert (a == b).all()
    c = dfn.sample_latent(linear_model, sch, (1, 2, 8), steps=10, cfg_scale=1.0, seed=43)
    assert not (a == c).all()
    with pytest.raises(ValueError):
        dfn.sample_latent(linear_model, sch, (1, 2, 8), cfg_scale=0.5)


def test_invert_trajectory_shape_and_start():
    sch = dfn.make_schedule(1000)
    z0 = torch.randn(1, 4, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    traj = dfn.ddim_invert(linear_model, sch, z0, steps=12)
    assert len(traj) == 13
    assert (traj[0] == z0).all()


def test_invert_then_sample_roundtrip_linear_model():
    # On an exactly Lipschitz model the fixed-point refined inversion makes
    # invert->sample a near-exact round trip; this freezes the tolerance the
    # trained-model acceptance check relies on.
    sch = dfn.make_schedule(1000)
    g = torch.Generator().manual_seed(9)
    z0 = torch.randn(1, 4, 8, generator=g, dtype=torch.float64)
    traj = dfn.ddim_invert(linear_model, sch, z0, steps=50, refine=6)
    back = dfn.sample_latent(
        linear_model, sch, z0.shape, steps=50, cfg_scale=1.0, z_init=traj[-1], dtype=torch.float64
    )
    assert (back - z0).abs().max() < 1e-9
    # the default refinement already sits well under the 1e-3 editing budget
    traj2 = dfn.ddim_invert(linear_model, sch, z0, steps=50)
    back2 = dfn.sample_latent(
        linear_model, sch, z0.shape, steps=50, cfg_scale=1.0, z_init=traj2[-1], dtype=torch.float64
    )
    assert (back2 - z0).abs().max() < 1e-3


def test_fusion_pins_unedited_cells_during_sampling():
    sch = dfn.make_schedule(1000)
    g = torch.Generator().manual_seed(4)
    z0 = torch.randn(1, 5, 2, 2, 8, generator=g, dtype=torch.float64)
    steps = 10
    traj = dfn.ddim_invert(linear_model, sch, z0, steps=steps)
    m = torch.zeros(5, 2, 2, dtype=torch.uint8)
    m[2, 0, 0] = 1  # one edited cell, everything else pinned
    policy = dfn.FusionPolicy(indices=(4, steps - 1), index_base=0, apply="after")
    out = dfn.sample_latent(
        linear_model,
        sch,
        z0.shape,
        steps=steps,
        cfg_scale=1.0,
        seed=1,
        dtype=torch.float64,
        fusion=(policy, m, traj),
    )
    mb = m.bool()[None, :, :, :, None].expand_as(z0)
    # final fusion index = last step, so unedited cells equal the encoded source exactly
    assert (out[~mb] == z0[~mb]).all()
    assert not torch.allclose(out[mb], z0[mb])


def test_fusion_policy_validation():
    with pytest.raises(ValueError):
        dfn.FusionPolicy(indices=(50,), index_base=0).normalized(50)
    assert dfn.FusionPolicy(indices=(26, 50), index_base=1).normalized(50) == (25, 49)
    with pytest.raises(ValueError):
        dfn.FusionPolicy(indices=(0,), index_base=1).normalized(50)
    with pytest.raises(ValueError):
        dfn.FusionPolicy(apply="sideways").normalized(50)


def test_train_loss_perfect_and_zero_predictor():
    sch = dfn.make_schedule(1000)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(4, 16, generator=g)

    state = {}

    def perfect(z, t, cond):
        return state["v"]

    # rebuild the target from the same draws train_loss makes (t first, then
    # eps) by replaying its generator
    g1 = torch.Generator().manual_seed(123)
    t = torch.randint(1, 1001, (4,), generator=g1)
    eps = torch.randn(x0.shape, generator=g1)
    state["v"] = dfn.v_target(sch, x0, eps, t)
    g2 = torch.Generator().manual_seed(123)
    loss, info = dfn.train_loss(perfect, sch, x0, generator=g2)
    assert loss.item() < 1e-12
    assert (info["t"] == t).all()

    # zero predictor: E[loss] = E_t[ab_t] + E_t[1-ab_t] * mean(x0^2), Monte Carlo
    zero = lambda z, t, cond: torch.zeros_like(z)
    losses = []
    g3 = torch.Generator().manual_seed(77)
    for _ in range(1500):
        l, _ = dfn.train_loss(zero, sch, x0, generator=g3)
        losses.append(l.item())
    mc = float(np.mean(losses))
    e_ab = sch.alpha_bar[1:].mean()
    want = e_ab + (1 - e_ab) * x0.pow(2).mean().item()
    assert abs(mc - want) / want < 0.05


def test_train_loss_batch_order_invariant():
    sch = dfn.make_schedule(1000)
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(4, 16, generator=g)
    model = lambda z, t, cond: 0.1 * z
    # same per-sample (t, eps) pairing requires permuting draws identically;
    # verify via an explicit loss recomputation rather than a reseeded call
    g1 = torch.Generator().manual_seed(5)
    t = torch.randint(1, 1001, (4,), generator=g1)
    eps = torch.randn(x0.shape, generator=g1)
    z = dfn.forward_noise(sch, x0, eps, t)
    v = dfn.v_target(sch, x0, eps, t)
    direct = torch.mean((model(z, t, True) - v) ** 2)
    perm = torch.tensor([2, 0, 3, 1])
    permuted = torch.mean((model(z[perm], t[perm], True) - v[perm]) ** 2)
    assert torch.allclose(direct, permuted, atol=1e-7)
    g2 = torch.Generator().manual_seed(5)
    loss, _ = dfn.train_loss(model, sch, x0, generator=g2)
    assert torch.allclose(loss, direct, atol=1e-7)


def test_train_loss_nonfinite_raises():
    sch = dfn.make_schedule(1000)
    x0 = torch.randn(2, 8, generator=torch.Generator().manual_seed(0))
    bad = lambda z, t, cond: z * float("nan")
    with pytest.raises(RuntimeError, match="non-finite"):
        dfn.train_loss(bad, sch, x0, generator=torch.Generator().manual_seed(0))
