"""Flow matching: interpolants, training loss, Euler sampler, guidance.

Convention: t=1 is pure noise, t=0 is data. The interpolant is
x_t = (1-t) x0 + t x1 with regression target x1 - x0, and generation
integrates dx/dt = v(x, t) from t=1 down to t=0 with plain Euler steps.
The integrator takes an explicit time grid, so schedules other than the
uniform default (and forward-time test grids) plug straight in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .errors import (
    InvalidConfigError,
    SamplerDivergenceError,
    ShapeError,
    TrainingDivergenceError,
)
from .routing import GuidanceSpec, auto_guidance, make_route_mask


@dataclass(frozen=True)
class FlowBatch:
    """One training interpolant: endpoints, times, and the velocity target."""

    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor
    v_target: torch.Tensor


def make_flow_batch(x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor) -> FlowBatch:
    if x0.shape != x1.shape:
        raise ShapeError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    if t.ndim != 1 or t.shape[0] != x0.shape[0]:
        raise ShapeError(f"t must be [batch], got {tuple(t.shape)}")
    tb = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return FlowBatch(x0=x0, x1=x1, t=t, x_t=(1 - tb) * x0 + tb * x1, v_target=x1 - x0)


def draw_times(batch: int, generator, *, dtype=torch.float32, kind: str = "uniform"):
    """Training time draw; `kind` is "uniform" or "logit-normal"."""
    if kind == "uniform":
        return torch.rand(batch, generator=generator, dtype=dtype)
    if kind == "logit-normal":
        return torch.sigmoid(torch.randn(batch, generator=generator, dtype=dtype))
    raise InvalidConfigError(f"unknown time sampling {kind!r}")


def fm_loss(
    model,
    x0: torch.Tensor,
    text_emb: torch.Tensor,
    pos,
    generator: torch.Generator,
    *,
    time_sampling: str = "uniform",
    route=None,
    text_mask=None,
) -> torch.Tensor:
    """Mean squared error between predicted velocity and x1 - x0.

    Noise and times are drawn from `generator`, so the loss is a pure
    function of (weights, batch, generator state).
    """
    t = draw_times(x0.shape[0], generator, dtype=x0.dtype, kind=time_sampling)
    x1 = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    batch = make_flow_batch(x0, x1, t)
    return loss_on_batch(model, batch, text_emb, pos, route=route, text_mask=text_mask)


def loss_on_batch(
    model, batch: FlowBatch, text_emb, pos, *, route=None, text_mask=None
) -> torch.Tensor:
    kwargs = {}
    if route is not None:
        kwargs["route"] = route
    if text_mask is not None:
        kwargs["text_mask"] = text_mask
    v = model(batch.x_t, pos, text_emb, batch.t, **kwargs)
    if v.shape != batch.v_target.shape:
        raise ShapeError(
            f"velocity shape {tuple(v.shape)} != target {tuple(batch.v_target.shape)}"
        )
    loss = (v - batch.v_target).square().mean()
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite flow loss: {loss.item()}")
    return loss


def time_grid(steps: int) -> torch.Tensor:
    """Uniform sampling grid from 1 (noise) down to 0 (data)."""
    if steps < 1:
        raise InvalidConfigError(f"steps must be >= 1, got {steps}")
    return torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance: GuidanceSpec = GuidanceSpec()
    seed: int = 0
    schedule: Optional[Sequence[float]] = None  # overrides the uniform grid

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidConfigError(f"steps must be >= 1, got {self.steps}")

    def grid(self) -> torch.Tensor:
        if self.schedule is None:
            return time_grid(self.steps)
        grid = torch.as_tensor(self.schedule, dtype=torch.float64)
        if grid.ndim != 1 or grid.numel() < 2:
            raise InvalidConfigError("schedule needs at least two grid points")
        if grid[0] != 1.0 or grid[-1] != 0.0 or not (grid.diff() < 0).all():
            raise InvalidConfigError(
                "sampling schedule must decrease strictly from 1.0 to 0.0"
            )
        return grid


def euler_integrate(v_fn, x: torch.Tensor, grid) -> torch.Tensor:
    """x <- x + (t_next - t_cur) * v_fn(x, t_cur) over consecutive grid points.

    The grid is arbitrary (any direction, any spacing); sampling uses the
    decreasing 1 -> 0 grid from SamplerConfig.
    """
    grid = torch.as_tensor(grid, dtype=x.dtype, device=x.device)
    if grid.ndim != 1 or grid.numel() < 2:
        raise InvalidConfigError("integration grid needs at least two points")
    for i in range(grid.numel() - 1):
        t_cur, t_next = grid[i], grid[i + 1]
        x = x + (t_next - t_cur) * v_fn(x, t_cur)
        if not torch.isfinite(x).all():
            raise SamplerDivergenceError(
                f"non-finite state after step {i + 1} (t={float(t_next):.4f})"
            )
    return x


def _pass_route(model, x, rate: float, seed: int):
    """Per-sample route masks for one guidance pass, or None at rate 0."""
    if rate == 0.0:
        return None
    cfg = model.cfg
    n = (x.shape[-2] // cfg.patch_size) * (x.shape[-1] // cfg.patch_size)
    batch = x.shape[0] if x.ndim == 4 else 1
    return [make_route_mask(n, rate, seed + i) for i in range(batch)]


def guided_velocity(
    model,
    x: torch.Tensor,
    pos,
    t,
    cond_emb: torch.Tensor,
    null_emb: torch.Tensor,
    guidance: GuidanceSpec,
    seed: int = 0,
    *,
    cond_mask=None,
) -> torch.Tensor:
    """Two-pass guided velocity.

    The conditional pass runs at bypass rate cond_rate and the null-text
    pass at uncond_rate; rates (0, 0) give standard classifier-free
    guidance, and scale 1 skips the unconditional pass entirely.
    """
    cond_route = _pass_route(model, x, guidance.cond_rate, seed * 2)
    kwargs = {"text_mask": cond_mask} if cond_mask is not None else {}
    v_cond = model(x, pos, cond_emb, t, route=cond_route, **kwargs)
    if guidance.scale == 1.0:
        return v_cond
    uncond_route = _pass_route(model, x, guidance.uncond_rate, seed * 2 + 1)
    v_uncond = model(x, pos, null_emb, t, route=uncond_route)
    return auto_guidance(v_cond, v_uncond, guidance.scale)


def draw_initial_noise(shape, seed: int, *, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


def euler_sample(
    model,
    cond_emb: torch.Tensor,
    pos,
    cfg: SamplerConfig,
    null_emb: torch.Tensor = None,
    *,
    x_init: Optional[torch.Tensor] = None,
    cond_mask=None,
) -> torch.Tensor:
    """Generate one batch of images from noise along the 1 -> 0 grid.

    Routing stays off unless the guidance spec activates differential
    rates. Fully deterministic given (weights, cfg, x_init or seed).
    """
    if null_emb is None and cfg.guidance.scale != 1.0:
        raise InvalidConfigError("guidance scale != 1 needs a null embedding")
    if x_init is None:
        grid_shape = pos.coords.shape[:2] if hasattr(pos, "coords") else pos.shape[:2]
        mcfg = model.cfg
        shape = (
            1,
            mcfg.in_channels,
            grid_shape[0] * mcfg.patch_size,
            grid_shape[1] * mcfg.patch_size,
        )
        x_init = draw_initial_noise(shape, cfg.seed)
    x_init = x_init if x_init.ndim == 4 else x_init[None]

    step_counter = {"i": 0}

    def v_fn(x, t):
        # fresh masks every step, with distinct sub-seeds per pass
        step_seed = cfg.seed * 100_003 + step_counter["i"]
        step_counter["i"] += 1
        return guided_velocity(
            model, x, pos, t, cond_emb, null_emb, cfg.guidance,
            seed=step_seed, cond_mask=cond_mask,
        )

    with torch.no_grad():
        return euler_integrate(v_fn, x_init, cfg.grid().to(x_init.dtype))
