"""Fast self-contained invariant checks, runnable from the command line.

Each check is a named callable that raises CheckFailure with a diagnostic
when its property does not hold. Checks accept a `fault` flag that
deliberately corrupts their own inputs, proving the check can actually
fail; the CLI exposes this as --inject-fault.

The whole suite is budgeted well under five minutes on a laptop CPU; the
heavyweight counterpart lives in the test suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .geometry import (
    RopeFrequencies,
    compute_ranges,
    make_position_map,
    rope_rotate,
)
from .model import CrossUTransformer, PRESETS, patchify, unpatchify
from .routing import make_route_mask


class CheckFailure(AssertionError):
    pass


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _require(condition: bool, detail: str):
    if not condition:
        raise CheckFailure(detail)


def check_range_constraints(fault: bool = False):
    rng = np.random.default_rng(0)
    for _ in range(200):
        h, w = int(rng.integers(1, 4096)), int(rng.integers(1, 4096))
        r = compute_ranges(h, w)
        r_h = r.r_h * (1 + 1e-6) if fault else r.r_h
        _require(abs(r_h * r.r_w - 1.0) < 1e-12, f"r_h*r_w != 1 for ({h}, {w})")
        ratio = r_h / r.r_w
        _require(
            abs(ratio - h / w) < 1e-12 * max(1.0, ratio),
            f"r_h/r_w != h/w for ({h}, {w})",
        )


def check_rope_translation(fault: bool = False):
    """Image-image attention logits depend only on relative position."""
    rng = np.random.default_rng(1)
    freqs = RopeFrequencies(head_dim=32)
    for _ in range(40):
        q = rng.normal(size=32)
        k = rng.normal(size=32)
        pq = rng.uniform(-2, 2, size=2)
        pk = rng.uniform(-2, 2, size=2)
        delta = rng.uniform(-3, 3, size=2)
        base = rope_rotate(q, pq, freqs) @ rope_rotate(k, pk, freqs)
        moved = rope_rotate(q, pq + delta, freqs) @ rope_rotate(
            k, pk + (0 if fault else delta), freqs
        )
        _require(abs(base - moved) < 1e-5, f"logit shifted by {abs(base - moved):.2e}")


def check_rope_norms(fault: bool = False):
    rng = np.random.default_rng(2)
    freqs = RopeFrequencies(head_dim=24)
    for _ in range(40):
        x = rng.normal(size=24)
        out = rope_rotate(x, rng.uniform(-2, 2, size=2), freqs)
        if fault:
            out = out + 1e-3
        pairs_in = (x[: freqs.rotated_dims].reshape(-1, 2) ** 2).sum(axis=1)
        pairs_out = (out[: freqs.rotated_dims].reshape(-1, 2) ** 2).sum(axis=1)
        _require(
            float(np.abs(pairs_in - pairs_out).max()) < 1e-6,
            "per-pair norm not preserved",
        )


def _micro_model(seed: int = 0) -> CrossUTransformer:
    torch.manual_seed(seed)
    model = CrossUTransformer(PRESETS["micro"])
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.02)
    return model


def _micro_inputs(seed: int = 0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 8, 8, generator=g, dtype=dtype)
    text = torch.randn(2, 3, PRESETS["micro"].context_dim, generator=g, dtype=dtype)
    t = torch.rand(2, generator=g, dtype=dtype)
    pos = make_position_map(4, 4)
    return x, pos, text, t


def check_rate0_equivalence(fault: bool = False):
    model = _micro_model()
    x, pos, text, t = _micro_inputs()
    with torch.no_grad():
        plain = model(x, pos, text, t)
        masks = [make_route_mask(16, 0.5 if fault else 0.0, seed=i) for i in range(2)]
        routed = model(x, pos, text, t, route=masks)
    diff = (plain - routed).abs().max().item()
    _require(diff <= 1e-6, f"rate-0 forward differs by {diff:.2e}")


def check_crop_slicing(fault: bool = False):
    from .datapipe import shifted_square_crop

    for seed in range(100):
        rng = np.random.default_rng(seed)
        ht, wt = int(rng.integers(2, 24)), int(rng.integers(2, 24))
        patch = 2
        img = np.zeros((3, ht * patch, wt * patch), dtype=np.float32)
        _, pos, (y0, x0) = shifted_square_crop(img, make_position_map(ht, wt), rng, patch)
        s = min(ht, wt)
        oy, ox = y0 // patch, x0 // patch
        if fault and (ht != wt):
            oy, ox = (oy, ox + 1) if wt > ht else (oy + 1, ox)
            if ox + s > wt or oy + s > ht:
                oy, ox = max(oy - 2, 0), max(ox - 2, 0)
        ref = make_position_map(ht, wt).coords[oy : oy + s, ox : ox + s]
        _require(
            pos.coords.tobytes() == ref.tobytes(),
            f"crop map mismatch at seed {seed}",
        )


def check_patchify_roundtrip(fault: bool = False):
    g = torch.Generator().manual_seed(3)
    img = torch.randn(2, 3, 12, 20, generator=g)
    tokens, grid = patchify(img, 4)
    if fault:
        grid = (grid[1], grid[0])
    back = unpatchify(tokens, grid, 3, 4)
    _require(
        back.shape == img.shape and torch.equal(back, img),
        "patchify round trip not exact",
    )


def check_euler_oracle(fault: bool = False):
    from .flow import euler_integrate

    g = torch.Generator().manual_seed(4)
    x0 = torch.randn(1, 3, 8, 8, generator=g)
    x1 = torch.randn(1, 3, 8, 8, generator=g)
    grid = torch.tensor([0.0, 1.0]) if fault else torch.tensor([1.0, 0.0])
    out = euler_integrate(lambda x, t: x1 - x0, x1, grid)
    diff = (out - x0).abs().max().item()
    _require(diff < 1e-6, f"one-step linear recovery off by {diff:.2e}")


def sample_param_coords(model, n: int, seed: int):
    """n (name, flat_index) pairs spread over every parameter tensor."""
    rng = np.random.default_rng(seed)
    named = [(name, p) for name, p in model.named_parameters()]
    sizes = np.array([p.numel() for _, p in named])
    coords = []
    # one guaranteed draw per tensor, remainder proportional to size
    for name, p in named:
        coords.append((name, int(rng.integers(p.numel()))))
    total = sizes.sum()
    for _ in range(max(n - len(coords), 0)):
        flat = int(rng.integers(total))
        idx = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        coords.append((named[idx][0], flat - int(np.concatenate([[0], np.cumsum(sizes)])[idx])))
    return coords[:n] if len(coords) > n else coords


def fd_gradient_errors(
    model,
    loss_fn: Callable[[], torch.Tensor],
    n_params: int,
    seed: int = 0,
    eps: float = 1e-3,
):
    """Central finite differences vs autograd on sampled parameters.

    Returns a list of relative errors |fd - grad| / max(|fd| + |grad|, 1e-8).
    The model must be double precision for the quoted tolerances to hold.

    Gradient magnitudes span many decades here (zero-init gates suppress whole
    branches), so eps must balance two error sources: subtracting nearly equal
    losses loses ~1e-16 * |loss| / eps absolute accuracy, which swamps
    coordinates whose gradient is ~1e-8 when eps is small, while truncation
    grows as eps^2 on the rest. eps=1e-3 keeps both below 1e-4 relative.
    """
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}
    params = dict(model.named_parameters())
    errors = []
    with torch.no_grad():
        for name, flat in sample_param_coords(model, n_params, seed):
            p = params[name]
            original = p.view(-1)[flat].item()
            p.view(-1)[flat] = original + eps
            hi = float(loss_fn())
            p.view(-1)[flat] = original - eps
            lo = float(loss_fn())
            p.view(-1)[flat] = original
            fd = (hi - lo) / (2 * eps)
            g = float(grads[name].view(-1)[flat])
            errors.append(abs(fd - g) / max(abs(fd) + abs(g), 1e-8))
    return errors


def check_micro_gradcheck(fault: bool = False):
    model = _micro_model().double()
    x, pos, text, t = _micro_inputs(dtype=torch.float64)
    g = torch.Generator().manual_seed(5)
    probe = torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64)

    def loss_fn():
        return (model(x, pos, text, t) * probe).sum()

    # the fault widens the step until truncation error swamps the estimate
    errors = fd_gradient_errors(
        model, loss_fn, n_params=24, seed=6, eps=0.5 if fault else 1e-3
    )
    worst = max(errors)
    _require(worst < 1e-4, f"worst relative gradient error {worst:.2e}")


CHECKS: dict = {
    "range-constraints": check_range_constraints,
    "rope-translation": check_rope_translation,
    "rope-norms": check_rope_norms,
    "rate0-equivalence": check_rate0_equivalence,
    "crop-slicing": check_crop_slicing,
    "patchify-roundtrip": check_patchify_roundtrip,
    "euler-oracle": check_euler_oracle,
    "micro-gradcheck": check_micro_gradcheck,
}


def run_checks(inject_fault: Optional[str] = None) -> list:
    if inject_fault is not None and inject_fault not in CHECKS:
        raise KeyError(
            f"unknown check {inject_fault!r}; valid names: {sorted(CHECKS)}"
        )
    results = []
    for name, fn in CHECKS.items():
        started = time.perf_counter()
        try:
            fn(fault=(name == inject_fault))
            results.append(
                CheckResult(name, True, "", time.perf_counter() - started)
            )
        except CheckFailure as exc:
            results.append(
                CheckResult(name, False, str(exc), time.perf_counter() - started)
            )
    return results
