"""Cosine noise schedule, v-prediction targets, condition dropout, sampling.

The sampler is a deterministic 50-step DDIM-style integrator on a uniform t
grid: at each step the guided v-prediction gives x0_hat = a*x - s*v and
eps_hat = s*x + a*v, and the state is re-noised at the next t. The naive
masking baseline overwrites the kept region with appropriately re-noised
reference after every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DivergenceError, InvalidInputError, ParameterError
from .guidance import GuidanceScales, compose, required_passes

TEXT_DROP_P = 0.30
COND_DROP_P = 0.50


def alpha(t):
    """Signal scale cos(pi*t/2), computed as sin(pi*(1-t)/2) so both
    endpoints are floating-point exact (cos(pi/2) alone rounds to 6e-17)."""
    if isinstance(t, torch.Tensor):
        return torch.sin(0.5 * torch.pi * (1.0 - t))
    return np.sin(0.5 * np.pi * (1.0 - np.asarray(t, dtype=np.float64)))


def sigma(t):
    """Noise scale sin(pi*t/2); alpha^2 + sigma^2 == 1."""
    if isinstance(t, torch.Tensor):
        return torch.sin(0.5 * torch.pi * t)
    return np.sin(0.5 * np.pi * np.asarray(t, dtype=np.float64))


def _check_t(t) -> None:
    tv = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.any(tv < 0.0) or np.any(tv > 1.0):
        raise ParameterError(f"diffusion time must lie in [0, 1], got {tv}")


def v_target(x0, eps, t):
    """Velocity target alpha(t)*eps - sigma(t)*x0."""
    _check_t(t)
    if isinstance(x0, torch.Tensor):
        t = torch.as_tensor(t, dtype=x0.dtype)
        a = alpha(t).reshape(-1, *([1] * (x0.ndim - 1))) if t.ndim else alpha(t)
        s = sigma(t).reshape(-1, *([1] * (x0.ndim - 1))) if t.ndim else sigma(t)
        return a * eps - s * x0
    a, s = alpha(t), sigma(t)
    return a * np.asarray(eps) - s * np.asarray(x0)


def noisy_latent(x0, eps, t):
    """Forward-process state alpha(t)*x0 + sigma(t)*eps."""
    _check_t(t)
    if isinstance(x0, torch.Tensor):
        t = torch.as_tensor(t, dtype=x0.dtype)
        a = alpha(t).reshape(-1, *([1] * (x0.ndim - 1))) if t.ndim else alpha(t)
        s = sigma(t).reshape(-1, *([1] * (x0.ndim - 1))) if t.ndim else sigma(t)
        return a * x0 + s * eps
    return alpha(t) * np.asarray(x0) + sigma(t) * np.asarray(eps)


def apply_condition_dropout(rng: np.random.Generator, conditions: dict) -> tuple[dict, dict]:
    """Null the text condition with p=0.3 and each other condition with p=0.5.

    ``conditions`` maps name -> value-or-None; dropped entries become None
    (the adapter branch then contributes exactly zero, and null text is the
    single zero token). Only present conditions consume randomness, so seeded
    replay reproduces the drop pattern.
    """
    out = dict(conditions)
    drops: dict[str, bool] = {}
    for name, p in (("text", TEXT_DROP_P), ("attr", COND_DROP_P), ("audio", COND_DROP_P)):
        if conditions.get(name) is not None:
            drops[name] = bool(rng.uniform() < p)
            if drops[name]:
                out[name] = None
    return out, drops


@dataclass
class SampleInputs:
    """Conditioning for one sampling run (tensors already on the model grid)."""

    text: torch.Tensor | None = None  # (1, Lt, model_dim)
    text_mask: torch.Tensor | None = None
    attr: torch.Tensor | None = None  # (1, M, C_r)
    audio: torch.Tensor | None = None  # (1, M, A) masked condition latent

    def present(self) -> list[str]:
        names = []
        if self.text is not None:
            names.append("text")
        if self.attr is not None:
            names.append("attr")
        if self.audio is not None:
            names.append("audio")
        return names


def sample(
    model,
    m: int,
    latent_channels: int,
    inputs: SampleInputs,
    scales: GuidanceScales,
    steps: int = 50,
    mode: str = "plain",
    reference: np.ndarray | None = None,
    keep_mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    capture_final_pass: bool = False,
) -> np.ndarray:
    """Deterministic guided sampling; returns the final (m, A) scaled latent."""
    if mode not in ("plain", "naive_masking"):
        raise InvalidInputError(f"unknown sampling mode {mode!r}")
    if mode == "naive_masking" and (reference is None or keep_mask is None):
        raise InvalidInputError("naive_masking needs a reference latent and keep mask")
    rng = rng or np.random.default_rng(0)
    chain = required_passes(inputs.present())
    lambdas = scales.lambdas_for(inputs.present())

    x = torch.from_numpy(rng.standard_normal((1, m, latent_channels)).astype(np.float32))
    ref_t = torch.from_numpy(np.asarray(reference, dtype=np.float32))[None] if reference is not None else None
    keep_t = torch.from_numpy(np.asarray(keep_mask, dtype=bool)) if keep_mask is not None else None

    ts = np.linspace(1.0, 0.0, steps + 1)
    with torch.no_grad():
        for i in range(steps):
            t, t_next = float(ts[i]), float(ts[i + 1])
            t_b = torch.full((1,), t, dtype=torch.float32)
            estimates = []
            for j, subset in enumerate(chain):
                final_pass = capture_final_pass and i == steps - 1 and j == len(chain) - 1
                if final_pass and hasattr(model, "enable_capture"):
                    model.enable_capture()
                estimates.append(
                    model(
                        x,
                        t_b,
                        text=inputs.text if "text" in subset else None,
                        text_mask=inputs.text_mask if "text" in subset else None,
                        attr=inputs.attr if "attr" in subset else None,
                        audio=inputs.audio if "audio" in subset else None,
                    )
                )
            v = compose(estimates, lambdas)
            a_t, s_t = float(alpha(t)), float(sigma(t))
            x0_hat = a_t * x - s_t * v
            eps_hat = s_t * x + a_t * v
            a_n, s_n = float(alpha(t_next)), float(sigma(t_next))
            x = a_n * x0_hat + s_n * eps_hat
            if mode == "naive_masking":
                fresh = torch.from_numpy(rng.standard_normal((1, m, latent_channels)).astype(np.float32))
                renoised = a_n * ref_t + s_n * fresh
                x = torch.where(keep_t[None, :, None], renoised, x)
    out = x[0].numpy()
    if not np.isfinite(out).all():
        raise DivergenceError("sampler produced non-finite latents")
    return out
