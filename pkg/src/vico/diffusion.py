"""Forward noising process, denoising loss, and the deterministic sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as N

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "q_sample",
    "denoising_loss",
    "ddim_step",
    "ddim_timesteps",
    "sample",
    "SampleResult",
]


@dataclass
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t) -> np.ndarray:
        """alpha_bar[t] with t = -1 denoting the clean endpoint."""
        t = np.asarray(t)
        out = np.where(t < 0, 1.0, self.alpha_bar[np.clip(t, 0, self.timesteps - 1)])
        return out


def build_schedule(timesteps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule with precomputed cumulative products."""
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(timesteps, beta, alpha, np.cumprod(alpha))


def _coeffs(sched: NoiseSchedule, t, shape, dtype) -> tuple:
    ab = sched.alpha_bar_at(t).astype(dtype)
    tail = (1,) * (len(shape) - ab.ndim)
    ab = ab.reshape(ab.shape + tail) if ab.ndim else np.full((1,) * len(shape), ab, dtype=dtype)
    c1 = np.broadcast_to(np.sqrt(ab), shape)
    c2 = np.broadcast_to(np.sqrt(1.0 - ab), shape)
    return c1, c2


def q_sample(z0: N.Tensor, t, eps: N.Tensor, sched: NoiseSchedule) -> N.Tensor:
    """z_t = sqrt(a_bar[t]) * z0 + sqrt(1 - a_bar[t]) * eps."""
    if z0.shape != eps.shape:
        raise N.ShapeError(f"q_sample: z0 shape {z0.shape} != eps shape {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.timesteps):
        raise ValueError(f"timestep {t} out of range [0, {sched.timesteps})")
    c1, c2 = _coeffs(sched, t, z0.shape, z0.data.dtype)
    return N.add(N.mul(z0, N.const(c1)), N.mul(eps, N.const(c2)))


def denoising_loss(eps: N.Tensor, eps_hat: N.Tensor) -> N.Tensor:
    """Mean squared error over batch and all elements."""
    if eps.shape != eps_hat.shape:
        raise N.ShapeError(f"denoising_loss: shapes {eps.shape} and {eps_hat.shape} differ")
    diff = N.sub(eps, eps_hat)
    return N.mean_(N.mul(diff, diff))


def ddim_step(z_t: N.Tensor, eps_hat: N.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> N.Tensor:
    """Deterministic update from timestep t to t_prev (t_prev = -1 is clean)."""
    if not (t > t_prev >= -1):
        raise ValueError(f"ddim_step: need t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    dtype = z_t.data.dtype
    ab_t = float(sched.alpha_bar_at(t))
    ab_p = float(sched.alpha_bar_at(t_prev))
    z0_hat = N.mul(N.sub(z_t, N.mul(eps_hat, dtype.type(np.sqrt(1.0 - ab_t)))), dtype.type(1.0 / np.sqrt(ab_t)))
    return N.add(N.mul(z0_hat, dtype.type(np.sqrt(ab_p))), N.mul(eps_hat, dtype.type(np.sqrt(1.0 - ab_p))))


def ddim_timesteps(total: int, steps: int) -> list:
    """Descending uniform-stride timestep grid, e.g. [980, 960, ..., 0]."""
    if not 1 <= steps <= total:
        raise ValueError(f"need 1 <= steps <= {total}, got {steps}")
    stride = total // steps
    return list(range(0, total, stride))[:steps][::-1]


@dataclass
class SampleResult:
    latent: np.ndarray
    records: list = field(default_factory=list)  # (step, t, {block: VicoBlockRecord})


def sample(
    model,
    tokens,
    references,
    sched: NoiseSchedule,
    steps: int = 50,
    seed: int = 0,
    record_interval: int | None = None,
) -> SampleResult:
    """Deterministic DDIM sampling of one latent under a reference condition.

    At every step the visual conditions are re-extracted from the clean
    reference latent(s) at the current timestep, and the full visually
    conditioned pass predicts the noise. ``record_interval`` keeps the
    attention records and masks of every interval-th step for inspection.
    """
    if not references:
        raise ValueError("sampling requires at least one reference latent")
    rng = np.random.default_rng(seed)
    dtype = N.get_default_dtype()
    z = N.const(rng.standard_normal((1,) + tuple(model.latent_shape)).astype(dtype))
    ts = ddim_timesteps(sched.timesteps, steps)
    out_records = []
    with N.no_grad():
        for k, t in enumerate(ts):
            t_prev = ts[k + 1] if k + 1 < len(ts) else -1
            want = record_interval is not None and k % record_interval == 0
            eps_hat, recs = model.predict_noise(z, np.array([t]), [tokens], references, collect=want)
            if want:
                out_records.append((k, t, recs))
            z = ddim_step(z, eps_hat, t, t_prev, sched)
    return SampleResult(z.data.copy(), out_records)
