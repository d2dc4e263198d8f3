"""Semilinear parabolic test problems.

A problem is described by the forward diffusion ``dX = mu dt + sigma dW``
started at ``xi``, a generator ``f(t, x, y, z)`` and terminal data ``g``.
Every callback is batched over rows: ``x`` has shape (B, d), ``y`` shape (B,),
``z`` shape (B, d). ``sigma`` is only ever applied to vectors, never
materialised as a d x d matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor_core import RngStream

Array = np.ndarray


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    d: int
    T: float
    xi: Array
    drift: Callable[[float, Array], Array]
    diffusion_apply: Callable[[float, Array, Array], Array]
    diffusion_transpose_apply: Callable[[float, Array, Array], Array]
    generator: Callable[[float, Array, Array, Array], Array]
    # (df/dy, df/dz); used by the deep BSDE rollout adjoint
    generator_partials: Callable[[float, Array, Array, Array], tuple]
    terminal: Callable[[Array], Array]
    terminal_gradient: Callable[[Array], Array]
    reference_value: Optional[float] = None
    reference_source: str = "none"
    params: dict = field(default_factory=dict)

    def z_of(self, t: float, x: Array, grad_u: Array) -> Array:
        """``sigma(t, x)^T grad_u`` row-wise."""
        return self.diffusion_transpose_apply(t, x, grad_u)

    def relative_error(self, estimate: float) -> float:
        if self.reference_value is None:
            return float("nan")
        return abs(estimate - self.reference_value) / abs(self.reference_value)


def _zero_drift(t, x):
    return np.zeros_like(x)


def _scalar_diffusion(scale: float):
    def apply(t, x, v):
        return scale * v

    return apply


# --- Hamilton-Jacobi-Bellman -------------------------------------------------

def _hjb_g(x):
    return np.log(0.5 * (1.0 + np.einsum("bi,bi->b", x, x)))


def _hjb_grad_g(x):
    return 2.0 * x / (1.0 + np.einsum("bi,bi->b", x, x))[:, None]


def _hjb_f(t, x, y, z):
    return -np.einsum("bi,bi->b", z, z)


def _hjb_f_partials(t, x, y, z):
    return np.zeros_like(y), -2.0 * z


def hjb_problem(d: int = 100, T: float = 1.0) -> ProblemSpec:
    """``u_t + Laplacian u - |grad u|^2 = 0`` with ``g = ln((1 + |x|^2) / 2)``.

    Written in the general form with ``mu = 0``, ``sigma = sqrt(2) I`` and
    ``f(t, x, y, z) = -|z|^2``.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    ref, src = (4.5901, "cole_hopf_mc") if (d == 100 and T == 1.0) else (None, "cole_hopf_mc")
    return ProblemSpec(
        name="hjb",
        d=d,
        T=T,
        xi=np.zeros(d),
        drift=_zero_drift,
        diffusion_apply=_scalar_diffusion(math.sqrt(2.0)),
        diffusion_transpose_apply=_scalar_diffusion(math.sqrt(2.0)),
        generator=_hjb_f,
        generator_partials=_hjb_f_partials,
        terminal=_hjb_g,
        terminal_gradient=_hjb_grad_g,
        reference_value=ref,
        reference_source=src,
    )


# --- Allen-Cahn --------------------------------------------------------------

def _ac_g(x):
    return 1.0 / (2.0 + 0.4 * np.einsum("bi,bi->b", x, x))


def _ac_grad_g(x):
    denom = 2.0 + 0.4 * np.einsum("bi,bi->b", x, x)
    return -0.8 * x / (denom**2)[:, None]


def _ac_f(t, x, y, z):
    return y - y**3


def _ac_f_partials(t, x, y, z):
    return 1.0 - 3.0 * y**2, np.zeros_like(z)


def allen_cahn_problem(d: int = 100, T: float = 0.3) -> ProblemSpec:
    """``u_t + Laplacian u + u - u^3 = 0`` with ``g = 1 / (2 + 0.4 |x|^2)``.

    The Laplacian is matched by ``sigma = sqrt(2) I`` so that
    ``sigma sigma^T / 2`` is the identity.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    ref = 0.052802 if (d == 100 and T == 0.3) else None
    return ProblemSpec(
        name="allen_cahn",
        d=d,
        T=T,
        xi=np.zeros(d),
        drift=_zero_drift,
        diffusion_apply=_scalar_diffusion(math.sqrt(2.0)),
        diffusion_transpose_apply=_scalar_diffusion(math.sqrt(2.0)),
        generator=_ac_f,
        generator_partials=_ac_f_partials,
        terminal=_ac_g,
        terminal_gradient=_ac_grad_g,
        reference_value=ref,
        reference_source="branching_diffusion (transcribed)",
    )


# --- Pricing with different borrowing and lending rates ---------------------

def pricing_diffrate_problem(
    d: int = 100,
    T: float = 0.5,
    mu_bar: float = 0.06,
    sigma_bar: float = 0.2,
    rate_lend: float = 0.04,
    rate_borrow: float = 0.06,
) -> ProblemSpec:
    """Nonlinear Black-Scholes call spread on the maximum of ``d`` assets.

    Payoff ``max(m - 120, 0) - 2 max(m - 150, 0)`` with ``m = max_i x_i``. The
    payoff gradient is the subgradient ``s e_{i*}`` with ``i*`` the lowest
    index attaining the maximum and slope ``s`` equal to 1 on (120, 150],
    -1 above 150 and 0 otherwise (left slope at the kinks).
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    premium = (mu_bar - rate_lend) / sigma_bar
    spread = rate_borrow - rate_lend

    def drift(t, x):
        return mu_bar * x

    def diffusion(t, x, v):
        return sigma_bar * x * v

    def g(x):
        m = x.max(axis=1)
        return np.maximum(m - 120.0, 0.0) - 2.0 * np.maximum(m - 150.0, 0.0)

    def grad_g(x):
        idx = np.argmax(x, axis=1)  # first occurrence on ties
        m = x[np.arange(x.shape[0]), idx]
        slope = np.where(m > 150.0, -1.0, np.where(m > 120.0, 1.0, 0.0))
        out = np.zeros_like(x)
        out[np.arange(x.shape[0]), idx] = slope
        return out

    def f(t, x, y, z):
        s = z.sum(axis=1)
        return -rate_lend * y - premium * s + spread * np.maximum(0.0, s / sigma_bar - y)

    def f_partials(t, x, y, z):
        s = z.sum(axis=1)
        active = (s / sigma_bar - y > 0.0).astype(float)
        fy = -rate_lend - spread * active
        fz = (-premium + spread * active / sigma_bar)[:, None] * np.ones_like(z)
        return fy, fz

    ref = 21.299 if (d == 100 and T == 0.5) else None
    return ProblemSpec(
        name="pricing_diffrate",
        d=d,
        T=T,
        xi=np.full(d, 100.0),
        drift=drift,
        diffusion_apply=diffusion,
        diffusion_transpose_apply=diffusion,
        generator=f,
        generator_partials=f_partials,
        terminal=g,
        terminal_gradient=grad_g,
        reference_value=ref,
        reference_source="multilevel_picard (transcribed)",
        params=dict(mu_bar=mu_bar, sigma_bar=sigma_bar, rate_lend=rate_lend, rate_borrow=rate_borrow),
    )


PROBLEMS = {
    "hjb": hjb_problem,
    "allen_cahn": allen_cahn_problem,
    "pricing_diffrate": pricing_diffrate_problem,
}


def get_problem(name: str, d: int = 100, **kwargs) -> ProblemSpec:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(d, **kwargs)


def hjb_reference_mc(
    d: int,
    samples: int,
    rng: RngStream,
    T: float = 1.0,
    chunk: int = 100_000,
    terminal: Optional[Callable[[Array], Array]] = None,
) -> tuple[float, float]:
    """Cole-Hopf Monte Carlo value of the HJB problem at ``(0, 0)``.

    ``u(0, 0) = -ln E[exp(-g(sqrt(2) W_T))]``. Returns the estimate and its
    delta-method standard error. ``terminal`` replaces ``g`` (test hook).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    g = terminal or _hjb_g
    scale = math.sqrt(2.0 * T)
    total = 0.0
    total_sq = 0.0
    # shift by the first value keeps exp() in range for large g
    shift = None
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        x = scale * rng.normals(n * d).reshape(n, d)
        gx = np.asarray(g(x), dtype=float)
        if shift is None:
            shift = float(gx[0])
        w = np.exp(-(gx - shift))
        total += w.sum()
        total_sq += (w * w).sum()
        done += n
    mean = total / samples
    estimate = shift - math.log(mean)
    if samples > 1:
        var = max(total_sq / samples - mean * mean, 0.0) * samples / (samples - 1)
        stderr = math.sqrt(var / samples) / mean
    else:
        stderr = float("nan")
    return estimate, stderr
