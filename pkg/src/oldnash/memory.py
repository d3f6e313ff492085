"""Exponential memory kernel ``g(t) = gamma * exp(-delta * t)`` and the two
evaluations of the history integral ``int_0^t g(t - s) Lap u(s) ds``.

Both evaluations reduce, inside the time stepper, to a Toeplitz family of lag
weights ``K[d]`` multiplying ``Lap u`` at ``d`` steps in the past; see
:func:`lag_weights`.
"""

from dataclasses import dataclass

import numpy as np

from .errors import KernelError

SCHEMES = ("ode", "trapezoid")


@dataclass(frozen=True)
class KernelParams:
    nu: float
    k: float
    lam: float
    mu: float
    delta: float
    gamma: float

    def with_gamma(self, gamma):
        """Copy with a different memory strength (``gamma=0`` disables memory)."""
        return KernelParams(self.nu, self.k, self.lam, self.mu, self.delta, float(gamma))

    def as_dict(self):
        return {"nu": self.nu, "k": self.k, "lambda": self.lam,
                "mu": self.mu, "delta": self.delta, "gamma": self.gamma}


def kernel_params(nu, k, lam):
    """Derive ``mu = k/lam``, ``delta = 1/lam`` and ``gamma = (nu - k/lam)/lam``."""
    nu, k, lam = float(nu), float(k), float(lam)
    if not (nu > 0 and k > 0 and lam > 0):
        raise KernelError("nu, k and lambda must be positive")
    excess = nu - k / lam
    if not excess > 0:
        raise KernelError(f"non-dissipative parameters: nu - k/lambda = {excess:g} <= 0")
    return KernelParams(nu=nu, k=k, lam=lam, mu=k / lam, delta=1.0 / lam, gamma=excess / lam)


def eval_kernel(params, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise KernelError("kernel evaluated at negative time")
    out = params.gamma * np.exp(-params.delta * t)
    return out if out.ndim else float(out)


@dataclass
class MemoryState:
    """Auxiliary field ``z(t) = int_0^t g(t - s) Lap u(s) ds``; starts at zero."""

    z: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape))


def ode_coefficients(params, dt):
    """``(decay, gain)`` of the exact exponential integrator over one step."""
    decay = np.exp(-params.delta * dt)
    # (1 - e^{-delta dt}) / delta, written to stay accurate for small delta*dt
    gain = params.gamma * (-np.expm1(-params.delta * dt)) / params.delta
    return decay, gain


def advance_memory_ode(state, laplacian_u, params, dt):
    """One exact exponential step of ``z' = -delta z + gamma Lap u``.

    ``laplacian_u`` is the value of ``Lap u`` held over the step (the solver
    passes the average of the two endpoint values).
    """
    decay, gain = ode_coefficients(params, dt)
    return MemoryState(decay * state.z + gain * np.asarray(laplacian_u))


def convolve_history(history, params, step_index, dt):
    """Trapezoidal approximation of the convolution at ``t = step_index*dt``.

    ``history[m]`` holds ``Lap u`` at step ``m`` for ``m = 0..step_index``.
    """
    history = np.asarray(history, dtype=float)
    if step_index == 0 or len(history) == 0:
        return np.zeros(history.shape[1:]) if history.ndim > 1 else 0.0
    if len(history) < step_index + 1:
        raise ValueError(f"history has {len(history)} entries, need {step_index + 1}")
    lags = (step_index - np.arange(step_index + 1)) * dt
    w = dt * eval_kernel(params, lags)
    w = np.array(w, dtype=float)
    w[0] *= 0.5
    w[-1] *= 0.5
    # einsum, not tensordot: no BLAS, so the sum order does not depend on threads
    return np.einsum("m,m...->...", w, history[:step_index + 1])


def lag_weights(params, dt, n, scheme="ode"):
    """Weights ``K[0..n]``: the discrete memory at step ``n`` is
    ``sum_{m=1..n} K[n-m] Lap u^m``.

    The initial snapshot never enters the history.  For the ODE scheme the
    step average of ``Lap u`` is used, so ``K[0] = gain/2`` and
    ``K[d] = gain/2 * (decay**d + decay**(d-1))``.  For the trapezoid rule
    ``K[0] = dt*gamma/2`` and ``K[d] = dt*g(d*dt)``.
    """
    if scheme not in SCHEMES:
        raise KernelError(f"unknown memory scheme {scheme!r}; expected one of {SCHEMES}")
    d = np.arange(n + 1, dtype=float)
    if scheme == "ode":
        decay, gain = ode_coefficients(params, dt)
        K = 0.5 * gain * (decay**d + decay ** np.maximum(d - 1, 0))
        K[0] = 0.5 * gain
    else:
        K = dt * params.gamma * np.exp(-params.delta * dt * d)
        K[0] *= 0.5
    return K
