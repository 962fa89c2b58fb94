"""Covariance-based maximum-likelihood activity detection.

Minimises

    f(a) = log|Sigma(a)| + Tr(Sigma(a)^{-1} C_hat),   Sigma(a) = sigma^2 I + B diag(a) B^H

over the box ``a in [0, 1]^N`` by cyclic coordinate descent.  Along one
coordinate the cost is ``log(1 + d s) - d c / (1 + d s)`` plus a constant,
with ``q = Sigma^{-1} b_n``, ``s = b_n^H q`` and ``c = q^H C_hat q``; its
unconstrained minimiser is ``(c - s) / s**2`` and the cost is unimodal in
``d``, so clipping to the box gives the exact constrained step.  The inverse
is maintained with rank-one (Sherman-Morrison) updates and rebuilt from a
Cholesky factor after every pass.

``detect_cd`` works in noise-normalised units (``B / sigma``,
``C / sigma^2``); reported costs are converted back to the caller's units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import NumericError, ParameterError
from .signal import derive_rng

SKIP_DENOMINATOR = 1e-30


def _sigma(a, B, noise_var):
    return (B * a[None, :]) @ B.conj().T + noise_var * np.eye(B.shape[0])


def nll(a, C, B, noise_var: float) -> float:
    """log|Sigma| + Tr(Sigma^{-1} C) via a Hermitian Cholesky factorisation."""
    if noise_var <= 0:
        raise ParameterError(f"noise variance must be positive, got {noise_var}")
    a = np.asarray(a, dtype=float)
    try:
        factor = scipy.linalg.cho_factor(_sigma(a, B, noise_var), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError("Sigma is not positive definite") from exc
    logdet = 2.0 * np.sum(np.log(np.real(np.diag(factor[0]))))
    trace = np.real(np.trace(scipy.linalg.cho_solve(factor, C)))
    return float(logdet + trace)


def fresh_inverse(a, B, noise_var: float) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(_sigma(np.asarray(a, float), B, noise_var), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError("Sigma is not positive definite") from exc
    inv = scipy.linalg.cho_solve(factor, np.eye(B.shape[0], dtype=complex))
    return 0.5 * (inv + inv.conj().T)


@dataclass
class SolverState:
    a: np.ndarray
    sigma_inv: np.ndarray
    C: np.ndarray
    B: np.ndarray
    noise_var: float
    nll: float

    @classmethod
    def initial(cls, C, B, noise_var: float, a=None) -> "SolverState":
        B = np.asarray(B, dtype=complex)
        a = np.zeros(B.shape[1]) if a is None else np.clip(np.asarray(a, dtype=float), 0.0, 1.0)
        state = cls(a=a, sigma_inv=fresh_inverse(a, B, noise_var), C=np.asarray(C, dtype=complex),
                    B=B, noise_var=float(noise_var), nll=0.0)
        state.nll = nll(a, state.C, B, noise_var)
        return state

    def refresh(self) -> float:
        """Rebuild Sigma^{-1} from scratch; returns the Frobenius drift it removed."""
        fresh = fresh_inverse(self.a, self.B, self.noise_var)
        drift = float(np.linalg.norm(fresh - self.sigma_inv))
        self.sigma_inv = fresh
        self.nll = nll(self.a, self.C, self.B, self.noise_var)
        return drift

    def identity_residual(self) -> float:
        sigma = _sigma(self.a, self.B, self.noise_var)
        return float(np.linalg.norm(self.sigma_inv @ sigma - np.eye(self.B.shape[0])))


def coordinate_step(state: SolverState, n: int) -> float:
    """Exact minimisation of the cost along coordinate ``n``; updates ``state`` in place.

    Returns the applied step ``delta``.  The cached ``state.nll`` is advanced
    by the closed-form change of the 1-D cost.
    """
    b = state.B[:, n]
    q = state.sigma_inv @ b
    s = float(np.real(np.vdot(b, q)))
    if abs(s) < SKIP_DENOMINATOR:
        return 0.0
    c = float(np.real(np.vdot(q, state.C @ q)))
    a_n = state.a[n]
    delta = min(max((c - s) / (s * s), -a_n), 1.0 - a_n)
    if delta == 0.0:
        return 0.0
    denom = 1.0 + delta * s
    state.sigma_inv -= (delta / denom) * np.outer(q, q.conj())
    state.a[n] = a_n + delta
    state.nll += np.log(denom) - delta * c / denom
    return delta


@dataclass
class CDResult:
    a: np.ndarray
    nll_trace: list = field(default_factory=list)  # after every coordinate step
    pass_nll: list = field(default_factory=list)  # fresh value after every pass
    drift: list = field(default_factory=list)  # ||incremental - fresh||_F per pass
    passes_run: int = 0


def detect_cd(
    C,
    B,
    noise_var: float,
    passes: int = 10,
    order_policy: str = "cyclic",
    seed: Optional[int] = None,
    tol: float = 1e-9,
    exact_trace: bool = False,
    order: Optional[np.ndarray] = None,
) -> CDResult:
    """Relaxed ML activity estimates by coordinate descent starting from ``a = 0``.

    Stops after ``passes`` sweeps or once a full sweep lowers the cost by
    less than ``tol``.  ``order_policy`` is ``"cyclic"`` (or the explicit
    ``order``) or ``"random"`` (a fresh seeded permutation per pass).
    ``exact_trace`` recomputes the cost from scratch after every step instead
    of using the closed-form increment.
    """
    if passes < 1:
        raise ParameterError(f"passes must be >= 1, got {passes}")
    if noise_var <= 0:
        raise ParameterError(f"noise variance must be positive, got {noise_var}")
    B = np.asarray(B, dtype=complex)
    C = np.asarray(C, dtype=complex)
    lp, n_dev = B.shape
    scale = 1.0 / np.sqrt(noise_var)
    offset = lp * np.log(noise_var)
    state = SolverState.initial(C * scale**2, B * scale, 1.0)
    if order_policy not in ("cyclic", "random"):
        raise ParameterError(f"unknown order_policy '{order_policy}'")
    rng = derive_rng(0 if seed is None else seed, 7) if order_policy == "random" else None
    base_order = np.arange(n_dev) if order is None else np.asarray(order)

    result = CDResult(a=state.a)
    result.nll_trace.append(state.nll + offset)
    previous = state.nll
    for p in range(passes):
        sweep = rng.permutation(n_dev) if rng is not None else base_order
        for n in sweep:
            coordinate_step(state, int(n))
            value = nll(state.a, state.C, state.B, 1.0) if exact_trace else state.nll
            result.nll_trace.append(value + offset)
        result.drift.append(state.refresh())
        result.pass_nll.append(state.nll + offset)
        result.passes_run = p + 1
        if abs(previous - state.nll) < tol:
            break
        previous = state.nll
    result.a = state.a.copy()
    return result


def threshold(a, xi: float) -> np.ndarray:
    """Strict comparison: ``a_n == xi`` counts as inactive."""
    if not 0.0 <= xi <= 1.0:
        raise ParameterError(f"threshold must lie in [0, 1], got {xi}")
    return (np.asarray(a) > xi).astype(np.uint8)


def detect_batch(C_stack, B_stack, noise_var, **kwargs) -> np.ndarray:
    """Run :func:`detect_cd` on each instance of a stack; returns (S, N) estimates."""
    noise_var = np.broadcast_to(np.asarray(noise_var, dtype=float), (len(C_stack),))
    return np.stack([detect_cd(C, B, float(s2), **kwargs).a for C, B, s2 in zip(C_stack, B_stack, noise_var)])
