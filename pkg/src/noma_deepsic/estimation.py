"""Pilot-based LS/MMSE estimation and the PDD-corrected gradient refinement.

The refinement treats the signal model as linear in the channel,
``H(h) x = J h``, and minimises ``L(h) = ||y - J h||^2``. Gradients are the
conjugate Wirtinger derivative ``dL/dh* = J^H (J h - y)``, so one plain
step multiplies each eigen-direction of the error by ``1 - eta lambda_i``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

from .numerics import (
    as_matrix,
    hermitian_inverse,
    hermitian_solve,
    power_iteration_lambda_max,
    power_iteration_lambda_min,
)

GAMMA_FLOOR = 1e-6
ETA_FRACTION = 0.9


class GuardViolated(RuntimeError):
    pass


@dataclass(frozen=True)
class PilotBlock:
    symbols: np.ndarray  # (K, N) unit-modulus rows

    @property
    def n_pilot(self) -> int:
        return self.symbols.shape[1]

    def row(self, k: int) -> np.ndarray:
        return self.symbols[k]

    def max_cross_correlation(self) -> float:
        G = self.symbols @ self.symbols.conj().T
        off = G - np.diag(np.diag(G))
        return float(np.max(np.abs(off))) if off.size else 0.0


def dft_pilots(num_users: int, n_pilot: int) -> PilotBlock:
    """Rows ``0..K-1`` of the ``N``-point DFT matrix (unnormalised, unit modulus)."""
    if num_users > n_pilot:
        raise ValueError("need n_pilot >= num_users for orthogonal pilots")
    t = np.arange(n_pilot)
    k = np.arange(num_users)[:, None]
    return PilotBlock(np.exp(-2j * np.pi * k * t / n_pilot))


def ls_estimate(y, s):
    """``<s, y> / ||s||^2``; ``y`` is (N,) or (M, N) for a vector channel."""
    s = np.asarray(s, dtype=complex).reshape(-1)
    y = np.asarray(y, dtype=complex)
    est = (y @ s.conj()) / np.vdot(s, s).real
    return est.item() if np.ndim(est) == 0 else est


def pilot_autocorrelation(s, dim: int = 1) -> np.ndarray:
    """Pilot autocorrelation ``(s^H s) I`` matching the normalisation used by :func:`mmse_estimate`."""
    s = np.asarray(s, dtype=complex).reshape(-1)
    return np.vdot(s, s).real * np.eye(dim, dtype=complex)


def mmse_estimate(y, s, R_hh, R_ss, noise_variance: float) -> np.ndarray:
    """``(R_hh + n R_ss^-1)^-1 R_hh s^H y``.

    The matched-filter output ``s^H y`` is taken with the pilot energy
    divided out (``s^H y / s^H s``), which makes ``R_ss = (s^H s) I`` give
    the usual LMMSE shrinkage ``R_hh (R_hh + n / N I)^-1``. ``y`` is (N,) for
    a scalar channel or (M, N) for an M-vector.
    """
    if noise_variance < 0:
        raise ValueError("noise variance must be >= 0")
    R_hh = as_matrix(R_hh)
    R_ss = as_matrix(R_ss)
    z = np.atleast_1d(np.asarray(ls_estimate(y, s), dtype=complex))
    if z.size != R_hh.shape[0]:
        raise ValueError(f"R_hh is {R_hh.shape} but the observation has {z.size} entries")
    A = R_hh + noise_variance * hermitian_inverse(R_ss)
    return hermitian_solve(A, R_hh @ z)


@dataclass(frozen=True)
class BoundCertificate:
    lambda_max: float
    lambda_min: float
    eta: float
    eta_bound: float
    pdd_error_bound: float
    contraction_factor: float
    certified: bool

    def to_json(self) -> str:
        keys = ("lambda_max", "eta_bound", "pdd_error_bound", "contraction_factor", "certified")
        return json.dumps({k: getattr(self, k) for k in keys})


def gram(J) -> np.ndarray:
    J = as_matrix(J)
    G = J.conj().T @ J
    return 0.5 * (G + G.conj().T)


def eta_bound(J, beta: float) -> float:
    return 2.0 / (power_iteration_lambda_max(gram(J)) + beta)


def auto_learning_rate(J, beta: float = 0.0, fraction: float = ETA_FRACTION) -> float:
    """Learning rate fixed at ``fraction`` of the stability bound."""
    return fraction * eta_bound(J, beta)


def certify_convergence(J, beta: float, eta: float, eps_pdd: float,
                        w_att_frobenius: float, gamma_e: float | None = None) -> BoundCertificate:
    """Check the learning-rate and PDD-error conditions for a contraction.

    ``gamma_e`` defaults to the smallest eigenvalue of ``J^H J`` (floored at
    1e-6). Certification additionally requires the resulting contraction
    factor to be below one; with ``beta >= lambda_min`` the rate condition
    alone does not give that.
    """
    if beta < 0 or eta <= 0:
        raise ValueError("need beta >= 0 and eta > 0")
    G = gram(J)
    lmax = power_iteration_lambda_max(G)
    lmin = power_iteration_lambda_min(G, lmax)
    if gamma_e is None:
        gamma_e = max(lmin, GAMMA_FLOOR)
    bound = 2.0 / (lmax + beta)
    pdd_bound = eta * gamma_e / (2.0 * w_att_frobenius) if w_att_frobenius > 0 else float("inf")
    contraction = max(abs(1.0 - eta * lmax), abs(1.0 - eta * lmin)) + eta * beta
    ok = (0 < eta < bound) and (eps_pdd < pdd_bound) and contraction < 1.0
    return BoundCertificate(lmax, lmin, eta, bound, pdd_bound, contraction, bool(ok))


@dataclass(frozen=True)
class EstimatorState:
    h: np.ndarray
    eta: float
    beta: float = 0.0
    gamma_e: float = GAMMA_FLOOR
    iteration: int = 0
    certified: bool = False
    loss_history: tuple[float, ...] = ()


def loss(J, y, h) -> float:
    r = np.asarray(y) - as_matrix(J) @ np.asarray(h)
    return float(np.vdot(r, r).real)


def loss_gradient(J, y, h) -> np.ndarray:
    """Conjugate Wirtinger gradient of ``||y - J h||^2``."""
    J = as_matrix(J)
    return J.conj().T @ (J @ np.asarray(h) - np.asarray(y))


def pdd_correction(J, e_pdd) -> np.ndarray:
    """``psi(PDD) = J^H e_PDD``."""
    return as_matrix(J).conj().T @ np.asarray(e_pdd, dtype=complex)


def pdd_corrected_update(state: EstimatorState, y, J, e_pdd=None, llr=None,
                         llr_gate: float = 0.0, override: bool = False) -> EstimatorState:
    """One step ``h <- h - eta (grad L(h) + psi(PDD))``.

    The correction is applied only when ``min |llr| >= llr_gate`` (always, if
    no LLRs are given). Raises :class:`GuardViolated` unless the state was
    certified or ``override`` is set.
    """
    if not (state.certified or override):
        raise GuardViolated(f"learning rate {state.eta} has not been certified")
    J = as_matrix(J)
    step = loss_gradient(J, y, state.h)
    gate_open = llr is None or np.min(np.abs(llr)) >= llr_gate
    if e_pdd is not None and gate_open:
        step = step + pdd_correction(J, e_pdd)
    h_new = state.h - state.eta * step
    return dataclasses.replace(
        state,
        h=h_new,
        iteration=state.iteration + 1,
        loss_history=state.loss_history + (loss(J, y, h_new),),
    )


def start_refinement(h0, J, beta: float = 0.0, eps_pdd: float = 0.0, w_att_frobenius: float = 1.0,
                     eta: float | None = None) -> tuple[EstimatorState, BoundCertificate]:
    """Pick ``eta`` (0.9 of its bound unless given), certify, and build the initial state."""
    if eta is None:
        eta = auto_learning_rate(J, beta)
    cert = certify_convergence(J, beta, eta, eps_pdd, w_att_frobenius)
    state = EstimatorState(
        h=np.asarray(h0, dtype=complex).copy(),
        eta=eta,
        beta=beta,
        gamma_e=max(cert.lambda_min, GAMMA_FLOOR),
        certified=cert.certified,
    )
    return state, cert


def estimate_beta_lipschitz(psi: Callable, samples, safety: float = 1.5, regimes=None) -> float:
    """Empirical Lipschitz constant of ``psi`` over sample pairs, times ``safety``.

    ``regimes`` optionally labels each sample (e.g. LLR gate open/closed);
    only pairs with equal labels are compared, giving the largest per-regime
    constant of a switched correction.
    """
    X = np.asarray(samples)
    n = X.shape[0]
    if n * (n - 1) // 2 < 100:
        raise ValueError("need at least 100 sample pairs")
    out = np.stack([np.atleast_1d(np.asarray(psi(x))) for x in X]).reshape(n, -1)
    d_in = pdist(_realify(X.reshape(n, -1)))
    d_out = pdist(_realify(out))
    keep = d_in > 0
    if regimes is not None:
        lab = np.asarray(regimes).reshape(n, 1).astype(float)
        keep &= pdist(lab) == 0
    if not np.any(keep):
        raise ValueError("no comparable sample pairs")
    return safety * float(np.max(d_out[keep] / d_in[keep]))


def _realify(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return np.concatenate([a.real, a.imag], axis=1)
    return a.astype(float)
