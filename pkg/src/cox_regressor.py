"""
Cox proportional hazards regression for right-censored survival times.

Newton iterations on the partial log-likelihood (Breslow handling of tied event
times) with step-halving, on internally standardized covariates, followed by
the Breslow estimator of the cumulative baseline hazard.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np
from scipy import linalg

from src.errors import ConvergenceWarning, DataError, NumericalError
from src.logging_helper import Log
from src.survival_data import Dataset

DEFAULT_MAX_ITER = 50
DEFAULT_TOL = 1e-8
MAX_HALVINGS = 20
# Accept a Newton step whose log-likelihood is within float noise of the current one.
LOGLIK_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class CoxModel:
    """
    A fitted Cox model.

    beta is on the standardized scale z = (x - shift) / scale. The baseline is
    the Breslow cumulative hazard, a right-continuous step function with jumps
    `cumulative_hazard[k]` reached at `event_times[k]` and value 0 before the
    first event time.
    """

    beta: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    event_times: np.ndarray
    cumulative_hazard: np.ndarray
    converged: bool = True
    n_iter: int = 0
    log_likelihood: float = float("nan")
    gradient_norm: float = 0.0
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def p(self) -> int:
        return int(self.beta.size)

    @property
    def coefficients(self) -> np.ndarray:
        """Log-hazard-ratio coefficients on the original covariate scale."""
        return self.beta / self.scale

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.p:
            raise DataError(f"dimension mismatch: model expects {self.p} covariates, got {X.shape[1]}")
        return ((X - self.shift) / self.scale) @ self.beta

    def relative_risk(self, X: np.ndarray) -> np.ndarray:
        return np.exp(self.linear_predictor(X))

    def baseline_hazard_at(self, t: np.ndarray) -> np.ndarray:
        """Cumulative baseline hazard Lambda_0(t)."""
        t = np.asarray(t, dtype=float)
        index = np.searchsorted(self.event_times, t, side="right") - 1
        padded = np.concatenate(([0.0], self.cumulative_hazard))
        return padded[index + 1]

    def survival(self, X: np.ndarray, t: np.ndarray) -> np.ndarray:
        """S(t | x) = exp(-Lambda_0(t) * exp(x . beta)), broadcast over rows of X and t."""
        return np.exp(-self.baseline_hazard_at(t) * self.relative_risk(X))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta": self.beta.tolist(),
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "event_times": self.event_times.tolist(),
            "cumulative_hazard": self.cumulative_hazard.tolist(),
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "log_likelihood": float(self.log_likelihood),
            "gradient_norm": float(self.gradient_norm),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "CoxModel":
        return cls(
            beta=np.asarray(payload["beta"], dtype=float),
            shift=np.asarray(payload["shift"], dtype=float),
            scale=np.asarray(payload["scale"], dtype=float),
            event_times=np.asarray(payload["event_times"], dtype=float),
            cumulative_hazard=np.asarray(payload["cumulative_hazard"], dtype=float),
            converged=bool(payload.get("converged", True)),
            n_iter=int(payload.get("n_iter", 0)),
            log_likelihood=float(payload.get("log_likelihood", float("nan"))),
            gradient_norm=float(payload.get("gradient_norm", 0.0)),
        )


def _risk_set_sums(Z: np.ndarray, eta: np.ndarray, times_sorted: np.ndarray):
    """
    Sums over the risk set {j : t_j >= t_i} of exp(eta), exp(eta) z and
    exp(eta) z z^T, indexed by sorted row. Returns the sums scaled by exp(-max eta)
    together with that shift.
    """
    shift = float(eta.max())
    risk = np.exp(eta - shift)
    s0 = np.cumsum(risk[::-1])[::-1]
    s1 = np.cumsum((risk[:, None] * Z)[::-1], axis=0)[::-1]
    s2 = np.cumsum((risk[:, None, None] * Z[:, :, None] * Z[:, None, :])[::-1], axis=0)[::-1]
    # tied times share the risk set of the first row in their group
    first = np.searchsorted(times_sorted, times_sorted, side="left")
    return s0[first], s1[first], s2[first], shift


def partial_log_likelihood(
    beta: np.ndarray,
    Z: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Breslow partial log-likelihood with its gradient (score) and Hessian.

    l(beta) = sum over events i of [z_i . beta - log sum_{t_j >= t_i} exp(z_j . beta)]
    """
    beta = np.asarray(beta, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    order = np.argsort(times, kind="stable")
    Z = Z[order]
    times_sorted = times[order]
    event_rows = np.flatnonzero(events[order])
    p = Z.shape[1]
    if event_rows.size == 0:
        return 0.0, np.zeros(p), np.zeros((p, p))

    eta = Z @ beta
    s0, s1, s2, shift = _risk_set_sums(Z, eta, times_sorted)
    s0, s1, s2 = s0[event_rows], s1[event_rows], s2[event_rows]
    mean = s1 / s0[:, None]

    log_likelihood = float(np.sum(eta[event_rows] - np.log(s0) - shift))
    gradient = np.sum(Z[event_rows] - mean, axis=0)
    hessian = -np.sum(s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :], axis=0)
    return log_likelihood, gradient, hessian


def breslow_baseline(
    Z: np.ndarray,
    beta: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Breslow cumulative baseline hazard at the distinct event times:
    dLambda_0(u) = d(u) / sum_{t_j >= u} exp(z_j . beta).
    """
    events = np.asarray(events, dtype=bool)
    times = np.asarray(times, dtype=float)
    event_times, deaths = np.unique(times[events], return_counts=True)
    if event_times.size == 0:
        return event_times, np.zeros(0)
    order = np.argsort(times, kind="stable")
    times_sorted = times[order]
    eta = np.atleast_2d(Z)[order] @ beta
    shift = float(eta.max())
    s0 = np.cumsum(np.exp(eta - shift)[::-1])[::-1]
    at_risk = s0[np.searchsorted(times_sorted, event_times, side="left")]
    increments = deaths * np.exp(-shift) / at_risk
    return event_times, np.cumsum(increments)


def _newton_direction(hessian: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    try:
        return linalg.solve(-hessian, gradient, assume_a="pos", check_finite=False)
    except linalg.LinAlgError:
        # constant or collinear columns: minimum-norm step
        return linalg.lstsq(-hessian, gradient, check_finite=False)[0]


def fit_cox(train: Dataset, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL) -> CoxModel:
    """
    Fit a Cox model on censored training data (event = otime < ctime).

    Stops when the max-norm of the score is <= tol; reaching max_iter first
    returns the current fit with converged=False and a ConvergenceWarning.
    """
    Log.section("Cox Fit")
    train.require_nonempty("training fold")
    events = train.events
    if not events.any():
        Log.kv({"stage": "cox_fit", "result": "failed", "reason": "no_events"})
        raise DataError("training fold has no uncensored events (otime < ctime); cannot fit a Cox model")

    shift = train.X.mean(axis=0)
    scale = train.X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (train.X - shift) / scale
    times = train.otime

    beta = np.zeros(train.p)
    log_likelihood, gradient, hessian = partial_log_likelihood(beta, Z, times, events)
    converged = bool(np.max(np.abs(gradient)) <= tol)
    n_iter = 0
    path = [log_likelihood]
    while not converged and n_iter < max_iter:
        n_iter += 1
        if not (np.all(np.isfinite(gradient)) and np.all(np.isfinite(hessian))):
            Log.kv({"stage": "cox_fit", "result": "failed", "reason": "non_finite", "iteration": n_iter})
            raise NumericalError("partial likelihood gradient or Hessian is not finite")
        direction = _newton_direction(hessian, gradient)
        step = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            candidate = beta + step * direction
            cand_ll, cand_grad, cand_hess = partial_log_likelihood(candidate, Z, times, events)
            if np.isfinite(cand_ll) and cand_ll >= log_likelihood - LOGLIK_SLACK * max(1.0, abs(log_likelihood)):
                accepted = True
                break
            step /= 2.0
        if not accepted:
            Log.warn(f"Newton step rejected after {MAX_HALVINGS} halvings at iteration {n_iter}")
            break
        beta, log_likelihood, gradient, hessian = candidate, cand_ll, cand_grad, cand_hess
        path.append(log_likelihood)
        converged = bool(np.max(np.abs(gradient)) <= tol)

    gradient_norm = float(np.max(np.abs(gradient))) if gradient.size else 0.0
    if not converged:
        message = f"Cox Newton iterations stopped after {n_iter} steps with max|score|={gradient_norm:.3e} > tol={tol:.1e}"
        warnings.warn(message, ConvergenceWarning)
        Log.warn(message)

    event_times, cumulative_hazard = breslow_baseline(Z, beta, times, events)
    model = CoxModel(
        beta=beta,
        shift=shift,
        scale=scale,
        event_times=event_times,
        cumulative_hazard=cumulative_hazard,
        converged=converged,
        n_iter=n_iter,
        log_likelihood=log_likelihood,
        gradient_norm=gradient_norm,
        extra={"log_likelihood_path": path},
    )
    Log.kv({
        "stage": "cox_fit",
        "result": "success" if converged else "not_converged",
        "n": train.n,
        "events": int(events.sum()),
        "iterations": n_iter,
        "loglik": f"{log_likelihood:.6f}",
        "max_score": f"{gradient_norm:.2e}",
    })
    return model
