"""Levenberg-Marquardt on a manifold-valued state.

The problem object supplies residuals, weights and Jacobians in a local
parametrization together with a retraction; the loop itself only sees flat
vectors. Steps are accepted when the weighted cost strictly decreases.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
import scipy.linalg

from .errors import PersfitError, SingularSystem

logger = logging.getLogger(__name__)

DIAG_FLOOR = 1e-12
EIG_CLAMP = 1e-12


class Status(str, enum.Enum):
    STEP_TOL = "StepTolReached"
    MAX_ITERS = "MaxIters"
    STALLED = "StalledDamping"


@dataclass(frozen=True)
class LMConfig:
    lambda0: float = 0.1
    max_iters: int = 30
    step_tol: float = 1e-8
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    lambda_min: float = 1e-7
    lambda_max: float = 1e7

    def __post_init__(self):
        for name in ("lambda0", "step_tol", "lambda_up", "lambda_down", "lambda_min", "lambda_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.lambda_down < 1 < self.lambda_up:
            raise ValueError("need lambda_down < 1 < lambda_up")
        if self.lambda_min > self.lambda_max:
            raise ValueError("lambda_min exceeds lambda_max")


@dataclass
class IterationRecord:
    cost: float
    lam: float
    step_norm: float
    accepted: bool


@dataclass
class LMTrace:
    initial_cost: float
    records: list[IterationRecord] = field(default_factory=list)
    status: Status | None = None

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def final_cost(self) -> float:
        accepted = [r.cost for r in self.records if r.accepted]
        return accepted[-1] if accepted else self.initial_cost

    @property
    def accepted_costs(self) -> list[float]:
        return [self.initial_cost] + [r.cost for r in self.records if r.accepted]


class OutOfDomain(PersfitError):
    """Raised by a problem when a trial state cannot be evaluated."""


class Problem(Protocol):
    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray]: ...

    def linearize(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...

    def retract(self, x, delta: np.ndarray) -> Any: ...


@dataclass
class LMResult:
    x: Any
    trace: LMTrace
    r: np.ndarray
    w: np.ndarray
    J: np.ndarray

    @property
    def status(self) -> Status:
        return self.trace.status

    @property
    def hessian(self) -> np.ndarray:
        return normal_matrix(self.J, self.w)


def normal_matrix(J: np.ndarray, w: np.ndarray) -> np.ndarray:
    H = (J * w[:, None]).T @ J
    return 0.5 * (H + H.T)


def lm_step(r: np.ndarray, w: np.ndarray, J: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(H + lam * diag(H)) delta = -J^T W r`` with ``H = J^T W J``.

    Diagonal entries of ``H`` are floored at ``DIAG_FLOOR`` before damping so
    that unobserved directions are still regularized.
    """
    H = normal_matrix(J, w)
    grad = J.T @ (w * r)
    return _damped_solve(H, grad, lam)


def _damped_solve(H: np.ndarray, grad: np.ndarray, lam: float) -> np.ndarray:
    A = H + lam * np.diag(np.maximum(np.diag(H), DIAG_FLOOR))
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(f"damped normal equations not positive definite (lambda={lam:g})") from exc
    delta = -scipy.linalg.cho_solve(factor, grad)
    if not np.all(np.isfinite(delta)):
        raise SingularSystem("non-finite update")
    return delta


def _cost(r, w) -> float:
    return float(np.sum(w * r * r))


def optimize(problem: Problem, x0, config: LMConfig | None = None) -> LMResult:
    """Run damped Gauss-Newton from ``x0``.

    On rejection the damping grows and the step is retried from the same
    linearization; each solve counts as one iteration.
    """
    cfg = config or LMConfig()
    x = x0
    r, w, J = problem.linearize(x)
    cost = _cost(r, w)
    trace = LMTrace(initial_cost=cost)
    if not np.any(w > 0):
        logger.warning("all residual weights are zero; nothing to optimize")
        trace.status = Status.STALLED
        return LMResult(x, trace, r, w, J)

    lam = cfg.lambda0
    H = normal_matrix(J, w)
    grad = J.T @ (w * r)
    while trace.iterations < cfg.max_iters:
        try:
            delta = _damped_solve(H, grad, lam)
        except SingularSystem:
            lam *= cfg.lambda_up
            trace.records.append(IterationRecord(cost, lam, math.nan, False))
            if lam > cfg.lambda_max:
                trace.status = Status.STALLED
                break
            continue
        step = float(np.linalg.norm(delta))
        if step < cfg.step_tol:
            trace.records.append(IterationRecord(cost, lam, step, False))
            trace.status = Status.STEP_TOL
            break
        x_new = problem.retract(x, delta)
        try:
            r_new, w_new = problem.evaluate(x_new)
            new_cost = _cost(r_new, w_new)
        except OutOfDomain:
            new_cost = math.inf
        if new_cost < cost:
            trace.records.append(IterationRecord(new_cost, lam, step, True))
            x, cost = x_new, new_cost
            lam = max(lam * cfg.lambda_down, cfg.lambda_min)
            r, w, J = problem.linearize(x)
            H = normal_matrix(J, w)
            grad = J.T @ (w * r)
        else:
            trace.records.append(IterationRecord(new_cost, lam, step, False))
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                trace.status = Status.STALLED
                break
    else:
        trace.status = Status.MAX_ITERS
    logger.debug("LM finished: %s after %d iterations, cost %.6g", trace.status, trace.iterations, cost)
    return LMResult(x, trace, r, w, J)


def covariance(
    J: np.ndarray,
    w: np.ndarray,
    r: np.ndarray | None = None,
    *,
    n_prior: int = 0,
    dof: int | None = None,
    scale_by_residual: bool = True,
) -> np.ndarray:
    """Parameter covariance from the undamped normal matrix at a solution.

    The last ``n_prior`` rows are prior rows, already whitened by their
    standard deviations. With ``scale_by_residual`` the data rows are
    rescaled by the residual variance ``E_data / dof`` so that confidences
    act as relative weights; otherwise ``H^-1`` is returned as is. ``dof``
    defaults to the number of nonzero-weight data rows minus the number of
    parameters.

    ``H`` is pseudo-inverted through its eigendecomposition, dropping
    eigenvalues below ``EIG_CLAMP * max``. Use :func:`unobservable` to find
    the parameters this leaves without a meaningful variance.
    """
    n_data = len(w) - n_prior
    Jd, wd = J[:n_data], w[:n_data]
    H_data = normal_matrix(Jd, wd)
    if scale_by_residual and r is not None:
        if dof is None:
            dof = int(np.count_nonzero(wd > 0)) - J.shape[1]
        if dof > 0:
            variance = _cost(r[:n_data], wd) / dof
            if variance > 0:
                H_data = H_data / variance
    H = H_data + normal_matrix(J[n_data:], w[n_data:])
    evals, evecs, keep = _spectrum(H)
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    sigma = (evecs * inv) @ evecs.T
    return 0.5 * (sigma + sigma.T)


def _spectrum(H: np.ndarray):
    evals, evecs = np.linalg.eigh(H)
    top = evals.max() if evals.size else 0.0
    keep = evals > EIG_CLAMP * top if top > 0 else np.zeros_like(evals, dtype=bool)
    return evals, evecs, keep


def unobservable(J: np.ndarray, w: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Parameters with a component above ``tol`` along a dropped eigenvector.

    The pseudo-inverse assigns such directions zero variance although the
    data do not constrain them at all.
    """
    _, evecs, keep = _spectrum(normal_matrix(J, w))
    dropped = evecs[:, ~keep]
    return np.any(np.abs(dropped) > tol, axis=1)
