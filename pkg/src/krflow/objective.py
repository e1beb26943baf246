"""KL / negative log-likelihood objective and its optimizer.

For a sample X^1..X^n from f the per-sample loss of a triangular map S is

    psi_S(x) = [ln f(x)] - ln g(S(x)) - sum_k ln D_k S_k(x),

where the bracketed term is included only when the target f is known
(then the sample mean estimates KL(S#f | g)); without it the mean is the
negative log-likelihood that training minimizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import as_rng
from .densities import Density, UnsupportedDensityError
from .kr_exact import MonotonicityError, TriangularMap, invert_triangular_map, pushforward_density
from .param_maps import JacobianFlow, MonotoneMap, derivative_cap_diagnostic

BOUNDARY_NUDGE = 1e-12


@dataclass(frozen=True)
class LossConfig:
    source: Density
    target: Density | None = None
    include_f_term: bool = False

    def __post_init__(self):
        if self.include_f_term and self.target is None:
            raise ValueError("include_f_term requires the target density")


def prepare_data(spec, data) -> np.ndarray:
    """Validate rows against the map's input box; nudge boundary rows inward."""
    x = np.atleast_2d(np.asarray(data, dtype=float))
    if len(x) == 0:
        raise ValueError("data must contain at least one row")
    box = spec.support_in
    if x.shape[1] != box.dim:
        raise ValueError(f"data has {x.shape[1]} columns, map dimension is {box.dim}")
    inside = box.contains(x, atol=BOUNDARY_NUDGE)
    if not inside.all():
        from .param_maps import OutOfSupportError

        i = int(np.flatnonzero(~inside)[0])
        raise OutOfSupportError(i, x[i])
    return np.clip(x, box.lo + BOUNDARY_NUDGE, box.hi - BOUNDARY_NUDGE)


def _map_outputs(spec, x):
    """(S(x), sum_k ln D_k S_k(x)) for maps and flows."""
    if isinstance(spec, JacobianFlow):
        y, logdet, _, _ = spec.forward(x)
        return y, logdet
    if isinstance(spec, MonotoneMap):
        fw = spec.forward(spec.basis(x))
        return fw.S, fw.logdiag.sum(axis=1)
    return spec.evaluate(x), spec.log_diag(x).sum(axis=1)


def pointwise_loss(spec, data, cfg: LossConfig) -> np.ndarray:
    x = prepare_data(spec, data)
    y, logdet = _map_outputs(spec, x)
    if not np.all(np.isfinite(logdet)):
        raise MonotonicityError("nonpositive diagonal partial in the map")
    psi = -cfg.source.log_density(y, extend=True) - logdet
    if cfg.include_f_term:
        psi = psi + cfg.target.log_density(x)
    return psi


def empirical_loss(spec, data, cfg: LossConfig) -> float:
    return float(np.mean(pointwise_loss(spec, data, cfg)))


def per_coordinate_loss(spec, data, cfg: LossConfig) -> np.ndarray:
    """Chain-rule split of the loss: entry k averages

    [ln f_k(x_k | x_{k+1:})] - ln g_k(S_k | S_{k+1:}) - ln D_k S_k.
    """
    if isinstance(spec, JacobianFlow):
        raise UnsupportedDensityError("per-coordinate decomposition needs a triangular map")
    x = prepare_data(spec, data)
    if isinstance(spec, MonotoneMap):
        fw = spec.forward(spec.basis(x))
        y, logdiag = fw.S, fw.logdiag
    else:
        y, logdiag = spec.evaluate(x), spec.log_diag(x)
    d = x.shape[1]
    out = np.empty(d)
    for k in range(d):
        psi = -cfg.source.conditional_log_pdf(k, y[:, k], y[:, k + 1 :]) - logdiag[:, k]
        if cfg.include_f_term:
            psi = psi + cfg.target.conditional_log_pdf(k, x[:, k], x[:, k + 1 :])
        out[k] = np.mean(psi)
    return out


def _monotone_loss_grad(spec: MonotoneMap, bases, theta, cfg: LossConfig, f_term: float):
    fw = spec.forward(bases, theta)
    n = len(fw.S)
    lg = cfg.source.log_density(fw.S, extend=True)
    loss = f_term + float(np.mean(-lg - fw.logdiag.sum(axis=1)))
    if not math.isfinite(loss):
        return math.inf, None
    v = -cfg.source.grad_log_density(fw.S) / n
    grad = spec.with_theta(theta).vjp_theta(bases, fw, v, np.full(n, -1.0 / n))
    return loss, grad


def _flow_loss_grad(flow: JacobianFlow, x, theta, cfg: LossConfig, f_term: float):
    flow = flow.with_theta(theta)
    y, logdet, trace, _ = flow.forward(x, derivs=True)
    n = len(x)
    loss = f_term + float(np.mean(-cfg.source.log_density(y, extend=True) - logdet))
    if not math.isfinite(loss):
        return math.inf, None
    ubar = -cfg.source.grad_log_density(y) / n
    w = np.full(n, -1.0 / n)
    grads = []
    for (Sigma, U), (xj, bases, fw) in zip(reversed(flow.blocks), reversed(trace)):
        grads.append(U.vjp_theta(bases, fw, ubar, w))
        J = U.jacobian_x(bases, fw)
        xbar = np.einsum("nk,nkj->nj", ubar, J) + w[:, None] * U.grad_x_logdiag(bases, fw)
        ubar = xbar @ Sigma
    return loss, np.concatenate(grads[::-1])


def _objective(spec, data, cfg: LossConfig):
    """Closure theta -> (loss, grad) with theta-independent work hoisted."""
    x = prepare_data(spec, data)
    f_term = float(np.mean(cfg.target.log_density(x))) if cfg.include_f_term else 0.0
    if isinstance(spec, JacobianFlow):
        return lambda th: _flow_loss_grad(spec, x, th, cfg, f_term)
    if isinstance(spec, MonotoneMap):
        bases = spec.basis(x)
        return lambda th: _monotone_loss_grad(spec, bases, th, cfg, f_term)
    raise TypeError("gradients are available for MonotoneMap and JacobianFlow only")


def loss_gradient(spec, data, cfg: LossConfig) -> np.ndarray:
    loss, grad = _objective(spec, data, cfg)(spec.theta)
    if grad is None:
        raise MonotonicityError("loss is not finite at the current coefficients")
    return grad


# -- optimizer ---------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerOptions:
    max_iters: int = 1000
    grad_tol: float = 1e-6
    step_rule: str = "lbfgs"  # or "gd"
    memory: int = 10
    max_halvings: int = 60
    armijo: float = 1e-4
    precondition: bool = True  # whiten basis features on the training data


@dataclass
class OptimizationResult:
    theta_hat: np.ndarray
    final_loss: float
    iterations: int
    grad_norm: float
    converged: bool
    message: str = ""
    loss_history: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "final_loss": self.final_loss,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "message": self.message,
            "diagnostics": self.diagnostics,
        }


def _minimize(fun, theta0, opts: OptimizerOptions, P=None):
    """L-BFGS (or gradient descent) with Armijo backtracking by halving.

    With a preconditioner ``P`` the search runs in z, theta = theta0 + P z;
    convergence is still judged on the gradient in theta.
    """
    theta0 = np.array(theta0, dtype=float)
    P = np.eye(len(theta0)) if P is None else P

    def ev(z):
        loss, g = fun(theta0 + P @ z)
        return loss, g, (None if g is None else P.T @ g)

    z = np.zeros(len(theta0))
    loss, grad, gz = ev(z)
    if grad is None:
        raise MonotonicityError("initial coefficients give a non-finite loss")
    history = [loss]
    S, Y = [], []
    it = 0
    stalled = 0
    message = "max_iters reached"
    while it < opts.max_iters:
        if float(np.linalg.norm(grad)) <= opts.grad_tol:
            message = "gradient tolerance reached"
            break
        znorm = float(np.linalg.norm(gz))
        direction = -_two_loop(gz, S, Y) if opts.step_rule == "lbfgs" else -gz
        slope = float(direction @ gz)
        if slope >= 0:
            S, Y = [], []
            direction, slope = -gz, -(znorm**2)
        step = 1.0 if (S or opts.step_rule != "lbfgs") else min(1.0, 1.0 / znorm)
        accepted = False
        for _ in range(opts.max_halvings + 1):
            cand = z + step * direction
            new_loss, new_grad, new_gz = ev(cand)
            # strict decrease guards against steps lost in rounding near the optimum
            if new_grad is not None and new_loss <= loss + opts.armijo * step * slope and new_loss < loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if S:
                # stale curvature pairs; retry once along the gradient
                S, Y = [], []
                continue
            message = "line search failed"
            break
        s, y = cand - z, new_gz - gz
        if s @ y > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > opts.memory:
                S.pop(0)
                Y.pop(0)
        # decreases at rounding level mean no further progress is possible
        stalled = stalled + 1 if loss - new_loss <= 4 * np.finfo(float).eps * abs(loss) else 0
        z, loss, grad, gz = cand, new_loss, new_grad, new_gz
        history.append(loss)
        it += 1
        if stalled >= 3:
            message = "loss stalled at rounding level"
            break
    converged = opts.max_iters > 0 and float(np.linalg.norm(grad)) <= opts.grad_tol
    return theta0 + P @ z, loss, grad, it, converged, message, history


def _two_loop(grad, S, Y):
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _result(spec, theta, loss, grad, it, converged, message, history):
    diagnostics = {"loss_decrease_last_10": float(history[max(0, len(history) - 11)] - history[-1])}
    fitted = spec.with_theta(theta)
    if isinstance(fitted, MonotoneMap):
        diagnostics["derivative_cap"] = derivative_cap_diagnostic(fitted, 16).to_json()
    return OptimizationResult(
        theta_hat=np.asarray(theta),
        final_loss=float(loss),
        iterations=it,
        grad_norm=float(np.linalg.norm(grad)),
        converged=converged,
        message=message,
        loss_history=history,
        diagnostics=diagnostics,
    )


def optimize(init_spec, data, cfg: LossConfig, opts: OptimizerOptions | None = None) -> OptimizationResult:
    """Full-batch deterministic minimization of the empirical loss."""
    opts = opts or OptimizerOptions()
    fun = _objective(init_spec, data, cfg)
    P = None
    if opts.precondition and isinstance(init_spec, MonotoneMap):
        P = init_spec.whitening(init_spec.basis(prepare_data(init_spec, data)))
    out = _minimize(fun, init_spec.theta, opts, P)
    return _result(init_spec, *out)


def optimize_separable(init_spec: MonotoneMap, data, cfg: LossConfig, opts: OptimizerOptions | None = None) -> OptimizationResult:
    """Fit each component's coefficient block on its own loss.

    Valid when the source is a product density, where the loss splits into
    sum_k mean[-ln g_k(S_k) - ln D_k S_k].
    """
    if not cfg.source.is_product:
        raise UnsupportedDensityError("separable fitting needs a product source density")
    opts = opts or OptimizerOptions()
    x = prepare_data(init_spec, data)
    bases = init_spec.basis(x)
    n = len(x)
    theta = np.array(init_spec.theta)
    total_it, all_conv, messages = 0, True, []
    for lay in init_spec.layouts:
        k, sl = lay.k, slice(lay.offset, lay.offset + lay.size)

        def fun(block, k=k, sl=sl):
            th = theta.copy()
            th[sl] = block
            fw = init_spec.forward(bases, th)
            yk = fw.S[:, k]
            loss = float(np.mean(-cfg.source.conditional_log_pdf(k, yk, fw.S[:, k + 1 :]) - fw.logdiag[:, k]))
            if not math.isfinite(loss):
                return math.inf, None
            v = np.zeros_like(fw.S)
            v[:, k] = -cfg.source.grad_log_density(fw.S)[:, k] / n
            w = np.zeros_like(fw.S)
            w[:, k] = -1.0 / n
            return loss, init_spec.vjp_theta(bases, fw, v, w)[sl]

        block, _, _, it, conv, msg, _ = _minimize(fun, theta[sl], opts)
        theta[sl] = block
        total_it += it
        all_conv &= conv
        messages.append(msg)
    loss, grad = _objective(init_spec, x, cfg)(theta)
    return _result(init_spec, theta, loss, grad, total_it, all_conv, "; ".join(messages), [loss])


class KlCheck(NamedTuple):
    forward: float
    backward: float
    se_forward: float
    se_backward: float

    @property
    def agree(self) -> bool:
        return abs(self.forward - self.backward) <= 3.0 * math.hypot(self.se_forward, self.se_backward) + 1e-12


def kl_change_of_variables_check(S: TriangularMap, f: Density, g: Density, n: int, seed) -> KlCheck:
    """Estimate both sides of KL(S#f | g) = KL(f | S^{-1}#g) by separate routes.

    Forward: draw y = S(x) from S#f and evaluate ln S#f(y) through the inverse
    map, ln f(S^{-1}y) - sum_k ln D_kS_k(S^{-1}y). Backward: an independent
    sample from f against the pulled-back density g(S(x)) prod_k D_kS_k(x).
    """
    rng = as_rng(seed)
    x_fwd = f.sample(n, rng)
    x_bwd = f.sample(n, rng)
    y = S.evaluate(x_fwd)
    x_back = invert_triangular_map(S, y, tol=1e-8)
    fwd = f.log_density(x_back) - S.log_diag(x_back).sum(axis=1) - g.log_density(y, extend=True)
    bwd = f.log_density(x_bwd) - np.log(pushforward_density(S, g, x_bwd))
    se = lambda v: float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0  # noqa: E731
    return KlCheck(float(np.mean(fwd)), float(np.mean(bwd)), se(fwd), se(bwd))
