"""Parametrized monotone triangular maps and Jacobian flows.

Component ``k`` of a :class:`MonotoneMap` is

    S_k(x) = a_k(x_{k+1:}) + int_{l_k}^{x_k} rho(p_k(t, x_{k+1:})) dt,

with ``a_k`` and ``p_k`` tensor-product Legendre expansions on the affinely
rescaled support box, ``l_k`` the lower box edge and ``rho = exp`` or
``rho = p**2 + eps_floor``.  The diagonal partial D_k S_k is ``rho(p_k)`` at
the point itself, strictly positive by construction.  The integral uses a
fixed Gauss-Legendre rule (20 nodes by default) and every derivative below
differentiates that discretization exactly.

Coefficients are flattened component-major; inside a component the shift
coefficients come first, then the integrand coefficients as a
``(diag_degree + 1, n_tail_basis)`` row-major block.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .core import gauss_legendre
from .densities import SupportBox
from .kr_exact import BracketError, TriangularMap, _as_rows

INTEGRAND_FORMS = {"exp": kernels.EXP, "square": kernels.SQUARE}


class OutOfSupportError(ValueError):
    def __init__(self, row: int, point):
        super().__init__(f"row {row} lies outside the map's input support: {np.asarray(point).tolist()}")
        self.row = row


class FlowNormWarning(UserWarning):
    pass


def legendre_with_derivative(t, n_terms):
    """Legendre values and first derivatives, each of shape ``t.shape + (n_terms,)``."""
    P = kernels.legendre_table(t, n_terms)
    dP = np.zeros_like(P)
    if n_terms > 1:
        dP[..., 1] = 1.0
    for n in range(1, n_terms - 1):
        dP[..., n + 1] = dP[..., n - 1] + (2 * n + 1) * P[..., n]
    return P, dP


def _tensor(factors: Sequence[np.ndarray], n: int) -> np.ndarray:
    out = np.ones((n, 1))
    for v in factors:
        out = (out[:, :, None] * v[:, None, :]).reshape(n, -1)
    return out


@dataclass(frozen=True)
class ComponentLayout:
    k: int
    n_tail: int
    diag_degree: int
    tail_degree: int
    shift_degree: int
    offset: int

    @property
    def n_shift(self) -> int:
        return (self.shift_degree + 1) ** self.n_tail

    @property
    def n_diag(self) -> int:
        return self.diag_degree + 1

    @property
    def n_tail_basis(self) -> int:
        return (self.tail_degree + 1) ** self.n_tail

    @property
    def size(self) -> int:
        return self.n_shift + self.n_diag * self.n_tail_basis

    def split(self, theta):
        blk = theta[self.offset : self.offset + self.size]
        return blk[: self.n_shift], blk[self.n_shift :].reshape(self.n_diag, self.n_tail_basis)


@dataclass
class _Basis:
    """Basis values of one component at fixed rows (independent of theta)."""

    xs: np.ndarray  # scaled diagonal coordinate
    half_width: float  # (u_k - l_k) / 2
    Vshift: np.ndarray
    Vtail: np.ndarray
    Vdiag: np.ndarray
    dVdiag: np.ndarray | None = None  # d/dx_k, in original units
    dVshift: list | None = None  # per tail coordinate, original units
    dVtail: list | None = None


@dataclass
class _Forward:
    S: np.ndarray
    logdiag: np.ndarray
    parts: list  # per component: dict(W, M, r, p)


def _broadcast_degrees(v, d, name):
    if np.isscalar(v):
        return (int(v),) * d
    v = tuple(int(a) for a in v)
    if len(v) != d or any(a < 0 for a in v):
        raise ValueError(f"{name} must be a non-negative int or a length-{d} sequence")
    return v


class MonotoneMap(TriangularMap):
    def __init__(
        self,
        support_in: SupportBox,
        diag_degrees=2,
        tail_degrees=2,
        shift_degrees=2,
        theta=None,
        integrand: str = "exp",
        support_out: SupportBox | None = None,
        eps_floor: float = 1e-6,
        n_nodes: int = 20,
    ):
        d = support_in.dim
        super().__init__(d, support_in)
        if integrand not in INTEGRAND_FORMS:
            raise ValueError(f"integrand must be one of {sorted(INTEGRAND_FORMS)}")
        self.integrand = integrand
        self.form = INTEGRAND_FORMS[integrand]
        self.eps_floor = float(eps_floor)
        self.n_nodes = int(n_nodes)
        self.support_out = support_out
        self.diag_degrees = _broadcast_degrees(diag_degrees, d, "diag_degrees")
        self.tail_degrees = _broadcast_degrees(tail_degrees, d, "tail_degrees")
        self.shift_degrees = _broadcast_degrees(shift_degrees, d, "shift_degrees")
        layouts, off = [], 0
        for k in range(d):
            lay = ComponentLayout(k, d - k - 1, self.diag_degrees[k], self.tail_degrees[k], self.shift_degrees[k], off)
            layouts.append(lay)
            off += lay.size
        self.layouts = tuple(layouts)
        self.n_params = off
        if theta is None:
            theta = np.zeros(off)
        theta = np.array(theta, dtype=float).reshape(-1)
        if len(theta) != off:
            raise ValueError(f"theta has length {len(theta)}, expected {off}")
        self.theta = theta
        self.theta.setflags(write=False)

    # -- construction helpers -------------------------------------------
    def with_theta(self, theta) -> "MonotoneMap":
        new = copy.copy(self)
        theta = np.array(theta, dtype=float).reshape(-1)
        if len(theta) != self.n_params:
            raise ValueError(f"theta has length {len(theta)}, expected {self.n_params}")
        theta.setflags(write=False)
        new.theta = theta
        return new

    def _diag_constant(self, slope):
        slope = np.asarray(slope, dtype=float)
        if self.integrand == "exp":
            return np.log(slope)
        return np.sqrt(np.maximum(slope - self.eps_floor, 0.0))

    def affine_theta(self, scale, offset) -> np.ndarray:
        """Coefficients of the diagonal affine map x_k -> scale_k x_k + offset_k."""
        scale = np.broadcast_to(np.asarray(scale, dtype=float), (self.dim,))
        offset = np.broadcast_to(np.asarray(offset, dtype=float), (self.dim,))
        theta = np.zeros(self.n_params)
        pconst = self._diag_constant(scale)
        for lay in self.layouts:
            k = lay.k
            theta[lay.offset] = scale[k] * self.support_in.lower[k] + offset[k]
            theta[lay.offset + lay.n_shift] = pconst[k]
        return theta

    @classmethod
    def identity(cls, support_in: SupportBox, **kw) -> "MonotoneMap":
        m = cls(support_in, **kw)
        return m.with_theta(m.affine_theta(1.0, 0.0))

    def standardizing(self, data) -> "MonotoneMap":
        """Same structure, coefficients of the per-coordinate z-score map."""
        data = np.atleast_2d(data)
        mu = data.mean(axis=0)
        sd = data.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return self.with_theta(self.affine_theta(1.0 / sd, -mu / sd))

    def permuted_structure(self, perm) -> "MonotoneMap":
        """Same degrees on the permuted support box, identity coefficients."""
        return MonotoneMap.identity(
            self.support_in.permuted(perm),
            diag_degrees=self.diag_degrees,
            tail_degrees=self.tail_degrees,
            shift_degrees=self.shift_degrees,
            integrand=self.integrand,
            eps_floor=self.eps_floor,
            n_nodes=self.n_nodes,
        )

    # -- basis ------------------------------------------------------------
    def _scaled(self, x):
        return 2.0 * (x - self.support_in.lo) / self.support_in.width - 1.0

    def basis(self, x, derivs: bool = False) -> list[_Basis]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = len(x)
        z = self._scaled(x)
        dz = 2.0 / self.support_in.width
        out = []
        for lay in self.layouts:
            k = lay.k
            tails = range(k + 1, self.dim)
            sh = [legendre_with_derivative(z[:, j], lay.shift_degree + 1) for j in tails]
            tl = [legendre_with_derivative(z[:, j], lay.tail_degree + 1) for j in tails]
            Vd, dVd = legendre_with_derivative(z[:, k], lay.n_diag)
            b = _Basis(
                xs=z[:, k].copy(),
                half_width=0.5 * self.support_in.width[k],
                Vshift=_tensor([v for v, _ in sh], n),
                Vtail=_tensor([v for v, _ in tl], n),
                Vdiag=Vd,
            )
            if derivs:
                b.dVdiag = dVd * dz[k]
                b.dVshift, b.dVtail = [], []
                for i, j in enumerate(tails):
                    b.dVshift.append(_tensor([dv * dz[j] if m == i else v for m, (v, dv) in enumerate(sh)], n))
                    b.dVtail.append(_tensor([dv * dz[j] if m == i else v for m, (v, dv) in enumerate(tl)], n))
            out.append(b)
        return out

    def _rho(self, p):
        if self.form == kernels.EXP:
            rho = np.exp(p)
            return rho, p, np.ones_like(p)
        rho = p * p + self.eps_floor
        return rho, np.log(rho), 2.0 * p / rho

    def forward(self, bases: list[_Basis], theta=None) -> _Forward:
        theta = self.theta if theta is None else theta
        nodes, weights = gauss_legendre(self.n_nodes)
        n = len(bases[0].xs)
        S = np.empty((n, self.dim))
        logdiag = np.empty((n, self.dim))
        parts = []
        for lay, b in zip(self.layouts, bases):
            shift, Theta = lay.split(theta)
            W = b.Vtail @ Theta.T
            I, M = kernels.integrate_diag(b.xs, np.ascontiguousarray(W), nodes, weights, self.form, self.eps_floor)
            p = np.sum(b.Vdiag * W, axis=1)
            rho, logrho, r = self._rho(p)
            S[:, lay.k] = b.Vshift @ shift + b.half_width * I
            logdiag[:, lay.k] = logrho
            parts.append({"W": W, "M": M, "r": r, "rho": rho, "p": p})
        return _Forward(S, logdiag, parts)

    def check_support(self, x, atol: float = 1e-12):
        inside = self.support_in.contains(x, atol=atol)
        if not inside.all():
            i = int(np.flatnonzero(~inside)[0])
            raise OutOfSupportError(i, x[i])

    # -- TriangularMap interface ------------------------------------------
    def _evaluate(self, x):
        return self.forward(self.basis(x)).S

    def _log_diag(self, x):
        return self.forward(self.basis(x)).logdiag

    def evaluate(self, x, check: bool = True):
        x, single = _as_rows(x, self.dim)
        if check:
            self.check_support(x)
        y = self._evaluate(x)
        return y[0] if single else y

    __call__ = evaluate

    def diag_partial(self, x, k: int):
        return self.diag_partials(x)[..., k]

    def component(self, k, x):
        return self._evaluate(np.atleast_2d(x))[:, k]

    # -- derivatives ------------------------------------------------------
    def param_jacobian(self, x):
        """(dS/dtheta, d(D_k S_k)/dtheta), both of shape ``(n, d, n_params)``."""
        x, single = _as_rows(x, self.dim)
        bases = self.basis(x)
        fw = self.forward(bases)
        n = len(x)
        dS = np.zeros((n, self.dim, self.n_params))
        dD = np.zeros((n, self.dim, self.n_params))
        for lay, b, part in zip(self.layouts, bases, fw.parts):
            o, k = lay.offset, lay.k
            dS[:, k, o : o + lay.n_shift] = b.Vshift
            integ = slice(o + lay.n_shift, o + lay.size)
            dS[:, k, integ] = np.einsum("na,nb->nab", b.half_width * part["M"], b.Vtail).reshape(n, -1)
            drho = part["r"] * part["rho"]
            dD[:, k, integ] = np.einsum("na,nb->nab", drho[:, None] * b.Vdiag, b.Vtail).reshape(n, -1)
        if single:
            return dS[0], dD[0]
        return dS, dD

    def vjp_theta(self, bases, fw: _Forward, v, w) -> np.ndarray:
        """sum_i [ sum_k v[i,k] dS_k/dtheta + sum_k w[i,k] d ln D_kS_k/dtheta ].

        ``w`` may be ``(n,)`` (same weight for every component) or ``(n, d)``.
        """
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = np.repeat(w[:, None], self.dim, axis=1)
        grad = np.zeros(self.n_params)
        for lay, b, part in zip(self.layouts, bases, fw.parts):
            o, k = lay.offset, lay.k
            grad[o : o + lay.n_shift] = b.Vshift.T @ v[:, k]
            H = (v[:, k] * b.half_width)[:, None] * part["M"] + (w[:, k] * part["r"])[:, None] * b.Vdiag
            grad[o + lay.n_shift : o + lay.size] = (H.T @ b.Vtail).ravel()
        return grad

    def jacobian_x(self, bases, fw: _Forward, theta=None) -> np.ndarray:
        """Full input Jacobian, shape ``(n, d, d)``; needs ``basis(..., derivs=True)``."""
        theta = self.theta if theta is None else theta
        n = len(bases[0].xs)
        J = np.zeros((n, self.dim, self.dim))
        for lay, b, part in zip(self.layouts, bases, fw.parts):
            k = lay.k
            shift, Theta = lay.split(theta)
            J[:, k, k] = part["rho"]
            for i, j in enumerate(range(k + 1, self.dim)):
                dW = b.dVtail[i] @ Theta.T
                J[:, k, j] = b.dVshift[i] @ shift + b.half_width * np.sum(part["M"] * dW, axis=1)
        return J

    def grad_x_logdiag(self, bases, fw: _Forward, theta=None) -> np.ndarray:
        """Gradient in x of sum_k ln D_k S_k, shape ``(n, d)``."""
        theta = self.theta if theta is None else theta
        n = len(bases[0].xs)
        G = np.zeros((n, self.dim))
        for lay, b, part in zip(self.layouts, bases, fw.parts):
            k = lay.k
            _, Theta = lay.split(theta)
            G[:, k] += part["r"] * np.sum(b.dVdiag * part["W"], axis=1)
            for i, j in enumerate(range(k + 1, self.dim)):
                dW = b.dVtail[i] @ Theta.T
                G[:, j] += part["r"] * np.sum(b.Vdiag * dW, axis=1)
        return G

    def whitening(self, bases, floor: float = 1e-10) -> np.ndarray:
        """Block-diagonal C^{-1/2} of the empirical second moments of the shift
        features and of the integrand features p_k at the data rows.

        Used as an optimizer preconditioner: coordinates z with theta = P z
        have uncorrelated unit-scale features.
        """
        P = np.zeros((self.n_params, self.n_params))
        for lay, b in zip(self.layouts, bases):
            o = lay.offset
            feats = [
                (slice(o, o + lay.n_shift), b.Vshift),
                (slice(o + lay.n_shift, o + lay.size), np.einsum("na,nb->nab", b.Vdiag, b.Vtail).reshape(len(b.xs), -1)),
            ]
            for sl, F in feats:
                C = F.T @ F / len(F)
                lam, U = np.linalg.eigh(C)
                lam = np.maximum(lam, floor * max(lam.max(), 1e-300))
                P[sl, sl] = (U / np.sqrt(lam)) @ U.T
        return P

    # -- inversion ----------------------------------------------------------
    def _invert(self, y):
        n = len(y)
        nodes, weights = gauss_legendre(self.n_nodes)
        x = np.tile(0.5 * (self.support_in.lo + self.support_in.hi), (n, 1))
        for lay in reversed(self.layouts):
            k = lay.k
            b = self.basis(x)[k]
            shift, Theta = lay.split(self.theta)
            W = np.ascontiguousarray(b.Vtail @ Theta.T)
            target = (y[:, k] - b.Vshift @ shift) / b.half_width
            top = kernels.integral_only(np.ones(n), W, nodes, weights, self.form, self.eps_floor)
            slack = 1e-12 * np.maximum(1.0, np.abs(top))
            bad = (target < -slack) | (target > top + slack)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise BracketError(f"row {i}: y_{k} = {y[i, k]} outside the image of the support slice")
            xs = kernels.invert_diag(np.clip(target, 0.0, top), W, nodes, weights, self.form, self.eps_floor)
            x[:, k] = self.support_in.lower[k] + (xs + 1.0) * b.half_width
        return x

    # -- serialization ------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "type": "monotone_map",
            "dim": self.dim,
            "support_in": self.support_in.to_config(),
            "support_out": self.support_out.to_config() if self.support_out else None,
            "diag_degrees": list(self.diag_degrees),
            "tail_degrees": list(self.tail_degrees),
            "shift_degrees": list(self.shift_degrees),
            "integrand": self.integrand,
            "eps_floor": self.eps_floor,
            "n_nodes": self.n_nodes,
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MonotoneMap":
        if doc.get("type") != "monotone_map":
            raise ValueError("not a monotone_map document")
        out = doc.get("support_out")
        m = cls(
            SupportBox(**doc["support_in"]),
            doc["diag_degrees"],
            doc["tail_degrees"],
            doc["shift_degrees"],
            doc["theta"],
            doc["integrand"],
            SupportBox(**out) if out else None,
            doc["eps_floor"],
            doc["n_nodes"],
        )
        if m.dim != doc["dim"]:
            raise ValueError("dimension mismatch in map document")
        return m

    def __repr__(self):
        return (
            f"MonotoneMap(dim={self.dim}, degrees=(diag={self.diag_degrees}, tail={self.tail_degrees}, "
            f"shift={self.shift_degrees}), integrand={self.integrand!r}, n_params={self.n_params})"
        )


def map_eval(spec: MonotoneMap, x):
    return spec.evaluate(x)


def map_diag_partial(spec: MonotoneMap, x, k: int):
    return spec.diag_partial(x, k)


def map_param_jacobian(spec: MonotoneMap, x):
    return spec.param_jacobian(x)


@dataclass(frozen=True)
class DerivativeCapReport:
    min_diag: float
    max_first_partial: float
    max_diag_slope: float  # largest |d rho_k / d x_k|, by central differences

    @property
    def realized_M(self) -> float:
        return max(1.0 / self.min_diag, self.max_first_partial, self.max_diag_slope)

    def to_json(self) -> dict:
        return {
            "min_diag": self.min_diag,
            "max_first_partial": self.max_first_partial,
            "max_diag_slope": self.max_diag_slope,
            "realized_M": self.realized_M,
        }


def derivative_cap_diagnostic(spec: MonotoneMap, grid_per_axis: int = 16) -> DerivativeCapReport:
    """Empirical class bound M of the map on a cell-centred grid."""
    if grid_per_axis < 8:
        raise ValueError("grid_per_axis must be >= 8")
    x = spec.support_in.grid(grid_per_axis)
    bases = spec.basis(x, derivs=True)
    fw = spec.forward(bases)
    J = spec.jacobian_x(bases, fw)
    diag = np.exp(fw.logdiag)
    h = 1e-5 * spec.support_in.width
    slope = 0.0
    for k in range(spec.dim):
        xp, xm = x.copy(), x.copy()
        xp[:, k] += h[k]
        xm[:, k] -= h[k]
        dp = np.exp(spec._log_diag(xp)[:, k]) - np.exp(spec._log_diag(xm)[:, k])
        slope = max(slope, float(np.max(np.abs(dp))) / (2 * h[k]))
    return DerivativeCapReport(float(diag.min()), float(np.max(np.abs(J))), slope)


# -- Jacobian flows -------------------------------------------------------


class JacobianFlow:
    """S = U^m o Sigma^m o ... o U^1 o Sigma^1 with orthogonal Sigma^j."""

    def __init__(self, blocks: Sequence[tuple]):
        if not blocks:
            raise ValueError("a flow needs at least one block")
        self.blocks = []
        d = blocks[0][1].dim
        for Sigma, U in blocks:
            Sigma = np.asarray(Sigma, dtype=float)
            if Sigma.shape != (d, d) or U.dim != d:
                raise ValueError("block dimensions do not match")
            if np.max(np.abs(Sigma.T @ Sigma - np.eye(d))) > 1e-12:
                raise ValueError("flow matrices must be orthogonal to 1e-12")
            self.blocks.append((Sigma, U))
        self.dim = d
        self.depth = len(self.blocks)
        self.support_in = self.blocks[0][1].support_in
        self.n_params = sum(U.n_params for _, U in self.blocks)

    @classmethod
    def alternating(cls, template: MonotoneMap, depth: int) -> "JacobianFlow":
        """Identity and coordinate-reversal permutations in turn (masking style)."""
        d = template.dim
        rev = np.eye(d)[::-1]
        return cls([(np.eye(d) if j % 2 == 0 else rev, template) for j in range(depth)])

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([U.theta for _, U in self.blocks])

    def with_theta(self, theta) -> "JacobianFlow":
        theta = np.asarray(theta, dtype=float)
        if len(theta) != self.n_params:
            raise ValueError(f"theta has length {len(theta)}, expected {self.n_params}")
        blocks, o = [], 0
        for Sigma, U in self.blocks:
            blocks.append((Sigma, U.with_theta(theta[o : o + U.n_params])))
            o += U.n_params
        return JacobianFlow(blocks)

    def forward(self, x, derivs: bool = False):
        """Run all blocks; returns (y, logdet, trace, norm_violations)."""
        u = np.atleast_2d(np.asarray(x, dtype=float))
        logdet = np.zeros(len(u))
        trace = []
        violations = 0
        for Sigma, U in self.blocks:
            xj = u @ Sigma.T
            bases = U.basis(xj, derivs=derivs)
            fw = U.forward(bases)
            u = fw.S
            logdet += fw.logdiag.sum(axis=1)
            violations += int(np.sum(np.linalg.norm(u, axis=1) > 1.0))
            trace.append((xj, bases, fw))
        return u, logdet, trace, violations

    def evaluate_with_logdet(self, x):
        x, single = _as_rows(x, self.dim)
        y, logdet, _, viol = self.forward(x)
        if viol:
            warnings.warn(f"{viol} block outputs left the unit ball", FlowNormWarning, stacklevel=2)
        return (y[0], float(logdet[0])) if single else (y, logdet)

    def evaluate(self, x):
        return self.evaluate_with_logdet(x)[0]

    def check_support(self, x, atol: float = 1e-12):
        self.blocks[0][1].check_support(x, atol)

    def to_json(self) -> dict:
        return {
            "type": "jacobian_flow",
            "blocks": [{"sigma": S.tolist(), "map": U.to_json()} for S, U in self.blocks],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "JacobianFlow":
        if doc.get("type") != "jacobian_flow":
            raise ValueError("not a jacobian_flow document")
        return cls([(np.array(b["sigma"]), MonotoneMap.from_json(b["map"])) for b in doc["blocks"]])


def flow_eval_with_logdet(flow: JacobianFlow, x):
    return flow.evaluate_with_logdet(x)


def map_from_json(doc: dict):
    if doc.get("type") == "jacobian_flow":
        return JacobianFlow.from_json(doc)
    return MonotoneMap.from_json(doc)
