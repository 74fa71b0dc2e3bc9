"""Dense convex QP solver based on operator splitting (ADMM).

Problems are stated as::

    minimize    1/2 y^T H y + g^T y
    subject to  l <= A y <= u

which covers equalities (``l == u``) and one-sided inequalities (infinite
bounds).  :class:`AdmmSolver` is set up once for fixed ``(H, A)`` and then
solves *batches* of problems that differ only in ``g``, ``l`` and ``u``; this
is how the MPC layer advances all Monte Carlo trials in lockstep.  Each batch
member has its own step size, convergence test and polishing step, so its
result does not depend on the other members (up to floating-point
rounding in the batched linear algebra).

The iteration follows the OSQP splitting: Ruiz equilibration of the KKT
matrix, over-relaxation, step-size (``rho``) adaptation on a fixed
logarithmic ladder so factorizations can be cached, primal infeasibility
certificates, and polishing by an equality-constrained KKT solve on the
active set guessed from the dual iterate.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._validation import as_matrix, as_vector
from .exceptions import DimensionMismatch

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

_RHO_STEPS_PER_DECADE = 4
_RHO_LADDER_LIMIT = 6 * _RHO_STEPS_PER_DECADE  # rho in [1e-6, 1e6]
_EQ_RHO_FACTOR = 1e3


@dataclass
class AdmmSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-4
    eps_rel: float = 1e-4
    eps_prim_inf: float = 1e-5
    kkt_tol: float = 1e-6
    max_iter: int = 20_000
    check_every: int = 10
    adapt_every: int = 50
    adapt_ratio: float = 5.0
    scaling_iter: int = 25
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine: int = 5
    polish_passes: int = 8
    polish_every: int = 100
    stall_window: int = 1000
    stall_level: float = 1e-4


@dataclass(frozen=True)
class QuadraticProgram:
    """``min 1/2 y^T H y + g^T y  s.t.  A_eq y = b_eq,  A_in y <= b_in``."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None

    def __post_init__(self):
        H = as_matrix(self.H, "H")
        n = H.shape[0]
        if H.shape != (n, n):
            raise DimensionMismatch(f"H must be square, got {H.shape}")
        scale = max(1.0, np.abs(H).max(initial=0.0))
        if np.abs(H - H.T).max(initial=0.0) > 1e-10 * scale:
            raise ValueError("H is not symmetric")
        H = 0.5 * (H + H.T)
        if n and np.linalg.eigvalsh(H).min() < -1e-10 * scale:
            raise ValueError("H is not positive semi-definite")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "g", as_vector(self.g, "g", n))
        for A_name, b_name in (("A_eq", "b_eq"), ("A_in", "b_in")):
            A, b = getattr(self, A_name), getattr(self, b_name)
            if A is None:
                A, b = np.zeros((0, n)), np.zeros(0)
            A = np.asarray(A, dtype=float).reshape(-1, n)
            b = as_vector(b, b_name, A.shape[0]) if A.shape[0] else np.zeros(0)
            object.__setattr__(self, A_name, A)
            object.__setattr__(self, b_name, b)

    @property
    def n(self):
        return self.H.shape[0]

    def box_form(self):
        """Return ``(A, l, u, is_eq)`` with equalities first."""
        A = np.vstack([self.A_eq, self.A_in])
        l = np.concatenate([self.b_eq, np.full(self.b_in.size, -np.inf)])
        u = np.concatenate([self.b_eq, self.b_in])
        is_eq = np.arange(A.shape[0]) < self.b_eq.size
        return A, l, u, is_eq

    def objective(self, y):
        y = np.asarray(y, dtype=float)
        return 0.5 * y @ self.H @ y + self.g @ y


@dataclass
class QpSolution:
    """Result of a single solve.

    ``kkt_residuals`` holds (stationarity, primal, dual, complementarity),
    each relative to the magnitude of the terms it compares.  For an
    infeasible problem ``certificate`` is a multiplier direction ``v`` with
    ``A^T v ~ 0`` and ``u^T v+ + l^T v- < 0``; ``kkt_residuals`` then reports
    ``(|A^T v|, support, 0, 0)`` for that direction.
    """

    y: np.ndarray
    objective: float
    status: str
    kkt_residuals: tuple
    iterations: int
    multipliers: np.ndarray = None
    polished: bool = False
    certificate: np.ndarray = None


@dataclass
class BatchSolution:
    y: np.ndarray
    objective: np.ndarray
    status: np.ndarray
    kkt_residuals: np.ndarray
    iterations: np.ndarray
    multipliers: np.ndarray
    polished: np.ndarray
    certificate: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return self.y.shape[0]

    def __getitem__(self, i):
        cert = None if self.status[i] != INFEASIBLE else self.certificate[i]
        return QpSolution(
            y=self.y[i], objective=float(self.objective[i]), status=str(self.status[i]),
            kkt_residuals=tuple(float(r) for r in self.kkt_residuals[i]),
            iterations=int(self.iterations[i]), multipliers=self.multipliers[i],
            polished=bool(self.polished[i]), certificate=cert)


def kkt_residuals(H, g, A, l, u, y, lam):
    """Relative KKT residuals for a batch of candidate primal/dual pairs.

    Shapes: ``g, y`` are ``(b, n)``; ``l, u, lam`` are ``(b, m)``.  Returns an
    array ``(b, 4)``: stationarity, primal feasibility, dual feasibility
    (multiplier sign versus bound finiteness) and complementarity.
    """
    Hy = y @ H.T
    Ay = y @ A.T
    Atl = lam @ A
    stat = np.abs(Hy + g + Atl).max(axis=1, initial=0.0)
    stat /= np.maximum.reduce([np.ones(len(y)), np.abs(Hy).max(axis=1, initial=0.0),
                               np.abs(g).max(axis=1, initial=0.0), np.abs(Atl).max(axis=1, initial=0.0)])
    ay_scale = np.maximum(1.0, np.abs(Ay).max(axis=1, initial=0.0))
    viol = np.maximum(Ay - u, 0.0) + np.maximum(l - Ay, 0.0)
    prim = viol.max(axis=1, initial=0.0) / ay_scale
    lam_pos = np.maximum(lam, 0.0)
    lam_neg = np.maximum(-lam, 0.0)
    lam_scale = np.maximum(1.0, np.abs(lam).max(axis=1, initial=0.0))
    wrong = np.where(np.isinf(u), lam_pos, 0.0) + np.where(np.isinf(l), lam_neg, 0.0)
    dual = wrong.max(axis=1, initial=0.0) / lam_scale
    gap_u = np.where(np.isfinite(u), u - Ay, 0.0)
    gap_l = np.where(np.isfinite(l), Ay - l, 0.0)
    comp = np.abs(lam_pos * gap_u) + np.abs(lam_neg * gap_l)
    comp = comp.max(axis=1, initial=0.0) / (lam_scale * ay_scale)
    return np.stack([stat, prim, dual, comp], axis=1)


def _ruiz(H, A, iters):
    n, m = H.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Hs, As = H.copy(), A.copy()
    for _ in range(iters):
        col_x = np.maximum(np.abs(Hs).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
        col_c = np.abs(As).max(axis=1, initial=0.0)
        dx = 1.0 / np.sqrt(np.where(col_x > 1e-8, col_x, 1.0))
        dc = 1.0 / np.sqrt(np.where(col_c > 1e-8, col_c, 1.0))
        dx = np.clip(dx, 1e-4, 1e4)
        dc = np.clip(dc, 1e-4, 1e4)
        Hs = dx[:, None] * Hs * dx[None, :]
        As = dc[:, None] * As * dx[None, :]
        D *= dx
        E *= dc
    col = np.abs(Hs).max(axis=0, initial=0.0).mean() if n else 0.0
    c = 1.0 / col if col > 1e-8 else 1.0
    c = float(np.clip(c, 1e-4, 1e4))
    return D, E, c, c * Hs, As


class AdmmSolver:
    """Batched ADMM solver for a fixed ``(H, A)`` pair.

    Parameters
    ----------
    H : (n, n) PSD matrix
    A : (m, n) constraint matrix
    is_eq : (m,) bool, optional
        Rows that are equalities in every problem of the batch; they get a
        larger step size.
    settings : AdmmSettings, optional
    """

    def __init__(self, H, A, is_eq=None, settings=None):
        self.settings = settings or AdmmSettings()
        self.H = np.asarray(H, dtype=float)
        n = self.H.shape[0]
        self.A = np.asarray(A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.is_eq = np.zeros(m, dtype=bool) if is_eq is None else np.asarray(is_eq, dtype=bool)
        self.n, self.m = n, m
        self.D, self.E, self.c, self.Hs, self.As = _ruiz(self.H, self.A, self.settings.scaling_iter)
        self._row_factor = np.where(self.is_eq, _EQ_RHO_FACTOR, 1.0)
        self._factors = {}

    # -- helpers --------------------------------------------------------------

    @staticmethod
    def _ladder_index(rho):
        j = int(np.round(_RHO_STEPS_PER_DECADE * np.log10(rho)))
        return int(np.clip(j, -_RHO_LADDER_LIMIT, _RHO_LADDER_LIMIT))

    @staticmethod
    def _ladder_value(j):
        return 10.0 ** (j / _RHO_STEPS_PER_DECADE)

    def _factor(self, j):
        if j not in self._factors:
            rho_vec = self._ladder_value(j) * self._row_factor
            K = self.Hs + self.settings.sigma * np.eye(self.n) + (self.As.T * rho_vec) @ self.As
            self._factors[j] = scipy.linalg.cho_factor(K, lower=True, check_finite=False)
        return self._factors[j]

    def _prepare(self, g, l, u):
        g = np.atleast_2d(np.asarray(g, dtype=float))
        b = g.shape[0]
        l = np.broadcast_to(np.asarray(l, dtype=float), (b, self.m)).copy() if self.m else np.zeros((b, 0))
        u = np.broadcast_to(np.asarray(u, dtype=float), (b, self.m)).copy() if self.m else np.zeros((b, 0))
        if g.shape[1] != self.n:
            raise DimensionMismatch(f"g has {g.shape[1]} columns, expected {self.n}")
        if np.any(l > u):
            raise ValueError("lower bounds exceed upper bounds")
        return g, l, u

    # -- main entry -------------------------------------------------------------

    def solve(self, g, l, u, warm_start=None, warm_dual=None):
        """Solve the batch; ``g`` is ``(b, n)``, ``l`` and ``u`` are ``(b, m)``.

        Returns a :class:`BatchSolution`.
        """
        st = self.settings
        g, l, u = self._prepare(g, l, u)
        b, n, m = g.shape[0], self.n, self.m
        D, E, c = self.D, self.E, self.c
        qs = c * g * D
        ls = l * E
        us = u * E

        x = np.zeros((b, n))
        if warm_start is not None:
            x = np.broadcast_to(np.asarray(warm_start, dtype=float), (b, n)) / D
        z = np.clip(x @ self.As.T, ls, us)
        y = np.zeros((b, m))
        if warm_dual is not None:
            y = np.broadcast_to(np.asarray(warm_dual, dtype=float), (b, m)) * c / E

        out_y = np.zeros((b, n))
        out_lam = np.zeros((b, m))
        out_status = np.full(b, MAX_ITER, dtype=object)
        out_iter = np.zeros(b, dtype=int)
        out_res = np.full((b, 4), np.inf)
        out_pol = np.zeros(b, dtype=bool)
        out_cert = np.zeros((b, m))

        idx = np.arange(b)
        rho_j = np.full(b, self._ladder_index(st.rho))
        y_prev = y.copy()
        stall = np.zeros(b, dtype=int)
        ynorm_prev = np.zeros(b)

        if st.polish and warm_dual is not None and b:
            # a warm dual usually carries the right active set already
            sub = np.arange(b)
            ys, lams, res, pol = self._finish(sub, idx, x, z, y, g, l, u, ls, us, qs)
            ok = np.all(res <= st.kkt_tol, axis=1)
            out_y[ok], out_lam[ok], out_res[ok], out_pol[ok] = ys[ok], lams[ok], res[ok], pol[ok]
            out_status[ok] = OPTIMAL
            keep = ~ok
            idx, x, z, y = idx[keep], x[keep], z[keep], y[keep]
            rho_j, stall, ynorm_prev = rho_j[keep], stall[keep], ynorm_prev[keep]
            y_prev = y.copy()

        it = 0
        while idx.size and it < st.max_iter:
            it += 1
            rho = self._ladder_value(rho_j)[:, None] * self._row_factor[None, :]
            rhs = st.sigma * x - qs[idx] + (rho * z - y) @ self.As
            xt = np.empty_like(x)
            for j in np.unique(rho_j):
                sel = rho_j == j
                xt[sel] = scipy.linalg.cho_solve(self._factor(j), rhs[sel].T, check_finite=False).T
            zt = xt @ self.As.T
            x = st.alpha * xt + (1.0 - st.alpha) * x
            zr = st.alpha * zt + (1.0 - st.alpha) * z
            z_new = np.clip(zr + y / rho, ls[idx], us[idx])
            y_prev = y
            y = y + rho * (zr - z_new)
            z = z_new

            if it % st.check_every and it != st.max_iter:
                continue

            # unscaled residuals
            Ax = x @ self.As.T
            Px = x @ self.Hs.T
            Aty = y @ self.As
            r_prim = np.abs((Ax - z) / E).max(axis=1, initial=0.0)
            r_dual = np.abs((Px + qs[idx] + Aty) / D).max(axis=1, initial=0.0) / c
            n_prim = np.maximum(np.abs(Ax / E).max(axis=1, initial=0.0), np.abs(z / E).max(axis=1, initial=0.0))
            n_dual = np.maximum.reduce([np.abs(Px / D).max(axis=1, initial=0.0),
                                        np.abs(Aty / D).max(axis=1, initial=0.0),
                                        np.abs(qs[idx] / D).max(axis=1, initial=0.0)]) / c
            eps_p = st.eps_abs + st.eps_rel * n_prim
            eps_d = st.eps_abs + st.eps_rel * n_dual
            converged = (r_prim <= eps_p) & (r_dual <= eps_d)
            if st.polish and it % st.polish_every == 0:
                # slow instances: the active set is often right long before
                # the residuals are small; the KKT check below is exact
                converged[:] = True
            done = np.zeros(idx.size, dtype=bool)

            if np.any(converged):
                sub = np.flatnonzero(converged)
                ys, lams, res, pol = self._finish(sub, idx, x, z, y, g, l, u, ls, us, qs)
                ok = np.all(res <= st.kkt_tol, axis=1)
                good_sub = sub[ok]
                gi = idx[good_sub]
                out_y[gi] = ys[ok]
                out_lam[gi] = lams[ok]
                out_res[gi] = res[ok]
                out_pol[gi] = pol[ok]
                out_status[gi] = OPTIMAL
                out_iter[gi] = it
                done[good_sub] = True

            # primal infeasibility certificate
            if m:
                dy = y - y_prev
                dy_u = dy * E / c
                dnorm = np.abs(dy_u).max(axis=1, initial=0.0)
                Atdy = np.abs((dy @ self.As) / D).max(axis=1, initial=0.0) / c
                lb, ub = l[idx], u[idx]
                pos = np.maximum(dy_u, 0.0)
                neg = np.minimum(dy_u, 0.0)
                with np.errstate(invalid="ignore"):
                    supp = (np.where(pos > 0, ub, 0.0) * pos).sum(axis=1) + (np.where(neg < 0, lb, 0.0) * neg).sum(axis=1)
                supp = np.nan_to_num(supp, nan=np.inf, posinf=np.inf, neginf=-np.inf)
                tol = st.eps_prim_inf * dnorm
                cert = (dnorm > 0) & (Atdy <= tol) & (supp <= -tol) & ~done
                # stalled primal residual with a growing multiplier
                ynorm = np.abs(y).max(axis=1, initial=0.0)
                growing = (r_prim > st.stall_level) & (ynorm > ynorm_prev)
                stall = np.where(growing, stall + st.check_every, 0)
                ynorm_prev = ynorm
                stalled = (stall >= st.stall_window) & ~done
                bad = cert | stalled
                if np.any(bad):
                    bi = idx[bad]
                    out_status[bi] = INFEASIBLE
                    out_iter[bi] = it
                    out_y[bi] = x[bad] * D
                    d = dy_u[bad] / np.maximum(dnorm[bad], 1e-300)[:, None]
                    out_cert[bi] = d
                    out_res[bi] = np.stack([Atdy[bad] / np.maximum(dnorm[bad], 1e-300),
                                            supp[bad] / np.maximum(dnorm[bad], 1e-300),
                                            np.zeros(bad.sum()), np.zeros(bad.sum())], axis=1)
                    done |= bad

            # step-size adaptation
            if it % st.adapt_every == 0:
                Pn = np.maximum(np.abs(Px).max(axis=1, initial=0.0), np.maximum(np.abs(Aty).max(axis=1, initial=0.0), np.abs(qs[idx]).max(axis=1, initial=0.0)))
                pr = np.abs(Ax - z).max(axis=1, initial=0.0) / np.maximum(np.maximum(np.abs(Ax).max(axis=1, initial=0.0), np.abs(z).max(axis=1, initial=0.0)), 1e-10)
                du = np.abs(Px + qs[idx] + Aty).max(axis=1, initial=0.0) / np.maximum(Pn, 1e-10)
                ratio = np.sqrt(np.maximum(pr, 1e-12) / np.maximum(du, 1e-12))
                move = (ratio > st.adapt_ratio) | (ratio < 1.0 / st.adapt_ratio)
                new_j = np.array([self._ladder_index(self._ladder_value(j) * r) for j, r in zip(rho_j, ratio)])
                rho_j = np.where(move & ~done, new_j, rho_j)

            if np.any(done):
                keep = ~done
                idx, x, z, y, y_prev = idx[keep], x[keep], z[keep], y[keep], y_prev[keep]
                rho_j, stall, ynorm_prev = rho_j[keep], stall[keep], ynorm_prev[keep]

        if idx.size:
            ys, lams = x * D, y * E / c
            out_y[idx] = ys
            out_lam[idx] = lams
            out_res[idx] = kkt_residuals(self.H, g[idx], self.A, l[idx], u[idx], ys, lams)
            out_iter[idx] = it

        obj = 0.5 * np.einsum("bi,ij,bj->b", out_y, self.H, out_y) + np.einsum("bi,bi->b", g, out_y)
        return BatchSolution(out_y, obj, out_status, out_res, out_iter, out_lam, out_pol, out_cert)

    def _finish(self, sub, idx, x, z, y, g, l, u, ls, us, qs):
        """Polish converged iterates; fall back to the raw ADMM iterate."""
        gi = idx[sub]
        ys = x[sub] * self.D
        lams = y[sub] * self.E / self.c
        res = kkt_residuals(self.H, g[gi], self.A, l[gi], u[gi], ys, lams)
        pol = np.zeros(sub.size, dtype=bool)
        if not self.settings.polish:
            return ys, lams, res, pol
        py, plam = self._polish(z[sub], y[sub], ls[gi], us[gi], qs[gi])
        pres = kkt_residuals(self.H, g[gi], self.A, l[gi], u[gi], py, plam)
        better = np.all(pres <= self.settings.kkt_tol, axis=1) | (pres.max(axis=1) < res.max(axis=1))
        ys[better] = py[better]
        lams[better] = plam[better]
        res[better] = pres[better]
        pol[better] = True
        return ys, lams, res, pol

    def _polish(self, z, y, ls, us, qs):
        """Equality-constrained KKT solves on a guessed active set.

        The guess comes from the ADMM iterate; a few primal-dual active-set
        passes then drop rows with wrong-sign multipliers and add violated
        rows, which repairs guesses taken from a loosely converged iterate.
        """
        st = self.settings
        b, n = qs.shape
        eq = self.is_eq[None, :] | (ls == us)
        lower = ((z - ls < -y) | eq) & np.isfinite(ls)
        upper = (us - z < y) & ~lower & np.isfinite(us)
        xs = np.zeros((b, n))
        ys = np.zeros_like(y)
        todo = np.arange(b)
        tol_p = 1e-9 * (1.0 + np.abs(np.where(np.isfinite(us), us, 0.0)))
        for _ in range(st.polish_passes):
            if not todo.size:
                break
            px, py = self._kkt_solve(lower[todo], upper[todo], ls[todo], us[todo], qs[todo])
            xs[todo], ys[todo] = px, py
            r = px @ self.As.T
            lam_scale = 1e-9 * np.maximum(1.0, np.abs(py).max(axis=1, initial=0.0))[:, None]
            hi = r > us[todo] + tol_p[todo]
            lo = r < ls[todo] - tol_p[todo]
            wrong_u = upper[todo] & ~eq[todo] & (py < -lam_scale)
            wrong_l = lower[todo] & ~eq[todo] & (py > lam_scale)
            change = np.any(hi | lo | wrong_u | wrong_l, axis=1)
            upper[todo] = (upper[todo] & ~wrong_u) | hi
            lower[todo] = (lower[todo] & ~wrong_l) | lo
            todo = todo[change]
        return xs * self.D, ys * self.E / self.c

    def _kkt_solve(self, lower, upper, ls, us, qs):
        st = self.settings
        b, n = qs.shape
        active = lower | upper
        xs = np.zeros((b, n))
        ys = np.zeros((b, self.m))
        keys = np.packbits(active, axis=1) if self.m else np.zeros((b, 1), dtype=np.uint8)
        _, group = np.unique(keys, axis=0, return_inverse=True)
        group = np.asarray(group).ravel()
        for gid in np.unique(group):
            members = np.flatnonzero(group == gid)
            act = np.flatnonzero(active[members[0]])
            Aa = self.As[act]
            k = act.size
            K0 = np.block([[self.Hs, Aa.T], [Aa, np.zeros((k, k))]])
            Kd = K0 + np.diag(np.concatenate([np.full(n, st.polish_delta), np.full(k, -st.polish_delta)]))
            try:
                lu = scipy.linalg.lu_factor(Kd, check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                continue
            bnd = np.where(lower[members][:, act], ls[members][:, act], us[members][:, act])
            rhs = np.concatenate([-qs[members], bnd], axis=1).T
            sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
            for _ in range(st.polish_refine):
                sol += scipy.linalg.lu_solve(lu, rhs - K0 @ sol, check_finite=False)
            if not np.all(np.isfinite(sol)):
                continue
            xs[members] = sol[:n].T
            ys[members[:, None], act[None, :]] = sol[n:].T
        return xs, ys


def solve(qp, warm_start=None, settings=None):
    """Solve a single :class:`QuadraticProgram`.

    The returned ``multipliers`` are ordered as equalities then
    inequalities; inequality multipliers are nonnegative at optimality.
    """
    A, l, u, is_eq = qp.box_form()
    solver = AdmmSolver(qp.H, A, is_eq, settings)
    ws = None if warm_start is None else as_vector(warm_start, "warm_start", qp.n)[None, :]
    return solver.solve(qp.g[None, :], l[None, :], u[None, :], warm_start=ws)[0]
