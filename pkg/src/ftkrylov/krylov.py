"""Preconditioned conjugate-gradient variants with exact reduction accounting.

Four variants of PCG trade memory and local work against the number (and
overlap) of global reductions per iteration:

    variant             persistent vectors   reductions/iter     extra axpys
    classic                     4N               2                    -
    chronopoulos_gear           6N               1                   1N
    gropp                       6N               2 (overlapped)      2N
    pipelined                  10N               1 (overlapped)      5N

Every inner product is routed through the system view's fused multi-dot so
the counts are observable on the simulated communicator: the convergence
norm always piggybacks on an existing reduction (never a reduction of its
own), which is why single-reduction variants terminate one iteration after
the residual actually crosses the tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .commsim import fused_allreduce, halo_exchange, _infer_rank
from .errors import BreakdownError, DimensionMismatchError, DivergenceError
from .sparse import CsrMatrix, MultiVector, spmv

VARIANTS = ("classic", "chronopoulos_gear", "gropp", "pipelined")

_VARIANT_BUFFERS = {
    "classic": ("x", "r", "p", "q"),       # z shares q's storage
    "chronopoulos_gear": ("x", "r", "u", "w", "p", "q"),
    "gropp": ("x", "r", "u", "p", "s", "t"),  # t holds Ms and Au alternately
    "pipelined": ("x", "r", "p", "q", "z", "w", "s", "t", "u", "v"),
}

_REDUCTIONS_PER_ITER = {
    "classic": 2, "chronopoulos_gear": 1, "gropp": 2, "pipelined": 1,
}
_OVERLAPPED_PER_ITER = {
    "classic": 0, "chronopoulos_gear": 0, "gropp": 2, "pipelined": 1,
}
_EXTRA_OPS = {"classic": 0, "chronopoulos_gear": 1, "gropp": 2, "pipelined": 5}


def memory_accounting(variant: str) -> int:
    """Number of persistent length-N vectors held by the variant's state."""
    return len(_VARIANT_BUFFERS[_check_variant(variant)])


def reduction_rate(variant: str) -> int:
    return _REDUCTIONS_PER_ITER[_check_variant(variant)]


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


@dataclass
class SolverConfig:
    variant: str = "classic"
    tol: float = 1e-8
    maxit: int = 1000
    record_history: bool = True

    def __post_init__(self):
        _check_variant(self.variant)
        if not 0.0 < self.tol < 1.0:
            raise ValueError("tol must lie in (0, 1)")
        if self.maxit < 1:
            raise ValueError("maxit must be >= 1")


@dataclass
class KrylovState:
    """Recurrence vectors of a running solve; only the variant's own buffers
    are populated, so memory accounting is checkable from the state."""

    variant: str
    x: np.ndarray | None = None
    r: np.ndarray | None = None
    p: np.ndarray | None = None
    q: np.ndarray | None = None
    z: np.ndarray | None = None
    w: np.ndarray | None = None
    s: np.ndarray | None = None
    t: np.ndarray | None = None
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    rho: float = 0.0
    alpha: float = 0.0
    alpha_tilde: float = 0.0

    def vector_count(self) -> int:
        names = ("x", "r", "p", "q", "z", "w", "s", "t", "u", "v")
        return sum(getattr(self, n) is not None for n in names)


@dataclass
class ConvergenceRecord:
    """Per-iteration telemetry plus the per-variant accounting totals."""

    variant: str
    iterations: int = 0
    converged: bool = False
    initial_residual: float = float("nan")
    final_residual: float = float("nan")
    residual_norms: list = field(default_factory=list)
    reductions_cum: list = field(default_factory=list)
    overlapped_cum: list = field(default_factory=list)
    total_reductions: int = 0
    total_overlapped: int = 0
    vector_memory_units: int = 0
    extra_vector_ops_units: int = 0
    extra_columns: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        extras = sorted(self.extra_columns)
        header = "iteration,residual_norm,reductions_cum,overlapped_cum"
        if extras:
            header += "," + ",".join(extras)
        lines = [header]
        for i, rn in enumerate(self.residual_norms):
            row = [str(i + 1), f"{rn:.17g}",
                   str(self.reductions_cum[i]), str(self.overlapped_cum[i])]
            for name in extras:
                col = self.extra_columns[name]
                val = col[i] if i < len(col) else ""
                row.append(f"{val:.17g}" if isinstance(val, float) else str(val))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


class _ImmediateToken:
    """Stand-in token for serial (no-communicator) runs."""

    def __init__(self, values):
        self._values = values
        self._consumed = False

    def ready(self):
        return True

    def valid(self):
        return not self._consumed

    def wait(self):
        pass

    def get(self):
        self._consumed = True
        return self._values


class LocalSystem:
    """Single-address-space system view; optionally routes inner products
    through a (typically 1-rank) simulated communicator for counting."""

    def __init__(self, A: CsrMatrix, M=None, comm=None):
        if A.nrows != A.ncols:
            raise DimensionMismatchError("system matrix must be square")
        self.A = A
        self.M = M
        self.comm = comm
        self.n = A.nrows

    def apply_A(self, x):
        return spmv(self.A, x)

    def apply_M(self, x):
        if self.M is None:
            return x.copy()
        return self.M.apply(x)

    def fused_dots(self, pairs, overlapped=False):
        partials = [float(np.dot(u, v)) for u, v in pairs]
        if self.comm is None:
            return _ImmediateToken(partials)
        return fused_allreduce(self.comm, partials, overlapped=overlapped)

    def log_compute(self, label):
        if self.comm is not None:
            self.comm.world.log_compute(_infer_rank(self.comm, None), label)

    def poll_faults(self, iteration):
        if self.comm is not None:
            self.comm.world.poll_iteration_faults(
                _infer_rank(self.comm, None), iteration
            )


class RankSystem:
    """One rank's view of a strip-partitioned system: the operator acts on
    owned unknowns with a halo exchange, the preconditioner is block-local,
    and inner products are local partial sums completed by fused reductions."""

    def __init__(self, A_ff, A_fh, part, rank, comm, M=None):
        self.A_ff = A_ff
        self.A_fh = A_fh
        self.part = part
        self.rank = rank
        self.comm = comm
        self.M = M
        self.n = A_ff.nrows

    def apply_A(self, x):
        token = halo_exchange(self.comm, self.part, x, rank=self.rank)
        x_halo = token.get()
        y = spmv(self.A_ff, x)
        if self.A_fh.ncols:
            y = y + spmv(self.A_fh, x_halo)
        return y

    def apply_M(self, x):
        if self.M is None:
            return x.copy()
        return self.M.apply(x)

    def fused_dots(self, pairs, overlapped=False):
        partials = [float(np.dot(u, v)) for u, v in pairs]
        return fused_allreduce(self.comm, partials, overlapped=overlapped,
                               rank=self.rank)

    def log_compute(self, label):
        self.comm.world.log_compute(self.rank, label)

    def poll_faults(self, iteration):
        self.comm.world.poll_iteration_faults(self.rank, iteration)


def solve(system, b, cfg: SolverConfig, x0=None, callback=None):
    """Run the configured PCG variant; returns (x, ConvergenceRecord).

    ``system`` is a LocalSystem/RankSystem (or a bare CsrMatrix, wrapped
    without a preconditioner).  ``callback(iteration, state, record)`` fires
    after every completed iteration; exceptions it raises propagate.
    """
    if isinstance(system, CsrMatrix):
        system = LocalSystem(system)
    b = np.asarray(b, dtype=np.float64)
    if len(b) != system.n:
        raise DimensionMismatchError("right-hand side length mismatch")
    solver = _SOLVERS[cfg.variant]
    return solver(system, b, cfg, x0, callback)


class _Run:
    """Shared bookkeeping for one solve: counters and the telemetry record."""

    def __init__(self, system, cfg):
        self.system = system
        self.cfg = cfg
        self.red = 0
        self.ovl = 0
        self.record = ConvergenceRecord(
            variant=cfg.variant,
            vector_memory_units=memory_accounting(cfg.variant),
            extra_vector_ops_units=_EXTRA_OPS[cfg.variant],
        )

    def fused(self, pairs, overlapped=False):
        self.red += 1
        if overlapped:
            self.ovl += 1
        return self.system.fused_dots(pairs, overlapped=overlapped)

    def note(self, norm):
        if not math.isfinite(norm):
            raise DivergenceError("non-finite residual norm")
        if self.cfg.record_history:
            self.record.residual_norms.append(norm)
            self.record.reductions_cum.append(self.red)
            self.record.overlapped_cum.append(self.ovl)

    def finish(self, x, norm, iterations, converged):
        self.record.iterations = iterations
        self.record.converged = converged
        self.record.final_residual = norm
        self.record.total_reductions = self.red
        self.record.total_overlapped = self.ovl
        return x, self.record


def _check_finite(*scalars):
    for s in scalars:
        if not math.isfinite(s):
            raise DivergenceError("non-finite value in solver recurrence")


def _initial(system, b, x0):
    if x0 is None:
        return np.zeros(system.n), b.copy()
    x = np.array(x0, dtype=np.float64, copy=True)
    return x, b - system.apply_A(x)


def _solve_classic(system, b, cfg, x0, callback):
    run = _Run(system, cfg)
    st = KrylovState("classic")
    st.x, st.r = _initial(system, b, x0)
    p = system.apply_M(st.r)
    st.p = p
    norm0 = None
    norm = float("inf")
    rho = 0.0
    it = 0
    while it < cfg.maxit:
        if norm0 is not None and norm <= cfg.tol * norm0:
            break
        it += 1
        st.q = system.apply_A(st.p)
        if it == 1:
            delta, rho, rr0 = run.fused(
                [(st.p, st.q), (st.p, st.r), (st.r, st.r)]
            ).get()
            norm0 = math.sqrt(rr0)
            run.record.initial_residual = norm0
            if norm0 == 0.0:
                return run.finish(st.x, 0.0, it, True)
        else:
            (delta,) = run.fused([(st.p, st.q)]).get()
        _check_finite(delta, rho)
        if delta <= 0.0:
            if rho == 0.0:
                return run.finish(st.x, norm if it > 1 else norm0, it, True)
            raise BreakdownError(f"indefinite curvature <p,Ap> = {delta}")
        lam = rho / delta
        st.x = st.x + lam * st.p
        st.r = st.r - lam * st.q
        st.q = system.apply_M(st.r)        # z reuses q's slot
        rho_new, rr = run.fused([(st.q, st.r), (st.r, st.r)]).get()
        _check_finite(rho_new, rr)
        norm = math.sqrt(rr)
        run.note(norm)
        st.p = st.q + (rho_new / rho) * st.p
        st.rho, st.alpha = rho_new, delta
        rho = rho_new
        if callback is not None:
            callback(it, st, run.record)
    converged = norm0 is not None and norm <= cfg.tol * norm0
    return run.finish(st.x, norm, it, converged)


def _solve_chronopoulos_gear(system, b, cfg, x0, callback):
    run = _Run(system, cfg)
    st = KrylovState("chronopoulos_gear")
    st.x, st.r = _initial(system, b, x0)
    st.u = system.apply_M(st.r)
    st.w = system.apply_A(st.u)
    norm0 = None
    gamma_prev = alpha = 0.0
    norm = float("inf")
    converged = False
    it = 0
    while it < cfg.maxit:
        it += 1
        gamma, delta, rr = run.fused(
            [(st.r, st.u), (st.w, st.u), (st.r, st.r)]
        ).get()
        _check_finite(gamma, delta, rr)
        norm = math.sqrt(rr)              # this is ||r_{it-1}||
        if it == 1:
            norm0 = norm
            run.record.initial_residual = norm0
            if norm0 == 0.0:
                return run.finish(st.x, 0.0, it, True)
            beta = 0.0
            denom = delta
        else:
            run.note(norm)
            if norm <= cfg.tol * norm0:
                converged = True
                break
            beta = gamma / gamma_prev
            denom = delta - beta * gamma / alpha
        if denom <= 0.0:
            if gamma == 0.0:
                return run.finish(st.x, norm, it, True)
            raise BreakdownError(f"indefinite curvature estimate {denom}")
        alpha = gamma / denom
        if it == 1:
            st.p = st.u.copy()
            st.q = st.w.copy()
        else:
            st.p = st.u + beta * st.p
            st.q = st.w + beta * st.q
        st.x = st.x + alpha * st.p
        st.r = st.r - alpha * st.q
        st.u = system.apply_M(st.r)
        st.w = system.apply_A(st.u)
        st.rho, st.alpha = gamma, alpha
        gamma_prev = gamma
        if callback is not None:
            callback(it, st, run.record)
    return run.finish(st.x, norm, it, converged)


def _solve_gropp(system, b, cfg, x0, callback):
    run = _Run(system, cfg)
    st = KrylovState("gropp")
    st.x, st.r = _initial(system, b, x0)
    st.u = system.apply_M(st.r)
    st.p = st.u.copy()
    st.s = system.apply_A(st.p)
    norm0 = None
    gamma = 0.0
    norm = float("inf")
    it = 0
    while it < cfg.maxit:
        if norm0 is not None and norm <= cfg.tol * norm0:
            break
        it += 1
        if it == 1:
            tok = run.fused(
                [(st.p, st.s), (st.r, st.u), (st.r, st.r)], overlapped=True
            )
        else:
            tok = run.fused([(st.p, st.s)], overlapped=True)
        system.log_compute("M")
        st.t = system.apply_M(st.s)        # overlaps the first reduction
        vals = tok.get()
        if it == 1:
            delta, gamma, rr0 = vals
            norm0 = math.sqrt(rr0)
            run.record.initial_residual = norm0
            if norm0 == 0.0:
                return run.finish(st.x, 0.0, it, True)
        else:
            delta = vals[0]
        _check_finite(delta, gamma)
        if delta <= 0.0:
            if gamma == 0.0:
                return run.finish(st.x, norm if it > 1 else norm0, it, True)
            raise BreakdownError(f"indefinite curvature <p,Ap> = {delta}")
        lam = gamma / delta
        st.x = st.x + lam * st.p
        st.r = st.r - lam * st.s
        st.u = st.u - lam * st.t
        tok = run.fused([(st.r, st.u), (st.r, st.r)], overlapped=True)
        system.log_compute("A")
        st.t = system.apply_A(st.u)        # overlaps the second reduction
        gamma_new, rr = tok.get()
        _check_finite(gamma_new, rr)
        norm = math.sqrt(rr)
        run.note(norm)
        beta = gamma_new / gamma
        st.p = st.u + beta * st.p
        st.s = st.t + beta * st.s
        st.rho, st.alpha = gamma_new, delta
        gamma = gamma_new
        if callback is not None:
            callback(it, st, run.record)
    converged = norm0 is not None and norm <= cfg.tol * norm0
    return run.finish(st.x, norm, it, converged)


def _solve_pipelined(system, b, cfg, x0, callback):
    run = _Run(system, cfg)
    st = KrylovState("pipelined")
    st.x, st.r = _initial(system, b, x0)
    st.p = system.apply_M(st.r)
    st.q = system.apply_A(st.p)
    tok = run.fused(
        [(st.p, st.r), (st.p, st.q), (st.r, st.r)], overlapped=True
    )
    system.log_compute("M")
    st.s = system.apply_M(st.q)
    system.log_compute("A")
    st.t = system.apply_A(st.s)
    st.z = st.p.copy()
    st.w = st.q.copy()
    norm0 = None
    rho_prev = alpha_prev = 0.0
    norm = float("inf")
    converged = False
    it = 0
    while it < cfg.maxit:
        it += 1
        rho, alpha_tilde, rr = tok.get()
        _check_finite(rho, alpha_tilde, rr)
        norm = math.sqrt(rr)               # this is ||r_{it-1}||
        if it == 1:
            norm0 = norm
            run.record.initial_residual = norm0
            if norm0 == 0.0:
                return run.finish(st.x, 0.0, it, True)
            alpha = alpha_tilde
        else:
            run.note(norm)
            if norm <= cfg.tol * norm0:
                converged = True
                break
            # alpha tracks <p, Ap> through the rho recurrence; the recombined
            # direction loses alpha_prev*(rho/rho_prev)^2 of curvature.
            ratio = rho / rho_prev
            alpha = alpha_tilde - alpha_prev * ratio * ratio
            st.p = st.z + ratio * st.p
            st.q = st.w + ratio * st.q
            st.s = st.v + ratio * st.s
            st.t = st.u + ratio * st.t
        if alpha <= 0.0:
            if rho == 0.0:
                return run.finish(st.x, norm, it, True)
            raise BreakdownError(f"indefinite curvature estimate {alpha}")
        lam = rho / alpha
        st.x = st.x + lam * st.p
        st.r = st.r - lam * st.q
        st.z = st.z - lam * st.s
        st.w = st.w - lam * st.t
        tok = run.fused(
            [(st.z, st.r), (st.z, st.w), (st.r, st.r)], overlapped=True
        )
        system.log_compute("M")
        st.v = system.apply_M(st.w)
        system.log_compute("A")
        st.u = system.apply_A(st.v)
        st.rho, st.alpha, st.alpha_tilde = rho, alpha, alpha_tilde
        rho_prev, alpha_prev = rho, alpha
        if callback is not None:
            callback(it, st, run.record)
    if not converged and tok.valid():
        tok.get()                          # drain the in-flight reduction
    return run.finish(st.x, norm, it, converged)


_SOLVERS = {
    "classic": _solve_classic,
    "chronopoulos_gear": _solve_chronopoulos_gear,
    "gropp": _solve_gropp,
    "pipelined": _solve_pipelined,
}


def pipelined_consistency_check(state: KrylovState, A: CsrMatrix, M=None):
    """Maximum relative drift of the pipelined recurrences z = M r, w = A z
    against fresh recomputation; large drift flags silent data corruption."""
    if state.variant != "pipelined":
        raise ValueError("consistency check applies to the pipelined variant")
    z_ref = M.apply(state.r) if M is not None else state.r.copy()
    w_ref = spmv(A, state.z)
    drift = 0.0
    for have, want in ((state.z, z_ref), (state.w, w_ref)):
        scale = max(float(np.linalg.norm(want)), 1e-300)
        drift = max(drift, float(np.linalg.norm(have - want)) / scale)
    return drift


def block_solve(A, B: MultiVector, M, cfg: SolverConfig,
                gram_mode: str = "full", block_size: int | None = None,
                comm=None):
    """Block CG over k right-hand sides with a sparsified Gram matrix.

    ``diagonal`` mode decouples into k independent scalar CG recurrences;
    ``full`` couples all search directions; ``block_diagonal`` couples within
    blocks of ``block_size`` columns.  Columns that reach the tolerance are
    frozen: their entries are never touched again.
    Returns (X, list of per-column ConvergenceRecords).
    """
    if gram_mode not in ("full", "block_diagonal", "diagonal"):
        raise ValueError(f"unknown gram mode {gram_mode!r}")
    if gram_mode == "block_diagonal":
        if block_size is None or block_size <= 0 or B.k % block_size != 0:
            raise DimensionMismatchError(
                f"block size {block_size} does not divide k={B.k}"
            )
    n, k = B.n, B.k
    if A.nrows != n:
        raise DimensionMismatchError("block_solve: shape mismatch")

    def apply_M_cols(V):
        if M is None:
            return V.copy()
        out = np.empty_like(V)
        for j in range(V.shape[1]):
            out[:, j] = M.apply(V[:, j])
        return out

    def blocks_of(cols):
        """Coupling groups (as global column index arrays) among ``cols``."""
        cols = np.asarray(cols)
        if gram_mode == "full":
            return [cols] if len(cols) else []
        if gram_mode == "diagonal":
            return [np.array([j]) for j in cols]
        out = []
        for s in range(0, k, block_size):
            grp = cols[(cols >= s) & (cols < s + block_size)]
            if len(grp):
                out.append(grp)
        return out

    def allreduce_scalars(vals):
        if comm is None or not len(vals):
            return vals
        return np.asarray(fused_allreduce(comm, list(vals)).get())

    def pseudo_solve(G, rhs, grp):
        """Solve G y = rhs with symmetric rank-revealing regularization.

        Exactly dependent right-hand sides make the Gram blocks singular
        without being a true breakdown; directions with (numerically) zero
        curvature are projected out instead of poisoning the step.
        """
        Gs = 0.5 * (G + G.T)
        evals, evecs = np.linalg.eigh(Gs)
        cut = len(G) * np.finfo(np.float64).eps * max(float(np.abs(evals).max()), 1e-300)
        if float(evals.max()) <= cut:
            raise BreakdownError(
                f"singular Gram block for columns {list(map(int, grp))}"
            )
        keep = np.abs(evals) > cut
        inv = np.zeros_like(evals)
        inv[keep] = 1.0 / evals[keep]
        return evecs @ (inv[:, None] * (evecs.T @ rhs))

    X = np.zeros((n, k))
    R = B.values.copy()
    Z = apply_M_cols(R)
    P = Z.copy()
    norms0 = np.sqrt(allreduce_scalars(np.einsum("ij,ij->j", R, R)))
    records = [ConvergenceRecord(variant="classic",
                                 vector_memory_units=4,
                                 initial_residual=float(norms0[j]))
               for j in range(k)]
    active = [j for j in range(k) if norms0[j] > 0.0]
    for j in range(k):
        if norms0[j] == 0.0:
            records[j].converged = True
            records[j].final_residual = 0.0
    sigma_old = np.zeros((k, k))           # sparsified Z^T R of the last step
    it = 0
    while active and it < cfg.maxit:
        it += 1
        act = np.array(sorted(active))
        for grp in blocks_of(act):
            Pg = P[:, grp]
            Qg = np.empty((n, len(grp)))
            for jj, j in enumerate(grp):
                Qg[:, jj] = spmv(A, P[:, j])
            Sg = Z[:, grp].T @ R[:, grp]
            sigma_old[np.ix_(grp, grp)] = Sg
            if len(grp) == 1:
                delta = (Pg.T @ Qg).item()
                s = Sg.item()
                if delta <= 0.0:
                    if s == 0.0:
                        continue           # exactly converged direction
                    raise BreakdownError(
                        f"singular Gram block for columns {list(map(int, grp))}"
                    )
                alpha = np.array([[s / delta]])
            else:
                alpha = pseudo_solve(Pg.T @ Qg, Sg, grp)
            X[:, grp] += Pg @ alpha
            R[:, grp] -= Qg @ alpha
        Z[:, act] = apply_M_cols(R[:, act])
        rr = allreduce_scalars(np.einsum("ij,ij->j", R[:, act], R[:, act]))
        done = []
        for jj, j in enumerate(act):
            norm = float(np.sqrt(rr[jj]))
            rec = records[j]
            if cfg.record_history:
                rec.residual_norms.append(norm)
                rec.reductions_cum.append(2 * it)
                rec.overlapped_cum.append(0)
            rec.iterations = it
            rec.final_residual = norm
            if norm <= cfg.tol * norms0[j]:
                rec.converged = True
                done.append(j)
        for j in done:
            active.remove(j)
        act = np.array(sorted(active))
        if not len(act):
            break
        for grp in blocks_of(act):
            Sg_new = Z[:, grp].T @ R[:, grp]
            Sg_old = sigma_old[np.ix_(grp, grp)]
            if len(grp) == 1:
                so = Sg_old.item()
                beta = Sg_new.item() / so if so != 0.0 else 0.0
                P[:, grp] = Z[:, grp] + beta * P[:, grp]
            else:
                beta = pseudo_solve(Sg_old, Sg_new, grp)
                P[:, grp] = Z[:, grp] + P[:, grp] @ beta
    return MultiVector(X), records
