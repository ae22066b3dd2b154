"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Every numeric oracle here is either derived independently inside the test
(dense linear algebra on small problems) or frozen from a hand-checked run
of such an oracle.  Each criterion prints exactly one line of the form

    criterion  N [PASS] <title> (<seconds>s)

and enforces its runtime budget.
"""

import time

import numpy as np
import pytest

import ftkrylov as fk
from ftkrylov.precond import DenseSolvePreconditioner


class criterion:
    """Context manager printing the single pass/fail line per criterion."""

    def __init__(self, num, title, budget):
        self.num, self.title, self.budget = num, title, budget

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, et, ev, tb):
        dt = time.perf_counter() - self.t0
        status = "PASS" if et is None else "FAIL"
        print(f"\ncriterion {self.num:2d} [{status}] {self.title} ({dt:.2f}s)")
        if et is None:
            assert dt < self.budget, (
                f"criterion {self.num} exceeded budget: {dt:.2f}s >= "
                f"{self.budget}s"
            )
        return False


# -- shared scenario pieces (the 16-rank anisotropic standard) ---------

GRID = fk.StructuredGrid(32, 32)
ANISO = fk.Anisotropy(1.0, 0.01)
RANKS = 16
CFG = fk.SolverConfig(variant="classic", tol=1e-8, maxit=400)
FAULT_FREE_ITERATIONS = 12   # frozen from a dense-oracle-checked run
FAULT_ITERATION = 9          # 80% of the fault-free count, rounded down


def make_block_exact(A_ff):
    return DenseSolvePreconditioner(A_ff)


def run_standard(policy, codec, plans):
    return fk.run_scenario(GRID, ANISO, RANKS, CFG, policy, codec,
                           make_block_exact, plans)


def distributed_program(A, b, part, cfg):
    """Plain (non-resilient) distributed solve body for one rank."""
    def program(ctx):
        rank = ctx.rank
        A_ff, A_fh = fk.extract_local_system(A, part, rank)
        system = fk.RankSystem(A_ff, A_fh, part, rank, ctx.comm,
                               fk.jacobi(A_ff))
        x, rec = fk.solve(system, b[part.owned[rank]], cfg)
        return x, rec
    return program


# -- criteria ----------------------------------------------------------

def test_criterion_01_reduction_accounting():
    with criterion(1, "reduction accounting", 1.0):
        grid = fk.StructuredGrid(16, 16)
        A = fk.assemble_poisson(grid, fk.Anisotropy(1.0, 0.01))
        b = fk.make_rhs(grid, A, "ones")
        part = fk.partition_1d_strips(grid, 4)
        rates = {"classic": 2, "chronopoulos_gear": 1, "gropp": 2,
                 "pipelined": 1}
        for variant in fk.VARIANTS:
            cfg = fk.SolverConfig(variant=variant, tol=1e-8, maxit=500)
            world = fk.SimWorld(4)
            outcomes, log = fk.run_simulation(
                world, distributed_program(A, b, part, cfg))
            recs = [outcomes[r][1][1] for r in range(4)]
            iters = recs[0].iterations
            assert all(r.iterations == iters for r in recs)
            assert world.reduction_count == rates[variant] * iters, variant
            assert recs[0].total_reductions == rates[variant] * iters
            issues = [ev for ev in log if ev["kind"] == "reduce_issue"]
            if variant in ("gropp", "pipelined"):
                assert issues and all(ev["payload"]["overlapped"]
                                      for ev in issues), variant
            # single-rank identity-preconditioner runs obey the same law
            Asmall = fk.assemble_poisson(fk.StructuredGrid(8, 8))
            bsmall = fk.make_rhs(fk.StructuredGrid(8, 8), Asmall, "ones")
            _, rec = fk.solve(fk.LocalSystem(Asmall), bsmall, cfg)
            assert rec.total_reductions == rates[variant] * rec.iterations


def test_criterion_02_memory_accounting():
    with criterion(2, "memory accounting", 1.0):
        units = {"classic": 4, "chronopoulos_gear": 6, "gropp": 6,
                 "pipelined": 10}
        grid = fk.StructuredGrid(8, 8)
        A = fk.assemble_poisson(grid)
        b = fk.make_rhs(grid, A, "ones")
        for variant, expected in units.items():
            assert fk.memory_accounting(variant) == expected
            counts = []
            cfg = fk.SolverConfig(variant=variant, tol=1e-8, maxit=100)
            fk.solve(fk.LocalSystem(A, fk.jacobi(A)), b, cfg,
                     callback=lambda it, st, rec:
                         counts.append(st.vector_count()))
            assert counts and max(counts) == expected, variant


def test_criterion_03_variant_equivalence():
    with criterion(3, "variant equivalence over 30 iterations", 5.0):
        grid = fk.StructuredGrid(64, 64)
        A = fk.assemble_poisson(grid)            # isotropic Laplacian
        b = fk.make_rhs(grid, A, "ones")
        M = fk.jacobi(A)
        histories = {}
        for variant in fk.VARIANTS:
            cfg = fk.SolverConfig(variant=variant, tol=1e-12, maxit=40)
            _, rec = fk.solve(fk.LocalSystem(A, M), b, cfg)
            histories[variant] = np.asarray(rec.residual_norms[:30])
        oracle = histories["classic"]
        assert len(oracle) == 30
        for variant in ("chronopoulos_gear", "gropp", "pipelined"):
            h = histories[variant]
            assert len(h) == 30, variant
            rel = np.max(np.abs(h - oracle) / oracle)
            assert rel < 1e-6, f"{variant}: rel drift {rel:.2e}"


def test_criterion_04_block_diagonal_equals_scalar():
    with criterion(4, "block-CG diagonal mode == k scalar solves", 5.0):
        grid = fk.StructuredGrid(32, 32)
        A = fk.assemble_poisson(grid)
        rng = np.random.default_rng(7)
        B = fk.MultiVector(rng.standard_normal((grid.n, 4)))
        M = fk.jacobi(A)
        cfg = fk.SolverConfig(variant="classic", tol=1e-10, maxit=400)
        X, recs = fk.block_solve(A, B, M, cfg, gram_mode="diagonal")
        for j in range(4):
            xj, rec_j = fk.solve(fk.LocalSystem(A, M), B.column(j), cfg)
            a = np.asarray(recs[j].residual_norms)
            o = np.asarray(rec_j.residual_norms)
            m = min(len(a), len(o))
            rel = np.max(np.abs(a[:m] - o[:m]) / o[:m])
            assert rel < 1e-10, f"column {j}: rel drift {rel:.2e}"
            assert abs(len(a) - len(o)) <= 1


def test_criterion_05_spai1_optimality():
    with criterion(5, "SPAI-1 least-squares optimality", 5.0):
        for nx, ny in ((10, 10), (32, 32)):
            grid = fk.StructuredGrid(nx, ny)
            A = fk.assemble_poisson(grid)
            M = fk.spai1(A)
            dense = A.to_dense()
            Mdense = M.to_dense()
            n = grid.n
            for j in range(n):
                pattern = np.nonzero(dense[:, j])[0]
                e_j = np.zeros(n)
                e_j[j] = 1.0
                m_opt, *_ = np.linalg.lstsq(dense[:, pattern], e_j,
                                            rcond=None)
                r_opt = np.linalg.norm(dense[:, pattern] @ m_opt - e_j)
                r_got = np.linalg.norm(dense @ Mdense[:, j] - e_j)
                assert abs(r_got - r_opt) < 1e-10, f"column {j}"
                off_pattern = np.delete(Mdense[:, j], pattern)
                assert not off_pattern.any() or \
                    np.max(np.abs(off_pattern)) == 0.0


def test_criterion_06_sainv_biconjugation():
    with criterion(6, "SAINV biconjugation and preconditioning", 10.0):
        rng = np.random.default_rng(11)
        Bm = rng.standard_normal((50, 50))
        Ad = Bm @ Bm.T + 50.0 * np.eye(50)
        A = fk.CsrMatrix.from_dense(Ad)
        factors = fk.sainv(A, fk.SainvConfig(eps=0.0))
        Z = factors.Z.to_dense()
        G = Z.T @ Ad @ Z
        off = np.max(np.abs(G - np.diag(np.diag(G))))
        assert off <= 1e-8 * np.max(np.abs(Ad)), f"off-diag {off:.2e}"
        assert np.allclose(np.diag(G), factors.D)

        grid = fk.StructuredGrid(32, 32)
        Aa = fk.assemble_poisson(grid, fk.Anisotropy(1.0, 0.01))
        b = fk.make_rhs(grid, Aa, "ones")
        cfg = fk.SolverConfig(variant="classic", tol=1e-8, maxit=2000)
        Ms = fk.SainvPreconditioner(
            fk.sainv(Aa, fk.SainvConfig(eps=1e-3, omega=2.0)))
        _, rec_pre = fk.solve(fk.LocalSystem(Aa, Ms), b, cfg)
        _, rec_cg = fk.solve(fk.LocalSystem(Aa), b, cfg)
        assert rec_pre.converged and rec_cg.converged
        assert rec_pre.iterations < rec_cg.iterations


def test_criterion_07_codec_bound():
    with criterion(7, "codec round-trip bound and compression", 10.0):
        rng = np.random.default_rng(23)
        t = np.linspace(0.0, 1.0, 256)
        for tau in (1e-2, 1e-4, 1e-7):
            bounded = fk.Codec("accuracy_bounded", tau=tau)
            adaptive = fk.Codec("adaptive_accuracy", c=1.0)
            smooth_rates = []
            for trial in range(1000):
                if trial % 2:
                    x = rng.standard_normal(64) * 10.0 ** rng.integers(-3, 4)
                else:
                    a, ph = rng.standard_normal(2)
                    x = a * np.sin(2.0 * np.pi * (t + ph))
                    smooth = True
                for codec in (bounded, adaptive):
                    snap = fk.encode(codec, x, residual_norm=tau)
                    err = np.max(np.abs(fk.decode(snap) - x))
                    assert err <= tau, f"tau={tau}: err {err:.2e}"
                    if trial % 2 == 0:
                        smooth_rates.append(snap.compression_rate)
            assert np.mean(smooth_rates) > 1.0, f"tau={tau}"


def test_criterion_08_fault_recovery_scenario():
    with criterion(8, "fault/recovery iteration and aux-iteration laws", 30.0):
        clean = run_standard(fk.RecoveryPolicy(strategy="local_restore"),
                             fk.Codec("zero"), ())
        assert clean.outcome == "converged"
        assert clean.record.iterations == FAULT_FREE_ITERATIONS
        plans = [fk.FaultPlan(victim=5, kind="hard",
                              iteration=FAULT_ITERATION)]

        # (a) adaptive codec + local_restore: at most 3 extra iterations
        res_a = run_standard(fk.RecoveryPolicy(strategy="local_restore"),
                             fk.Codec("adaptive_accuracy"), plans)
        assert res_a.outcome == "recovered-converged"
        assert res_a.record.iterations - FAULT_FREE_ITERATIONS <= 3

        # (b) zero backup needs strictly more auxiliary-smoothing work
        def aux_iterations(codec):
            res = run_standard(
                fk.RecoveryPolicy(strategy="local_auxiliary"), codec, plans)
            assert res.outcome == "recovered-converged"
            aux = [e["iterations"] for e in res.events
                   if e["kind"] == "aux_solve"]
            assert len(aux) == 1
            return aux[0], res.record.iterations

        zero_aux, _ = aux_iterations(fk.Codec("zero"))
        compressed = [fk.Codec("adaptive_accuracy"),
                      fk.Codec("accuracy_bounded", tau=1e-2),
                      fk.Codec("accuracy_bounded", tau=1e-4),
                      fk.Codec("accuracy_bounded", tau=1e-7)]
        compressed_aux = [aux_iterations(c) for c in compressed]
        assert all(zero_aux > a for a, _ in compressed_aux), (
            zero_aux, compressed_aux)

        # (c) overhead monotone non-increasing in backup accuracy
        overhead = [tot - FAULT_FREE_ITERATIONS
                    for _, tot in compressed_aux[1:]]   # tau 1e-2,1e-4,1e-7
        assert overhead == sorted(overhead, reverse=True), overhead


def test_criterion_09_exception_liveness():
    with criterion(9, "exception-propagation liveness, 20 fault plans", 60.0):
        plans = []
        for victim in (0, 3, 5, 8, 12, 15):
            plans.append([fk.FaultPlan(victim=victim, kind="hard",
                                       iteration=FAULT_ITERATION)])
        for victim, it in ((1, 2), (6, 5), (14, 11)):
            plans.append([fk.FaultPlan(victim=victim, kind="soft",
                                       iteration=it)])
        for victim, ss in ((2, 4), (9, 18), (13, 40)):
            plans.append([fk.FaultPlan(victim=victim, kind="hard",
                                       superstep=ss)])
        for victim, ss in ((4, 7), (10, 25), (15, 30)):
            plans.append([fk.FaultPlan(victim=victim, kind="soft",
                                       superstep=ss)])
        plans.append([fk.FaultPlan(victim=3, kind="soft", iteration=4),
                      fk.FaultPlan(victim=11, kind="soft", iteration=4)])
        plans.append([fk.FaultPlan(victim=0, kind="hard", iteration=2),
                      fk.FaultPlan(victim=8, kind="hard", iteration=2)])
        plans.append([fk.FaultPlan(victim=7, kind="soft", superstep=9),
                      fk.FaultPlan(victim=7, kind="hard", iteration=10)])
        plans.append([fk.FaultPlan(victim=5, kind="soft", iteration=3),
                      fk.FaultPlan(victim=5, kind="soft", iteration=7)])
        plans.append([fk.FaultPlan(victim=12, kind="hard", superstep=1)])
        plans.append([fk.FaultPlan(victim=1, kind="soft", superstep=2)])
        assert len(plans) >= 20

        for batch in plans:
            res = run_standard(
                fk.RecoveryPolicy(strategy="local_restore"),
                fk.Codec("accuracy_bounded", tau=1e-4), batch)
            assert res.outcome in ("converged", "recovered-converged",
                                   "failed"), res.outcome
            if all(p.kind == "soft" for p in batch):
                victims = {p.victim for p in batch}
                n_faults = max(len({p.superstep or p.iteration
                                    for p in batch if p.victim == v})
                               for v in victims)
                assert res.outcome == "recovered-converged"
                for r, payload in res.rank_results.items():
                    if r not in victims:
                        assert payload["on_exception_runs"] == n_faults, (
                            f"rank {r} ran its exception path "
                            f"{payload['on_exception_runs']}x"
                        )


def test_criterion_10_hook_transparency():
    with criterion(10, "resilient path is bitwise hook-transparent", 5.0):
        A = fk.assemble_poisson(GRID, ANISO)
        b = fk.make_rhs(GRID, A, "ones")
        part = fk.partition_1d_strips(GRID, RANKS)
        world = fk.SimWorld(RANKS)

        def bare(ctx):
            rank = ctx.rank
            A_ff, A_fh = fk.extract_local_system(A, part, rank)
            system = fk.RankSystem(A_ff, A_fh, part, rank, ctx.comm,
                                   make_block_exact(A_ff))
            return fk.solve(system, b[part.owned[rank]], CFG)

        outcomes, _ = fk.run_simulation(world, bare)
        x_bare = np.empty(GRID.n)
        for r in range(RANKS):
            x_bare[part.owned[r]] = outcomes[r][1][0]

        res = run_standard(fk.RecoveryPolicy(strategy="local_restore"),
                           fk.Codec("accuracy_bounded", tau=1e-4), ())
        assert res.outcome == "converged"
        assert res.x.tobytes() == x_bare.tobytes()


def test_criterion_11_determinism():
    with criterion(11, "byte-identical reruns", 60.0):
        plans = [fk.FaultPlan(victim=5, kind="hard",
                              iteration=FAULT_ITERATION)]

        def artifacts():
            res = run_standard(
                fk.RecoveryPolicy(strategy="local_auxiliary"),
                fk.Codec("adaptive_accuracy"), plans)
            return (res.x.tobytes(), res.record.to_csv().encode(),
                    res.resilience_log_jsonl().encode(),
                    res.world.event_log_jsonl().encode())

        first, second = artifacts(), artifacts()
        for a, b_ in zip(first, second):
            assert a == b_

        grid = fk.StructuredGrid(24, 24)
        A = fk.assemble_poisson(grid, fk.Anisotropy(1.0, 0.01))
        b = fk.make_rhs(grid, A, "random", seed=3)
        part = fk.partition_1d_strips(grid, 6)
        for variant in fk.VARIANTS:
            cfg = fk.SolverConfig(variant=variant, tol=1e-9, maxit=600)
            outs = []
            for _ in range(2):
                world = fk.SimWorld(6)
                outcomes, _ = fk.run_simulation(
                    world, distributed_program(A, b, part, cfg))
                x = np.empty(grid.n)
                for r in range(6):
                    x[part.owned[r]] = outcomes[r][1][0]
                outs.append((x.tobytes(),
                             outcomes[0][1][1].to_csv().encode(),
                             world.event_log_jsonl().encode()))
            assert outs[0] == outs[1], variant
