"""Experiment driver CLI.

Subcommands build model problems and run solver / fault-injection scenarios
from a strict JSON config, emitting byte-reproducible artifacts (Matrix
Market files, CSV convergence histories, JSON-lines logs, summary JSON).
Wall-clock timing goes to stderr only, so output files stay deterministic.

Exit codes: 0 converged, 2 recovered-converged, 3 breakdown/failure,
4 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .commsim import FaultPlan, SimWorld, run_simulation
from .errors import ConfigError, FtkError
from .grids import (Anisotropy, StructuredGrid, assemble_poisson, make_rhs,
                    partition_1d_strips, extract_local_system)
from .krylov import (LocalSystem, RankSystem, SolverConfig, block_solve,
                     memory_accounting, solve)
from .precond import (DenseSolvePreconditioner, build_hierarchy, ilu0, jacobi,
                      sainv, SainvConfig, SainvPreconditioner, spai1,
                      SparseMatrixPreconditioner, ssor)
from .resilience import Codec, RecoveryPolicy, run_scenario
from .sparse import MultiVector, write_matrix_market, write_vector

EXIT_CONVERGED = 0
EXIT_RECOVERED = 2
EXIT_FAILED = 3
EXIT_CONFIG = 4


# -- strict config schema ---------------------------------------------

def _section(cfg, name, allowed, required=()):
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    missing = set(required) - set(sec)
    if missing:
        raise ConfigError(f"missing keys in {name!r}: {sorted(missing)}")
    return sec


class ExperimentConfig:
    """Validated experiment description parsed from strict JSON."""

    TOP_KEYS = ("problem", "partition", "solver", "preconditioner", "block",
                "resilience", "output")

    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        unknown = set(raw) - set(self.TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        prob = _section(raw, "problem",
                        ("nx", "ny", "h", "eps_x", "eps_y", "rhs", "seed"))
        try:
            self.grid = StructuredGrid(int(prob.get("nx", 32)),
                                       int(prob.get("ny", 32)),
                                       float(prob.get("h", 1.0)))
            self.aniso = Anisotropy(float(prob.get("eps_x", 1.0)),
                                    float(prob.get("eps_y", 1.0)))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.rhs_mode = prob.get("rhs", "ones")
        if self.rhs_mode not in ("ones", "random"):
            raise ConfigError(f"unknown rhs mode {self.rhs_mode!r}")
        self.seed = int(prob.get("seed", 0))
        self.problem_raw = prob

        part = _section(raw, "partition", ("ranks",))
        self.ranks = int(part.get("ranks", 1))
        if self.ranks < 1:
            raise ConfigError("partition.ranks must be >= 1")

        sol = _section(raw, "solver", ("variant", "tol", "maxit"))
        try:
            self.solver = SolverConfig(
                variant=sol.get("variant", "classic"),
                tol=float(sol.get("tol", 1e-8)),
                maxit=int(sol.get("maxit", 1000)),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

        pre = _section(raw, "preconditioner",
                       ("kind", "relax", "eps", "omega"))
        self.precond_kind = pre.get("kind", "jacobi")
        if self.precond_kind not in ("none", "jacobi", "ssor", "ilu0",
                                     "spai1", "sainv", "block_exact"):
            raise ConfigError(f"unknown preconditioner {self.precond_kind!r}")
        self.precond_params = pre

        blk = _section(raw, "block", ("k", "gram_mode", "block_size"))
        self.block_k = int(blk.get("k", 1))
        self.gram_mode = blk.get("gram_mode", "full")
        self.block_size = blk.get("block_size")
        if self.block_size is not None:
            self.block_size = int(self.block_size)

        res = _section(raw, "resilience",
                       ("codec", "strategy", "frequency", "aux_tol",
                        "aux_maxit", "faults"))
        codec_raw = res.get("codec", {"kind": "zero"})
        unknown = set(codec_raw) - {"kind", "tau", "c", "level"}
        if unknown:
            raise ConfigError(f"unknown codec keys: {sorted(unknown)}")
        self.codec_raw = codec_raw
        try:
            self.policy = RecoveryPolicy(
                strategy=res.get("strategy", "local_restore"),
                backup_frequency=int(res.get("frequency", 1)),
                aux_tol=float(res.get("aux_tol", 1e-2)),
                aux_maxit=int(res.get("aux_maxit", 2000)),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.fault_plans = []
        for f in res.get("faults", []):
            unknown = set(f) - {"victim", "kind", "superstep", "iteration"}
            if unknown:
                raise ConfigError(f"unknown fault keys: {sorted(unknown)}")
            try:
                self.fault_plans.append(FaultPlan(
                    victim=int(f["victim"]), kind=f.get("kind", "hard"),
                    superstep=f.get("superstep"),
                    iteration=f.get("iteration"),
                ))
            except (KeyError, ValueError) as e:
                raise ConfigError(f"bad fault plan: {e}") from e

        out = _section(raw, "output", ("prefix",))
        self.prefix = out.get("prefix", "run")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                raw = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config JSON: {e}") from e
        return cls(raw)

    def make_codec(self, local_grid=None) -> Codec:
        cr = dict(self.codec_raw)
        kind = cr.get("kind", "zero")
        hierarchy = None
        if kind == "hierarchical":
            if local_grid is None:
                local_grid = self.grid
            level = int(cr.get("level", 1))
            hierarchy = build_hierarchy(local_grid, level + 1)
        try:
            return Codec(kind=kind, tau=float(cr.get("tau", 1e-6)),
                         c=float(cr.get("c", 1.0)),
                         level=int(cr.get("level", 1)), hierarchy=hierarchy)
        except FtkError as e:
            raise ConfigError(str(e)) from e

    def make_precond_factory(self):
        kind = self.precond_kind
        params = self.precond_params

        def factory(A_local):
            if kind == "none":
                return None
            if kind == "jacobi":
                return jacobi(A_local)
            if kind == "ssor":
                return ssor(A_local, float(params.get("relax", 1.0)))
            if kind == "ilu0":
                return ilu0(A_local)
            if kind == "spai1":
                M = spai1(A_local)
                # symmetrize for CG
                Mt = M.transpose()
                from .sparse import CsrMatrix
                sym = CsrMatrix.from_dense(
                    0.5 * (M.to_dense() + Mt.to_dense()), tol=0.0
                )
                return SparseMatrixPreconditioner(sym)
            if kind == "sainv":
                cfg = SainvConfig(eps=float(params.get("eps", 0.0)),
                                  omega=float(params.get("omega", "inf")))
                return SainvPreconditioner(sainv(A_local, cfg))
            if kind == "block_exact":
                return DenseSolvePreconditioner(A_local)
            raise ConfigError(f"unknown preconditioner {kind!r}")

        return factory


# -- helpers -----------------------------------------------------------

def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    with open(path, "w") as f:
        f.write(text)


def _summary_json(data: dict) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _solve_once(cfg: ExperimentConfig, seed, engine):
    """Fault-free solve honoring the partition; returns (record, world, err)."""
    A = assemble_poisson(cfg.grid, cfg.aniso)
    b = make_rhs(cfg.grid, A, cfg.rhs_mode, seed)
    factory = cfg.make_precond_factory()
    if cfg.ranks == 1:
        world = SimWorld(1, seed=seed)
        system = LocalSystem(A, factory(A), comm=world.root_comm())
        x, record = solve(system, b, cfg.solver)
        return x, record, world
    part = partition_1d_strips(cfg.grid, cfg.ranks)
    world = SimWorld(cfg.ranks, seed=seed)

    def program(ctx):
        A_ff, A_fh = extract_local_system(A, part, ctx.rank)
        system = RankSystem(A_ff, A_fh, part, ctx.rank, ctx.comm,
                            factory(A_ff))
        return solve(system, b[part.owned[ctx.rank]], cfg.solver)

    outcomes, _ = run_simulation(world, program, (), engine)
    for r, (status, payload) in sorted(outcomes.items()):
        if status != "ok":
            if status == "error":
                raise payload
            raise FtkError(f"rank {r} terminated abnormally")
    x = np.zeros(cfg.grid.n)
    for r, (status, payload) in outcomes.items():
        x[part.owned[r]] = payload[0]
    record = outcomes[0][1][1]
    return x, record, world


# -- subcommands -------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = _outdir(args)
    A = assemble_poisson(cfg.grid, cfg.aniso)
    b = make_rhs(cfg.grid, A, cfg.rhs_mode, seed)
    write_matrix_market(A, out / f"{cfg.prefix}_matrix.mtx")
    write_vector(b, out / f"{cfg.prefix}_rhs.vec")
    print(f"wrote {cfg.prefix}_matrix.mtx ({A.nrows} rows, {A.nnz} nonzeros) "
          f"and {cfg.prefix}_rhs.vec to {out}")
    return EXIT_CONVERGED


def cmd_solve(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = _outdir(args)
    t0 = time.perf_counter()
    if cfg.block_k > 1:
        A = assemble_poisson(cfg.grid, cfg.aniso)
        rng = np.random.default_rng(seed)
        B = MultiVector(rng.standard_normal((cfg.grid.n, cfg.block_k)))
        M = cfg.make_precond_factory()(A)
        X, records = block_solve(A, B, M, cfg.solver, cfg.gram_mode,
                                 cfg.block_size)
        for j, rec in enumerate(records):
            _write(out / f"{cfg.prefix}_convergence_col{j}.csv", rec.to_csv())
        summary = {
            "columns": [
                {"iterations": r.iterations, "converged": r.converged,
                 "final_residual": r.final_residual} for r in records
            ],
            "gram_mode": cfg.gram_mode,
        }
        converged = all(r.converged for r in records)
    else:
        x, record, world = _solve_once(cfg, seed, args.engine)
        _write(out / f"{cfg.prefix}_convergence.csv", record.to_csv())
        summary = {
            "variant": record.variant,
            "iterations": record.iterations,
            "converged": record.converged,
            "initial_residual": record.initial_residual,
            "final_residual": record.final_residual,
            "total_reductions": record.total_reductions,
            "total_overlapped": record.total_overlapped,
            "reduction_counter": world.reduction_count,
            "memory_units": memory_accounting(record.variant),
        }
        converged = record.converged
    _write(out / f"{cfg.prefix}_summary.json", _summary_json(summary))
    print(f"solve finished in {time.perf_counter() - t0:.3f}s",
          file=sys.stderr)
    print(f"wrote {cfg.prefix}_summary.json to {out}")
    return EXIT_CONVERGED if converged else EXIT_FAILED


def cmd_faulttest(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if not cfg.fault_plans:
        raise ConfigError("faulttest requires resilience.faults")
    seed = cfg.seed if args.seed is None else args.seed
    out = _outdir(args)
    t0 = time.perf_counter()
    result = run_scenario(
        cfg.grid, cfg.aniso, cfg.ranks, cfg.solver, cfg.policy,
        cfg.make_codec(), cfg.make_precond_factory(), cfg.fault_plans,
        seed=seed, engine=args.engine, rhs_mode=cfg.rhs_mode,
    )
    _write(out / f"{cfg.prefix}_resilience.jsonl",
           result.resilience_log_jsonl())
    _write(out / f"{cfg.prefix}_events.jsonl", result.world.event_log_jsonl())
    summary = {"outcome": result.outcome}
    if result.record is not None:
        _write(out / f"{cfg.prefix}_convergence.csv", result.record.to_csv())
        summary.update(iterations=result.record.iterations,
                       final_residual=result.record.final_residual,
                       converged=result.record.converged)
    _write(out / f"{cfg.prefix}_summary.json", _summary_json(summary))
    print(f"faulttest finished in {time.perf_counter() - t0:.3f}s",
          file=sys.stderr)
    print(f"outcome: {result.outcome}")
    if result.outcome == "converged":
        return EXIT_CONVERGED
    if result.outcome == "recovered-converged":
        return EXIT_RECOVERED
    return EXIT_FAILED


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise ConfigError("compare needs at least two configs")
    cfgs = [ExperimentConfig.load(p) for p in args.configs]
    base = cfgs[0].problem_raw
    for c, path in zip(cfgs[1:], args.configs[1:]):
        if c.problem_raw != base:
            raise ConfigError(
                f"problem definition in {path} differs from {args.configs[0]}"
            )
    out = _outdir(args)
    records = []
    for c in cfgs:
        seed = c.seed if args.seed is None else args.seed
        _, record, _ = _solve_once(c, seed, args.engine)
        records.append(record)
    names = [c.prefix for c in cfgs]
    depth = max(len(r.residual_norms) for r in records)
    lines = ["iteration," + ",".join(f"residual_{n}" for n in names)]
    for i in range(depth):
        row = [str(i + 1)]
        for r in records:
            row.append(f"{r.residual_norms[i]:.17g}"
                       if i < len(r.residual_norms) else "")
        lines.append(",".join(row))
    _write(out / "compare.csv", "\n".join(lines) + "\n")
    summary = {
        n: {"iterations": r.iterations, "converged": r.converged,
            "final_residual": r.final_residual,
            "total_reductions": r.total_reductions}
        for n, r in zip(names, records)
    }
    _write(out / "compare_summary.json", _summary_json(summary))
    print(f"wrote compare.csv for {len(cfgs)} configs to {out}")
    return EXIT_CONVERGED if all(r.converged for r in records) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftkrylov",
        description="Fault-tolerant sparse iterative solver experiment driver",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--engine", choices=("deterministic", "threaded"),
                       default="deterministic")
        p.add_argument("--out", default=".", help="output directory")

    common(sub.add_parser("generate", help="write matrix and rhs files"))
    common(sub.add_parser("solve", help="run a fault-free solve"))
    common(sub.add_parser("faulttest", help="run a fault-injection scenario"))
    pc = sub.add_parser("compare", help="tabulate several solve configs")
    pc.add_argument("configs", nargs="*", help="JSON config paths")
    common(pc, config=False)
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "faulttest": cmd_faulttest,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FtkError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
