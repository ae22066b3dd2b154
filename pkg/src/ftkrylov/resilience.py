"""Compressed in-memory checkpointing and fault recovery for the solvers.

Backups are lossy-compressed snapshots of each rank's owned solution
segment, shipped to the circularly-next rank and kept in memory.  On a
failure the communicator is revoked, reconstituted by respawning lost ranks
on a fresh epoch, and one of three strategies restores state:

- global_rollback: every rank resets to its latest snapshot;
- local_restore:   only lost ranks reset, survivors keep their iterates;
- local_auxiliary: lost ranks additionally smooth the restored data by
  solving the local Dirichlet problem A_FF x = b_F - A_FH x_N with the
  neighbours' current values as boundary data.

The resilient driver wraps the plain Krylov solve in a guard scope, fires
backup hooks every f-th iteration, and restarts the solve from the
recovered iterate until convergence.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import commsim
from .commsim import (BACKUP_TAG, FaultPlan, InjectedFault, RankFailureError,
                      RevokedError, DeadlockError, SimWorld, fused_allreduce,
                      guard_scope, halo_exchange, recv, run_simulation, send)
from .errors import FtkError, RecoveryFailedError
from .grids import extract_local_system, make_rhs, partition_1d_strips
from .krylov import (ConvergenceRecord, LocalSystem, RankSystem, SolverConfig,
                     memory_accounting, solve)
from .precond import Hierarchy, jacobi, prolongate_full, restrict_full
from .sparse import spmv


class CodecError(FtkError):
    pass


CODEC_KINDS = ("zero", "hierarchical", "accuracy_bounded", "adaptive_accuracy")


@dataclass
class Codec:
    kind: str
    tau: float = 1e-6            # accuracy_bounded: fixed pointwise bound
    c: float = 1.0               # adaptive_accuracy: tau_i = c * ||r_i||
    level: int = 1               # hierarchical: coarsening depth
    hierarchy: Hierarchy | None = None

    def __post_init__(self):
        if self.kind not in CODEC_KINDS:
            raise CodecError(f"unknown codec kind {self.kind!r}")
        if self.kind == "accuracy_bounded" and not self.tau > 0.0:
            raise CodecError("accuracy bound tau must be positive")
        if self.kind == "adaptive_accuracy" and not self.c > 0.0:
            raise CodecError("residual coupling factor c must be positive")
        if self.kind == "hierarchical":
            if self.hierarchy is None:
                raise CodecError("hierarchical codec needs a hierarchy")
            if not 1 <= self.level < len(self.hierarchy.levels):
                raise CodecError(f"hierarchy has no level {self.level}")


@dataclass
class BackupSnapshot:
    source_rank: int
    iteration: int
    codec_kind: str
    tau_used: float
    payload: bytes
    n: int
    level: int = 0
    hierarchy: Hierarchy | None = None

    @property
    def uncompressed_len(self) -> int:
        return 8 * self.n

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def compression_rate(self) -> float:
        return self.uncompressed_len / max(self.payload_len, 1)


# -- predictive quantizer (the accuracy-bounded payload format) -------

def _varint(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _read_varint(buf, pos):
    shift = value = 0
    while True:
        byte = buf[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7


def _zigzag(q: int) -> int:
    return (q << 1) ^ (q >> 63) if q >= 0 else ((-q) << 1) - 1


def _unzigzag(m: int) -> int:
    return m >> 1 if m % 2 == 0 else -((m + 1) >> 1)


def _quantize(x: np.ndarray, tau: float) -> bytes:
    """Lexicographic linear-predictor quantization with escape codes.

    Each entry is predicted by the previous *decoded* entry; the correction
    is snapped to a uniform grid of cell 2*tau, so the round-trip error is
    pointwise at most tau.  Entries the predictor cannot reach within the
    integer budget are escape-coded verbatim.
    """
    out = bytearray(struct.pack("<Qd", len(x), tau))
    prev = 0.0
    cell = 2.0 * tau
    for xi in x:
        xi = float(xi)
        diff = xi - prev
        ok = abs(diff) / cell < 2**53
        if ok:
            q = int(round(diff / cell))
            rec = prev + q * cell
            ok = math.isfinite(rec) and abs(rec - xi) <= tau
        if ok:
            out += _varint(_zigzag(q) + 1)
            prev = rec
        else:
            out += _varint(0)
            out += struct.pack("<d", xi)
            prev = xi
    return bytes(out)


def _dequantize(payload: bytes) -> np.ndarray:
    n, tau = struct.unpack_from("<Qd", payload, 0)
    pos = 16
    cell = 2.0 * tau
    out = np.empty(n)
    prev = 0.0
    for i in range(n):
        m, pos = _read_varint(payload, pos)
        if m == 0:
            (prev,) = struct.unpack_from("<d", payload, pos)
            pos += 8
        else:
            prev = prev + _unzigzag(m - 1) * cell
        out[i] = prev
    return out


def encode(codec: Codec, x: np.ndarray, residual_norm: float | None = None,
           source_rank: int = 0, iteration: int = 0) -> BackupSnapshot:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise CodecError("cannot encode non-finite data")
    kind = codec.kind
    if kind == "zero":
        payload = struct.pack("<Q", len(x))
        tau_used = float("inf")
        level = 0
    elif kind == "hierarchical":
        coarse = restrict_full(codec.hierarchy, x, codec.level)
        payload = struct.pack("<QQ", len(x), len(coarse)) + coarse.tobytes()
        tau_used = float("inf")      # error not bounded by this codec
        level = codec.level
    else:
        if kind == "adaptive_accuracy":
            if residual_norm is None or not residual_norm > 0.0:
                raise CodecError(
                    "adaptive codec needs a positive residual norm"
                )
            tau_used = codec.c * residual_norm
        else:
            tau_used = codec.tau
        payload = _quantize(x, tau_used)
        level = 0
    return BackupSnapshot(
        source_rank=source_rank, iteration=iteration, codec_kind=kind,
        tau_used=tau_used, payload=payload, n=len(x), level=level,
        hierarchy=codec.hierarchy if kind == "hierarchical" else None,
    )


def decode(snapshot: BackupSnapshot) -> np.ndarray:
    kind = snapshot.codec_kind
    if kind == "zero":
        return np.zeros(snapshot.n)
    if kind == "hierarchical":
        _, nc = struct.unpack_from("<QQ", snapshot.payload, 0)
        coarse = np.frombuffer(snapshot.payload, dtype=np.float64, offset=16,
                               count=nc)
        return prolongate_full(snapshot.hierarchy, coarse.copy(),
                               snapshot.level)
    return _dequantize(snapshot.payload)


# -- hooks and policies ------------------------------------------------

@dataclass
class HookStacks:
    recovery: list = field(default_factory=list)
    backup: list = field(default_factory=list)
    on_exception: list = field(default_factory=list)


STRATEGIES = ("global_rollback", "local_restore", "local_auxiliary")


@dataclass
class RecoveryPolicy:
    strategy: str = "local_restore"
    backup_frequency: int = 1
    aux_tol: float = 1e-2        # relative to ||b_aux||: smoothing, not solving
    aux_maxit: int = 2000

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.backup_frequency < 1:
            raise ValueError("backup frequency must be >= 1")
        if not 0.0 < self.aux_tol < 1.0:
            raise ValueError("aux tolerance must lie in (0, 1)")


def place_backup(comm, snapshot: BackupSnapshot, rank=None):
    """Ship the snapshot to the circularly-next member rank."""
    rank = commsim._infer_rank(comm, rank)
    members = comm.members
    dest = members[(members.index(rank) + 1) % len(members)]
    return send(comm, dest, BACKUP_TAG, snapshot, rank=rank)


def _place_with_fallback(comm, snapshot, rank, events):
    """Place the backup, falling over to the next surviving member."""
    members = comm.members
    start = members.index(rank)
    for k in range(1, len(members)):
        dest = members[(start + k) % len(members)]
        tok = send(comm, dest, BACKUP_TAG, snapshot, rank=rank)
        try:
            tok.get()
        except RankFailureError:
            events.append({"kind": "place_retry", "rank": rank, "dead": dest})
            continue
        events.append({"kind": "place", "rank": rank, "dest": dest,
                       "iteration": snapshot.iteration})
        return dest
    events.append({"kind": "place_failed", "rank": rank})
    return None


# -- the resilient per-rank driver ------------------------------------

_RECOVERABLE = (InjectedFault, RankFailureError, RevokedError, DeadlockError)


def resilient_solve(ctx, A, b, part, make_precond, cfg: SolverConfig,
                    policy: RecoveryPolicy, codec: Codec,
                    hooks: HookStacks | None = None):
    """Rank program body: guarded solve loop with backup and recovery.

    Returns a dict with the rank's outcome classification, final owned
    iterate, merged convergence record, and the rank-local resilience log.
    """
    world, rank = ctx.world, ctx.rank
    comm = ctx.comm
    hooks = hooks or HookStacks()
    owned = part.owned[rank]
    A_ff, A_fh = extract_local_system(A, part, rank)
    M = make_precond(A_ff)
    b_local = np.asarray(b, dtype=np.float64)[owned]

    x_local = np.zeros(len(owned))
    global_iter = 0
    my_snapshot: BackupSnapshot | None = None
    pending_recovery = ctx.fresh
    fault_seen = ctx.fresh
    events: list[dict] = []
    on_exception_runs = 0
    cum_backup_bytes = 0
    comp_rate_col: list[float] = []
    cum_bytes_col: list[float] = []
    combined = ConvergenceRecord(
        variant=cfg.variant,
        vector_memory_units=memory_accounting(cfg.variant),
    )
    finished = False

    def run_recovery():
        nonlocal x_local, global_iter, pending_recovery, my_snapshot
        p = len(comm.members)
        idx = comm.members.index(rank)
        # one fused reduction announces backup holders and iteration progress
        contrib = [0.0] * (2 * p)
        store = world.backup_stores[rank]
        for pos, member in enumerate(comm.members):
            if member in store:
                contrib[pos] = float(rank + 1)
        contrib[p + idx] = float(global_iter)
        vals = fused_allreduce(comm, contrib, rank=rank).get()
        holders = [int(v) - 1 for v in vals[:p]]
        global_iter = int(max(vals[p:]))
        victims = sorted(world.fresh_ranks.get(comm.epoch, set()))
        events.append({"kind": "recover", "rank": rank,
                       "strategy": policy.strategy, "victims": victims,
                       "epoch": comm.epoch})
        received: BackupSnapshot | None = None
        for v in victims:
            holder = holders[comm.members.index(v)]
            if holder < 0:
                if rank == v:
                    events.append({"kind": "backup_missing", "rank": rank})
                continue
            tag = ("restore", v)
            if rank == holder:
                send(comm, v, tag, world.backup_stores[rank][v],
                     rank=rank).get()
            if rank == v:
                received = recv(comm, holder, tag, rank=rank).get()
        is_victim = rank in victims
        if policy.strategy == "global_rollback":
            snap = received if is_victim else my_snapshot
            x_local = decode(snap) if snap is not None else np.zeros(len(owned))
            events.append({"kind": "rollback", "rank": rank,
                           "iteration": snap.iteration if snap else 0})
        elif policy.strategy == "local_restore":
            if is_victim:
                x_local = (decode(received) if received is not None
                           else np.zeros(len(owned)))
        else:  # local_auxiliary
            if is_victim:
                x_local = (decode(received) if received is not None
                           else np.zeros(len(owned)))
            token = halo_exchange(comm, part, x_local, rank=rank)
            x_halo = token.get()
            if is_victim:
                b_aux = b_local.copy()
                if A_fh.ncols:
                    b_aux -= spmv(A_fh, x_halo)
                # target accuracy is relative to ||b_aux|| (not to the guess
                # residual), so a better backup guess means fewer iterations
                norm_b = float(np.linalg.norm(b_aux))
                r0 = b_aux - spmv(A_ff, x_local)
                norm_r0 = float(np.linalg.norm(r0))
                aux_iters = 0
                if norm_b == 0.0:
                    x_local = np.zeros(len(owned))
                elif norm_r0 > policy.aux_tol * norm_b:
                    tol_eff = min(policy.aux_tol * norm_b / norm_r0, 0.5)
                    aux_cfg = SolverConfig(variant="classic", tol=tol_eff,
                                           maxit=policy.aux_maxit)
                    aux_sys = LocalSystem(A_ff, jacobi(A_ff))
                    x_aux, aux_rec = solve(aux_sys, b_aux, aux_cfg,
                                           x0=x_local)
                    if not aux_rec.converged:
                        raise RecoveryFailedError(
                            f"auxiliary solve stalled on rank {rank} after "
                            f"{aux_rec.iterations} iterations"
                        )
                    x_local = x_aux
                    aux_iters = aux_rec.iterations
                events.append({"kind": "aux_solve", "rank": rank,
                               "iterations": aux_iters})
        if is_victim:
            my_snapshot = None
        for hook in hooks.recovery:
            hook(rank, victims, policy.strategy)
        pending_recovery = False

    def merge(rec: ConvergenceRecord):
        red0 = combined.total_reductions
        ovl0 = combined.total_overlapped
        combined.residual_norms.extend(rec.residual_norms)
        combined.reductions_cum.extend(v + red0 for v in rec.reductions_cum)
        combined.overlapped_cum.extend(v + ovl0 for v in rec.overlapped_cum)
        combined.iterations += rec.iterations
        combined.total_reductions += rec.total_reductions
        combined.total_overlapped += rec.total_overlapped
        if math.isnan(combined.initial_residual):
            combined.initial_residual = rec.initial_residual
        combined.final_residual = rec.final_residual
        combined.converged = rec.converged

    while not finished:
        try:
            def body():
                nonlocal x_local, global_iter, my_snapshot, finished
                nonlocal cum_backup_bytes
                if pending_recovery:
                    run_recovery()
                remaining = cfg.maxit - combined.iterations
                if remaining <= 0:
                    finished = True
                    return
                system = RankSystem(A_ff, A_fh, part, rank, comm, M)
                seg_cfg = SolverConfig(variant=cfg.variant, tol=cfg.tol,
                                       maxit=remaining,
                                       record_history=cfg.record_history)

                def callback(it, st, rec):
                    nonlocal global_iter, my_snapshot, cum_backup_bytes
                    global_iter += 1
                    system.poll_faults(global_iter)
                    if global_iter % policy.backup_frequency == 0:
                        norm = (rec.residual_norms[-1] if rec.residual_norms
                                else rec.initial_residual)
                        snap = encode(codec, st.x, residual_norm=norm,
                                      source_rank=rank, iteration=global_iter)
                        _place_with_fallback(comm, snap, rank, events)
                        my_snapshot = snap
                        cum_backup_bytes += snap.payload_len
                        events.append({"kind": "backup", "rank": rank,
                                       "iteration": global_iter,
                                       "bytes": snap.payload_len,
                                       "rate": snap.compression_rate,
                                       "tau": snap.tau_used})
                        for hook in hooks.backup:
                            hook(rank, global_iter, snap)
                    rate = (my_snapshot.compression_rate
                            if my_snapshot is not None else 0.0)
                    comp_rate_col.append(rate)
                    cum_bytes_col.append(float(cum_backup_bytes))

                x_new, rec = solve(system, b_local, seg_cfg, x0=x_local,
                                   callback=callback)
                x_local = x_new
                merge(rec)
                finished = True

            guard_scope(comm, body)
        except Exception as exc:
            on_exception_runs += 1
            events.append({"kind": "exception", "rank": rank,
                           "error": type(exc).__name__})
            handled = False
            for hook in hooks.on_exception:
                if hook(rank, exc):
                    handled = True
                    break
            if not hooks.on_exception:
                handled = isinstance(exc, _RECOVERABLE)
            if not handled:
                raise
            fault_seen = True
            comm = comm.reconstitute()
            pending_recovery = True

    combined.extra_columns["compression_rate"] = comp_rate_col
    combined.extra_columns["cumulative_backup_bytes"] = cum_bytes_col
    if combined.converged:
        outcome = "recovered-converged" if fault_seen else "converged"
    else:
        outcome = "failed"
    return {
        "outcome": outcome,
        "rank": rank,
        "x_local": x_local,
        "record": combined,
        "events": events,
        "on_exception_runs": on_exception_runs,
        "cumulative_backup_bytes": cum_backup_bytes,
    }


# -- whole-scenario convenience runner ---------------------------------

@dataclass
class ScenarioResult:
    outcome: str                  # converged | recovered-converged | failed
    x: np.ndarray | None
    rank_results: dict
    record: ConvergenceRecord | None
    events: list
    world: SimWorld

    def resilience_log_jsonl(self) -> str:
        lines = [json.dumps(ev, sort_keys=True) for ev in self.events]
        return "\n".join(lines) + "\n" if lines else ""


def run_scenario(grid, aniso, num_ranks, cfg: SolverConfig,
                 policy: RecoveryPolicy, codec: Codec, make_precond,
                 fault_plans=(), seed: int = 0, engine: str = "deterministic",
                 rhs_mode: str = "ones", hooks_factory=None):
    """Assemble the problem, run the resilient solve on a simulated world,
    and gather the global solution and telemetry."""
    from .grids import assemble_poisson

    A = assemble_poisson(grid, aniso)
    b = make_rhs(grid, A, rhs_mode, seed)
    part = partition_1d_strips(grid, num_ranks)
    world = SimWorld(num_ranks, seed=seed)

    def program(ctx):
        hooks = hooks_factory(ctx.rank) if hooks_factory else None
        return resilient_solve(ctx, A, b, part, make_precond, cfg, policy,
                               codec, hooks)

    outcomes, _ = run_simulation(world, program, fault_plans, engine)
    rank_results = {}
    events = []
    failed = False
    for r in sorted(outcomes):
        status, payload = outcomes[r]
        if status == "ok":
            rank_results[r] = payload
            events.extend(payload["events"])
        else:
            failed = True
            rank_results[r] = {"outcome": status, "error": payload}
    if failed or any(res.get("outcome") == "failed"
                     for res in rank_results.values() if "record" in res):
        return ScenarioResult("failed", None, rank_results, None, events, world)
    x = np.zeros(grid.n)
    for r, res in rank_results.items():
        x[part.owned[r]] = res["x_local"]
    outcome = rank_results[0]["outcome"]
    return ScenarioResult(outcome, x, rank_results,
                          rank_results[0]["record"], events, world)
