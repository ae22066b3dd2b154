"""Backup codecs, snapshot placement, recovery strategies, hooks."""

import json

import numpy as np
import pytest

import ftkrylov as fk
from ftkrylov.precond import DenseSolvePreconditioner


GRID = fk.StructuredGrid(32, 32)
ANISO = fk.Anisotropy(1.0, 0.01)
CFG = fk.SolverConfig(variant="classic", tol=1e-8, maxit=400)


def make_precond(A_ff):
    return DenseSolvePreconditioner(A_ff)


def scenario(policy=None, codec=None, plans=(), hooks_factory=None,
             num_ranks=16):
    return fk.run_scenario(
        GRID, ANISO, num_ranks, CFG,
        policy or fk.RecoveryPolicy(strategy="local_restore"),
        codec or fk.Codec("accuracy_bounded", tau=1e-4),
        make_precond, plans, hooks_factory=hooks_factory)


# -- codecs ------------------------------------------------------------

def test_zero_codec_round_trip():
    x = np.linspace(-3, 3, 17)
    snap = fk.encode(fk.Codec("zero"), x)
    assert np.array_equal(fk.decode(snap), np.zeros(17))
    assert snap.payload_len == 8
    assert snap.uncompressed_len == 17 * 8


def test_accuracy_bounded_codec_respects_tau():
    rng = np.random.default_rng(1)
    for tau in (1e-2, 1e-5, 1e-9):
        codec = fk.Codec("accuracy_bounded", tau=tau)
        for scale in (1e-6, 1.0, 1e8):
            x = rng.standard_normal(200) * scale
            snap = fk.encode(codec, x)
            assert np.max(np.abs(fk.decode(snap) - x)) <= tau
            assert snap.tau_used == tau


def test_accuracy_bounded_escape_path_for_wild_values():
    # values far beyond the quantizer range must fall back to verbatim
    x = np.array([0.0, 1e300, -1e300, 5e-12, 1e18])
    codec = fk.Codec("accuracy_bounded", tau=1e-6)
    snap = fk.encode(codec, x)
    assert np.max(np.abs(fk.decode(snap) - x)) <= 1e-6


def test_compression_beats_raw_on_smooth_data():
    t = np.linspace(0, 1, 512)
    x = np.sin(2 * np.pi * t)
    snap = fk.encode(fk.Codec("accuracy_bounded", tau=1e-4), x)
    assert snap.compression_rate > 2.0


def test_adaptive_codec_couples_tau_to_residual():
    x = np.random.default_rng(2).standard_normal(64)
    codec = fk.Codec("adaptive_accuracy", c=0.5)
    snap = fk.encode(codec, x, residual_norm=1e-3)
    assert snap.tau_used == pytest.approx(5e-4)
    assert np.max(np.abs(fk.decode(snap) - x)) <= 5e-4
    with pytest.raises(fk.CodecError):
        fk.encode(codec, x)                       # missing residual norm


def test_hierarchical_codec_round_trip_smooth():
    grid = fk.StructuredGrid(16, 16)
    hier = fk.build_hierarchy(grid, 2)
    codec = fk.Codec("hierarchical", level=1, hierarchy=hier)
    xs, ys = np.meshgrid(np.linspace(0, 1, 16), np.linspace(0, 1, 16))
    x = (xs + ys).ravel()
    snap = fk.encode(codec, x)
    assert snap.payload_len < snap.uncompressed_len
    rt = fk.decode(snap)
    assert rt.shape == x.shape
    assert np.max(np.abs(rt - x)) < 0.2 * np.max(np.abs(x))


def test_codec_validation():
    with pytest.raises(fk.CodecError):
        fk.Codec("magic")
    with pytest.raises(fk.CodecError):
        fk.Codec("accuracy_bounded", tau=0.0)
    with pytest.raises(fk.CodecError):
        fk.Codec("adaptive_accuracy", c=-1.0)
    with pytest.raises(fk.CodecError):
        fk.Codec("hierarchical")                  # needs a hierarchy
    with pytest.raises(fk.CodecError):
        fk.encode(fk.Codec("zero"), np.array([1.0, np.nan]))


def test_recovery_policy_validation():
    with pytest.raises(ValueError):
        fk.RecoveryPolicy(strategy="wishful")
    with pytest.raises(ValueError):
        fk.RecoveryPolicy(backup_frequency=0)
    with pytest.raises(ValueError):
        fk.RecoveryPolicy(aux_tol=1.5)


# -- placement and recovery -------------------------------------------

def test_backups_are_deposited_at_next_rank():
    res = scenario(num_ranks=4)
    deposits = [ev for ev in res.world.event_log
                if ev["kind"] == "backup_deposit"]
    assert deposits
    for ev in deposits:
        src, dest = ev["payload"]["src"], ev["payload"]["dest"]
        assert dest == (src + 1) % 4


def test_no_fault_run_is_transparent():
    res = scenario()
    assert res.outcome == "converged"
    assert all(p["on_exception_runs"] == 0
               for p in res.rank_results.values())


def test_global_rollback_recovers():
    plans = [fk.FaultPlan(victim=4, kind="hard", iteration=6)]
    res = scenario(fk.RecoveryPolicy(strategy="global_rollback"),
                   plans=plans)
    assert res.outcome == "recovered-converged"
    rollbacks = [e for e in res.events if e["kind"] == "rollback"]
    assert len(rollbacks) == 16               # every rank rolls back
    its = {e["iteration"] for e in rollbacks}
    # the fault lands mid-iteration: latest snapshots straddle the backup
    # boundary by at most one backup period
    assert max(its) - min(its) <= 1 and max(its) == 6


def test_local_restore_touches_only_victim():
    plans = [fk.FaultPlan(victim=4, kind="hard", iteration=6)]
    res = scenario(plans=plans)
    assert res.outcome == "recovered-converged"
    recovers = [e for e in res.events if e["kind"] == "recover"]
    assert all(e["victims"] == [4] for e in recovers)
    assert not any(e["kind"] == "rollback" for e in res.events)


def test_local_auxiliary_reports_aux_solve():
    plans = [fk.FaultPlan(victim=4, kind="hard", iteration=6)]
    res = scenario(fk.RecoveryPolicy(strategy="local_auxiliary"),
                   plans=plans)
    assert res.outcome == "recovered-converged"
    aux = [e for e in res.events if e["kind"] == "aux_solve"]
    assert len(aux) == 1 and aux[0]["rank"] == 4
    assert aux[0]["iterations"] >= 0


def test_backup_frequency_spaces_snapshots():
    policy = fk.RecoveryPolicy(strategy="local_restore", backup_frequency=3)
    res = scenario(policy)
    backups = [e for e in res.events if e["kind"] == "backup"]
    per_rank = {}
    for e in backups:
        per_rank.setdefault(e["rank"], []).append(e["iteration"])
    for its in per_rank.values():
        assert all(i % 3 == 0 for i in its)


def test_hooks_fire_and_log():
    calls = {"backup": 0, "recovery": 0, "exception": 0}

    def factory(rank):
        hooks = fk.HookStacks()
        hooks.backup.append(
            lambda r, it, snap: calls.__setitem__(
                "backup", calls["backup"] + 1))
        hooks.recovery.append(
            lambda r, victims, strategy: calls.__setitem__(
                "recovery", calls["recovery"] + 1))

        def on_exc(r, exc):
            calls["exception"] += 1
            return isinstance(exc, (fk.InjectedFault, fk.RankFailureError,
                                    fk.RevokedError, fk.DeadlockError))
        hooks.on_exception.append(on_exc)
        return hooks

    plans = [fk.FaultPlan(victim=2, kind="hard", iteration=5)]
    res = scenario(plans=plans, hooks_factory=factory)
    assert res.outcome == "recovered-converged"
    assert calls["backup"] > 0
    assert calls["recovery"] == 16            # every rank, one recovery round
    assert calls["exception"] == 15           # all survivors


def test_unhandled_exception_marks_run_failed():
    def factory(rank):
        hooks = fk.HookStacks()
        hooks.on_exception.append(lambda r, exc: False)   # refuse to handle
        return hooks

    plans = [fk.FaultPlan(victim=2, kind="soft", iteration=3)]
    res = scenario(plans=plans, hooks_factory=factory)
    assert res.outcome == "failed"


def test_resilience_log_is_jsonl():
    plans = [fk.FaultPlan(victim=1, kind="hard", iteration=5)]
    res = scenario(plans=plans)
    lines = res.resilience_log_jsonl().strip().split("\n")
    kinds = set()
    for line in lines:
        ev = json.loads(line)
        kinds.add(ev["kind"])
    assert {"backup", "exception", "recover"} <= kinds


def test_record_extra_columns_track_compression():
    res = scenario(codec=fk.Codec("accuracy_bounded", tau=1e-4))
    rec = res.record
    rates = rec.extra_columns["compression_rate"]
    bytes_ = rec.extra_columns["cumulative_backup_bytes"]
    assert len(rates) == len(rec.residual_norms)
    assert all(b2 >= b1 for b1, b2 in zip(bytes_, bytes_[1:]))
    assert rates[-1] > 1.0


def test_solution_correct_after_recovery():
    A = fk.assemble_poisson(GRID, ANISO)
    b = fk.make_rhs(GRID, A, "ones")
    plans = [fk.FaultPlan(victim=9, kind="hard", iteration=8)]
    res = scenario(plans=plans)
    resid = np.linalg.norm(b - fk.spmv(A, res.x)) / np.linalg.norm(b)
    assert resid <= 1e-8
    # manufactured solution is exactly one
    assert np.allclose(res.x, 1.0, atol=1e-6)
