"""Deterministic simulated message-passing world.

Rank programs are plain Python callables executed on one thread per rank
under a strict handoff scheduler: exactly one thread runs at any time, and
control passes in a fixed order, so every run with the same inputs produces
the same event log and the same floating-point results.

Communication is bulk-synchronous: operations issued during a superstep
complete at the next superstep boundary (reached once every live rank is
blocked or finished).  Fused reductions sum elementwise over ranks with a
fixed ascending-rank pairwise tree and bump the global reduction counter by
one per boundary crossing, regardless of how many summands were fused.

Failures become observable only at communication boundaries: a hard fault
kills the victim's thread at its next communication event, and every
collective the victim participates in fails on the survivors, so no program
following the contract can deadlock.  Revoking a communicator poisons its
epoch; shrink/respawn hand out an epoch+1 communicator.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import FtkError


class ProtocolError(FtkError):
    pass


class RevokedError(FtkError):
    def __init__(self, epoch):
        super().__init__(f"communicator epoch {epoch} revoked")
        self.epoch = epoch


class RankFailureError(FtkError):
    def __init__(self, victims):
        super().__init__(f"rank failure: {sorted(victims)}")
        self.victims = sorted(victims)


class DeadlockError(FtkError):
    pass


class InjectedFault(FtkError):
    """Soft fault raised inside user code on the victim rank."""


class _HardFault(BaseException):
    """Kills a rank thread; deliberately not an Exception so that user-level
    try/except blocks cannot swallow a node loss."""


# Reserved message tag: payloads sent with it are deposited into the
# destination rank's in-memory backup store instead of its mailbox.
BACKUP_TAG = "__backup__"


@dataclass
class FaultPlan:
    victim: int
    kind: str                    # "hard" | "soft"
    superstep: int | None = None
    iteration: int | None = None

    def __post_init__(self):
        if self.kind not in ("hard", "soft"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if (self.superstep is None) == (self.iteration is None):
            raise ValueError("exactly one of superstep/iteration must be set")


class CompletionToken:
    """Future-style handle: wait() blocks, get() yields the payload once."""

    def __init__(self, world, rank, op_id, kind):
        self.world = world
        self.rank = rank
        self.op_id = op_id
        self.kind = kind
        self.state = "pending"
        self._payload = None
        self._error = None
        self._consumed = False

    def ready(self) -> bool:
        return self.state == "ready"

    def valid(self) -> bool:
        return self.state != "pending" and not self._consumed

    def wait(self) -> None:
        if self.state == "pending":
            self.world._block(self.rank, self)
        assert self.state in ("ready", "failed")

    def get(self):
        self.wait()
        if self._consumed:
            raise ProtocolError("token payload already consumed")
        self._consumed = True
        if self.state == "failed":
            raise self._error
        if self.kind == "reduce":
            self.world._log(self.rank, "reduce_harvest", {"op": self.op_id})
        return self._payload

    def _resolve(self, payload):
        self.state = "ready"
        self._payload = payload

    def _fail(self, error):
        self.state = "failed"
        self._error = error


class SimCommunicator:
    def __init__(self, world, members, epoch):
        self.world = world
        self.members = list(members)
        self.epoch = epoch

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def revoked(self) -> bool:
        return self.epoch in self.world.revoked_epochs

    def revoke(self) -> None:
        self.world._revoke(self.epoch)

    def reconstitute(self) -> "SimCommunicator":
        """Catch-block recovery step: respawn lost ranks on a fresh epoch."""
        return respawn(self)


class _Runner(threading.Thread):
    def __init__(self, world, rank, program, ctx):
        super().__init__(daemon=True, name=f"rank-{rank}")
        self.world = world
        self.rank = rank
        self.program = program
        self.ctx = ctx
        self.sem = threading.Semaphore(0)
        self.poisoned = False
        self.done = False
        self.outcome = None

    def run(self):
        self.sem.acquire()
        if self.poisoned:
            self.outcome = ("killed", None)
        else:
            try:
                self.outcome = ("ok", self.program(self.ctx))
            except _HardFault:
                self.outcome = ("killed", None)
            except BaseException as e:  # report, don't crash the scheduler
                self.outcome = ("error", e)
        self.done = True
        self.world._sched_sem.release()


@dataclass
class RankContext:
    world: "SimWorld"
    rank: int
    comm: SimCommunicator
    fresh: bool = False


class SimWorld:
    """Simulation state: mailboxes, event log, epochs, fault plans."""

    def __init__(self, num_ranks: int, seed: int = 0):
        if num_ranks < 1:
            raise ValueError("need at least one rank")
        self.num_ranks = num_ranks
        self.seed = seed
        self.superstep = 0
        self.reduction_count = 0
        self.event_log: list[dict] = []
        self.dead: set[int] = set()
        self.epoch = 0
        self.revoked_epochs: set[int] = set()
        self.comm_members = {0: list(range(num_ranks))}
        self.fresh_ranks: dict[int, set] = {0: set()}
        self._transition: dict[int, SimCommunicator] = {}
        self.backup_stores = {r: {} for r in range(num_ranks)}
        self.fault_plans: list[FaultPlan] = []
        self._fired_plans: set[int] = set()
        self._op_counter = 0
        self._coll_seq: dict[tuple, int] = {}
        self._pending: dict[tuple, dict] = {}
        self._outbox: list[tuple] = []           # (epoch, src, dest, tag, payload)
        self._mail: dict[tuple, list] = {}       # (epoch, dest, src, tag) -> payloads
        self._recv_waiters: list = []
        # scheduler state
        self._runners: dict[int, _Runner] = {}
        self._waiting: dict[int, CompletionToken] = {}
        self._runnable: list["_Runner"] = []
        self._sched_sem = threading.Semaphore(0)
        self._in_simulation = False
        self._program = None
        self._engine = "deterministic"
        self._rng = np.random.default_rng(seed)

    # -- logging -------------------------------------------------------

    def _log(self, rank, kind, payload):
        digest = hashlib.sha256(
            repr(sorted(payload.items())).encode()
        ).hexdigest()[:12]
        self.event_log.append(
            {"superstep": self.superstep, "rank": rank, "kind": kind,
             "payload": payload, "digest": digest}
        )

    def event_log_jsonl(self) -> str:
        lines = []
        for ev in self.event_log:
            lines.append(json.dumps(
                {"superstep": ev["superstep"], "rank": ev["rank"],
                 "kind": ev["kind"], "digest": ev["digest"]},
                sort_keys=True))
        return "\n".join(lines) + "\n"

    def log_compute(self, rank, label):
        self._log(rank, "compute", {"label": label})

    # -- communicators -------------------------------------------------

    def root_comm(self) -> SimCommunicator:
        return SimCommunicator(self, self.comm_members[0], 0)

    def _revoke(self, epoch):
        if epoch not in self.revoked_epochs:
            self.revoked_epochs.add(epoch)
            self._log(-1, "revoke", {"epoch": epoch})

    def _check_epoch(self, comm):
        if comm.epoch in self.revoked_epochs:
            raise RevokedError(comm.epoch)

    # -- fault plans ---------------------------------------------------

    def _kill(self, victim):
        if victim in self.dead:
            return
        self.dead.add(victim)
        self.backup_stores[victim] = {}      # in-memory store dies with the rank
        self._log(victim, "fault", {"kind": "hard"})
        runner = self._runners.get(victim)
        if runner is not None and not runner.done:
            runner.poisoned = True
            if victim in self._waiting:
                del self._waiting[victim]
                # queue the dying incarnation itself: a later respawn may
                # replace _runners[victim] before the poison is delivered
                self._runnable.append(runner)

    def _poll_superstep_plans(self, rank):
        """Fire due superstep-triggered plans for this rank (called on comm entry)."""
        for i, plan in enumerate(self.fault_plans):
            if i in self._fired_plans or plan.victim != rank:
                continue
            if plan.superstep is None or self.superstep < plan.superstep:
                continue
            self._fired_plans.add(i)
            if plan.kind == "hard":
                self.dead.add(rank)
                self.backup_stores[rank] = {}
                self._log(rank, "fault", {"kind": "hard"})
                raise _HardFault()
            self._log(rank, "fault", {"kind": "soft"})
            raise InjectedFault(f"injected soft fault on rank {rank}")

    def poll_iteration_faults(self, rank, iteration):
        """Fire due iteration-triggered plans; called by solver drivers."""
        for i, plan in enumerate(self.fault_plans):
            if i in self._fired_plans or plan.victim != rank:
                continue
            if plan.iteration is None or iteration < plan.iteration:
                continue
            self._fired_plans.add(i)
            if plan.kind == "hard":
                self.dead.add(rank)
                self.backup_stores[rank] = {}
                self._log(rank, "fault", {"kind": "hard"})
                raise _HardFault()
            self._log(rank, "fault", {"kind": "soft"})
            raise InjectedFault(f"injected soft fault on rank {rank}")

    # -- collectives ---------------------------------------------------

    def _next_seq(self, epoch, rank):
        key = (epoch, rank)
        seq = self._coll_seq.get(key, 0)
        self._coll_seq[key] = seq + 1
        return seq

    def _issue_collective(self, comm, rank, kind, contribution, meta):
        self._check_epoch(comm)
        self._poll_superstep_plans(rank)
        seq = self._next_seq(comm.epoch, rank)
        key = (comm.epoch, seq)
        group = self._pending.setdefault(
            key, {"kind": kind, "contrib": {}, "tokens": {}, "meta": meta}
        )
        if group["kind"] != kind:
            raise ProtocolError(
                f"collective mismatch at epoch {comm.epoch} seq {seq}: "
                f"{group['kind']} vs {kind}"
            )
        self._op_counter += 1
        token = CompletionToken(self, rank, self._op_counter, kind)
        group["contrib"][rank] = contribution
        group["tokens"][rank] = token
        if kind == "reduce":
            self._log(rank, "reduce_issue",
                      {"op": token.op_id, "overlapped": meta.get("overlapped", False)})
        else:
            self._log(rank, f"{kind}_issue", {"op": token.op_id})
        return token

    @staticmethod
    def _tree_sum(arrays):
        arrays = list(arrays)
        while len(arrays) > 1:
            nxt = []
            for i in range(0, len(arrays), 2):
                if i + 1 < len(arrays):
                    nxt.append(arrays[i] + arrays[i + 1])
                else:
                    nxt.append(arrays[i])
            arrays = nxt
        return arrays[0]

    def _resolve_group(self, key, group, members):
        kind = group["kind"]
        if kind == "reduce":
            lengths = {len(v) for v in group["contrib"].values()}
            if len(lengths) != 1:
                err = ProtocolError(f"mismatched summand lengths {sorted(lengths)}")
                for tok in group["tokens"].values():
                    tok._fail(err)
                return
            ordered = [np.asarray(group["contrib"][r], dtype=np.float64)
                       for r in sorted(group["contrib"])]
            total = self._tree_sum(ordered)
            self.reduction_count += 1
            self._log(-1, "reduce_complete",
                      {"epoch": key[0], "seq": key[1], "n": len(total)})
            for tok in group["tokens"].values():
                tok._resolve(list(total))
        elif kind == "halo":
            part = group["meta"]["part"]
            for r, tok in group["tokens"].items():
                vals = np.empty(len(part.halo[r]))
                pos = 0
                for nbr, shared in part.neighbors[r]:
                    x_nbr = group["contrib"][nbr]
                    idx = np.searchsorted(part.owned[nbr], shared)
                    vals[pos:pos + len(shared)] = np.asarray(x_nbr)[idx]
                    pos += len(shared)
                tok._resolve(vals)
            self._log(-1, "halo_complete", {"epoch": key[0], "seq": key[1]})
        else:
            raise ProtocolError(f"unknown collective kind {kind}")

    # -- point to point ------------------------------------------------

    def _send(self, comm, rank, dest, tag, payload):
        self._check_epoch(comm)
        self._poll_superstep_plans(rank)
        if dest not in comm.members:
            raise ProtocolError(f"destination {dest} not in communicator")
        self._op_counter += 1
        token = CompletionToken(self, rank, self._op_counter, "send")
        self._outbox.append((comm.epoch, rank, dest, tag, payload, token))
        self._log(rank, "send", {"op": token.op_id, "dest": dest, "tag": str(tag)})
        return token

    def _recv(self, comm, rank, src, tag):
        self._check_epoch(comm)
        self._poll_superstep_plans(rank)
        self._op_counter += 1
        token = CompletionToken(self, rank, self._op_counter, "recv")
        key = (comm.epoch, rank, src, tag)
        box = self._mail.get(key)
        if box:
            token._resolve(box.pop(0))
        else:
            self._recv_waiters.append((key, src, token))
        self._log(rank, "recv", {"op": token.op_id, "src": src, "tag": str(tag)})
        return token

    # -- scheduler -----------------------------------------------------

    def _block(self, rank, token):
        if not self._in_simulation:
            # standalone single-rank use: drive the boundary inline
            if self.num_ranks != 1:
                raise ProtocolError(
                    "blocking wait outside run_simulation needs a 1-rank world"
                )
            self._boundary()
            if token.state == "pending":
                token._fail(DeadlockError("operation can never complete"))
            return
        runner = self._runners[rank]
        self._waiting[rank] = token
        self._sched_sem.release()
        runner.sem.acquire()
        if runner.poisoned:
            raise _HardFault()

    def _boundary(self) -> bool:
        """Advance one superstep; returns True if any rank became runnable."""
        self.superstep += 1
        progress = False
        # due superstep-triggered hard faults on blocked/idle victims
        for i, plan in enumerate(self.fault_plans):
            if i in self._fired_plans:
                continue
            if plan.kind != "hard" or plan.superstep is None:
                continue
            if self.superstep >= plan.superstep and plan.victim not in self.dead:
                self._fired_plans.add(i)
                self._kill(plan.victim)
                progress = True
        # collectives
        for key in sorted(self._pending, key=lambda k: (k[0], k[1])):
            group = self._pending[key]
            epoch = key[0]
            members = self.comm_members[epoch]
            tokens = group["tokens"]
            if epoch in self.revoked_epochs:
                err = RevokedError(epoch)
                for tok in tokens.values():
                    tok._fail(err)
                del self._pending[key]
            elif any(m in self.dead for m in members):
                victims = [m for m in members if m in self.dead]
                err = RankFailureError(victims)
                for tok in tokens.values():
                    tok._fail(err)
                del self._pending[key]
            elif set(group["contrib"]) == set(members):
                self._resolve_group(key, group, members)
                del self._pending[key]
        # point-to-point delivery
        for epoch, src, dest, tag, payload, token in self._outbox:
            if epoch in self.revoked_epochs:
                token._fail(RevokedError(epoch))
            elif dest in self.dead:
                token._fail(RankFailureError([dest]))
            elif tag == BACKUP_TAG:
                self.backup_stores[dest][payload.source_rank] = payload
                self._log(-1, "backup_deposit",
                          {"src": src, "dest": dest,
                           "iteration": payload.iteration})
                token._resolve(None)
            else:
                self._mail.setdefault((epoch, dest, src, tag), []).append(payload)
                token._resolve(None)
        self._outbox.clear()
        still = []
        for key, src, token in self._recv_waiters:
            if token.state != "pending":
                continue
            box = self._mail.get(key)
            if box:
                token._resolve(box.pop(0))
            elif key[0] in self.revoked_epochs:
                token._fail(RevokedError(key[0]))
            elif src in self.dead:
                token._fail(RankFailureError([src]))
            else:
                still.append((key, src, token))
        self._recv_waiters = still
        # wake ranks whose token resolved
        for rank in sorted(self._waiting):
            if self._waiting[rank].state != "pending":
                del self._waiting[rank]
                self._runnable.append(self._runners[rank])
                progress = True
        return progress

    def _spawn(self, rank, fresh, comm):
        ctx = RankContext(self, rank, comm, fresh=fresh)
        runner = _Runner(self, rank, self._program, ctx)
        self._runners[rank] = runner
        runner.start()
        self._runnable.append(runner)
        return runner

    def _pick_runnable(self) -> "_Runner":
        self._runnable.sort(key=lambda run: run.rank)
        if self._engine == "deterministic":
            return self._runnable.pop(0)
        return self._runnable.pop(int(self._rng.integers(len(self._runnable))))


def run_simulation(world: SimWorld, program, fault_plans=(),
                   engine: str = "deterministic"):
    """Execute ``program(ctx)`` on every rank until all terminate.

    Returns ``(outcomes, event_log)`` where outcomes[rank] is one of
    ("ok", result), ("error", exception) or ("killed", None) for the last
    incarnation of that rank.  Ranks blocked on operations that can never
    complete are failed with a deadlock diagnosis instead of hanging.
    """
    if engine not in ("deterministic", "threaded"):
        raise ValueError(f"unknown engine {engine!r}")
    plans = list(fault_plans)
    hard_victims = [p.victim for p in plans if p.kind == "hard"]
    if len(hard_victims) != len(set(hard_victims)):
        raise ValueError("at most one hard fault per victim")
    for p in plans:
        if not 0 <= p.victim < world.num_ranks:
            raise ValueError(f"victim {p.victim} out of range")
    world.fault_plans = plans
    world._program = program
    world._engine = engine
    world._in_simulation = True
    comm0 = world.root_comm()
    for r in range(world.num_ranks):
        world._spawn(r, fresh=False, comm=comm0)
    try:
        while True:
            while world._runnable:
                runner = world._pick_runnable()
                if runner.done:
                    continue
                runner.sem.release()
                world._sched_sem.acquire()
            alive_unfinished = [
                r for r, run in world._runners.items()
                if not run.done
            ]
            if not alive_unfinished:
                break
            progress = world._boundary()
            if not progress and not world._runnable:
                # nobody can make progress: diagnose and poison the waiters
                diagnosis = {
                    r: tok.kind for r, tok in sorted(world._waiting.items())
                }
                world._log(-1, "deadlock", {"waiting": str(diagnosis)})
                err = DeadlockError(
                    f"no matching peers for pending operations: {diagnosis}"
                )
                for rank in sorted(world._waiting):
                    tok = world._waiting.pop(rank)
                    tok._fail(err)
                    world._runnable.append(world._runners[rank])
                if not world._runnable:
                    break
    finally:
        world._in_simulation = False
    outcomes = {r: run.outcome for r, run in world._runners.items()}
    return outcomes, world.event_log


# -- public operations ------------------------------------------------

def fused_allreduce(comm: SimCommunicator, summands, overlapped: bool = False,
                    rank: int | None = None) -> CompletionToken:
    """Elementwise global sum of a list of scalars in one reduction."""
    rank = _infer_rank(comm, rank)
    return comm.world._issue_collective(
        comm, rank, "reduce", list(map(float, summands)),
        {"overlapped": overlapped},
    )


def halo_exchange(comm: SimCommunicator, part, x_local,
                  rank: int | None = None) -> CompletionToken:
    """Exchange owned boundary values; resolves to this rank's halo array."""
    rank = _infer_rank(comm, rank)
    if len(x_local) != len(part.owned[rank]):
        raise ProtocolError("x_local must match the owned index set")
    return comm.world._issue_collective(
        comm, rank, "halo", np.asarray(x_local, dtype=np.float64), {"part": part}
    )


def send(comm, dest, tag, payload, rank=None) -> CompletionToken:
    return comm.world._send(comm, _infer_rank(comm, rank), dest, tag, payload)


def recv(comm, src, tag, rank=None) -> CompletionToken:
    return comm.world._recv(comm, _infer_rank(comm, rank), src, tag)


def guard_scope(comm: SimCommunicator, body):
    """Run rank-local code; on any exception revoke the communicator and
    re-raise, so every other rank observes the failure at its next
    communication instead of deadlocking."""
    try:
        return body()
    except _HardFault:
        raise
    except Exception:
        comm.revoke()
        raise


def shrink(comm: SimCommunicator) -> SimCommunicator:
    """Epoch+1 communicator of the surviving ranks; requires revocation."""
    world = comm.world
    if not comm.revoked:
        raise ProtocolError("shrink on a healthy communicator")
    cached = world._transition.get(("shrink", comm.epoch))
    if cached is not None:
        return cached
    members = [m for m in comm.members if m not in world.dead]
    world.epoch += 1
    world.comm_members[world.epoch] = members
    world.fresh_ranks[world.epoch] = set()
    new = SimCommunicator(world, members, world.epoch)
    world._transition[("shrink", comm.epoch)] = new
    world._log(-1, "shrink", {"epoch": world.epoch, "members": str(members)})
    return new


def respawn(comm: SimCommunicator) -> SimCommunicator:
    """Epoch+1 communicator of the original size with victims replaced by
    fresh blank ranks; requires revocation (soft-only failures simply get a
    fresh epoch with unchanged members)."""
    world = comm.world
    if not comm.revoked:
        raise ProtocolError("respawn on a healthy communicator")
    cached = world._transition.get(("respawn", comm.epoch))
    if cached is not None:
        return cached
    victims = [m for m in comm.members if m in world.dead]
    world.epoch += 1
    world.comm_members[world.epoch] = list(comm.members)
    world.fresh_ranks[world.epoch] = set(victims)
    new = SimCommunicator(world, comm.members, world.epoch)
    world._transition[("respawn", comm.epoch)] = new
    for v in victims:
        world.dead.discard(v)
        world.backup_stores[v] = {}
        if world._in_simulation:
            world._spawn(v, fresh=True, comm=new)
    world._log(-1, "respawn", {"epoch": world.epoch, "fresh": str(victims)})
    return new


def _infer_rank(comm, rank):
    if rank is not None:
        return rank
    name = threading.current_thread().name
    if name.startswith("rank-"):
        return int(name.split("-", 1)[1])
    if comm.size == 1:
        return comm.members[0]
    raise ProtocolError("cannot infer calling rank outside a simulation")
