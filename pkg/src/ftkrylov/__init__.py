"""Fault-tolerant sparse iterative solver toolkit.

Communication-reducing preconditioned CG variants, approximate-inverse
preconditioners, and compressed in-memory checkpoint/recovery, all running
on a deterministic simulated message-passing layer with fault injection.
"""

from .errors import (BreakdownError, ConfigError, DimensionMismatchError,
                     DivergenceError, FactorBreakdownError, FtkError,
                     InvalidPartitionError, MatrixMarketError,
                     RecoveryFailedError, SingularDiagonalError)
from .sparse import (CsrMatrix, GramMatrix, MultiVector, axpy, copy,
                     dot_block, norm2, read_matrix_market, read_vector,
                     scale, spmm_multi, spmv, write_matrix_market,
                     write_vector)
from .grids import (Anisotropy, Partition, StructuredGrid, assemble_poisson,
                    extract_local_system, make_rhs, partition_1d_strips)
from .precond import (DenseSolvePreconditioner, Hierarchy,
                      IdentityPreconditioner, Preconditioner, SainvConfig,
                      SainvFactors, SainvPreconditioner,
                      SparseMatrixPreconditioner, build_hierarchy, ilu0,
                      jacobi, prolongate_full, restrict_full, sainv,
                      sainv_apply, spai1, ssor)
from .commsim import (CompletionToken, DeadlockError, FaultPlan,
                      InjectedFault, ProtocolError, RankFailureError,
                      RevokedError, SimCommunicator, SimWorld,
                      fused_allreduce, guard_scope, halo_exchange, recv,
                      respawn, run_simulation, send, shrink)
from .krylov import (ConvergenceRecord, KrylovState, LocalSystem, RankSystem,
                     SolverConfig, VARIANTS, block_solve, memory_accounting,
                     pipelined_consistency_check, reduction_rate, solve)
from .resilience import (BackupSnapshot, Codec, CodecError, HookStacks,
                         RecoveryPolicy, ScenarioResult, decode, encode,
                         place_backup, resilient_solve, run_scenario)

__version__ = "0.1.0"
