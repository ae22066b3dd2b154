"""Measure backup codec compression against the accuracy bound.

The accuracy-bounded codec quantizes against a linear predictor in
lexicographic order; smooth iterates compress well, rough ones cost more.
The adaptive variant ties the bound to the current residual norm so early
(inaccurate) iterates compress harder than late ones.

Run: python3 demos/codec_compression_study.py
"""

import numpy as np

import ftkrylov as fk


def main():
    rng = np.random.default_rng(0)
    t = np.linspace(0.0, 1.0, 4096)
    smooth = np.sin(2 * np.pi * t) + 0.5 * np.cos(6 * np.pi * t)
    rough = rng.standard_normal(t.size)

    print(f"{'tau':>8} {'data':>7} {'rate':>7} {'max err':>10}")
    for tau in (1e-2, 1e-4, 1e-7):
        codec = fk.Codec("accuracy_bounded", tau=tau)
        for name, x in (("smooth", smooth), ("rough", rough)):
            snap = fk.encode(codec, x)
            err = np.max(np.abs(fk.decode(snap) - x))
            print(f"{tau:>8.0e} {name:>7} {snap.compression_rate:>7.2f} "
                  f"{err:>10.2e}")

    print()
    print("adaptive codec on a converging iterate sequence:")
    grid = fk.StructuredGrid(32, 32)
    A = fk.assemble_poisson(grid, fk.Anisotropy(1.0, 0.01))
    b = fk.make_rhs(grid, A, "ones")
    cfg = fk.SolverConfig(variant="classic", tol=1e-8, maxit=400)
    codec = fk.Codec("adaptive_accuracy")
    rows = []

    def snap_iterate(it, st, rec):
        s = fk.encode(codec, st.x, residual_norm=rec.residual_norms[-1])
        rows.append((it, rec.residual_norms[-1], s.tau_used,
                     s.compression_rate))

    fk.solve(fk.LocalSystem(A, fk.jacobi(A)), b, cfg, callback=snap_iterate)
    print(f"{'iter':>4} {'resid':>10} {'tau used':>10} {'rate':>7}")
    for it, resid, tau, rate in rows[:: max(1, len(rows) // 8)]:
        print(f"{it:>4} {resid:>10.2e} {tau:>10.2e} {rate:>7.2f}")

    print()
    print("the bound tracks the residual, so the relative quantization —")
    print("and with it the compression rate — stays roughly constant all")
    print("the way down: backups stay cheap without ever being less")
    print("accurate than the iterate they protect.")


if __name__ == "__main__":
    main()
