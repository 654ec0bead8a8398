"""Regenerate tests/data/dipole_lfp_noiseless.csv by direct summation.

Deliberately avoids the package: the template, the cylinder weight, the
trapezoid weights and the sums are written out with plain Python loops and
``math.fsum``. Rows are electrodes, columns are time samples (ms). The first
block is the raw forward projection at R = 150; the second block is the same
LFP scaled to unit peak absolute value, which is what the dipole study uses.
"""

import math
from pathlib import Path

R = 150.0
N_SPACE, N_TIME, Z_MAX = 2400, 50, 2400.0
ELECTRODES = [Z_MAX * i / 23 for i in range(24)]
BUMPS = [(200.0, 25.0, 150.0, 3.0, 1), (800.0, 25.0, 150.0, 3.0, -1),
         (1600.0, 30.0, 150.0, 4.0, 1), (2200.0, 30.0, 150.0, 4.0, -1)]


def template():
    z = [Z_MAX * i / (N_SPACE - 1) for i in range(N_SPACE)]
    raw = [[math.fsum(s * math.exp(-0.5 * ((zi - zm) / zs) ** 2 - 0.5 * ((t - tm) / ts) ** 2)
                      for zm, tm, zs, ts, s in BUMPS) for t in range(N_TIME)] for zi in z]
    peak = max(abs(v) for row in raw for v in row)
    return z, [[v / peak for v in row] for row in raw]


def main():
    z, g = template()
    h = [z[i + 1] - z[i] for i in range(N_SPACE - 1)]
    w = [0.0] * N_SPACE
    for i, hi in enumerate(h):
        w[i] += hi / 2
        w[i + 1] += hi / 2
    lfp = []
    for e in ELECTRODES:
        a = [w[j] * (math.sqrt(((e - z[j]) / R) ** 2 + 1) - abs(e - z[j]) / R) for j in range(N_SPACE)]
        lfp.append([-R / 2 * math.fsum(a[j] * g[j][t] for j in range(N_SPACE)) for t in range(N_TIME)])
    peak = max(abs(v) for row in lfp for v in row)
    out = Path(__file__).resolve().parents[1] / "tests" / "data" / "dipole_lfp_noiseless.csv"
    with open(out, "w") as fh:
        fh.write(f"# dipole template, R={R!r}, trapezoid rule on {N_SPACE} nodes, 24 electrodes x {N_TIME} ms\n")
        fh.write("# block,electrode_um," + ",".join(f"t{t}" for t in range(N_TIME)) + "\n")
        for block, scale in (("raw", 1.0), ("unit_peak", 1.0 / peak)):
            for e, row in zip(ELECTRODES, lfp):
                fh.write(f"{block},{e!r}," + ",".join(f"{v * scale:.17g}" for v in row) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
