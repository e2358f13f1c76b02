"""Length and energy of geodesic paths against common schedules.

Prints the terminal-parameter family of geodesics and, for one endpoint
pair, how far each baseline path is from the energy-length bound
E >= l^2 / 2 (equality only for constant-speed paths).
"""
import numpy as np

from geodesic_diffusion import (
    BoundaryConditions,
    CosineAlpha,
    ExponentialVE,
    GeodesicSchedule,
    LinearBeta,
    LinearSigma,
    MatchedBaseline,
    compare_energies,
    diagnose_path,
)
from geodesic_diffusion.cli import TERMINAL_FAMILY

n = 256
A = np.sqrt(n)

print("geodesic family from (alpha0, sigma0) = (1, 0.002)")
print(f"{'sigma1':>7} {'alpha1':>7} {'length':>9} {'speed cv':>9}")
for s1, a1 in TERMINAL_FAMILY:
    bc = BoundaryConditions(1.0, 0.002, a1, s1)
    d = diagnose_path(GeodesicSchedule(bc, A, n) if a1 < 1 else ExponentialVE(0.002, s1), A, n)
    print(f"{s1:7g} {a1:7g} {d.length:9.3f} {d.speed_cv:9.1e}")

print()
print("shared endpoints sigma in [0.002, 80], alpha = 1")
bc = BoundaryConditions(1.0, 0.002, 1.0, 80.0)
paths = [ExponentialVE(), LinearSigma(bc), MatchedBaseline(LinearBeta()), MatchedBaseline(CosineAlpha())]
for d in compare_energies(paths, A, n):
    print(f"{d.kind:>22}  length {d.length:9.3f}  E/(l^2/2) {d.energy_over_half_length_sq:10.3f}")
