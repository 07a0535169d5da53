"""Compare kernel Hessians for several Theta^h coefficients against a weighted reference.

On hyperbolic 3-space with the radial weight eta(r) = c r^2 the kernel has no
closed form, so the reference is a finite-difference Hessian of the elementary
kernel formula over probe radii (common random numbers).  All coefficients are
evaluated on one shared set of paths.
"""

import argparse

import numpy as np

from fkhess import estimators as est
from fkhess import geometry as geo
from fkhess import oracles as orc
from fkhess import paths as pth


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--weight", type=float, default=0.2, help="c in eta(r) = c r^2")
    parser.add_argument("--T", type=float, default=0.5)
    parser.add_argument("--distance", type=float, default=1.0)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--n-paths", type=int, default=100_000)
    parser.add_argument("--reference-paths", type=int, default=8192)
    parser.add_argument("--seed", type=int, default=205)
    parser.add_argument("--workers", type=int, default=None)
    args = parser.parse_args()

    M = geo.hyperbolic(3)
    weight = geo.QuadraticWeight(args.weight)
    spec = pth.BridgeSpec(args.T, args.steps)
    ref = orc.kernel_hessian_radial_reference(M, weight, None, args.distance, spec, args.reference_paths,
                                              args.seed + 100, workers=args.workers)
    scan = est.hess_kernel_theta_scan(M, weight, geo.point_at(M, args.distance), spec, args.n_paths, args.seed,
                                      workers=args.workers)
    print("reference diagonal", np.round(ref.value.diagonal(), 4), "stderr", np.round(ref.stderr.diagonal(), 4))
    for c, e in sorted(scan.items()):
        z = (e.value - ref.value) / np.hypot(e.stderr, ref.stderr)
        print(f"coefficient {c:+.1f}: diagonal {np.round(e.value.diagonal(), 4)}, max |z| {np.abs(z).max():.2f}")


if __name__ == "__main__":
    main()
