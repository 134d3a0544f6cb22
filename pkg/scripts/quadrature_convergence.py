"""Area and interface-length errors of the cut quadrature under refinement.

Writes one CSV row per (diameter, n) with the errors, the 2h^2 bound and the
observed order against the previous resolution.
"""

import argparse
import csv
import math
import sys

from cutch import cutgeom
from cutch.cutgeom import LevelSet
from cutch.mesh import build_background_mesh


def rows(diameters, resolutions):
    for mu in diameters:
        prev = None
        for n in resolutions:
            mesh = build_background_mesh(n)
            cc = cutgeom.classify(mesh, LevelSet.circle(mu))
            ea = abs(float(cutgeom.volume_rules(mesh, cc).weights.sum()) - (1 - math.pi * mu**2 / 4))
            el = abs(float(cutgeom.interface_rules(mesh, cc).weights.sum()) - math.pi * mu)
            oa = ol = float("nan")
            if prev is not None:
                r = math.log(n / prev[0])
                oa = math.log(prev[1] / ea) / r
                ol = math.log(prev[2] / el) / r
            yield mu, n, ea, el, 2 * mesh.h**2, oa, ol
            prev = (n, ea, el)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--diameters", default="0.36,0.42,0.48")
    p.add_argument("--resolutions", default="12,24,48,96")
    p.add_argument("--out", default="-")
    args = p.parse_args(argv)
    mus = [float(v) for v in args.diameters.split(",")]
    ns = [int(v) for v in args.resolutions.split(",")]
    f = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(f)
    w.writerow(["mu", "n", "area_error", "length_error", "bound_2h2", "area_order", "length_order"])
    for r in rows(mus, ns):
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    if f is not sys.stdout:
        f.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
