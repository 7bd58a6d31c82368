"""Partial optimal transport fluids on ball-restricted Laguerre diagrams.

The package is organized around one geometric idea: each fluid cell is the
intersection of a Laguerre (power) cell with the ball of radius sqrt(psi_i)
centered on its site.  Everything else -- the Newton solver that enforces
per-cell volumes, the fluid forces, and the renderer -- consumes the analytic
per-cell quantities (volume, centroid, facet areas, free-surface area)
computed from that intersection.

Modules
-------
geom        convex cells, planes, generalized polygons (segments + arcs)
laguerre    power-diagram construction inside a convex domain
restricted  analytic evaluation of cell-with-ball intersections
solver      damped Newton solver for the volume prescriptions
fluid       free-surface fluid time stepper (spring pressure, viscosity,
            surface tension, semi-implicit integration)
render      offline renderer + oriented surface sampling
oracle      Monte-Carlo and finite-difference verification tools
cli         scene configs, frame files, and the `potflow` command
"""

import os as _os

# Thread-count ceiling must be fixed before numba is first imported anywhere.
# Oversubscription past the physical core count is allowed so that runs with
# different --threads settings can be compared on any machine.
_os.environ.setdefault("NUMBA_NUM_THREADS", str(max(_os.cpu_count() or 1, 8)))

__version__ = "0.1.0"


def set_threads(n: int) -> int:
    """Set the worker thread count for all parallel kernels.

    Returns the count actually applied (clamped to the process ceiling).
    Results are bitwise independent of this setting.
    """
    import numba

    cap = int(_os.environ.get("NUMBA_NUM_THREADS", "1"))
    n = max(1, min(int(n), cap))
    numba.set_num_threads(n)
    return n
