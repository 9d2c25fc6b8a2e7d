#!/usr/bin/env python3
"""Run the standard benchmark sweep.

Thin wrapper over the ``threadcache-bench`` CLI that defaults ``--sweep``
to {1, 2, 4, ..., CPU count} so the usual experiment (a creator-count
sweep of the spawn workload, both modes) is a single command:

    python scripts/run_bench.py --csv results.csv
    python scripts/run_bench.py --duration 2 --runs 3

Any flag accepted by ``threadcache-bench`` is passed through unchanged.
"""

import os
import sys

from threadcache.bench import main


def default_sweep():
    cpus = os.cpu_count() or 1
    points, k = [], 1
    while k < cpus:
        points.append(k)
        k *= 2
    points.append(cpus)
    return ",".join(str(p) for p in points)


if __name__ == "__main__":
    argv = sys.argv[1:]
    if "--sweep" not in argv:
        argv = ["--sweep", default_sweep()] + argv
    sys.exit(main(argv))
