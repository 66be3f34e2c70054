#!/usr/bin/env python3
"""Regenerates the two-source ICA fixture.

sources.csv holds 1000 samples of two independent non-Gaussian signals (a
uniform source and a Laplace source, each standardized); mixed.csv holds the
same samples mixed by a fixed 2 x 2 matrix. Run from this directory.
"""
import numpy as np

MIXING = np.array([[1.0, 0.6], [0.4, 1.0]])


def main():
    rng = np.random.default_rng(20240501)
    n = 1000
    s = np.column_stack([rng.uniform(-1.0, 1.0, n), rng.laplace(0.0, 1.0, n)])
    s = (s - s.mean(axis=0)) / s.std(axis=0)
    x = s @ MIXING.T
    np.savetxt("sources.csv", s, delimiter=",", fmt="%.17g", header="s0,s1", comments="")
    np.savetxt("mixed.csv", x, delimiter=",", fmt="%.17g", header="x0,x1", comments="")


if __name__ == "__main__":
    main()
