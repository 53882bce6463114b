#!/usr/bin/env python3
"""High-precision reference values for the Matern-5/2 correlation.

phi(t) = (1 + sqrt(5) t + (5/3) t^2) * exp(-sqrt(5) t)

Run: python3 tools/oracles/matern52_reference.py
The printed values are frozen into the kernel unit tests.
"""
import mpmath as mp

mp.mp.dps = 50

def matern52(t):
    t = mp.mpf(t)
    s5 = mp.sqrt(5)
    return (1 + s5 * t + mp.mpf(5) / 3 * t**2) * mp.exp(-s5 * t)

for t in ("0.5", "1", "2"):
    print(f"t = {t}: {mp.nstr(matern52(t), 22)}")
