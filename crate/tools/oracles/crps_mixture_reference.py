#!/usr/bin/env python3
"""High-precision reference for the Gaussian-mixture CRPS closed form.

CRPS(F, y) = sum_i w_i A(y - mu_i, s_i^2) - 1/2 sum_{i,j} w_i w_j A(mu_i - mu_j, s_i^2 + s_j^2)
with A(m, s^2) = m (2 Phi(m/s) - 1) + 2 s phi(m/s), checked against quadrature of
int (F(t) - 1{t >= y})^2 dt for a fixed 3-component mixture.

Run: python3 tools/oracles/crps_mixture_reference.py
The printed value is frozen into the metrics unit tests.
"""
import mpmath as mp

mp.mp.dps = 40

def ncdf(z):
    return mp.mpf(1) / 2 * (1 + mp.erf(z / mp.sqrt(2)))

def npdf(z):
    return mp.exp(-z * z / 2) / mp.sqrt(2 * mp.pi)

def A(m, var):
    if var == 0:
        return abs(m)
    s = mp.sqrt(var)
    return m * (2 * ncdf(m / s) - 1) + 2 * s * npdf(m / s)

w = [mp.mpf("0.3"), mp.mpf("0.5"), mp.mpf("0.2")]
mu = [mp.mpf("-1.0"), mp.mpf("0.5"), mp.mpf("2.0")]
var = [mp.mpf("0.09"), mp.mpf("1.44"), mp.mpf("0.25")]
y = mp.mpf("0.7")

closed = sum(wi * A(y - mi, vi) for wi, mi, vi in zip(w, mu, var))
closed -= mp.mpf(1) / 2 * sum(
    wi * wj * A(mi - mj, vi + vj)
    for wi, mi, vi in zip(w, mu, var)
    for wj, mj, vj in zip(w, mu, var)
)

F = lambda t: sum(wi * ncdf((t - mi) / mp.sqrt(vi)) for wi, mi, vi in zip(w, mu, var))
lo, hi = mp.mpf(-60), mp.mpf(60)
quad = mp.quad(lambda t: F(t) ** 2, [lo, y]) + mp.quad(lambda t: (F(t) - 1) ** 2, [y, hi])

print(f"closed = {mp.nstr(closed, 22)}")
print(f"|closed - quad| = {mp.nstr(abs(closed - quad), 5)}")
