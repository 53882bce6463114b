#!/usr/bin/env python3
"""High-precision reference values for the closed-form CRPS.

For a normal forecast N(mu, sigma^2) and outcome y:
    CRPS = sigma * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ],  z = (y - mu)/sigma.

Values are checked against direct quadrature of the defining integral
    CRPS = int (F(t) - 1{t >= y})^2 dt,
split at t = y where the integrand jumps.

Run: python3 tools/oracles/crps_reference.py
The printed values are frozen into the metrics unit tests.
"""
import mpmath as mp

mp.mp.dps = 40

def ncdf(z):
    return mp.mpf(1) / 2 * (1 + mp.erf(z / mp.sqrt(2)))

def npdf(z):
    return mp.exp(-z * z / 2) / mp.sqrt(2 * mp.pi)

def crps_closed(mu, sigma, y):
    z = (y - mu) / sigma
    return sigma * (z * (2 * ncdf(z) - 1) + 2 * npdf(z) - 1 / mp.sqrt(mp.pi))

def crps_quadrature(mu, sigma, y):
    lo, hi = mu - 40 * sigma, mu + 40 * sigma
    lo = min(lo, y - 1)
    hi = max(hi, y + 1)
    F = lambda t: ncdf((t - mu) / sigma)
    left = mp.quad(lambda t: F(t) ** 2, [lo, y])
    right = mp.quad(lambda t: (F(t) - 1) ** 2, [y, hi])
    return left + right

cases = [("0", "1", "0"), ("0", "1", "1.3"), ("-0.7", "2.5", "0.4")]
for mu, sigma, y in cases:
    mu_, s_, y_ = mp.mpf(mu), mp.mpf(sigma), mp.mpf(y)
    c = crps_closed(mu_, s_, y_)
    q = crps_quadrature(mu_, s_, y_)
    print(f"mu={mu} sigma={sigma} y={y}: closed={mp.nstr(c, 22)} |closed-quad|={mp.nstr(abs(c - q), 5)}")
print(f"(sqrt(2)-1)/sqrt(pi) = {mp.nstr((mp.sqrt(2) - 1) / mp.sqrt(mp.pi), 22)}")
