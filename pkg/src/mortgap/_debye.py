"""Coefficients of the Debye polynomials u_k(p) for the uniform large-order
expansion of the modified Bessel function I_n(n z).

Generated exactly with rational arithmetic from the standard recurrence

    u_{k+1}(p) = p^2 (1 - p^2) u_k'(p) / 2 + (1/8) int_0^p (1 - 5 t^2) u_k(t) dt

and converted to floats once at import.
"""

from fractions import Fraction

N_TERMS = 14


def _debye_polynomials(n_terms):
    polys = [[Fraction(1)]]
    for _ in range(n_terms - 1):
        u = polys[-1]
        du = [i * c for i, c in enumerate(u)][1:]
        out = [Fraction(0)] * (len(u) + 4)
        for i, c in enumerate(du):
            out[i + 2] += c / 2
            out[i + 4] -= c / 2
        integrand = [Fraction(0)] * (len(u) + 2)
        for i, c in enumerate(u):
            integrand[i] += c
            integrand[i + 2] -= 5 * c
        for i, c in enumerate(integrand):
            out[i + 1] += c / (8 * (i + 1))
        while len(out) > 1 and out[-1] == 0:
            out.pop()
        polys.append(out)
    return polys


# DEBYE_COEFFS[k][i] is the coefficient of p**i in u_k(p).
DEBYE_COEFFS = tuple(
    tuple(float(c) for c in poly) for poly in _debye_polynomials(N_TERMS)
)
