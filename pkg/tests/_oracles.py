"""Independent dense symbolic-quadrature assembler used as a test oracle.

Basis functions are built on the physical triangle by solving a rational
Vandermonde system in monomials {1, x, y, x^2, xy, y^2}; integrals are
evaluated exactly by expanding the integrand over the mapped reference
triangle and applying the closed-form monomial integral
``a! b! / (a + b + 2)!``.  Nothing here touches the production reference
elements or quadrature tables.
"""

import math

import sympy as sp

X, Y = sp.symbols("x y")
XI, ETA = sp.symbols("xi eta")


def tri_integral(expr, p0, p1, p2):
    """Exact integral of a polynomial expression over a triangle."""
    p0, p1, p2 = (list(map(sp.Rational, p)) for p in (p0, p1, p2))
    xm = p0[0] + XI * (p1[0] - p0[0]) + ETA * (p2[0] - p0[0])
    ym = p0[1] + XI * (p1[1] - p0[1]) + ETA * (p2[1] - p0[1])
    jac = sp.Rational((p1[0] - p0[0]) * (p2[1] - p0[1])
                      - (p2[0] - p0[0]) * (p1[1] - p0[1]))
    mapped = sp.expand(expr.subs({X: xm, Y: ym}, simultaneous=True))
    poly = sp.Poly(mapped, XI, ETA)
    total = sp.Integer(0)
    for (a, b), coeff in poly.terms():
        total += coeff * sp.Rational(
            math.factorial(a) * math.factorial(b), math.factorial(a + b + 2))
    return sp.Abs(jac) * total


def _nodal_basis(nodes, monomials):
    vander = sp.Matrix([[m.subs({X: nx, Y: ny}, simultaneous=True)
                         for m in monomials] for nx, ny in nodes])
    inv = vander.inv()
    basis = []
    for j in range(len(nodes)):
        basis.append(sp.expand(sum(inv[i, j] * monomials[i]
                                   for i in range(len(monomials)))))
    return basis


def p1_basis(p0, p1, p2):
    nodes = [tuple(map(sp.Rational, p)) for p in (p0, p1, p2)]
    return _nodal_basis(nodes, [sp.Integer(1), X, Y])


def p2_basis(p0, p1, p2):
    """P2 nodal basis in production order: vertices, then midpoints of
    edges (0,1), (1,2), (2,0)."""
    v = [tuple(map(sp.Rational, p)) for p in (p0, p1, p2)]
    mids = [((v[a][0] + v[b][0]) / 2, (v[a][1] + v[b][1]) / 2)
            for a, b in ((0, 1), (1, 2), (2, 0))]
    return _nodal_basis(v + mids, [sp.Integer(1), X, Y, X**2, X * Y, Y**2])


def _vector_basis(scalars):
    basis = []
    for phi in scalars:
        basis.append((phi, sp.Integer(0)))
        basis.append((sp.Integer(0), phi))
    return basis


def _eps(u):
    ux, uy = u
    return sp.Matrix([[sp.diff(ux, X), (sp.diff(ux, Y) + sp.diff(uy, X)) / 2],
                      [(sp.diff(ux, Y) + sp.diff(uy, X)) / 2, sp.diff(uy, Y)]])


def eps_eps_dense(tri, coeff):
    """(coeff eps(u) : eps(v)) over one triangle, P2 vector basis, 12x12."""
    basis = _vector_basis(p2_basis(*tri))
    n = len(basis)
    out = [[None] * n for _ in range(n)]
    eps = [_eps(u) for u in basis]
    for i in range(n):
        for j in range(n):
            integrand = sp.expand(sum(eps[i][a, b] * eps[j][a, b]
                                      for a in range(2) for b in range(2)))
            out[i][j] = sp.Rational(coeff) * tri_integral(integrand, *tri)
    return out


def mass_dense(tri, coeff, degree):
    scal = p1_basis(*tri) if degree == 1 else p2_basis(*tri)
    basis = _vector_basis(scal)
    n = len(basis)
    out = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            integrand = sp.expand(basis[i][0] * basis[j][0]
                                  + basis[i][1] * basis[j][1])
            out[i][j] = sp.Rational(coeff) * tri_integral(integrand, *tri)
    return out


def convection_dense(tri, w_expr):
    """((w . grad) u, v) over one triangle with a symbolic advecting field."""
    basis = _vector_basis(p2_basis(*tri))
    n = len(basis)
    out = [[None] * n for _ in range(n)]
    wx, wy = w_expr
    for i in range(n):
        for j in range(n):
            uj = basis[j]
            conv0 = wx * sp.diff(uj[0], X) + wy * sp.diff(uj[0], Y)
            conv1 = wx * sp.diff(uj[1], X) + wy * sp.diff(uj[1], Y)
            integrand = sp.expand(conv0 * basis[i][0] + conv1 * basis[i][1])
            out[i][j] = tri_integral(integrand, *tri)
    return out
