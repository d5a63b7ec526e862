"""Quadrature rules on triangles and time intervals."""

import numpy as np
from numpy.polynomial.legendre import leggauss

# Symmetric 6-point rule, exact for polynomials of degree 4.
_A1, _W1 = 0.445948490915964886318329, 0.223381589678011465944827
_A2, _W2 = 0.091576213509770743459571, 0.109951743655321867638506

TRI_BARY = np.array([
    [1.0 - 2.0 * _A1, _A1, _A1],
    [_A1, 1.0 - 2.0 * _A1, _A1],
    [_A1, _A1, 1.0 - 2.0 * _A1],
    [1.0 - 2.0 * _A2, _A2, _A2],
    [_A2, 1.0 - 2.0 * _A2, _A2],
    [_A2, _A2, 1.0 - 2.0 * _A2],
])
TRI_WEIGHTS = np.array([_W1, _W1, _W1, _W2, _W2, _W2])
TRI_WEIGHTS = TRI_WEIGHTS / TRI_WEIGHTS.sum()


def _subdivided_rule():
    # split the reference triangle into 4 congruent pieces and reuse the 6-point rule
    corners = np.eye(3)
    mids = 0.5 * (corners[[1, 2, 0]] + corners[[2, 0, 1]])  # mids[k] opposite corner k
    pieces = [
        (corners[0], mids[2], mids[1]),
        (mids[2], corners[1], mids[0]),
        (mids[1], mids[0], corners[2]),
        (mids[0], mids[1], mids[2]),
    ]
    bary = np.concatenate([TRI_BARY @ np.array(p) for p in pieces])
    weights = np.tile(TRI_WEIGHTS, 4) / 4.0
    return bary, weights


TRI4_BARY, TRI4_WEIGHTS = _subdivided_rule()


def triangle_points(p0, p1, p2, bary=TRI_BARY):
    """Map barycentric quadrature points onto a batch of triangles.

    Parameters
    ----------
    p0, p1, p2 : ndarray, shape (n, 2)
        Triangle corners.
    bary : ndarray, shape (q, 3)

    Returns
    -------
    ndarray, shape (n, q, 2)
    """
    return (bary[None, :, 0, None] * p0[:, None, :]
            + bary[None, :, 1, None] * p1[:, None, :]
            + bary[None, :, 2, None] * p2[:, None, :])


def gauss_interval(a, b, n):
    """n-point Gauss-Legendre nodes and weights on [a, b]."""
    x, w = leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def _graded(a, b, toward_left, n, levels, ratio):
    # geometric panels shrinking towards one end of [a, b]
    length = b - a
    cuts = np.concatenate([[0.0], ratio ** np.arange(levels - 1, -1, -1)]) * length
    nodes, weights = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        x, w = gauss_interval(lo, hi, n)
        nodes.append(x)
        weights.append(w)
    x = np.concatenate(nodes)
    w = np.concatenate(weights)
    if toward_left:
        return a + x, w
    return b - x, w


def time_rule(t0, tau, n, singular_times=(), levels=6, ratio=0.15):
    """Gauss rule on [t0, t0 + tau], graded towards known singular times.

    A singular time inside the interval splits it.  Every piece whose
    nearest singular time lies within one piece length of it receives a
    geometric composite rule with ``levels`` panels of ``n`` points each.
    """
    t1 = t0 + tau
    cuts = [t0] + sorted(s for s in singular_times if t0 < s < t1) + [t1]
    if len(cuts) == 2 and not singular_times:
        return gauss_interval(t0, t1, n)
    nodes, weights = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        length = b - a
        dl = min((abs(a - s) for s in singular_times), default=np.inf)
        dr = min((abs(b - s) for s in singular_times), default=np.inf)
        if min(dl, dr) <= length:
            x, w = _graded(a, b, dl <= dr, n, levels, ratio)
        else:
            x, w = gauss_interval(a, b, n)
        # on tiny pieces a + x can round onto the singular end point
        x = np.clip(x, np.nextafter(a, b), np.nextafter(b, a))
        nodes.append(x)
        weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)
