"""Pure-numpy kernels, used when the compiled extension is unavailable.

The operation order here mirrors ``_ckernels.pyx`` exactly so both backends
agree to the last few ulps (they may differ only through ``exp``).
"""

import numpy as np

# column slots of a stencil row; see ``stencil_eval``
W_C, W_L, W_R, W_D, W_U, U_C, V_C = range(7)


def stencil_eval(vals, nbr, hx, hy, inv_re):
    """Pointwise Burgers right-hand side and its local derivatives.

    Parameters
    ----------
    vals : (n,) float array
        Value buffer; ``nbr`` entries index into it. The caller appends a
        trailing zero that boundary neighbours point at.
    nbr : (m, 7) intp array
        Per target row: indices of the own-component value at the node and its
        left/right/down/up neighbours, then the x- and y-velocity at the node.
    hx, hy, inv_re : float

    Returns
    -------
    f : (m,) array
    dfd : (m, 7) array
        Partial derivatives of ``f`` with respect to each slot.
    """
    wc = vals[nbr[:, W_C]]
    wl = vals[nbr[:, W_L]]
    wr = vals[nbr[:, W_R]]
    wd = vals[nbr[:, W_D]]
    wu = vals[nbr[:, W_U]]
    uc = vals[nbr[:, U_C]]
    vc = vals[nbr[:, V_C]]
    dx = (wc - wl) / hx
    dy = (wc - wd) / hy
    cx = inv_re / (hx * hx)
    cy = inv_re / (hy * hy)
    lap = cx * ((wr - 2.0 * wc) + wl) + cy * ((wu - 2.0 * wc) + wd)
    f = (lap - uc * dx) - vc * dy

    dfd = np.empty((nbr.shape[0], 7))
    dfd[:, W_C] = ((-uc / hx) - vc / hy) - 2.0 * (cx + cy)
    dfd[:, W_L] = uc / hx + cx
    dfd[:, W_R] = cx
    dfd[:, W_D] = vc / hy + cy
    dfd[:, W_U] = cy
    dfd[:, U_C] = -dx
    dfd[:, V_C] = -dy
    return f, dfd


def stencil_rhs(vals, nbr, hx, hy, inv_re):
    """Right-hand side only, same arithmetic as ``stencil_eval``."""
    wc = vals[nbr[:, W_C]]
    dx = (wc - vals[nbr[:, W_L]]) / hx
    dy = (wc - vals[nbr[:, W_D]]) / hy
    cx = inv_re / (hx * hx)
    cy = inv_re / (hy * hy)
    lap = cx * ((vals[nbr[:, W_R]] - 2.0 * wc) + vals[nbr[:, W_L]]) + cy * (
        (vals[nbr[:, W_U]] - 2.0 * wc) + vals[nbr[:, W_D]]
    )
    return (lap - vals[nbr[:, U_C]] * dx) - vals[nbr[:, V_C]] * dy


def _swish(a):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s * (1.0 + a * (1.0 - s))


def masked_decode(z, w1, b1, w2, cols, b2, jacobian=False):
    """Evaluate ``w2 . swish(w1 z + b1) + b2`` for a banded sparse ``w2``.

    ``w2`` and ``cols`` are ``(m, w)``: row ``i`` holds ``w`` weights into the
    hidden units ``cols[i]``. With ``jacobian=True`` also returns the
    ``(m, len(z))`` derivative.
    """
    ns = z.shape[0]
    a = w1[:, 0] * z[0]
    for k in range(1, ns):
        a = a + w1[:, k] * z[k]
    a = a + b1
    h, dh = _swish(a)

    width = cols.shape[1]
    y = w2[:, 0] * h[cols[:, 0]]
    for k in range(1, width):
        y = y + w2[:, k] * h[cols[:, k]]
    y = y + b2
    if not jacobian:
        return y, None

    c = cols[:, 0]
    jac = (w2[:, 0] * dh[c])[:, None] * w1[c]
    for k in range(1, width):
        c = cols[:, k]
        jac = jac + (w2[:, k] * dh[c])[:, None] * w1[c]
    return y, jac


def gather_rows(coef, nbr, mat):
    """``out[s] = sum_k coef[s, k] * mat[nbr[s, k]]`` in slot order."""
    out = coef[:, 0, None] * mat[nbr[:, 0]]
    for k in range(1, nbr.shape[1]):
        out = out + coef[:, k, None] * mat[nbr[:, k]]
    return out
