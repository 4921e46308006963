"""Hot per-pixel and per-parameter loops.

Every kernel exists twice: an ``@njit`` loop (``*_nb``) and a vectorised numpy
version (``*_np``).  Both evaluate the same float64 operations in the same
order, so they agree bit-for-bit.  The unsuffixed names dispatch on
:data:`satcalc._accel.USE_NUMBA`.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# spectral index formulas (float64, flat arrays)


@njit(cache=True)
def normalized_difference_nb(a, b, valid, eps):
    n = a.shape[0]
    out = np.zeros(n, dtype=np.float64)
    ok = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if valid[i]:
            den = a[i] + b[i]
            if abs(den) >= eps:
                out[i] = (a[i] - b[i]) / den
                ok[i] = True
    return out, ok


def normalized_difference_np(a, b, valid, eps):
    den = a + b
    ok = valid & (np.abs(den) >= eps)
    safe = np.where(ok, den, 1.0)
    out = np.where(ok, (a - b) / safe, 0.0)
    return out, ok


@njit(cache=True)
def savi_nb(nir, red, valid, soil_l, eps):
    n = nir.shape[0]
    out = np.zeros(n, dtype=np.float64)
    ok = np.zeros(n, dtype=np.bool_)
    gain = 1.0 + soil_l
    for i in range(n):
        if valid[i]:
            den = nir[i] + red[i] + soil_l
            if abs(den) >= eps:
                out[i] = (nir[i] - red[i]) * gain / den
                ok[i] = True
    return out, ok


def savi_np(nir, red, valid, soil_l, eps):
    gain = 1.0 + soil_l
    den = nir + red + soil_l
    ok = valid & (np.abs(den) >= eps)
    safe = np.where(ok, den, 1.0)
    out = np.where(ok, (nir - red) * gain / safe, 0.0)
    return out, ok


@njit(cache=True)
def evi_nb(nir, red, blue, valid, g, c1, c2, canopy_l, eps):
    n = nir.shape[0]
    out = np.zeros(n, dtype=np.float64)
    ok = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if valid[i]:
            den = nir[i] + c1 * red[i] - c2 * blue[i] + canopy_l
            if abs(den) >= eps:
                out[i] = g * (nir[i] - red[i]) / den
                ok[i] = True
    return out, ok


def evi_np(nir, red, blue, valid, g, c1, c2, canopy_l, eps):
    den = nir + c1 * red - c2 * blue + canopy_l
    ok = valid & (np.abs(den) >= eps)
    safe = np.where(ok, den, 1.0)
    out = np.where(ok, g * (nir - red) / safe, 0.0)
    return out, ok


# ---------------------------------------------------------------------------
# pixel-centre bilinear resampling with nodata poisoning


@njit(cache=True)
def _axis_coord(i, ratio, n_in):
    src = (i + 0.5) * ratio - 0.5
    if src < 0.0:
        src = 0.0
    top = n_in - 1.0
    if src > top:
        src = top
    i0 = int(np.floor(src))
    if i0 > n_in - 1:
        i0 = n_in - 1
    w = src - i0
    i1 = i0 + 1
    if i1 > n_in - 1:
        i1 = n_in - 1
    return i0, i1, w


@njit(cache=True)
def bilinear_nb(values, valid, out_h, out_w):
    in_h, in_w = values.shape
    ry = in_h / out_h
    rx = in_w / out_w
    out = np.zeros((out_h, out_w), dtype=np.float64)
    ok = np.zeros((out_h, out_w), dtype=np.bool_)
    for i in range(out_h):
        y0, y1, wy = _axis_coord(i, ry, in_h)
        for j in range(out_w):
            x0, x1, wx = _axis_coord(j, rx, in_w)
            good = valid[y0, x0]
            if wx > 0.0:
                good = good and valid[y0, x1]
            if wy > 0.0:
                good = good and valid[y1, x0]
                if wx > 0.0:
                    good = good and valid[y1, x1]
            if not good:
                continue
            v00 = np.float64(values[y0, x0])
            v01 = np.float64(values[y0, x1])
            v10 = np.float64(values[y1, x0])
            v11 = np.float64(values[y1, x1])
            top = v00 + wx * (v01 - v00)
            bot = v10 + wx * (v11 - v10)
            out[i, j] = top + wy * (bot - top)
            ok[i, j] = True
    return out, ok


def _axis_coords_np(n_out, n_in):
    ratio = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * ratio - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    w = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, w


def bilinear_np(values, valid, out_h, out_w):
    in_h, in_w = values.shape
    y0, y1, wy = _axis_coords_np(out_h, in_h)
    x0, x1, wx = _axis_coords_np(out_w, in_w)
    v = values.astype(np.float64)
    Y0, X0 = np.ix_(y0, x0)
    Y1, X1 = np.ix_(y1, x1)
    v00, v01, v10, v11 = v[Y0, X0], v[Y0, X1], v[Y1, X0], v[Y1, X1]
    wxg = wx[None, :]
    wyg = wy[:, None]
    top = v00 + wxg * (v01 - v00)
    bot = v10 + wxg * (v11 - v10)
    out = top + wyg * (bot - top)
    usex = np.broadcast_to(wxg > 0.0, out.shape)
    usey = np.broadcast_to(wyg > 0.0, out.shape)
    ok = valid[Y0, X0].copy()
    ok &= ~usex | valid[Y0, X1]
    ok &= ~usey | valid[Y1, X0]
    ok &= ~(usex & usey) | valid[Y1, X1]
    out = np.where(ok, out, 0.0)
    return out, ok


# ---------------------------------------------------------------------------
# value noise: smoothstep interpolation of a random lattice


@njit(cache=True)
def lattice_interp_nb(lattice, out_h, out_w, cell):
    out = np.empty((out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        u = i / cell
        i0 = int(np.floor(u))
        ty = u - i0
        sy = ty * ty * (3.0 - 2.0 * ty)
        for j in range(out_w):
            v = j / cell
            j0 = int(np.floor(v))
            tx = v - j0
            sx = tx * tx * (3.0 - 2.0 * tx)
            a = lattice[i0, j0]
            b = lattice[i0, j0 + 1]
            c = lattice[i0 + 1, j0]
            d = lattice[i0 + 1, j0 + 1]
            top = a + sx * (b - a)
            bot = c + sx * (d - c)
            out[i, j] = top + sy * (bot - top)
    return out


def lattice_interp_np(lattice, out_h, out_w, cell):
    u = np.arange(out_h, dtype=np.float64) / cell
    v = np.arange(out_w, dtype=np.float64) / cell
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    ty = u - i0
    tx = v - j0
    sy = (ty * ty * (3.0 - 2.0 * ty))[:, None]
    sx = (tx * tx * (3.0 - 2.0 * tx))[None, :]
    I0, J0 = np.ix_(i0, j0)
    a = lattice[I0, J0]
    b = lattice[I0, J0 + 1]
    c = lattice[I0 + 1, J0]
    d = lattice[I0 + 1, J0 + 1]
    top = a + sx * (b - a)
    bot = c + sx * (d - c)
    return top + sy * (bot - top)


# ---------------------------------------------------------------------------
# fused Adam update (in place). Scalars must already carry the array dtype;
# ob1/ob2 are 1 - b1 and 1 - b2.


@njit(cache=True)
def adam_update_nb(p, g, m, v, lr, b1, b2, eps, bc1, bc2, ob1, ob2):
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + ob1 * gi
        vi = b2 * v[i] + ob2 * (gi * gi)
        m[i] = mi
        v[i] = vi
        mhat = mi / bc1
        vhat = vi / bc2
        p[i] = p[i] - lr * mhat / (np.sqrt(vhat) + eps)


def adam_update_np(p, g, m, v, lr, b1, b2, eps, bc1, bc2, ob1, ob2):
    m *= b1
    m += ob1 * g
    v *= b2
    v += ob2 * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * mhat / (np.sqrt(vhat) + eps)


if USE_NUMBA:
    normalized_difference = normalized_difference_nb
    savi = savi_nb
    evi = evi_nb
    bilinear = bilinear_nb
    lattice_interp = lattice_interp_nb
    adam_update = adam_update_nb
else:
    normalized_difference = normalized_difference_np
    savi = savi_np
    evi = evi_np
    bilinear = bilinear_np
    lattice_interp = lattice_interp_np
    adam_update = adam_update_np
