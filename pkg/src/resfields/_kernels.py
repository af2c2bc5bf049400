"""Fused sine kernels.

``np.sin``/``np.cos`` on float64 do not vectorise on every libm; these
numba kernels use Cephes-style pi/4 range reduction and minimax
polynomials (about 1 ulp for ``|x| < 1e9``, libm beyond that) and fuse the
``omega0`` scaling.  Without numba the plain numpy expressions are used.
"""

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

_DP1 = 7.85398125648498535156e-1
_DP2 = 3.77489470793079817668e-8
_DP3 = 2.69515142907905952645e-15
_FOPI = 1.27323954473516268615
_S0, _S1, _S2, _S3, _S4, _S5 = (
    1.58962301576546568060e-10,
    -2.50507477628578072866e-8,
    2.75573136213857245213e-6,
    -1.98412698295895385996e-4,
    8.33333333332211858878e-3,
    -1.66666666666666307295e-1,
)
_C0, _C1, _C2, _C3, _C4, _C5 = (
    -1.13585365213876817300e-11,
    2.08757008419747316778e-9,
    -2.75573141792967388112e-7,
    2.48015872888517045348e-5,
    -1.38888888888730564116e-3,
    4.16666666666665929218e-2,
)


_LIMIT = 1e9


def _sincos_scalar(x, want_cos):
    # valid for |x| < _LIMIT; callers patch other entries with libm
    sign = 1.0
    if x < 0:
        x = -x
        if not want_cos:
            sign = -1.0
    j = np.int64(x * _FOPI)
    y = np.float64(j)
    if j & 1:
        j += 1
        y += 1.0
    j = j & 7
    if j > 3:
        j -= 4
        sign = -sign
    if want_cos and j > 1:
        sign = -sign
    z = ((x - y * _DP1) - y * _DP2) - y * _DP3
    zz = z * z
    ps = z + z * zz * (((((_S0 * zz + _S1) * zz + _S2) * zz + _S3) * zz + _S4) * zz + _S5)
    pc = 1.0 - 0.5 * zz + zz * zz * (((((_C0 * zz + _C1) * zz + _C2) * zz + _C3) * zz + _C4) * zz + _C5)
    swap = j == 1 or j == 2
    if want_cos:
        r = ps if swap else pc
    else:
        r = pc if swap else ps
    return sign * r


if numba is not None:
    _k = numba.njit(inline="always")(_sincos_scalar)

    @numba.njit(cache=True)
    def _sin_scaled(x, omega, out):
        fx = x.ravel()
        fo = out.ravel()
        for i in range(fx.size):
            fo[i] = _k(omega * fx[i], False)

    @numba.njit(cache=True)
    def _cos_scaled_mul(x, omega, dout, out):
        fx = x.ravel()
        fd = dout.ravel()
        fo = out.ravel()
        for i in range(fx.size):
            fo[i] = fd[i] * (omega * _k(omega * fx[i], True))

    def _outside(x, omega):
        lim = _LIMIT / abs(omega)
        if np.all(np.abs(x) < lim):
            return None
        return ~(np.abs(x) < lim)

    def sin_scaled(x, omega):
        x = np.ascontiguousarray(x, dtype=np.float64)
        out = np.empty_like(x)
        _sin_scaled(x, float(omega), out)
        bad = _outside(x, omega)
        if bad is not None:
            out[bad] = np.sin(omega * x[bad])
        return out

    def dsin_scaled(x, omega, dout):
        x = np.ascontiguousarray(x, dtype=np.float64)
        dout = np.ascontiguousarray(dout, dtype=np.float64)
        out = np.empty_like(x)
        _cos_scaled_mul(x, float(omega), dout, out)
        bad = _outside(x, omega)
        if bad is not None:
            out[bad] = dout[bad] * (omega * np.cos(omega * x[bad]))
        return out

    @numba.njit(cache=True)
    def _adam(p, g, m, v, lr, b1, b2, c1, c2, eps):
        fp, fg, fm, fv = p.ravel(), g.ravel(), m.ravel(), v.ravel()
        for i in range(fp.size):
            gi = fg[i]
            mi = b1 * fm[i] + (1.0 - b1) * gi
            vi = b2 * fv[i] + (1.0 - b2) * (gi * gi)
            fm[i] = mi
            fv[i] = vi
            fp[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)

    def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
        """In-place Adam step on contiguous float64 arrays."""
        _adam(p, np.ascontiguousarray(g), m, v, lr, b1, b2, c1, c2, eps)

else:  # pragma: no cover

    def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def sin_scaled(x, omega):
        return np.sin(omega * x)

    def dsin_scaled(x, omega, dout):
        return dout * (omega * np.cos(omega * x))
