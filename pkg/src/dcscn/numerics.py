"""Dense numeric kernels: correlation, pooling, resampling, solvers, nonlinearities.

Conventions: matrices are 2-D float64 numpy arrays in row-major order,
image/feature stacks are (H, W, C) float64 arrays.  Everything here is a pure
function; the only stateful object is RngStream, which owns all randomness in
the package.
"""

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

# relative singular-value cutoff for the pseudoinverse
PINV_RCOND = 1e-10


class RngStream:
    """Deterministic stream of uniform draws (PCG64 under the hood).

    The same seed always reproduces the same draw sequence bit-for-bit.
    Normals are derived from the uniform stream via Box-Muller so every
    random number in the package traces back to one seeded uniform source.
    A stream is single-owner: to use randomness from several places, split().
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, lo, hi):
        """One draw from [lo, hi)."""
        if not lo < hi:
            raise ConfigError(f"uniform requires lo < hi, got [{lo}, {hi})")
        return lo + (hi - lo) * self._gen.random()

    def uniforms(self, n, lo=0.0, hi=1.0):
        """n draws from [lo, hi) as an array."""
        if not lo < hi:
            raise ConfigError(f"uniform requires lo < hi, got [{lo}, {hi})")
        return lo + (hi - lo) * self._gen.random(int(n))

    def normals(self, n):
        """n standard-normal draws via Box-Muller over the uniform stream."""
        n = int(n)
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1]: keeps log() finite
        u2 = self._gen.random(pairs)
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        z = np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])
        return z[:n]

    def integers(self, n, bound):
        """n draws uniform on {0, ..., bound-1}."""
        if bound < 1:
            raise ConfigError(f"integers requires bound >= 1, got {bound}")
        return np.minimum((self._gen.random(int(n)) * bound).astype(np.int64), bound - 1)

    def split(self):
        """Derive an independent child stream (consumes one draw)."""
        child_seed = int(self._gen.integers(0, 2**63 - 1))
        return RngStream(child_seed)


def _as_matrix(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def cross_correlate(image, kernel):
    """Valid-mode cross-correlation of a 2-D image with a 2-D kernel.

    out(i,j) = sum_p sum_n image(i+p, j+n) * kernel(p, n).  Accumulation runs
    over kernel entries in row-major order, so results are bit-identical to a
    naive quadruple loop.
    """
    image = _as_matrix(image, "image")
    kernel = _as_matrix(kernel, "kernel")
    kh, kw = kernel.shape
    oh = image.shape[0] - kh + 1
    ow = image.shape[1] - kw + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"kernel {kernel.shape} larger than image {image.shape}")
    out = np.zeros((oh, ow))
    for p in range(kh):
        for n in range(kw):
            out += kernel[p, n] * image[p:p + oh, n:n + ow]
    return out


def max_pool(m, window):
    """Non-overlapping max pooling (stride = window); trailing rows/cols
    that do not fill a window are dropped."""
    m = _as_matrix(m, "input")
    window = int(window)
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    h, w = m.shape
    oh, ow = h // window, w // window
    if oh < 1 or ow < 1:
        raise DimensionError(f"window {window} larger than input {m.shape}")
    trimmed = m[:oh * window, :ow * window]
    return trimmed.reshape(oh, window, ow, window).max(axis=(1, 3))


def bilinear_resize(m, out_h, out_w):
    """Bilinear resampling with the align-corners convention:
    src = dst * (src_len - 1) / (dst_len - 1), or 0 when dst_len == 1."""
    m = _as_matrix(m, "input")
    out_h, out_w = int(out_h), int(out_w)
    if m.size == 0:
        raise DimensionError("cannot resize an empty matrix")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size {out_h}x{out_w} must be >= 1x1")
    h, w = m.shape

    def axis_coords(src_len, dst_len):
        if dst_len == 1:
            return np.zeros(1)
        return np.arange(dst_len) * (src_len - 1) / (dst_len - 1)

    ys = axis_coords(h, out_h)
    xs = axis_coords(w, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = m[np.ix_(y0, x0)] * (1 - wx) + m[np.ix_(y0, x1)] * wx
    bot = m[np.ix_(y1, x0)] * (1 - wx) + m[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def least_squares(features, targets, ridge=0.0):
    """Solve argmin ||Y - Phi O||_F (+ ridge ||O||_F^2) for O (D x m).

    ridge == 0 returns the minimum-norm pseudoinverse solution with a
    relative singular-value cutoff of 1e-10.  For D > N the solve goes
    through the N x N Gram matrix (exact via the push-through identity),
    with the eigenvalue cutoff floored at the numerical noise level.
    """
    phi = _as_matrix(features, "features")
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != phi.shape[0]:
        raise DimensionError(
            f"row mismatch: features {phi.shape} vs targets {y.shape}")
    if ridge < 0:
        raise ConfigError(f"ridge must be >= 0, got {ridge}")
    if not np.isfinite(phi).all() or not np.isfinite(y).all():
        raise NumericError("least_squares requires finite inputs")
    n, d = phi.shape
    if d <= n:
        u, s, vt = np.linalg.svd(phi, full_matrices=False)
        if ridge == 0.0:
            cut = PINV_RCOND * (s[0] if s.size else 0.0)
            inv = np.where(s > cut, 1.0 / np.where(s > cut, s, 1.0), 0.0)
        else:
            inv = s / (s * s + ridge)
        return vt.T @ ((u.T @ y) * inv[:, None])
    alpha = gram_solve(phi @ phi.T, y, ridge)
    return phi.T @ alpha


def gram_solve(gram, y, ridge=0.0):
    """Solve (G + ridge I) alpha = Y through an eigendecomposition of the
    Gram matrix G = Phi Phi^T; least_squares' D > N path in matrix form.

    With ridge == 0 this inverts only eigenvalues above the numerical noise
    floor, which keeps the implied pseudoinverse solution stable.
    """
    gram = _as_matrix(gram, "gram")
    w, v = np.linalg.eigh(gram)
    w = np.maximum(w, 0.0)
    if ridge == 0.0:
        wmax = w[-1] if w.size else 0.0
        cut = max(PINV_RCOND**2, gram.shape[0] * np.finfo(np.float64).eps) * wmax
        inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    else:
        inv = 1.0 / (w + ridge)
    return v @ ((v.T @ y) * inv[:, None])


def nuclear_norm(m):
    """Sum of singular values."""
    m = _as_matrix(m, "input")
    if not np.isfinite(m).all():
        raise NumericError("nuclear_norm requires finite entries")
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False).sum())


def softmax(v):
    """Probability vector from scores, stabilised by max-subtraction."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    """Elementwise logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)
