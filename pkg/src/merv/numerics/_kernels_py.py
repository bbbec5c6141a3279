"""Numpy implementations of the compiled kernels, used when the extension is absent."""
import numpy as np


def window_bounds(n_in, n_out):
    starts = (np.arange(n_out) * n_in) // n_out
    stops = ((np.arange(n_out) + 1) * n_in + n_out - 1) // n_out
    return starts, stops


def averaging_matrix(n_in, n_out):
    """Row ``i`` averages the input positions of output window ``i``."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    for i, (lo, hi) in enumerate(zip(*window_bounds(n_in, n_out))):
        a[i, lo:hi] = 1.0 / (hi - lo)
    return a


def pool_forward(x, t_out, h_out, w_out):
    T, H, W, _ = x.shape
    y = np.einsum(
        "af,bh,cw,fhwd->abcd",
        averaging_matrix(T, t_out),
        averaging_matrix(H, h_out),
        averaging_matrix(W, w_out),
        x.astype(np.float64),
        optimize=True,
    )
    return y.astype(x.dtype)


def pool_backward(g, T, H, W):
    t_out, h_out, w_out, _ = g.shape
    gx = np.einsum(
        "af,bh,cw,abcd->fhwd",
        averaging_matrix(T, t_out),
        averaging_matrix(H, h_out),
        averaging_matrix(W, w_out),
        g.astype(np.float64),
        optimize=True,
    )
    return gx.astype(g.dtype)


def conv3d_into(x, ker, out, stride, front):
    kt, kh, kw = ker.shape[:3]
    to, ho, wo = out.shape[:3]
    st, sh, sw = stride
    # enough zero padding on every side to cover any requested output extent
    T, H, W, _ = x.shape
    need = (
        max(0, (to - 1) * st + kt - front[0] - T),
        max(0, (ho - 1) * sh + kh - front[1] - H),
        max(0, (wo - 1) * sw + kw - front[2] - W),
    )
    xp = np.pad(
        x.astype(np.float64),
        ((front[0], need[0]), (front[1], need[1]), (front[2], need[2]), (0, 0)),
    )
    acc = np.zeros(out.shape, dtype=np.float64)
    k64 = ker.astype(np.float64)
    for i in range(kt):
        for j in range(kh):
            for l in range(kw):
                patch = xp[
                    i : i + (to - 1) * st + 1 : st,
                    j : j + (ho - 1) * sh + 1 : sh,
                    l : l + (wo - 1) * sw + 1 : sw,
                ]
                acc += patch @ k64[i, j, l]
    out[...] = acc
    return out
