"""Real 2D FFT and the differentiable spectral convolution built on it.

Convention: the forward transform is unnormalized, the inverse carries the
``1 / (H * W)`` factor (numpy ``norm="backward"``). Spectra use the half-plane
layout ``[..., H, W // 2 + 1, C]``: full frequency range along the first grid
axis, non-negative frequencies along the second. Spectral weights are stored
for the low-frequency blocks ``rows [0, m)`` and ``rows [H - m, H)`` times
``cols [0, m)``; because the inverse is normalized by ``H * W`` the same weights
act consistently on grids of different resolution.
"""

from __future__ import annotations

import numpy as np

from .core import Tensor, _as_tensor, _make

_AXES = (-3, -2)


def fft2_real(x) -> np.ndarray:
    """Half-plane spectrum of a real field ``[..., H, W, C]``."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return np.fft.rfft2(data, axes=_AXES)


def ifft2_real(spec: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`fft2_real` for a field with spatial shape ``grid_shape``."""
    return np.fft.irfft2(spec, s=grid_shape, axes=_AXES)


def _mode_rows(h: int, m: int) -> np.ndarray:
    return np.r_[np.arange(m), np.arange(h - m, h)]


def check_modes(h: int, w: int, modes: int) -> None:
    if modes < 1 or 2 * modes > h or 2 * modes > w:
        raise ValueError(f"spectral_conv: {modes} modes per axis do not fit a {h}x{w} grid "
                         f"(need modes <= {min(h, w) // 2})")


def spectral_conv(x: Tensor, w_re: Tensor, w_im: Tensor) -> Tensor:
    """``F^-1(R F(x))`` with full channel mixing on the retained modes.

    Parameters
    ----------
    x : Tensor[..., H, W, C_in]
    w_re, w_im : Tensor[2 * m, m, C_in, C_out]
        Real and imaginary parts of the spectral weights. Rows ``0..m-1`` act on
        frequencies ``0..m-1`` of the first axis, rows ``m..2m-1`` on
        frequencies ``H-m..H-1``.
    """
    x, w_re, w_im = _as_tensor(x), _as_tensor(w_re), _as_tensor(w_im)
    h, w, cin = x.shape[-3:]
    two_m, m, wcin, cout = w_re.shape
    if two_m != 2 * m or w_im.shape != w_re.shape:
        raise ValueError(f"spectral_conv: bad weight shapes {w_re.shape}, {w_im.shape}")
    if wcin != cin:
        raise ValueError(f"spectral_conv: input channels {cin} != weight channels {wcin}")
    check_modes(h, w, m)

    lead = x.shape[:-3]
    rows = _mode_rows(h, m)
    weights = w_re.data + 1j * w_im.data                    # [2m, m, cin, cout]
    spec = np.fft.rfft2(x.data, axes=_AXES)                 # [..., h, w//2+1, cin]
    xm = spec[..., rows, :m, :]                             # [..., 2m, m, cin]
    # batch over modes: [2m*m, B, cin] @ [2m*m, cin, cout]
    xm_flat = np.moveaxis(xm.reshape((-1, 2 * m * m, cin)), 1, 0)
    w_flat = weights.reshape(2 * m * m, cin, cout)
    ym_flat = xm_flat @ w_flat
    ym = np.moveaxis(ym_flat, 0, 1).reshape(lead + (2 * m, m, cout))
    out_spec = np.zeros(lead + (h, w // 2 + 1, cout), dtype=np.complex128)
    out_spec[..., rows, :m, :] = ym
    out = np.fft.irfft2(out_spec, s=(h, w), axes=_AXES)

    def backward(g):
        # adjoint of irfft2: columns with a conjugate partner count twice
        gspec = np.fft.rfft2(g, axes=_AXES)[..., rows, :m, :] / (h * w)
        col_w = np.full(m, 2.0)
        col_w[0] = 1.0  # the Nyquist column is never retained since m <= W/2
        gy = gspec * col_w[:, None]
        gy_flat = np.moveaxis(gy.reshape((-1, 2 * m * m, cout)), 1, 0)
        gx = gw_re = gw_im = None
        if x.requires_grad:
            gxm_flat = gy_flat @ np.conj(w_flat).transpose(0, 2, 1)
            gxm = np.moveaxis(gxm_flat, 0, 1).reshape(lead + (2 * m, m, cin))
            full = np.zeros(lead + (h, w, cin), dtype=np.complex128)
            full[..., rows, :m, :] = gxm
            # adjoint of rfft2: Re(sum_k G_k e^{+i k n}) = N * Re(ifft2(G))
            gx = np.fft.ifft2(full, axes=_AXES).real * (h * w)
        if w_re.requires_grad or w_im.requires_grad:
            gw = np.conj(xm_flat).transpose(0, 2, 1) @ gy_flat     # [2m*m, cin, cout]
            gw = gw.reshape(2 * m, m, cin, cout)
            gw_re, gw_im = gw.real, gw.imag
        return gx, gw_re, gw_im

    return _make(out, (x, w_re, w_im), backward)
