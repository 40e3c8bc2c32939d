"""Fourier transform and mode-truncated spectral convolution.

Unitary convention throughout (forward and inverse both scaled by
1/sqrt(n) per axis), so Parseval holds exactly and the backward rule of the
transform is its conjugate-transpose, i.e. the inverse transform.

Grids are restricted to power-of-two extents along transformed axes; 1-d and
2-d spatial grids are supported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as _fft

from .tensor import ShapeError, Tensor


def _check_pow2(n: int):
    if n < 2 or (n & (n - 1)) != 0:
        raise ShapeError(
            f"transform extent {n} is not a power of two; regenerate the grid "
            "with power-of-two extents (see the data-generation constraints)")


def _norm_axes(ndim: int, axes) -> tuple[int, ...]:
    ax = (axes,) if isinstance(axes, int) else tuple(axes)
    ax = tuple(a % ndim for a in ax)
    if not 1 <= len(ax) <= 2:
        raise ShapeError(f"only 1-d and 2-d transforms are supported, got axes {axes}")
    return ax


@dataclass
class ComplexTensor:
    """Real/imaginary pair of same-shape Tensors."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(
                f"real/imag shape mismatch: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self):
        return self.real.shape

    def to_numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def dft(x: Tensor, axes=(-1,)) -> ComplexTensor:
    """Unitary DFT along `axes`; differentiable w.r.t. x."""
    ax = _norm_axes(x.data.ndim, axes)
    for a in ax:
        _check_pow2(x.shape[a])
    spec = _fft.fftn(x.data, axes=ax, norm="ortho")

    if not x._needs_tape():
        return ComplexTensor(Tensor(spec.real.copy()), Tensor(spec.imag.copy()))

    # joint backward: grad_x = Re(F^{-1}(G_r + i G_i)); split across the two
    # output halves so either alone still backpropagates
    def _bwd_real(g, out):
        x._accumulate(_fft.ifftn(g, axes=ax, norm="ortho").real)

    def _bwd_imag(g, out):
        x._accumulate(_fft.ifftn(1j * g, axes=ax, norm="ortho").real)

    real = Tensor(spec.real.copy(), _parents=(x,), _backward_fn=_bwd_real)
    imag = Tensor(spec.imag.copy(), _parents=(x,), _backward_fn=_bwd_imag)
    return ComplexTensor(real, imag)


def inverse_dft(spec: ComplexTensor, axes=(-1,)) -> Tensor:
    """Real part of the unitary inverse DFT; differentiable w.r.t. spec."""
    ax = _norm_axes(spec.real.data.ndim, axes)
    for a in ax:
        _check_pow2(spec.shape[a])
    z = spec.real.data + 1j * spec.imag.data
    out_data = _fft.ifftn(z, axes=ax, norm="ortho").real
    re, im = spec.real, spec.imag
    if not (re._needs_tape() or im._needs_tape()):
        return Tensor(out_data)

    def _backward(g, out):
        gz = _fft.fftn(g, axes=ax, norm="ortho")
        if re._needs_tape():
            re._accumulate(gz.real)
        if im._needs_tape():
            im._accumulate(gz.imag)

    return Tensor(out_data, _parents=(re, im), _backward_fn=_backward)


def retained_indices(extent: int, modes: int) -> np.ndarray:
    """Lowest `modes` frequencies kept symmetrically: 0, ±1, ..., ±(modes-1)."""
    if modes < 1 or modes > extent // 2 + 1:
        raise ShapeError(f"retained modes {modes} out of range for extent {extent} "
                         f"(must be in [1, {extent // 2 + 1}])")
    if modes == 1:
        return np.array([0])
    # at modes == extent/2 + 1 the Nyquist index would appear on both sides
    neg_start = max(extent - modes + 1, extent // 2 + 1)
    return np.concatenate([np.arange(modes), np.arange(neg_start, extent)])


@dataclass
class SpectralWeights:
    """Per retained mode, a complex channels x channels matrix.

    Stored as two real Tensors of shape (m1, [m2,] c, c) where m_k is the
    retained-index count along spatial axis k.
    """

    extents: tuple[int, ...]
    modes: tuple[int, ...]
    channels: int
    real: Tensor
    imag: Tensor

    @classmethod
    def create(cls, extents, modes, channels, rng: np.random.Generator,
               scale: float | None = None) -> "SpectralWeights":
        extents = tuple(int(e) for e in extents)
        modes = tuple(int(m) for m in modes)
        if len(extents) != len(modes) or not 1 <= len(extents) <= 2:
            raise ShapeError(f"extents {extents} / modes {modes} must both be 1-d or 2-d")
        idx_counts = [len(retained_indices(e, m)) for e, m in zip(extents, modes)]
        shape = tuple(idx_counts) + (channels, channels)
        if scale is None:
            scale = 1.0 / channels
        real = Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
        imag = Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
        return cls(extents, modes, channels, real, imag)

    def index_arrays(self):
        return [retained_indices(e, m) for e, m in zip(self.extents, self.modes)]

    def parameters(self):
        return [self.real, self.imag]


def spectral_conv(h: Tensor, w: SpectralWeights) -> Tensor:
    """Transform h, multiply retained modes by complex channel matrices, zero
    the rest, inverse-transform and return the real part.

    h has shape (batch..., g1, [g2,] c); differentiable w.r.t. h and w.
    """
    s = len(w.extents)
    if h.data.ndim < s + 1:
        raise ShapeError(f"input rank {h.data.ndim} too small for {s}-d spectral conv")
    if h.shape[-1] != w.channels:
        raise ShapeError(f"channel mismatch: input has {h.shape[-1]}, weights expect {w.channels}")
    if tuple(h.shape[-1 - s:-1]) != w.extents:
        raise ShapeError(f"grid mismatch: input grid {h.shape[-1 - s:-1]}, weights built "
                         f"for {w.extents}")
    spatial_axes = tuple(range(h.data.ndim - 1 - s, h.data.ndim - 1))
    for a in spatial_axes:
        _check_pow2(h.shape[a])
    idx = w.index_arrays()

    c = w.channels

    def _mode_matmul(x, mats):
        """x: (..., modes..., c) times per-mode (c, c) matrices, over channels.

        Flattens batch and mode axes so the product runs as one BLAS batch.
        """
        lead = x.shape[:-1 - s]
        mshape = x.shape[-1 - s:-1]
        m_flat = int(np.prod(mshape))
        xf = x.reshape(-1, m_flat, c)                       # (B, M, c)
        xf = np.ascontiguousarray(np.swapaxes(xf, 0, 1))    # (M, B, c)
        out = xf @ mats.reshape(m_flat, c, c)               # (M, B, c)
        return np.swapaxes(out, 0, 1).reshape(lead + mshape + (c,))

    H = _fft.fftn(h.data, axes=spatial_axes, norm="ortho")
    if s == 1:
        Hs = H[..., idx[0], :]
    else:
        Hs = H[..., idx[0][:, None], idx[1][None, :], :]
    wc = w.real.data + 1j * w.imag.data
    Zs = _mode_matmul(Hs, wc)
    Z = np.zeros_like(H)
    if s == 1:
        Z[..., idx[0], :] = Zs
    else:
        Z[..., idx[0][:, None], idx[1][None, :], :] = Zs
    out_data = _fft.ifftn(Z, axes=spatial_axes, norm="ortho").real

    if not (h._needs_tape() or w.real._needs_tape() or w.imag._needs_tape()):
        return Tensor(out_data)

    def _backward(g, out):
        Gz = _fft.fftn(g, axes=spatial_axes, norm="ortho")
        if s == 1:
            Gzs = Gz[..., idx[0], :]
        else:
            Gzs = Gz[..., idx[0][:, None], idx[1][None, :], :]
        mshape = Gzs.shape[-1 - s:-1]
        m_flat = int(np.prod(mshape))
        # (M, B, c) layouts for BLAS-batched products over retained modes
        gz_mb = np.ascontiguousarray(
            np.swapaxes(Gzs.reshape(-1, m_flat, c), 0, 1))
        if w.real._needs_tape() or w.imag._needs_tape():
            hs_mb = np.swapaxes(Hs.conj().reshape(-1, m_flat, c), 0, 1)
            gW = (np.swapaxes(hs_mb, -1, -2) @ gz_mb).reshape(wc.shape)
            if w.real._needs_tape():
                w.real._accumulate(gW.real)
            if w.imag._needs_tape():
                w.imag._accumulate(gW.imag)
        if h._needs_tape():
            wt = np.swapaxes(wc.conj().reshape(m_flat, c, c), -1, -2)
            gHs = np.swapaxes(gz_mb @ wt, 0, 1).reshape(Gzs.shape)
            gH = np.zeros_like(H)
            if s == 1:
                gH[..., idx[0], :] = gHs
            else:
                gH[..., idx[0][:, None], idx[1][None, :], :] = gHs
            h._accumulate(_fft.ifftn(gH, axes=spatial_axes, norm="ortho").real)

    return Tensor(out_data, _parents=(h, w.real, w.imag), _backward_fn=_backward)
