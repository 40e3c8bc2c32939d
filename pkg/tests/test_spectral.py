import numpy as np
import pytest
from conftest import assert_grad_close, numeric_grad

from disentango.spectral import (ComplexTensor, ShapeError, SpectralWeights,
                                 dft, inverse_dft, retained_indices,
                                 spectral_conv)
from disentango.tensor import Tensor


def naive_dft(x):
    """O(n^2) summation DFT, unitary convention: the independent oracle."""
    n = len(x)
    k = np.arange(n)
    mat = np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)
    return mat @ x


def test_constant_signal_mode0():
    n, c = 16, 3.7
    spec = dft(Tensor(np.full(n, c)))
    z = spec.to_numpy()
    assert np.isclose(z[0], c * np.sqrt(n))
    assert np.max(np.abs(z[1:])) < 1e-12


def test_unit_impulse_flat_spectrum():
    n = 32
    x = np.zeros(n)
    x[0] = 1.0
    z = dft(Tensor(x)).to_numpy()
    assert np.allclose(np.abs(z), 1 / np.sqrt(n))


@pytest.mark.parametrize("n", [8, 16, 32, 64])
def test_dft_matches_naive_oracle(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n)
    z = dft(Tensor(x)).to_numpy()
    assert np.max(np.abs(z - naive_dft(x))) < 1e-10


def test_inverse_roundtrip():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 16))
    back = inverse_dft(dft(Tensor(x)))
    assert np.max(np.abs(back.data - x)) < 1e-10


def test_parseval():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(64)
    z = dft(Tensor(x)).to_numpy()
    assert abs(np.sum(x**2) - np.sum(np.abs(z) ** 2)) < 1e-9


def test_real_output_of_symmetric_spectrum():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(32)
    z = np.fft.fftn(x, norm="ortho")
    imag = np.fft.ifftn(z, norm="ortho").imag
    assert np.max(np.abs(imag)) < 1e-9


def test_non_power_of_two_rejected():
    with pytest.raises(ShapeError, match="power of two"):
        dft(Tensor(np.zeros(12)))


def test_dft_2d_matches_numpy():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 16))
    z = dft(Tensor(x), axes=(-2, -1)).to_numpy()
    assert np.allclose(z, np.fft.fft2(x, norm="ortho"))


def test_dft_gradcheck():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(16)

    def f(arrays):
        spec = dft(Tensor(arrays[0]))
        return (spec.real.square().sum() + (spec.imag * Tensor(w)).sum()).item()

    w = rng.standard_normal(16)
    t = Tensor(x, requires_grad=True)
    spec = dft(t)
    (spec.real.square().sum() + (spec.imag * Tensor(w)).sum()).backward()
    assert_grad_close(t.grad, numeric_grad(f, [x], 0))


def test_inverse_dft_gradcheck():
    rng = np.random.default_rng(5)
    re = rng.standard_normal(16)
    im = rng.standard_normal(16)

    def f(arrays):
        return inverse_dft(ComplexTensor(Tensor(arrays[0]), Tensor(arrays[1]))).square().sum().item()

    tr = Tensor(re, requires_grad=True)
    ti = Tensor(im, requires_grad=True)
    inverse_dft(ComplexTensor(tr, ti)).square().sum().backward()
    assert_grad_close(tr.grad, numeric_grad(f, [re, im], 0))
    assert_grad_close(ti.grad, numeric_grad(f, [re, im], 1))


def test_retained_indices_full_retention_covers_all():
    assert sorted(retained_indices(16, 9)) == list(range(16))


def _identity_weights(extents, modes, c):
    rng = np.random.default_rng(0)
    w = SpectralWeights.create(extents, modes, c, rng)
    eye = np.broadcast_to(np.eye(c), w.real.data.shape).copy()
    w.real.data[...] = eye
    w.imag.data[...] = 0.0
    return w


def test_spectral_conv_identity_full_modes():
    rng = np.random.default_rng(6)
    n, c = 16, 4
    h = rng.standard_normal((2, n, c))
    w = _identity_weights((n,), (n // 2 + 1,), c)
    out = spectral_conv(Tensor(h), w)
    assert np.max(np.abs(out.data - h)) < 1e-9


def test_spectral_conv_identity_full_modes_2d():
    rng = np.random.default_rng(7)
    n, c = 8, 3
    h = rng.standard_normal((2, n, n, c))
    w = _identity_weights((n, n), (n // 2 + 1, n // 2 + 1), c)
    out = spectral_conv(Tensor(h), w)
    assert np.max(np.abs(out.data - h)) < 1e-9


def test_spectral_conv_zero_weights():
    rng = np.random.default_rng(8)
    n, c = 16, 2
    w = SpectralWeights.create((n,), (4,), c, rng)
    w.real.data[...] = 0.0
    w.imag.data[...] = 0.0
    out = spectral_conv(Tensor(rng.standard_normal((3, n, c))), w)
    assert np.all(out.data == 0.0)


def test_spectral_conv_single_mode_scaling():
    # sinusoid at mode k, only mode k retained with scalar weight alpha:
    # output is the alpha-scaled sinusoid (direct Fourier-series evaluation)
    n, k, alpha = 32, 2, 1.7
    x = np.linspace(0, 1, n, endpoint=False)
    sig = np.cos(2 * np.pi * k * x)
    w = _identity_weights((n,), (k + 1,), 1)
    w.real.data *= alpha
    # zero out every retained mode except +-k
    idx = retained_indices(n, k + 1)
    for pos, mode in enumerate(idx):
        if mode not in (k, n - k):
            w.real.data[pos] = 0.0
    out = spectral_conv(Tensor(sig[None, :, None]), w)
    assert np.max(np.abs(out.data[0, :, 0] - alpha * sig)) < 1e-9


def test_spectral_conv_channel_mismatch():
    rng = np.random.default_rng(9)
    w = SpectralWeights.create((16,), (4,), 3, rng)
    with pytest.raises(ShapeError, match="channel mismatch"):
        spectral_conv(Tensor(np.zeros((2, 16, 2))), w)


@pytest.mark.parametrize("dims", [1, 2])
def test_spectral_conv_gradcheck(dims):
    rng = np.random.default_rng(10 + dims)
    c = 2
    if dims == 1:
        n = 8
        h = rng.standard_normal((2, n, c))
        w = SpectralWeights.create((n,), (3,), c, rng)
    else:
        n = 8
        h = rng.standard_normal((2, n, n, c))
        w = SpectralWeights.create((n, n), (2, 2), c, rng)

    def f(arrays):
        ww = SpectralWeights(w.extents, w.modes, c, Tensor(arrays[1]), Tensor(arrays[2]))
        return spectral_conv(Tensor(arrays[0]), ww).square().sum().item()

    th = Tensor(h, requires_grad=True)
    spectral_conv(th, w).square().sum().backward()
    arrays = [h, w.real.data, w.imag.data]
    assert_grad_close(th.grad, numeric_grad(f, arrays, 0))
    assert_grad_close(w.real.grad, numeric_grad(f, arrays, 1))
    assert_grad_close(w.imag.grad, numeric_grad(f, arrays, 2))
