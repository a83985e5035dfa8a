import numpy as np
import pytest

from latentloop.numerics import Rng
from latentloop.pca import (DegenerateFitError, fit, fit_components, load_basis,
                            load_samples, project, reconstruct, rel_mse,
                            rel_mse_spectral, save_basis, save_samples)


def _corpus(seed=0, n=800, d=32):
    rng = Rng(seed)
    scales = np.linspace(4.0, 0.2, d)
    return rng.gaussian((n, d)) * scales + 1.5


def test_fit_components_shapes():
    basis = fit_components(_corpus(), 8)
    assert basis.components.shape == (32, 8)
    assert basis.mean.shape == (32,)
    assert basis.eigenvalues.shape == (32,)


def test_projection_residual_is_orthogonal_to_subspace():
    basis = fit_components(_corpus(), 8)
    v = Rng(9).gaussian(32)
    recon = reconstruct(basis, project(basis, v))
    residual = v - recon
    assert np.max(np.abs(basis.components.T @ residual)) < 1e-10


def test_rel_mse_forms_agree_on_fit_set():
    x = _corpus()
    for k in (1, 8, 16, 32):
        basis = fit_components(x, k)
        assert abs(rel_mse(basis, x) - rel_mse_spectral(basis)) < 1e-10


def test_variance_target_selects_smallest_sufficient_k():
    x = _corpus()
    basis = fit(x, 0.9)
    assert rel_mse_spectral(basis) <= 0.1 + 1e-12
    if basis.k > 1:
        assert rel_mse_spectral(basis, basis.k - 1) > 0.1


def test_fit_anisotropic_2d_picks_dominant_axis():
    rng = Rng(4)
    x = np.stack([rng.gaussian(500) * 10.0, rng.gaussian(500) * 0.1], axis=1)
    basis = fit(x, 0.9)
    assert basis.k == 1
    assert abs(abs(basis.components[0, 0]) - 1.0) < 1e-3


def test_truncated_basis():
    basis = fit_components(_corpus(), 16)
    small = basis.truncated(4)
    assert small.k == 4
    assert np.array_equal(small.components, basis.components[:, :4])


def test_degenerate_samples_rejected():
    x = np.ones((50, 8))
    with pytest.raises(DegenerateFitError):
        fit(x, 0.95)


def test_basis_roundtrip_is_bitwise(tmp_path):
    basis = fit_components(_corpus(), 8)
    path = tmp_path / "basis.bin"
    save_basis(basis, path)
    loaded = load_basis(path)
    assert np.array_equal(loaded.components, basis.components)
    assert np.array_equal(loaded.mean, basis.mean)
    assert np.array_equal(loaded.eigenvalues, basis.eigenvalues)
    assert loaded.k == basis.k


def test_samples_roundtrip_is_bitwise(tmp_path):
    x = _corpus(n=20)
    path = tmp_path / "samples.bin"
    save_samples(x, path)
    assert np.array_equal(load_samples(path), x)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"XXXX" + b"\0" * 32)
    with pytest.raises(ValueError):
        load_basis(path)
    with pytest.raises(ValueError):
        load_samples(path)
