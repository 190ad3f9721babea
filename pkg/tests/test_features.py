import numpy as np
import pytest

from handfield.io.features import (
    FeatureSet,
    extract_teacher_features,
    fit_pca,
    l2_normalize,
    load_features,
    random_features,
    save_features,
    toy_teacher,
)


def _correlated(n=2000, C=12, seed=0):
    rng = np.random.default_rng(seed)
    scales = np.geomspace(3.0, 0.01, C)
    Q, _ = np.linalg.qr(rng.normal(size=(C, C)))
    return (rng.normal(size=(n, C)) * scales) @ Q.T + rng.normal(size=C)


def test_pca_matches_eigendecomposition():
    X = _correlated()
    basis = fit_pca(X, 5)
    cov = np.cov(X.T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    assert np.allclose(basis.variances, evals, atol=1e-10)
    # same subspace: projector equality
    P = basis.components @ basis.components.T
    P_ref = evecs[:, :5] @ evecs[:, :5].T
    assert np.allclose(P, P_ref, atol=1e-8)
    assert np.allclose(basis.components.T @ basis.components, np.eye(5), atol=1e-12)


def test_pca_reconstruction_error_is_eigenvalue_tail():
    X = _correlated(seed=1)
    for dim in (1, 4, 8, 12):
        basis = fit_pca(X, dim)
        err = np.mean(np.sum((basis.reconstruct(basis.project(X)) - X) ** 2, axis=1))
        evals = np.linalg.eigvalsh(np.cov(X.T, bias=True))[::-1]
        assert err == pytest.approx(evals[dim:].sum(), abs=1e-9)


def test_pca_dimension_validation():
    with pytest.raises(ValueError):
        fit_pca(np.zeros((10, 3)), 4)


def test_pca_sign_is_deterministic():
    X = _correlated(seed=2)
    a, b = fit_pca(X, 3), fit_pca(X[::-1].copy(), 3)
    assert np.allclose(a.components, b.components, atol=1e-10)


def test_l2_normalize():
    x = np.random.default_rng(3).normal(size=(50, 7))
    x[0] = 0
    n = np.linalg.norm(l2_normalize(x), axis=1)
    assert n[0] == 0 and np.allclose(n[1:], 1.0, atol=1e-12)


def test_toy_teacher_neighbourhood():
    img = np.random.default_rng(4).uniform(size=(5, 6, 3))
    f = toy_teacher(img)
    assert f.shape == (5, 6, 27)
    assert np.array_equal(f[2, 3, 12:15], img[2, 3])  # centre of the 3x3 patch
    assert np.array_equal(f[2, 3, 0:3], img[1, 2])
    assert np.array_equal(f[0, 0, 0:3], img[0, 0])  # edge padding


def test_extract_features_on_scene(tiny_scene):
    fs = extract_teacher_features(tiny_scene, dim=8)
    cams = [c.name for c in tiny_scene.split("train")]
    assert set(fs.maps) == {(f.frame_id, c) for f in tiny_scene.frames for c in cams}
    m = next(iter(fs.maps.values()))
    assert m.dtype == np.float32 and m.shape[-1] == 8
    assert fs.basis.dim == 8
    with pytest.raises(KeyError):
        fs.get(999, cams[0])
    with pytest.raises(ValueError):
        extract_teacher_features(tiny_scene, dim=28)
    with pytest.raises(ValueError):
        extract_teacher_features(tiny_scene, teacher="other")


def test_external_teacher(tiny_scene):
    cams = [c.name for c in tiny_scene.split("train")]
    keys = [(f.frame_id, c) for f in tiny_scene.frames for c in cams]
    rng = np.random.default_rng(5)
    raw = {k: rng.normal(size=tiny_scene.mask(*k).shape + (10,)) for k in keys}
    fs = extract_teacher_features(tiny_scene, dim=4, teacher="external", raw_maps=raw)
    k = keys[0]
    expected = fs.basis.project(l2_normalize(raw[k]))
    assert np.allclose(fs.get(*k), expected, atol=1e-5)
    raw.pop(keys[-1])
    with pytest.raises(KeyError):
        extract_teacher_features(tiny_scene, dim=4, teacher="external", raw_maps=raw)


def test_random_features_match_shapes(tiny_scene):
    fs = extract_teacher_features(tiny_scene, dim=4)
    rnd = random_features(fs, seed=1)
    assert set(rnd.maps) == set(fs.maps)
    assert all(rnd.maps[k].shape == fs.maps[k].shape for k in fs.maps)
    assert all(not np.allclose(rnd.maps[k], fs.maps[k]) for k in fs.maps)


def test_features_save_load(tiny_scene, tmp_path):
    fs = extract_teacher_features(tiny_scene, dim=4)
    cams = sorted({c for _, c in fs.maps})
    ids = {c: i for i, c in enumerate(cams)}
    save_features(fs, tmp_path / "feat", ids)
    back = load_features(tmp_path / "feat", {i: c for c, i in ids.items()})
    assert isinstance(back, FeatureSet) and set(back.maps) == set(fs.maps)
    assert all(np.array_equal(back.maps[k], fs.maps[k]) for k in fs.maps)
    assert np.array_equal(back.basis.components, fs.basis.components)
    with pytest.raises(FileNotFoundError):
        load_features(tmp_path / "nothing", {})
