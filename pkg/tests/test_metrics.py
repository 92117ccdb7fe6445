import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.linalg import sqrtm
from skimage.metrics import structural_similarity

from latticegen.errors import ShapeError
from latticegen.metrics import (
    FeatureExtractor,
    GaussianFit,
    LossSpec,
    batch_ssim,
    evaluate,
    extract_features,
    fit_gaussian,
    frechet_distance,
    loss,
    loss_and_grad,
    pairwise_loss,
    proxy_fid,
    ssim,
)

C1, C2 = 0.01**2, 0.03**2


def _ssim_by_windows(x, y, k=7, c1=C1, c2=C2):
    """Window-by-window SSIM with explicit loops (population statistics)."""
    h, w = x.shape
    vals = []
    for i in range(h - k + 1):
        for j in range(w - k + 1):
            a = x[i : i + k, j : j + k].ravel()
            b = y[i : i + k, j : j + k].ravel()
            ma, mb = a.mean(), b.mean()
            va = ((a - ma) ** 2).mean()
            vb = ((b - mb) ** 2).mean()
            cab = ((a - ma) * (b - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def _gradient_images():
    ii, jj = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    return (ii + jj) / 14.0, (ii * jj) / 49.0


images = st.tuples(st.integers(7, 12), st.integers(7, 12), st.integers(1, 3)).flatmap(
    lambda s: st.tuples(
        hnp.arrays(np.float64, s, elements=st.floats(0, 1)),
        hnp.arrays(np.float64, s, elements=st.floats(0, 1)),
    )
)


# -- SSIM --------------------------------------------------------------------


def test_ssim_identity_is_exactly_one():
    x = np.random.default_rng(0).random((10, 9, 2))
    assert ssim(x, x) == 1.0


def test_ssim_constant_images_closed_form():
    a, b = 0.3, 0.8
    got = ssim(np.full((7, 7), a), np.full((7, 7), b))
    assert got == pytest.approx((2 * a * b + C1) / (a * a + b * b + C1), rel=1e-13)


def test_ssim_noise_images_against_window_oracle():
    rng = np.random.default_rng(42)
    x, y = rng.random((16, 13)), rng.random((16, 13))
    assert abs(ssim(x, y) - _ssim_by_windows(x, y)) <= 1e-9


def test_ssim_against_skimage():
    rng = np.random.default_rng(5)
    x = rng.random((20, 18, 3))
    y = np.clip(x + 0.2 * rng.standard_normal(x.shape), 0, 1)
    ref = structural_similarity(x, y, win_size=7, data_range=1.0, channel_axis=-1, use_sample_covariance=False)
    assert ssim(x, y) == pytest.approx(ref, abs=1e-12)


@given(images)
def test_ssim_symmetric_bitwise_and_bounded(pair):
    x, y = pair
    s = ssim(x, y)
    assert s == ssim(y, x)
    assert -1.0 <= s <= 1.0 + 1e-12


def test_ssim_data_range_constants():
    rng = np.random.default_rng(1)
    x, y = rng.random((9, 9)) * 255, rng.random((9, 9)) * 255
    want = _ssim_by_windows(x, y, c1=(0.01 * 255) ** 2, c2=(0.03 * 255) ** 2)
    assert ssim(x, y, data_range=255.0) == pytest.approx(want, abs=1e-12)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)), window=7)
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), window=4)


def test_batch_ssim_matches_single():
    rng = np.random.default_rng(2)
    x, y = rng.random((4, 9 * 8 * 2)), rng.random((4, 9 * 8 * 2))
    got = batch_ssim(x, y, (9, 8, 2))
    want = [ssim(a.reshape(9, 8, 2), b.reshape(9, 8, 2)) for a, b in zip(x, y)]
    np.testing.assert_allclose(got, want, rtol=1e-13)


# -- losses ------------------------------------------------------------------


def test_loss_examples():
    assert loss(LossSpec("l1"), [0.0, 0.0], [1.0, 1.0]) == 1.0
    assert loss(LossSpec("l2"), [0.0, 0.0], [1.0, 3.0]) == 5.0
    x = np.random.default_rng(0).random(64)
    for spec in (LossSpec("l1"), LossSpec("l2"), LossSpec("ssim_l1", (8, 8, 1))):
        assert loss(spec, x, x) == 0.0


def test_ssim_l1_on_gradient_images():
    a, b = _gradient_images()
    spec = LossSpec("ssim_l1", (8, 8, 1))
    want = 0.5 * (1 - _ssim_by_windows(a, b)) + 0.5 * np.mean(np.abs(a - b))
    assert loss(spec, a.ravel(), b.ravel()) == pytest.approx(want, abs=1e-12)


@given(hnp.arrays(np.float64, 12, elements=st.floats(-5, 5)), hnp.arrays(np.float64, 12, elements=st.floats(-5, 5)))
def test_l1_l2_nonnegative_and_zero_iff_equal(x, y):
    for kind in ("l1", "l2"):
        v = loss(LossSpec(kind), x, y)
        assert v >= 0
        if np.array_equal(x, y):
            assert v == 0
        elif kind == "l1":
            assert v > 0


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec("ssim_l1")
    with pytest.raises(ValueError):
        LossSpec("ssim_l1", (5, 5, 1))
    with pytest.raises(ValueError):
        LossSpec("l3")
    with pytest.raises(ValueError):
        LossSpec(data_range=0)
    with pytest.raises(ShapeError):
        loss(LossSpec("l1"), [0.0], [0.0, 1.0])


@pytest.mark.parametrize("kind", ["l1", "l2", "ssim_l1"])
def test_loss_and_grad_values(kind):
    spec = LossSpec(kind, (8, 9, 2) if kind == "ssim_l1" else None)
    rng = np.random.default_rng(3)
    t, p = rng.random((5, 144)), rng.random((5, 144))
    values, _ = loss_and_grad(spec, t, p)
    np.testing.assert_allclose(values, [loss(spec, a, b) for a, b in zip(t, p)], rtol=1e-12)


@pytest.mark.parametrize("kind", ["l2", "ssim_l1"])
def test_loss_gradient_finite_differences(kind):
    spec = LossSpec(kind, (8, 8, 2) if kind == "ssim_l1" else None)
    rng = np.random.default_rng(4)
    t, p = rng.random((1, 128)), rng.random((1, 128))
    _, grad = loss_and_grad(spec, t, p)
    step = 1e-6
    worst = 0.0
    for k in range(128):
        up, down = p.copy(), p.copy()
        up[0, k] += step
        down[0, k] -= step
        fd = (loss(spec, t[0], up[0]) - loss(spec, t[0], down[0])) / (2 * step)
        worst = max(worst, abs(fd - grad[0, k]) / max(abs(fd), 1e-4))
    assert worst < 1e-5


@pytest.mark.parametrize("kind", ["l1", "l2", "ssim_l1"])
def test_pairwise_loss_matches_loop(kind):
    spec = LossSpec(kind, (7, 8, 1) if kind == "ssim_l1" else None)
    rng = np.random.default_rng(6)
    x, y = rng.random((6, 56)), rng.random((5, 56))
    c = pairwise_loss(spec, x, y)
    want = np.array([[loss(spec, a, b) for b in y] for a in x])
    np.testing.assert_allclose(c, want, rtol=1e-11, atol=1e-13)
    assert np.all(c >= 0)


# -- features and Frechet ----------------------------------------------------


def test_zero_row_gives_zero_features():
    fe = FeatureExtractor(0, 5, 8)
    assert not extract_features(fe, np.zeros((2, 5))).any()


def test_features_straight_line():
    fe = FeatureExtractor(3, 4, feature_dim=4, hidden_dim=8)
    x = np.array([[0.1, -0.4, 0.7, 0.2]])
    h = [max(0.0, sum(x[0, i] * fe.w1[i, j] for i in range(4))) for j in range(8)]
    f = [max(0.0, sum(h[i] * fe.w2[i, j] for i in range(8))) for j in range(4)]
    np.testing.assert_allclose(extract_features(fe, x)[0], f, rtol=1e-13)


def test_features_deterministic_and_read_only():
    a = FeatureExtractor(9, 6)
    b = FeatureExtractor(9, 6)
    x = np.random.default_rng(0).random((3, 6))
    assert extract_features(a, x).tobytes() == extract_features(b, x).tobytes()
    with pytest.raises(ValueError):
        a.w1[0, 0] = 1.0
    with pytest.raises(ShapeError):
        extract_features(a, np.zeros((2, 5)))


def test_frechet_examples():
    g = GaussianFit(np.zeros(1), np.zeros((1, 1)))
    assert frechet_distance(g, GaussianFit(np.array([3.0]), np.zeros((1, 1)))) == pytest.approx(9.0)
    a = GaussianFit(np.zeros(1), np.array([[1.0]]))
    b = GaussianFit(np.zeros(1), np.array([[4.0]]))
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-12)
    cov = np.cov(np.random.default_rng(0).random((50, 4)), rowvar=False)
    assert frechet_distance(GaussianFit(np.ones(4), cov), GaussianFit(np.ones(4), cov)) <= 1e-8


def _frechet_reference(fa, fb):
    ma, mb = fa.mean(0), fb.mean(0)
    ca, cb = np.cov(fa, rowvar=False), np.cov(fb, rowvar=False)
    cross = sqrtm(ca @ cb).real
    return float(((ma - mb) ** 2).sum() + np.trace(ca + cb - 2 * cross))


def test_frechet_against_scipy_sqrtm():
    rng = np.random.default_rng(8)
    fa = rng.standard_normal((400, 8))
    fb = rng.standard_normal((400, 8)) @ np.diag(np.linspace(0.5, 2, 8)) + 1.0
    got = frechet_distance(fit_gaussian(fa), fit_gaussian(fb))
    assert got == pytest.approx(_frechet_reference(fa, fb), rel=1e-9)


def test_proxy_fid_identity_and_shuffle():
    x = np.random.default_rng(0).random((300, 20))
    fe = FeatureExtractor(0, 20, 32)
    assert proxy_fid(x, x, fe) <= 1e-6
    assert proxy_fid(x, x[np.random.default_rng(1).permutation(300)], fe) <= 1e-6


def test_proxy_fid_mean_shift_against_independent_pipeline():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((500, 6))
    b = rng.standard_normal((500, 6)) + 1.0
    fe = FeatureExtractor(2, 6, feature_dim=8, hidden_dim=16)
    fa = np.maximum(np.maximum(a @ fe.w1, 0) @ fe.w2, 0)
    fb = np.maximum(np.maximum(b @ fe.w1, 0) @ fe.w2, 0)
    assert proxy_fid(a, b, fe) == pytest.approx(_frechet_reference(fa, fb), rel=1e-8)


def test_proxy_fid_disjoint_clouds_larger():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((300, 10))
    fe = FeatureExtractor(0, 10, 16)
    same = proxy_fid(a, rng.standard_normal((300, 10)), fe)
    far = proxy_fid(a, rng.standard_normal((300, 10)) + 5.0, fe)
    assert far > same >= 0


def test_proxy_fid_subsamples_and_warns():
    rng = np.random.default_rng(12)
    fe = FeatureExtractor(0, 4, 8)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        v1 = proxy_fid(rng.random((50, 4)), rng.random((30, 4)), fe, seed=3)
    assert v1 >= 0
    with pytest.warns(UserWarning):
        proxy_fid(rng.random((5, 4)), rng.random((5, 4)), fe)
    with pytest.raises(ValueError):
        proxy_fid(rng.random((1, 4)), rng.random((5, 4)), fe)


def test_evaluate_report():
    rng = np.random.default_rng(13)
    x = rng.random((40, 64))
    rep = evaluate(x, x, image_shape=(8, 8, 1), feature_dim=16)
    assert rep["n_pairs"] == 40 and rep["lpips"] is None
    assert rep["ssim_mean"] == 1.0 and rep["l1_mean"] == 0.0
    assert rep["proxy_fid"] <= 1e-6
    rep = evaluate(x, rng.random((60, 64)), feature_dim=16)
    assert rep["ssim_mean"] is None and rep["n_pairs"] == 40
    assert set(rep) == {"proxy_fid", "ssim_mean", "ssim_std", "l1_mean", "n_pairs", "lpips"}
