"""Reconstruction losses and evaluation metrics.

SSIM here uses a uniform (box) window with stride 1 and valid padding, and
population (1/N) window statistics. Multi-channel images are scored per
channel and averaged. Flat vectors are laid out as ``(h, w, c)`` row-major.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

LOSS_KINDS = ("l2", "l1", "ssim_l1")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "l2"
    image_shape: tuple[int, int, int] | None = None
    window: int = 7
    data_range: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.data_range > 0:
            raise ValueError("data_range must be > 0")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be a positive odd integer, got {self.window}")
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
            if len(self.image_shape) != 3 or min(self.image_shape) < 1:
                raise ValueError(f"image_shape must be (h, w, c), got {self.image_shape}")
        if self.kind == "ssim_l1":
            if self.image_shape is None:
                raise ValueError("ssim_l1 loss requires image_shape")
            h, w, _ = self.image_shape
            if min(h, w) < self.window:
                raise ValueError(f"image {h}x{w} smaller than SSIM window {self.window}")

    @property
    def dim(self) -> int | None:
        return None if self.image_shape is None else math.prod(self.image_shape)


# ---------------------------------------------------------------------------
# SSIM


def _ssim_constants(data_range: float) -> tuple[float, float]:
    return (0.01 * data_range) ** 2, (0.03 * data_range) ** 2


def _box_sum(img: np.ndarray, k: int) -> np.ndarray:
    """Valid k x k window sums over axes (1, 2) of a (B, H, W, C) array."""
    return sliding_window_view(img, (k, k), axis=(1, 2)).sum(axis=(-2, -1))


def _box_adjoint(coef: np.ndarray, k: int) -> np.ndarray:
    """Transpose of ``_box_sum``: spread each window coefficient over its pixels."""
    padded = np.pad(coef, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    return _box_sum(padded, k)


def _as_images(x, image_shape) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h, w, c = image_shape
    return x.reshape(-1, h, w, c)


def _ssim_maps(x4: np.ndarray, y4: np.ndarray, k: int, data_range: float):
    c1, c2 = _ssim_constants(data_range)
    n = k * k
    mx = _box_sum(x4, k) / n
    my = _box_sum(y4, k) / n
    vx = _box_sum(x4 * x4, k) / n - mx * mx
    vy = _box_sum(y4 * y4, k) / n - my * my
    cxy = _box_sum(x4 * y4, k) / n - mx * my
    a1 = 2.0 * mx * my + c1
    a2 = 2.0 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    return (a1 * a2) / (b1 * b2), (mx, my, a1, a2, b1, b2)


def ssim(x, y, window: int = 7, data_range: float = 1.0) -> float:
    """Mean SSIM of two images shaped ``(h, w)`` or ``(h, w, c)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.ndim != 3:
        raise ShapeError(f"expected (h, w) or (h, w, c) images, got {x.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"SSIM window must be a positive odd integer, got {window}")
    if window > min(x.shape[0], x.shape[1]):
        raise ValueError(f"SSIM window {window} larger than image {x.shape[:2]}")
    smap, _ = _ssim_maps(x[None], y[None], window, data_range)
    return float(smap.mean())


def batch_ssim(x, y, image_shape, window: int = 7, data_range: float = 1.0) -> np.ndarray:
    """Row-wise SSIM of two ``(B, p)`` batches of flattened images."""
    x4 = _as_images(x, image_shape)
    y4 = _as_images(y, image_shape)
    if x4.shape != y4.shape:
        raise ShapeError(f"batch shapes differ: {x4.shape} vs {y4.shape}")
    if window > min(x4.shape[1], x4.shape[2]):
        raise ValueError(f"SSIM window {window} larger than image {x4.shape[1:3]}")
    smap, _ = _ssim_maps(x4, y4, window, data_range)
    return smap.mean(axis=(1, 2, 3))


def _ssim_and_grad(x4: np.ndarray, y4: np.ndarray, k: int, data_range: float):
    """Per-image mean SSIM and its gradient with respect to ``y4``."""
    smap, (mx, my, a1, a2, b1, b2) = _ssim_maps(x4, y4, k, data_range)
    n = k * k
    count = smap.shape[1] * smap.shape[2] * smap.shape[3]
    denom = b1 * b2
    d_my = (2.0 * mx * a2) / denom - smap * (2.0 * my) / b1
    d_vy = -smap / b2
    d_cxy = (2.0 * a1) / denom
    # d s / d y_p = alpha + beta * (y_p - my) + gamma * (x_p - mx), per window
    alpha = d_my / n
    beta = 2.0 * d_vy / n
    gamma = d_cxy / n
    const = alpha - beta * my - gamma * mx
    grad = (
        _box_adjoint(const, k)
        + y4 * _box_adjoint(beta, k)
        + x4 * _box_adjoint(gamma, k)
    ) / count
    return smap.mean(axis=(1, 2, 3)), grad


# ---------------------------------------------------------------------------
# Losses


def _check_pair(spec: LossSpec, x: np.ndarray, y: np.ndarray):
    if x.shape != y.shape:
        raise ShapeError(f"loss inputs differ in shape: {x.shape} vs {y.shape}")
    if spec.image_shape is not None and x.shape[-1] != spec.dim:
        raise ShapeError(
            f"vector length {x.shape[-1]} does not match image shape {spec.image_shape}"
        )


def loss(spec: LossSpec, x, y) -> float:
    """Loss between two flat vectors; symmetric and nonnegative."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    _check_pair(spec, x, y)
    if spec.kind == "l2":
        return float(np.mean((x - y) ** 2))
    l1 = float(np.mean(np.abs(x - y)))
    if spec.kind == "l1":
        return l1
    h, w, c = spec.image_shape
    s = ssim(x.reshape(h, w, c), y.reshape(h, w, c), spec.window, spec.data_range)
    return 0.5 * (1.0 - s) + 0.5 * l1


def loss_and_grad(spec: LossSpec, target, pred) -> tuple[np.ndarray, np.ndarray]:
    """Per-row losses of a batch and their gradients with respect to ``pred``."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _check_pair(spec, target, pred)
    p = pred.shape[1]
    diff = pred - target
    if spec.kind == "l2":
        return np.mean(diff * diff, axis=1), 2.0 * diff / p
    l1 = np.mean(np.abs(diff), axis=1)
    g_l1 = np.sign(diff) / p
    if spec.kind == "l1":
        return l1, g_l1
    x4 = _as_images(target, spec.image_shape)
    y4 = _as_images(pred, spec.image_shape)
    s, g_s = _ssim_and_grad(x4, y4, spec.window, spec.data_range)
    values = 0.5 * (1.0 - s) + 0.5 * l1
    grad = -0.5 * g_s.reshape(pred.shape) + 0.5 * g_l1
    return values, grad


@numba.njit(cache=True)
def _pairwise_abs_sq(x, y, squared):
    n, p = x.shape
    m = y.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for k in range(m):
            acc = 0.0
            for t in range(p):
                d = x[i, t] - y[k, t]
                acc += d * d if squared else abs(d)
            out[i, k] = acc / p
    return out


@numba.njit(cache=True)
def _accumulate_window_ssim(total, exy, mx, my, vx, vy, c1, c2):
    n, m = total.shape
    for i in range(n):
        for k in range(m):
            mxy = mx[i] * my[k]
            cxy = exy[i, k] - mxy
            a1 = 2.0 * mxy + c1
            b1 = mx[i] * mx[i] + my[k] * my[k] + c1
            b2 = vx[i] + vy[k] + c2
            total[i, k] += (a1 * (2.0 * cxy + c2)) / (b1 * b2)


def _pairwise_ssim(spec: LossSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w, c = spec.image_shape
    k = spec.window
    npix = k * k
    c1, c2 = _ssim_constants(spec.data_range)
    x4 = x.reshape(-1, h, w, c)
    y4 = y.reshape(-1, h, w, c)
    total = np.zeros((x.shape[0], y.shape[0]))
    n_windows = 0
    for ch in range(c):
        for r in range(h - k + 1):
            for s in range(w - k + 1):
                xw = x4[:, r : r + k, s : s + k, ch].reshape(x.shape[0], npix)
                yw = y4[:, r : r + k, s : s + k, ch].reshape(y.shape[0], npix)
                mx = xw.sum(axis=1) / npix
                my = yw.sum(axis=1) / npix
                vx = (xw * xw).sum(axis=1) / npix - mx * mx
                vy = (yw * yw).sum(axis=1) / npix - my * my
                exy = (xw @ yw.T) / npix
                _accumulate_window_ssim(total, exy, mx, my, vx, vy, c1, c2)
                n_windows += 1
    return total / n_windows


def pairwise_loss(spec: LossSpec, x, y) -> np.ndarray:
    """``out[i, k] = loss(spec, x[i], y[k])`` for ``(n, p)`` and ``(m, p)`` inputs."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise loss needs (n, p) and (m, p), got {x.shape}, {y.shape}")
    if spec.image_shape is not None and x.shape[1] != spec.dim:
        raise ShapeError(f"vector length {x.shape[1]} does not match {spec.image_shape}")
    if spec.kind == "l2":
        return _pairwise_abs_sq(x, y, True)
    l1 = _pairwise_abs_sq(x, y, False)
    if spec.kind == "l1":
        return l1
    out = 0.5 * (1.0 - _pairwise_ssim(spec, x, y)) + 0.5 * l1
    # rounding can push 1 - SSIM a hair below zero for identical pairs
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# Proxy FID


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    """Fixed random two-stage affine+relu feature map; never trained."""

    seed: int
    input_dim: int
    feature_dim: int = 128
    hidden_dim: int = 256
    w1: np.ndarray = field(init=False, repr=False)
    b1: np.ndarray = field(init=False, repr=False)
    w2: np.ndarray = field(init=False, repr=False)
    b2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if min(self.input_dim, self.feature_dim, self.hidden_dim) < 1:
            raise ValueError("feature extractor dimensions must be >= 1")
        rng = np.random.default_rng(self.seed)
        w1 = rng.normal(0.0, math.sqrt(2.0 / self.input_dim), (self.input_dim, self.hidden_dim))
        w2 = rng.normal(0.0, math.sqrt(2.0 / self.hidden_dim), (self.hidden_dim, self.feature_dim))
        for name, value in (
            ("w1", w1),
            ("b1", np.zeros(self.hidden_dim)),
            ("w2", w2),
            ("b2", np.zeros(self.feature_dim)),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)


def extract_features(fe: FeatureExtractor, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != fe.input_dim:
        raise ShapeError(f"expected (n, {fe.input_dim}) batch, got {batch.shape}")
    h = np.maximum(batch @ fe.w1 + fe.b1, 0.0)
    return np.maximum(h @ fe.w2 + fe.b2, 0.0)


@dataclass(frozen=True, eq=False)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(features) -> GaussianFit:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a Gaussian")
    mean = f.mean(axis=0)
    centered = f - mean
    cov = centered.T @ centered / (f.shape[0] - 1)
    return GaussianFit(mean, 0.5 * (cov + cov.T))


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    try:
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    scale = max(1.0, float(np.max(np.abs(vals)))) if vals.size else 1.0
    if vals.size and vals.min() < -1e-8 * scale:
        raise NumericError(f"covariance is not PSD (eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """Squared Frechet (2-Wasserstein) distance between two Gaussians.

    The cross term ``Tr((Sa^1/2 Sb Sa^1/2)^1/2)`` equals the nuclear norm of
    ``Sb^1/2 Sa^1/2``, which is computed from singular values to avoid taking
    square roots of rounding noise.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    sa = _psd_sqrt(a.cov)
    sb = _psd_sqrt(b.cov)
    try:
        cross = float(np.linalg.svd(sb @ sa, compute_uv=False).sum())
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed: {exc}") from exc
    diff = a.mean - b.mean
    value = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * cross
    return max(value, 0.0)


def proxy_fid(real, fake, fe: FeatureExtractor, seed: int = 0, max_samples: int = 2048) -> float:
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.shape[0] < 2 or fake.shape[0] < 2:
        raise ValueError("proxy FID needs at least 2 samples per set")
    k = min(real.shape[0], fake.shape[0], max_samples)
    rng = np.random.default_rng(seed)
    if real.shape[0] > k:
        real = real[np.sort(rng.choice(real.shape[0], k, replace=False))]
    if fake.shape[0] > k:
        fake = fake[np.sort(rng.choice(fake.shape[0], k, replace=False))]
    if k < fe.feature_dim + 1:
        warnings.warn(
            f"proxy FID with {k} samples in {fe.feature_dim} feature dims; covariance is singular",
            stacklevel=2,
        )
    fr = fit_gaussian(extract_features(fe, real))
    ff = fit_gaussian(extract_features(fe, fake))
    return frechet_distance(fr, ff)


def evaluate(
    real,
    fake,
    image_shape=None,
    seed: int = 0,
    n_pairs: int = 50,
    feature_dim: int = 128,
    window: int = 7,
    data_range: float = 1.0,
) -> dict:
    """Metric report: proxy FID over the sets, SSIM and L1 over the first paired rows."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise ShapeError(f"real {real.shape} and fake {fake.shape} must share a feature width")
    fe = FeatureExtractor(seed, real.shape[1], feature_dim)
    pairs = min(n_pairs, real.shape[0], fake.shape[0])
    l1 = np.mean(np.abs(real[:pairs] - fake[:pairs]), axis=1)
    report = {
        "proxy_fid": proxy_fid(real, fake, fe, seed),
        "ssim_mean": None,
        "ssim_std": None,
        "l1_mean": float(l1.mean()),
        "n_pairs": int(pairs),
        "lpips": None,
    }
    if image_shape is not None:
        s = batch_ssim(real[:pairs], fake[:pairs], tuple(image_shape), window, data_range)
        report["ssim_mean"] = float(s.mean())
        report["ssim_std"] = float(s.std())
    return report
