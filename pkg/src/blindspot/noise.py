"""Corruption processes, the Gaussian likelihood objective, and posterior fusion.

Images live in [0, 1]; noise levels are quoted in 0-255 photometric units
and divided by 255 internally. The network head parameterizes a per-pixel
Gaussian N(mu, Sigma) over the clean value: for grayscale the single
covariance channel is a log-variance, for color six channels hold the
lower-triangular factor L (diagonal through exp) of Sigma = L L^T + eps*I,
which keeps Sigma positive-definite by construction. Training minimizes
the negative log-likelihood of the noisy value under N(mu, Sigma + s^2 I);
prediction multiplies the network output with the noise distribution
centered at the noisy value.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError, ParameterError

COV_EPS = 1e-6  # diagonal floor added to the reconstructed covariance
LOG_2PI = float(np.log(2.0 * np.pi))

# channel order of the lower-triangular factor for color predictions
_TRIL_ROWS = np.array([0, 1, 1, 2, 2, 2])
_TRIL_COLS = np.array([0, 0, 1, 0, 1, 2])
_DIAG_SLOTS = np.array([0, 2, 5])


@dataclass(frozen=True)
class NoiseModel:
    """Tagged description of the corruption process.

    kind 'gaussian_known' uses `sigma`; 'gaussian_variable' draws a fresh
    per-image sigma uniformly from `sigma_range`; 'poisson' uses event
    rate `lam`. Sigmas are in 0-255 units.
    """
    kind: str
    sigma: float = 0.0
    sigma_range: tuple = (0.0, 0.0)
    lam: float = 0.0

    def __post_init__(self):
        if self.kind == "gaussian_known":
            if self.sigma < 0:
                raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        elif self.kind == "gaussian_variable":
            lo, hi = self.sigma_range
            if not (0 <= lo <= hi):
                raise ParameterError(f"need 0 <= lo <= hi, got [{lo}, {hi}]")
        elif self.kind == "poisson":
            if self.lam <= 0:
                raise ParameterError(f"lambda must be > 0, got {self.lam}")
        else:
            raise ParameterError(f"unknown noise kind {self.kind!r}")

    @property
    def spec(self):
        """Canonical spec string, e.g. 'gaussian:25' or 'poisson:30'."""
        if self.kind == "gaussian_known":
            return f"gaussian:{_fmt(self.sigma)}"
        if self.kind == "gaussian_variable":
            lo, hi = self.sigma_range
            return f"gaussian-range:{_fmt(lo)},{_fmt(hi)}"
        return f"poisson:{_fmt(self.lam)}"


def _fmt(v):
    return f"{v:g}"


def gaussian(sigma):
    return NoiseModel(kind="gaussian_known", sigma=float(sigma))


def gaussian_range(lo, hi):
    return NoiseModel(kind="gaussian_variable", sigma_range=(float(lo), float(hi)))


def poisson(lam):
    return NoiseModel(kind="poisson", lam=float(lam))


def parse_noise_spec(spec):
    """Parse 'gaussian:S | gaussian-range:LO,HI | poisson:LAM'."""
    name, sep, args = spec.partition(":")
    try:
        if name == "gaussian" and sep:
            return gaussian(float(args))
        if name == "gaussian-range" and sep:
            lo, hi = (float(v) for v in args.split(","))
            return gaussian_range(lo, hi)
        if name == "poisson" and sep:
            return poisson(float(args))
    except (ValueError, ParameterError) as exc:
        raise ParameterError(f"bad noise spec {spec!r}: {exc}") from exc
    raise ParameterError(
        f"unknown noise spec {spec!r}; expected gaussian:S, gaussian-range:LO,HI, or poisson:LAM")


def corrupt(clean, model, seed):
    """Apply the corruption process; returns (noisy, sigma map in [0,1] units).

    Gaussian noise is left unclipped. The sigma map is per image for the
    Gaussian models, per pixel (from the signal-dependent approximation)
    for Poisson. Deterministic for a given seed or Generator.
    """
    clean = np.asarray(clean, dtype=np.float32)
    if clean.ndim != 4:
        raise DimensionError(f"corrupt expects (N,C,H,W), got {clean.shape}")
    if clean.size and (clean.min() < 0.0 or clean.max() > 1.0):
        raise InputError(f"clean values must lie in [0, 1], got range "
                         f"[{clean.min():.4f}, {clean.max():.4f}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = clean.shape[0]

    if model.kind == "gaussian_known":
        sn = model.sigma / 255.0
        noisy = (clean + sn * rng.standard_normal(clean.shape)).astype(np.float32)
        sigma_map = np.full((n, 1, 1, 1), sn, dtype=np.float32)
    elif model.kind == "gaussian_variable":
        lo, hi = model.sigma_range
        per_image = rng.uniform(lo, hi, size=n) / 255.0
        sigma_map = per_image.reshape(n, 1, 1, 1).astype(np.float32)
        noisy = (clean + sigma_map * rng.standard_normal(clean.shape)).astype(np.float32)
    else:
        noisy = (rng.poisson(model.lam * clean.astype(np.float64)) / model.lam).astype(np.float32)
        sigma_map = poisson_as_gaussian(noisy, model.lam)
    return noisy, sigma_map


def poisson_as_gaussian(noisy, lam):
    """Per-pixel sigma map of the Gaussian approximation: var = max(y, 1e-3)/lam."""
    if lam <= 0:
        raise ParameterError(f"lambda must be > 0, got {lam}")
    var = np.maximum(np.asarray(noisy, dtype=np.float64), 1e-3) / lam
    return np.sqrt(var).astype(np.float32)


def variance_from_params(cov_params):
    """Grayscale prior variance map from the log-variance channel."""
    return np.exp(np.asarray(cov_params, dtype=np.float64)) + COV_EPS


def _unpack_tril(cov_params):
    """(N,6,H,W) raw channels -> (N,H,W,3,3) lower-triangular L, diag through exp."""
    p = np.moveaxis(np.asarray(cov_params, dtype=np.float64), 1, -1)  # (N,H,W,6)
    vals = p.copy()
    vals[..., _DIAG_SLOTS] = np.exp(p[..., _DIAG_SLOTS])
    ell = np.zeros(p.shape[:-1] + (3, 3))
    ell[..., _TRIL_ROWS, _TRIL_COLS] = vals
    return ell


def covariance_from_params(cov_params):
    """Color prior covariance map (N,H,W,3,3) = L L^T + eps*I."""
    ell = _unpack_tril(cov_params)
    return ell @ np.swapaxes(ell, -1, -2) + COV_EPS * np.eye(3)


def _sigma_sq_per_channel(sigma_map, shape):
    """Broadcast a sigma map to per-pixel, per-channel noise variances."""
    n, c, h, w = shape
    sig = np.asarray(sigma_map, dtype=np.float64)
    if np.any(sig < 0):
        raise ParameterError("sigma map must be non-negative")
    return np.broadcast_to(np.square(sig), (n, c, h, w))


def nll_loss(pred, noisy, sigma_map):
    """Mean negative log-likelihood of the noisy values under N(mu, Sigma + s^2 I).

    Differentiable with respect to the prediction map. `noisy` may be a
    Tensor or array; `sigma_map` broadcasts against it (per image, or per
    pixel for the Poisson approximation).
    """
    y = np.asarray(noisy.data if isinstance(noisy, T.Tensor) else noisy, dtype=np.float64)
    mean, cov = pred.mean, pred.cov_params
    if y.shape != mean.data.shape:
        raise DimensionError(f"noisy shape {y.shape} != mean shape {mean.data.shape}")
    c = mean.data.shape[1]
    sig2 = _sigma_sq_per_channel(sigma_map, mean.data.shape)
    nll_map = _nll_map_gray(mean, cov, y, sig2) if c == 1 else _nll_map_color(mean, cov, y, sig2)
    return T.mean_all(nll_map)


def _nll_map_gray(mean, cov, y, sig2):
    mu = mean.data.astype(np.float64)
    p = cov.data.astype(np.float64)
    r = y - mu
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow here yields a non-finite loss, which training aborts on
        exp_p = np.exp(p)
        a = exp_p + COV_EPS + sig2
        nll = 0.5 * (np.log(a) + r * r / a + LOG_2PI)

    def backward(g):
        g64 = g.astype(np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            T._accumulate(mean, g64 * (-r / a))
            T._accumulate(cov, g64 * 0.5 * (1.0 / a - (r * r) / (a * a)) * exp_p)

    return T._result(nll.astype(np.float32), (mean, cov), backward, "nll_gray")


def _nll_map_color(mean, cov, y, sig2):
    n, c, h, w = mean.data.shape
    mu = np.moveaxis(mean.data.astype(np.float64), 1, -1)        # (N,H,W,3)
    yv = np.moveaxis(y, 1, -1)
    s2 = np.moveaxis(sig2, 1, -1)
    ell = _unpack_tril(cov.data)
    sigma = ell @ np.swapaxes(ell, -1, -2) + COV_EPS * np.eye(3)
    a = sigma + s2[..., None] * np.eye(3)
    r = yv - mu
    chol = np.linalg.cholesky(a)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    wvec = np.linalg.solve(a, r[..., None])[..., 0]
    quad = (r * wvec).sum(-1)
    nll = 0.5 * (logdet + quad + c * LOG_2PI)

    def backward(g):
        g64 = g.astype(np.float64)[:, 0]                         # (N,H,W)
        a_inv = np.linalg.inv(a)
        d_mu = -wvec * g64[..., None]
        d_a = 0.5 * (a_inv - wvec[..., :, None] * wvec[..., None, :]) * g64[..., None, None]
        d_ell = 2.0 * (d_a @ ell)
        d_raw = d_ell[..., _TRIL_ROWS, _TRIL_COLS]
        d_raw[..., _DIAG_SLOTS] *= ell[..., _TRIL_ROWS[_DIAG_SLOTS], _TRIL_COLS[_DIAG_SLOTS]]
        T._accumulate(mean, np.moveaxis(d_mu, -1, 1))
        T._accumulate(cov, np.moveaxis(d_raw, -1, 1))

    return T._result(nll[:, None].astype(np.float32), (mean, cov), backward, "nll_color")


@dataclass(frozen=True)
class PixelPosterior:
    mean: np.ndarray  # (c,)
    cov: np.ndarray   # (c, c)


def posterior(mu, sigma_prior, y, sigma):
    """Fuse the prediction N(mu, Sigma) with the noise likelihood N(y, s^2 I).

    Single-pixel form; `sigma` is a scalar or per-channel noise std. Uses
    the innovation form m = mu + K (y - mu), P = Sigma - K Sigma with
    K = Sigma (Sigma + s^2 I)^{-1}, which degenerates cleanly to (y, 0)
    at sigma = 0.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    c = mu.shape[0]
    sigma_prior = np.asarray(sigma_prior, dtype=np.float64).reshape(c, c)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (c,))
    if np.any(sig < 0):
        raise ParameterError(f"noise sigma must be >= 0, got {sigma}")
    if np.all(sig == 0):
        # the noise distribution degenerates to a point mass at y
        return PixelPosterior(mean=y.copy(), cov=np.zeros((c, c)))
    gain = sigma_prior @ np.linalg.inv(sigma_prior + np.diag(sig ** 2))
    mean = mu + gain @ (y - mu)
    cov = sigma_prior - gain @ sigma_prior
    return PixelPosterior(mean=mean, cov=0.5 * (cov + cov.T))


def posterior_map(pred, noisy, sigma_map):
    """Vectorized posterior mean over a whole prediction map.

    `pred` is a GaussianPredictionMap (or any object with .mean/.cov_params
    tensors); returns an array shaped like the mean map.
    """
    mu = np.asarray(pred.mean.data, dtype=np.float64)
    y = np.asarray(noisy, dtype=np.float64)
    if y.shape != mu.shape:
        raise DimensionError(f"noisy shape {y.shape} != mean shape {mu.shape}")
    c = mu.shape[1]
    sig2 = _sigma_sq_per_channel(sigma_map, mu.shape)

    if c == 1:
        var = variance_from_params(pred.cov_params.data)
        gain = var / (var + sig2)
        return np.where(sig2 == 0, y, mu + gain * (y - mu)).astype(np.float32)

    if np.all(sig2 == 0):
        return y.astype(np.float32).copy()
    sigma = covariance_from_params(pred.cov_params.data)      # (N,H,W,3,3)
    mu_v = np.moveaxis(mu, 1, -1)
    y_v = np.moveaxis(y, 1, -1)
    s2_v = np.moveaxis(sig2, 1, -1)
    a = sigma + s2_v[..., None] * np.eye(3)
    gain = sigma @ np.linalg.inv(a)
    mean = mu_v + (gain @ (y_v - mu_v)[..., None])[..., 0]
    return np.moveaxis(mean, -1, 1).astype(np.float32)


def mean_only(pred):
    """The mean map alone, clamped to [0, 1] for metric computation."""
    mean = pred.mean.data if hasattr(pred, "mean") else pred
    return np.clip(np.asarray(mean, dtype=np.float32), 0.0, 1.0)
