"""Shared test oracles, independent of the code paths they check."""

import numpy as np

from blindspot import tensor as T


def fd_loss(build, arrays, weight):
    """Evaluate sum(build(*arrays) * weight) outside the tape, in float64."""
    out = build(*[T.Tensor(a) for a in arrays])
    return np.sum(out.data * weight, dtype=np.float64)


def gradcheck(build, arrays, rtol=1e-3, step=1e-3, seed=0):
    """Central finite-difference check of every input gradient.

    `build` maps Tensors to one output Tensor. The loss is a fixed random
    weighting of the output, so every output element influences every
    gradient entry. Perturbations are applied to the stored float32 values;
    differences are accumulated in float64.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    weight = rng.standard_normal(out.data.shape).astype(np.float32)
    loss = T.sum_all(T.mul(out, T.Tensor(weight)))
    T.backward(loss)

    for ti, base in enumerate(arrays):
        numeric = np.zeros(base.size, dtype=np.float64)
        for ei in range(base.size):
            perturbed = [a.copy() for a in arrays]
            perturbed[ti].flat[ei] = base.flat[ei] + step
            hi = fd_loss(build, perturbed, weight)
            perturbed[ti].flat[ei] = base.flat[ei] - step
            lo = fd_loss(build, perturbed, weight)
            numeric[ei] = (hi - lo) / (2.0 * step)
        numeric = numeric.reshape(base.shape)
        analytic = tensors[ti].grad
        assert analytic is not None, f"input {ti} got no gradient"
        assert analytic.shape == base.shape
        diff = analytic.astype(np.float64) - numeric
        norm_err = np.linalg.norm(diff) / max(np.linalg.norm(numeric), 1e-8)
        assert norm_err <= rtol, f"input {ti}: gradient norm error {norm_err:.3e} > {rtol}"
        scale = max(np.abs(numeric).max(), 1e-6)
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), scale)
        err = np.abs(diff) / denom
        assert err.max() <= rtol, (
            f"input {ti}: max rel grad error {err.max():.3e} > {rtol}")


def reference_psnr(a, b, peak=1.0):
    """Two-line PSNR reference used against the library implementation."""
    mse = np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2)
    return float("inf") if mse == 0 else float(10.0 * np.log10(peak * peak / mse))


def dense_gaussian_fusion(mu, cov, y, sigma):
    """Posterior of N(mu, cov) * N(y, diag(sigma^2)) via explicit precision sums."""
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c = mu.shape[0]
    noise_prec = np.diag(1.0 / np.broadcast_to(np.square(np.float64(sigma)), (c,)))
    prior_prec = np.linalg.inv(cov)
    post_cov = np.linalg.inv(prior_prec + noise_prec)
    post_mean = post_cov @ (prior_prec @ mu + noise_prec @ y)
    return post_mean, post_cov


def fused_moments_by_quadrature(mu, var, y, sigma, width=12.0, points=20001):
    """Scalar Gaussian product moments by brute-force quadrature on a grid."""
    lo = min(mu - width * np.sqrt(var), y - width * sigma)
    hi = max(mu + width * np.sqrt(var), y + width * sigma)
    x = np.linspace(lo, hi, points)
    dens = np.exp(-0.5 * (x - mu) ** 2 / var) * np.exp(-0.5 * (x - y) ** 2 / sigma ** 2)
    z = np.trapezoid(dens, x)
    mean = np.trapezoid(x * dens, x) / z
    var_post = np.trapezoid((x - mean) ** 2 * dens, x) / z
    return mean, var_post
