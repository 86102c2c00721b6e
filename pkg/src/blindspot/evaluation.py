"""Quantitative evaluation: PSNR, the Dirac receptive-field probe, and
cross-noise sweeps of a trained model."""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .images import quantize
from .network import Network, NetworkConfig, build_network, forward
from .noise import corrupt, gaussian, mean_only, posterior_map


def psnr(a, b, peak=1.0):
    """10*log10(peak^2 / MSE) in dB; infinite when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


@dataclass
class ProbeResult:
    """Receptive-field footprint measured from center-output gradients."""
    footprint: np.ndarray   # (side, side) mean |d center-output / d input|
    extent: tuple           # (rows, cols) of the tight nonzero bounding box
    center_value: float

    @property
    def side(self):
        return max(self.extent)

    def describe(self):
        return (f"footprint {self.extent[0]}x{self.extent[1]}, "
                f"center {self.center_value:g}")


def dirac_probe(net, image_side=None, seeds=8, base_seed=0):
    """Map how strongly each input pixel can influence the center output.

    One backward pass from the mean output at the center pixel gives the
    input-gradient magnitudes; a `NetworkConfig` is probed over `seeds`
    fresh initializations and averaged, while an already-built (e.g.
    trained) `Network` is probed as-is. The probe image must be large
    enough that the footprint cannot touch the borders.
    """
    if isinstance(net, NetworkConfig):
        config = net
        nets = [build_network(config, seed=base_seed + i) for i in range(seeds)]
    elif isinstance(net, Network):
        config = net.config
        nets = [net]
    else:
        raise ParameterError(f"expected Network or NetworkConfig, got {type(net)!r}")

    rf_side = config.receptive_field_side()
    if image_side is None:
        image_side = 2 * rf_side + 1
    if image_side < 2 * rf_side:
        raise ParameterError(
            f"probe image side {image_side} < {2 * rf_side} needed for a "
            f"{rf_side}x{rf_side} receptive field")

    side = int(image_side)
    center = side // 2
    total = np.zeros((side, side), dtype=np.float64)
    for i, probe_net in enumerate(nets):
        rng = np.random.default_rng(np.random.SeedSequence([base_seed, 77, i]))
        image = T.Tensor(rng.uniform(0, 1, (1, config.channels, side, side))
                         .astype(np.float32), requires_grad=True)
        pred = forward(probe_net, image)
        pick = np.zeros_like(pred.mean.data)
        pick[0, :, center, center] = 1.0
        T.backward(T.sum_all(T.mul(pred.mean, T.Tensor(pick))))
        total += np.abs(image.grad[0].astype(np.float64)).sum(axis=0)
    footprint = total / len(nets)

    rows = np.flatnonzero(footprint.any(axis=1))
    cols = np.flatnonzero(footprint.any(axis=0))
    extent = ((int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))
              if rows.size else (0, 0))
    return ProbeResult(footprint=footprint, extent=extent,
                       center_value=float(footprint[center, center]))


@dataclass(frozen=True)
class EvalRecord:
    image: str
    noise_spec: str          # corruption the model was trained for
    sigma_test: float
    psnr_posterior: float
    psnr_mean_only: float
    psnr_noisy: float


def corruption_seed(base_seed, image_index, noise_model):
    """Stable per-(image, corruption) seed shared by the CLI and the bench."""
    key = int.from_bytes(hashlib.sha256(noise_model.spec.encode()).digest()[:8], "little")
    return np.random.SeedSequence([int(base_seed), int(image_index), key])


def denoise(net, noisy, sigma255, use_posterior=True):
    """Predict the clean image from a noisy (C, H, W) array.

    `sigma255` is the noise standard deviation in 0-255 units; the
    posterior combines the prediction with the noisy value at that level,
    while `use_posterior=False` returns the clamped mean only.
    """
    if sigma255 < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma255}")
    batch = np.asarray(noisy, dtype=np.float32)[None]
    pred = forward(net, T.Tensor(batch))
    if use_posterior:
        sig_map = np.full((1, 1, 1, 1), sigma255 / 255.0, dtype=np.float32)
        out = np.clip(posterior_map(pred, batch, sig_map), 0.0, 1.0)
    else:
        out = mean_only(pred)
    return out[0]


def cross_sigma_eval(checkpoint, images, sigma_tests, base_seed=0):
    """Corrupt, predict, and score each image at each test sigma.

    The checkpoint must come from training under a known-sigma Gaussian;
    the posterior always uses the test-time sigma. Corrupted values pass
    through the 16-bit sample grid so results match the file-based
    corrupt/denoise pipeline bit for bit.
    """
    from .training import network_from_checkpoint

    net = network_from_checkpoint(checkpoint)
    train_noise = checkpoint.train_config.noise
    if train_noise.kind != "gaussian_known":
        raise ParameterError(f"cross-sigma evaluation needs a gaussian_known model, "
                             f"checkpoint was trained with {train_noise.spec!r}")
    records = []
    for sigma in sigma_tests:
        if sigma < 0:
            raise ParameterError(f"test sigma must be >= 0, got {sigma}")
        model = gaussian(sigma)
        for idx, (name, clean) in enumerate(images):
            rng = np.random.default_rng(corruption_seed(base_seed, idx, model))
            noisy, _ = corrupt(clean[None], model, rng)
            noisy = quantize(noisy, bit_depth=16)
            post = quantize(denoise(net, noisy[0], sigma, use_posterior=True))
            mean = quantize(denoise(net, noisy[0], sigma, use_posterior=False))
            records.append(EvalRecord(
                image=name, noise_spec=train_noise.spec, sigma_test=float(sigma),
                psnr_posterior=psnr(post, clean),
                psnr_mean_only=psnr(mean, clean),
                psnr_noisy=psnr(noisy[0], clean)))
    return records
