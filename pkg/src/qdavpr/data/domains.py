"""
Synthetic domain transforms.

Parametric stand-ins for the six weather and illumination domains. Every transform is a pure
function of ``(image, seed)``: the seed drives a private ``numpy`` generator that samples the
transform parameters from the ranges of ``DomainTransformSpec``. Images are ``H x W x 3``
``float32`` arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

from enum import IntEnum
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from qdavpr.config import AugmentConfig, DomainTransformSpec
from qdavpr.error import DomainError, InputShapeError

Image = NDArray[np.float32]

ORIGINAL = -1  # domain label of untransformed images

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class SyntheticDomain(IntEnum):
    FOG = 0
    RAIN = 1
    SNOW = 2
    WIND = 3
    NIGHT = 4
    SUN = 5


def parse_domains(names: str) -> list[SyntheticDomain]:
    """Parse a comma separated domain list like ``fog,rain,night``."""
    try:
        return [SyntheticDomain[name.strip().upper()] for name in names.split(",") if name.strip()]
    except KeyError as err:
        raise DomainError(
            f"Unknown domain `{err.args[0].lower()}`! Possible domains are: "
            f"{', '.join(d.name.lower() for d in SyntheticDomain)}"
        ) from err


def luminance(image: Image) -> NDArray[np.float32]:
    return image @ LUMA


####################################################################################################
### Domains
####################################################################################################


def _fog(image: Image, rng: np.random.Generator, spec: DomainTransformSpec) -> Image:
    height, width = image.shape[:2]
    density = rng.uniform(*spec.fog_density)
    contrast = rng.uniform(*spec.fog_contrast)

    haze = ndimage.gaussian_filter(rng.random((height, width)), sigma=max(height, width) / 8)
    haze = (haze - haze.min()) / (np.ptp(haze) + 1e-8)
    haze = density * (0.5 + 0.5 * haze)[..., None]

    mean = image.mean(axis=(0, 1), keepdims=True)
    flat = mean + (image - mean) * contrast
    return flat * (1.0 - haze) + haze


def _rain(image: Image, rng: np.random.Generator, spec: DomainTransformSpec) -> Image:
    height, width = image.shape[:2]
    drops = (rng.random((height, width)) < rng.uniform(*spec.rain_drops)).astype(np.float64)
    streaks = ndimage.convolve(drops, np.eye(spec.rain_length), mode="constant")
    streaks = np.clip(streaks, 0.0, 1.0)[..., None]
    opacity = rng.uniform(*spec.rain_opacity)
    return image * (1.0 - opacity * streaks) + opacity * streaks * 0.85


def _snow(image: Image, rng: np.random.Generator, spec: DomainTransformSpec) -> Image:
    height, width = image.shape[:2]
    flakes = (rng.random((height, width)) < rng.uniform(*spec.snow_flakes)).astype(np.float64)
    flakes = ndimage.gaussian_filter(flakes, sigma=0.7)
    if flakes.max() > 0:
        flakes = flakes / flakes.max()

    desaturation = rng.uniform(*spec.snow_desaturation)
    gray = luminance(image)[..., None]
    faded = (1.0 - desaturation) * image + desaturation * gray
    return faded + flakes[..., None] * (1.0 - faded)


def _wind(image: Image, rng: np.random.Generator, spec: DomainTransformSpec) -> Image:
    length = int(rng.integers(spec.wind_length[0], spec.wind_length[1] + 1))
    angle = rng.uniform(0.0, 180.0)

    kernel = np.zeros((length, length))
    kernel[length // 2, :] = 1.0
    kernel = ndimage.rotate(kernel, angle, reshape=False, order=1)
    kernel = np.clip(kernel, 0.0, None)
    kernel /= kernel.sum()

    return np.stack(
        [ndimage.convolve(image[..., c], kernel, mode="reflect") for c in range(3)], axis=-1
    )


def _night(image: Image, rng: np.random.Generator, spec: DomainTransformSpec) -> Image:
    gamma = rng.uniform(*spec.night_gamma)
    gain = rng.uniform(*spec.night_gain)
    dark = gain * np.power(image, gamma)
    # blue shift: red and green are damped further, blue keeps its gain
    return dark * np.array([spec.night_red_green, spec.night_red_green, 1.0])


def _sun(image: Image, rng: np.random.Generator, spec: DomainTransformSpec) -> Image:
    height, width = image.shape[:2]
    lift = rng.uniform(*spec.sun_lift)
    strength = rng.uniform(*spec.sun_flare)
    center_y, center_x = rng.uniform(0, height), rng.uniform(0, width)

    yy, xx = np.mgrid[0:height, 0:width]
    sigma = 0.35 * max(height, width)
    flare = strength * np.exp(-((yy - center_y) ** 2 + (xx - center_x) ** 2) / (2 * sigma**2))
    return image * (1.0 + lift) + flare[..., None] * np.array([1.0, 0.9, 0.7])


Transform = Callable[[Image, np.random.Generator, DomainTransformSpec], Image]

_TRANSFORMS: dict[SyntheticDomain, Transform] = {
    SyntheticDomain.FOG: _fog,
    SyntheticDomain.RAIN: _rain,
    SyntheticDomain.SNOW: _snow,
    SyntheticDomain.WIND: _wind,
    SyntheticDomain.NIGHT: _night,
    SyntheticDomain.SUN: _sun,
}


def apply_domain(
    image: Image, domain_id: int, seed: int, spec: DomainTransformSpec | None = None
) -> Image:
    """Render ``image`` into one of the six synthetic domains, deterministic in ``seed``."""
    if domain_id not in range(len(SyntheticDomain)):
        raise DomainError(f"Domain id `{domain_id}` is not in `0..5`!")
    _check_image(image)

    spec = spec or DomainTransformSpec()
    domain = SyntheticDomain(domain_id)
    rng = np.random.default_rng([seed, int(domain)])
    out = _TRANSFORMS[domain](image.astype(np.float64), rng, spec)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_source(
    image: Image, source: int, seed: int, spec: DomainTransformSpec | None = None
) -> tuple[Image, int]:
    """Render a sampled source, ``ORIGINAL`` or a domain id, and report the domain applied."""
    if source == ORIGINAL:
        return image, ORIGINAL
    return apply_domain(image, source, seed, spec), int(SyntheticDomain(source))


def apply_unseen_domain(image: Image, seed: int) -> Image:
    """
    Held-out "dusk" transform, never drawn during training.

    Warm colour cast, reduced contrast and a vignette.
    """
    _check_image(image)
    rng = np.random.default_rng([seed, 99])
    height, width = image.shape[:2]

    cast = np.array([1.1, 0.9, 0.7]) * rng.uniform(0.9, 1.0)
    mean = image.mean(axis=(0, 1), keepdims=True)
    out = (mean + (image - mean) * rng.uniform(0.7, 0.85)) * cast

    yy, xx = np.mgrid[0:height, 0:width]
    radius = ((yy - height / 2) / height) ** 2 + ((xx - width / 2) / width) ** 2
    out = out * (1.0 - rng.uniform(0.6, 0.9) * radius)[..., None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def basic_augment(image: Image, seed: int, config: AugmentConfig) -> Image:
    """Random shift crop with reflected borders followed by a colour jitter."""
    _check_image(image)
    rng = np.random.default_rng([seed, 7])
    height, width = image.shape[:2]

    shift = config.crop_shift
    if shift:
        padded = np.pad(image, ((shift, shift), (shift, shift), (0, 0)), mode="reflect")
        top, left = rng.integers(0, 2 * shift + 1, size=2)
        image = padded[top : top + height, left : left + width]

    jitter = config.jitter
    brightness, contrast, saturation = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
    out = image.astype(np.float64) * brightness
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = mean + (out - mean) * contrast
    gray = (out @ LUMA.astype(np.float64))[..., None]
    out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _check_image(image: Image) -> None:
    if image.ndim != 3 or image.shape[-1] != 3:
        raise InputShapeError(f"Expected an H x W x 3 image, got `{image.shape}`!")
