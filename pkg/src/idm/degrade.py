"""Synthetic degradation: blur, downsample, noise, JPEG, upsample back.

The low-quality image is ``[(x * k_sigma) downsampled by r + n_delta]``
JPEG-compressed at quality ``q``, then resized back to the input size so
the conditional model always sees full-resolution inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import cv2
import numpy as np
from scipy import ndimage

from .imaging import MIN_SIDE, RngStream, as_image, quantize8


class DegradationError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationParams:
    sigma: float
    r: float
    delta: float
    q: int

    def validate(self) -> None:
        if not self.sigma > 0:
            raise DegradationError(f"sigma must be > 0, got {self.sigma}")
        if not self.r >= 1:
            raise DegradationError(f"r must be >= 1, got {self.r}")
        if not self.delta >= 0:
            raise DegradationError(f"delta must be >= 0, got {self.delta}")
        if not (1 <= int(self.q) <= 100 and int(self.q) == self.q):
            raise DegradationError(f"q must be an integer in [1, 100], got {self.q}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DegradationRanges:
    sigma: tuple[float, float] = (0.2, 10.0)
    r: tuple[float, float] = (1.0, 8.0)
    delta: tuple[float, float] = (0.0, 15.0)
    q: tuple[float, float] = (50.0, 100.0)

    def validate(self) -> None:
        for name in ("sigma", "r", "delta", "q"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DegradationError(f"{name} range has lower > upper: {lo} > {hi}")
        if self.sigma[0] <= 0 or self.r[0] < 1 or self.delta[0] < 0 or self.q[0] < 1 or self.q[1] > 100:
            raise DegradationError(f"ranges outside the valid parameter domain: {self}")

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRanges":
        unknown = set(d) - {"sigma", "r", "delta", "q"}
        if unknown:
            raise DegradationError(f"unknown degradation range keys: {sorted(unknown)}")
        return cls(**{k: (float(v[0]), float(v[1])) for k, v in d.items()})


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise DegradationError(f"sigma must be > 0, got {sigma}")
    half = max(1, int(math.ceil(3.0 * sigma)))
    ax = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def sample_degradation_params(ranges: DegradationRanges, rng: RngStream) -> DegradationParams:
    ranges.validate()
    g = rng.generator()
    u = g.uniform(size=4)
    lerp = lambda lo_hi, v: lo_hi[0] + v * (lo_hi[1] - lo_hi[0])
    q = int(math.floor(lerp(ranges.q, u[3]) + 0.5))
    return DegradationParams(
        sigma=float(lerp(ranges.sigma, u[0])),
        r=float(lerp(ranges.r, u[1])),
        delta=float(lerp(ranges.delta, u[2])),
        q=q,
    )


def _kernel_1d(sigma: float) -> np.ndarray:
    half = max(1, int(math.ceil(3.0 * sigma)))
    ax = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(ax**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with reflect padding.

    Applied as two 1-D passes; the normalized 2-D kernel is exactly the
    outer product of the normalized 1-D kernel.
    """
    if not sigma > 0:
        raise DegradationError(f"sigma must be > 0, got {sigma}")
    k = _kernel_1d(sigma)
    y = ndimage.correlate1d(np.asarray(x, dtype=np.float64), k, axis=0, mode="reflect")
    return ndimage.correlate1d(y, k, axis=1, mode="reflect")


def _resize(x: np.ndarray, h: int, w: int) -> np.ndarray:
    out = cv2.resize(x, (w, h), interpolation=cv2.INTER_LINEAR)
    return out.reshape(h, w, x.shape[2])


def low_res_shape(h: int, w: int, r: float) -> tuple[int, int]:
    rh = int(math.floor(h / r + 0.5))
    rw = int(math.floor(w / r + 0.5))
    return max(MIN_SIDE, rh), max(MIN_SIDE, rw)


def jpeg_roundtrip(x: np.ndarray, q: int) -> np.ndarray:
    b = quantize8(x)
    if b.shape[2] == 3:
        b = cv2.cvtColor(b, cv2.COLOR_RGB2BGR)
    # 4:4:4 keeps q=100 near-lossless on small saturated images
    ok, buf = cv2.imencode(".jpg", b, [int(cv2.IMWRITE_JPEG_QUALITY), int(q),
                                       int(cv2.IMWRITE_JPEG_SAMPLING_FACTOR),
                                       int(cv2.IMWRITE_JPEG_SAMPLING_FACTOR_444)])
    if not ok:
        raise DegradationError("JPEG encode failed")
    dec = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
    if dec.ndim == 2:
        dec = dec[:, :, None]
    else:
        dec = cv2.cvtColor(dec, cv2.COLOR_BGR2RGB)
    return dec.astype(np.float64) / 255.0


def degrade(x: np.ndarray, p: DegradationParams, rng: RngStream, *, jpeg: bool = True) -> np.ndarray:
    """Apply the degradation pipeline; ``jpeg=False`` skips compression (test hook)."""
    x = as_image(x)
    p.validate()
    h, w, c = x.shape
    lh, lw = low_res_shape(h, w, p.r)
    if lh > h or lw > w:
        raise DegradationError(f"image {h}x{w} is smaller than the minimum low-res stage {lh}x{lw}")
    y = blur(x, p.sigma)
    if (lh, lw) != (h, w):
        y = _resize(y, lh, lw)
    if p.delta > 0:
        noise = rng.generator().standard_normal(y.shape)
        y = y + noise * (p.delta / 255.0)
    y = np.clip(y, 0.0, 1.0)
    if jpeg:
        y = jpeg_roundtrip(y, p.q)
    if (lh, lw) != (h, w):
        y = _resize(y, h, w)
    return np.clip(y, 0.0, 1.0)
