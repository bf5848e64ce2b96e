"""Image tensors, PNG I/O, seeded random streams and the toy face corpus.

Images are ``float64`` numpy arrays of shape ``(H, W, C)`` with values in
``[0, 1]``. Conversion to the diffusion model range happens in
:mod:`idm.diffusion` only.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import cv2
import numpy as np

MIN_SIDE = 8
MIN_TOY_SIZE = 16


class ImageFormatError(ValueError):
    """Raised for images that cannot be represented or decoded."""


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator keyed through a
    ``SeedSequence``, so a stream depends only on its two integers and
    never on the order in which streams are created.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), self.stream_id & (2**64 - 1)])
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int | str) -> "RngStream":
        """Derive an independent sub-stream from string or integer keys."""
        h = hashlib.sha256()
        h.update(self.seed.to_bytes(8, "little", signed=False) if self.seed >= 0
                 else self.seed.to_bytes(8, "little", signed=True))
        h.update(self.stream_id.to_bytes(8, "little", signed=False))
        for k in keys:
            h.update(b"\x00" + str(k).encode())
        return RngStream(self.seed, int.from_bytes(h.digest()[:8], "little"))


def stable_hash64(*parts: int | str) -> int:
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode() + b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def as_image(data, clip: bool = False) -> np.ndarray:
    """Validate and normalize an array into the ``(H, W, C)`` image layout."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected HxWx1 or HxWx3 image, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ImageFormatError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ImageFormatError("image contains non-finite values")
    if clip:
        img = np.clip(img, 0.0, 1.0)
    return img


def quantize8(img: np.ndarray) -> np.ndarray:
    """Map [0,1] values to bytes with round-half-up, clamped to [0, 255]."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def load_png(path: str | os.PathLike) -> np.ndarray:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"\x89PNG\r\n\x1a\n"):
        raise ImageFormatError(f"{path}: not a PNG file")
    arr = cv2.imdecode(np.frombuffer(raw, np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageFormatError(f"{path}: PNG decode failed")
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f"{path}: unsupported bit depth {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    elif arr.shape[2] == 4:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGRA2RGB)
    elif arr.shape[2] == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    elif arr.shape[2] == 2:
        arr = arr[:, :, :1]
    return as_image(arr.astype(np.float64) / scale)


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    img = as_image(img)
    q = quantize8(img)
    if q.shape[2] == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    else:
        q = q[:, :, 0]
    ok, buf = cv2.imencode(".png", q)
    if not ok:
        raise ImageFormatError("PNG encode failed")
    with open(os.fspath(path), "wb") as fh:
        fh.write(buf.tobytes())


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def luminance(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an ``(H, W, C)`` image as an ``(H, W)`` array."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]


# --------------------------------------------------------------------------
# toy faces
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyFaceSpec:
    size: int = 32
    n_freckles: int = 6
    freckle_contrast: float = 0.3
    n_hair_strokes: int = 4
    palette_seed: int = 0
    channels: int = 3

    def validate(self) -> None:
        if self.size < MIN_TOY_SIZE:
            raise SpecError(f"toy face size must be >= {MIN_TOY_SIZE}, got {self.size}")
        if not 0.1 <= self.freckle_contrast <= 0.5:
            raise SpecError("freckle_contrast must lie in [0.1, 0.5]")
        if self.n_freckles < 0 or self.n_hair_strokes < 0:
            raise SpecError("counts must be non-negative")
        if self.channels not in (1, 3):
            raise SpecError("channels must be 1 or 3")


def _palette(palette_seed: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    prng = np.random.default_rng(palette_seed)
    base_bg = prng.uniform(0.05, 0.35, size=3)
    base_skin = prng.uniform(0.68, 0.9, size=3) * np.array([1.0, 0.85, 0.72])
    base_skin = np.maximum(base_skin, 0.55)
    hair = prng.uniform(0.0, 0.15, size=3)
    jitter = lambda c, s: np.clip(c + rng.uniform(-s, s, size=3), 0.0, 1.0)
    return {
        "bg": jitter(base_bg, 0.1),
        "skin": np.clip(jitter(base_skin, 0.06), 0.55, 0.95),
        "eye": rng.uniform(0.0, 0.12, size=3),
        "mouth": np.array([rng.uniform(0.45, 0.65), rng.uniform(0.1, 0.2), rng.uniform(0.1, 0.2)]),
        "hair": jitter(hair, 0.05),
    }


def gen_toy_face(spec: ToyFaceSpec, rng: RngStream) -> np.ndarray:
    """Render a synthetic face: ellipse, eyes, mouth, freckles and hair strokes.

    Freckles are drawn last onto skin pixels, darker than the skin by
    exactly ``freckle_contrast`` in every channel.
    """
    spec.validate()
    g = rng.generator()
    n = spec.size
    pal = _palette(spec.palette_seed, g)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5

    img = np.empty((n, n, 3))
    img[:] = pal["bg"]

    cy = n * (0.5 + g.uniform(-0.04, 0.04))
    cx = n * (0.5 + g.uniform(-0.04, 0.04))
    ry = n * g.uniform(0.36, 0.42)
    rx = n * g.uniform(0.28, 0.34)
    face = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[face] = pal["skin"]
    skin = face.copy()

    eye_dy = ry * g.uniform(0.2, 0.3)
    eye_dx = rx * g.uniform(0.35, 0.5)
    eye_r = max(2.0, n * g.uniform(0.055, 0.075))
    for sgn in (-1.0, 1.0):
        m = (yy - (cy - eye_dy)) ** 2 + (xx - (cx + sgn * eye_dx)) ** 2 <= eye_r**2
        img[m] = pal["eye"]
        skin &= ~m

    # mouth: a thick arc below the center
    mouth_y = cy + ry * g.uniform(0.4, 0.55)
    mouth_w = rx * g.uniform(0.35, 0.55)
    curve = g.uniform(-0.15, 0.25) * n
    thick = max(1.0, n / 28.0)
    t = (xx - cx) / mouth_w
    arc_y = mouth_y + curve * (t**2 - 1.0) * 0.25
    m = (np.abs(t) <= 1.0) & (np.abs(yy - arc_y) <= thick)
    img[m] = pal["mouth"]
    skin &= ~m

    # hair strokes: 1-px quadratic curves starting near the top of the head
    for _ in range(spec.n_hair_strokes):
        a0 = g.uniform(np.pi * 1.1, np.pi * 1.9)
        p0 = np.array([cy + ry * np.sin(a0), cx + rx * np.cos(a0)])
        p1 = p0 + g.uniform(-0.25, 0.25, size=2) * n
        p2 = p0 + np.array([g.uniform(-0.05, 0.3), g.uniform(-0.3, 0.3)]) * n
        for s in np.linspace(0.0, 1.0, 4 * n):
            p = (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s**2 * p2
            iy, ix = int(np.floor(p[0])), int(np.floor(p[1]))
            if 0 <= iy < n and 0 <= ix < n:
                img[iy, ix] = pal["hair"]
                skin[iy, ix] = False

    # freckles: isolated 1x1 or 2x2 marks on skin, not touching each other
    placed = 0
    attempts = 0
    taken = np.zeros((n, n), dtype=bool)
    while placed < spec.n_freckles and attempts < 200 * max(1, spec.n_freckles):
        attempts += 1
        k = 1 if g.uniform() < 0.5 else 2
        iy = int(g.integers(1, n - k - 1))
        ix = int(g.integers(1, n - k - 1))
        ring = (slice(iy - 1, iy + k + 1), slice(ix - 1, ix + k + 1))
        if not skin[ring].all() or taken[ring].any():
            continue
        img[iy:iy + k, ix:ix + k] = pal["skin"] - spec.freckle_contrast
        taken[iy:iy + k, ix:ix + k] = True
        placed += 1

    img = np.clip(img, 0.0, 1.0)
    if spec.channels == 1:
        img = luminance(img)[:, :, None]
    return img
