"""Image metrics and the authenticity (fixed-point) test harness."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage, signal

from .degrade import DegradationRanges, blur, degrade, sample_degradation_params
from .diffusion import restore_many
from .imaging import RngStream, as_image, luminance, save_png
from .schedule import InferencePlan

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


class MetricError(ValueError):
    pass


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _ssim_window() -> np.ndarray:
    ax = np.arange(SSIM_WINDOW, dtype=np.float64) - SSIM_WINDOW // 2
    g = np.exp(-(ax**2) / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM on luminance, averaged over all full-window positions."""
    if np.shape(a) != np.shape(b):
        raise MetricError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")
    x = luminance(a)
    y = luminance(b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise MetricError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _ssim_window()
    filt = lambda z: signal.correlate2d(z, w, mode="valid")
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def sharpness(a: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response over interior luminance pixels."""
    lum = luminance(a)
    resp = signal.correlate2d(lum, LAPLACIAN, mode="valid")
    return float(np.var(resp))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _aggregate(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": float("nan"), "median": float("nan"), "std": float("nan")}
    return {"mean": float(v.mean()), "median": float(np.median(v)), "std": float(v.std())}


@dataclass
class MetricReport:
    per_image: dict[str, dict]
    psnr_cap_db: float = PSNR_CAP_DB

    @property
    def aggregates(self) -> dict:
        keys = ("psnr_db", "ssim", "sharpness", "input_psnr_db", "input_ssim")
        out = {}
        for k in keys:
            vals = [row[k] for row in self.per_image.values() if k in row]
            if vals:
                out[k] = _aggregate(vals)
        return out

    def to_json(self) -> dict:
        return {"aggregates": self.aggregates, "psnr_cap_db": self.psnr_cap_db,
                "lpips": None, "identity_similarity": None, "n_images": len(self.per_image)}

    def write(self, out_dir: str, stem: str = "metrics") -> None:
        os.makedirs(out_dir, exist_ok=True)
        cols = ["id", "psnr_db", "ssim", "sharpness", "input_psnr_db", "input_ssim"]
        with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for k, row in self.per_image.items():
                w.writerow({"id": k, **row})
        with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


@dataclass(frozen=True)
class AuthenticityThresholds:
    clean_db: float = 30.0
    idempotence_db: float = 28.0


def authenticity_pass(clean_fidelity_db: float, idempotence_db: float, restore_gain_db: float,
                      thresholds: AuthenticityThresholds) -> bool:
    return bool(clean_fidelity_db >= thresholds.clean_db
                and idempotence_db >= thresholds.idempotence_db
                and restore_gain_db > 0.0)


@dataclass
class AuthenticityReport:
    clean_fidelity_db: float
    restore_gain_db: float
    idempotence_db: float
    thresholds: AuthenticityThresholds
    per_image: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return authenticity_pass(self.clean_fidelity_db, self.idempotence_db,
                                 self.restore_gain_db, self.thresholds)

    def to_json(self) -> dict:
        return {
            "clean_fidelity_db": self.clean_fidelity_db,
            "restore_gain_db": self.restore_gain_db,
            "idempotence_db": self.idempotence_db,
            "pass": self.passed,
            "thresholds": asdict(self.thresholds),
            "psnr_cap_db": PSNR_CAP_DB,
            "per_image": self.per_image,
        }


# --------------------------------------------------------------------------
# restorers
# --------------------------------------------------------------------------

Restorer = Callable[[np.ndarray, Sequence[RngStream]], np.ndarray]


def make_restorer(model, plan: InferencePlan | None = None) -> Restorer:
    """Wrap a checkpoint/oracle (diffusion sampling) or a plain image function.

    A plain callable ``f(img) -> img`` is applied per image and ignores rngs.
    """
    if hasattr(model, "predict") or hasattr(model, "parameters"):
        if plan is None:
            raise ValueError("a diffusion model needs an inference plan")
        return lambda imgs, rngs: restore_many(model, np.asarray(imgs), plan, rngs)
    if callable(model):
        return lambda imgs, rngs: np.stack([np.clip(model(x), 0.0, 1.0) for x in imgs])
    raise TypeError(f"cannot build a restorer from {type(model).__name__}")


def blur_restorer(sigma: float = 2.0) -> Callable[[np.ndarray], np.ndarray]:
    """Detail-destroying baseline: a Gaussian blur posing as a restorer."""
    return lambda x: blur(x, sigma)


def _image_rngs(seed: int, tag: str, n: int) -> list[RngStream]:
    base = RngStream(seed, 0)
    return [base.child(tag, i) for i in range(n)]


def authenticity_test(model, clean_set: Sequence[np.ndarray], degradation_ranges: DegradationRanges,
                      plan: InferencePlan | None, seed: int = 0,
                      thresholds: AuthenticityThresholds = AuthenticityThresholds(),
                      out_dir: str | None = None) -> AuthenticityReport:
    """Measure clean fidelity f(x)~x, gain of f(x_d) over x_d, and idempotence f(f(x_d))~f(x_d)."""
    clean = np.stack([as_image(x) for x in clean_set])
    if len(clean) == 0:
        raise ValueError("clean set is empty")
    n = len(clean)
    f = make_restorer(model, plan)
    params = [sample_degradation_params(degradation_ranges, r) for r in _image_rngs(seed, "params", n)]
    xd = np.stack([degrade(x, p, r) for x, p, r in zip(clean, params, _image_rngs(seed, "noise", n))])

    f_clean = f(clean, _image_rngs(seed, "clean", n))
    f_xd = f(xd, _image_rngs(seed, "restore", n))
    ff_xd = f(f_xd, _image_rngs(seed, "restore2", n))

    rows = []
    for i in range(n):
        rows.append({
            "index": i,
            "degradation": params[i].to_dict(),
            "clean_fidelity_db": psnr(f_clean[i], clean[i]),
            "input_psnr_db": psnr(xd[i], clean[i]),
            "restored_psnr_db": psnr(f_xd[i], clean[i]),
            "idempotence_db": psnr(ff_xd[i], f_xd[i]),
        })
    clean_fid = float(np.mean([r["clean_fidelity_db"] for r in rows]))
    gain = float(np.mean([r["restored_psnr_db"] - r["input_psnr_db"] for r in rows]))
    idem = float(np.mean([r["idempotence_db"] for r in rows]))
    report = AuthenticityReport(clean_fid, gain, idem, thresholds, rows)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "authenticity.json"), "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
        save_png(image_grid([xd, f_xd, ff_xd, clean]), os.path.join(out_dir, "authenticity_grid.png"))
    return report


def image_grid(columns: Sequence[np.ndarray], pad: int = 2) -> np.ndarray:
    """Rows are images, columns are the given stacks (source | f(x_d) | f(f(x_d)) | truth)."""
    cols = [np.asarray(c) for c in columns]
    n, h, w, ch = cols[0].shape
    out = np.ones((n * (h + pad) + pad, len(cols) * (w + pad) + pad, ch))
    for j, c in enumerate(cols):
        for i in range(n):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = c[i]
    return out


def evaluate_dataset(model, pairs: Sequence[tuple[np.ndarray, np.ndarray]], plan: InferencePlan | None,
                     seed: int = 0, ids: Sequence[str] | None = None,
                     out_dir: str | None = None) -> MetricReport:
    """Restore each degraded input and score it against its clean reference."""
    xd = np.stack([as_image(p[0]) for p in pairs])
    x = np.stack([as_image(p[1]) for p in pairs])
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    restored = make_restorer(model, plan)(xd, _image_rngs(seed, "eval", len(xd)))
    rows = {}
    for k, r, ref, inp in zip(ids, restored, x, xd):
        rows[k] = {
            "psnr_db": psnr(r, ref),
            "ssim": ssim(r, ref),
            "sharpness": sharpness(r),
            "input_psnr_db": psnr(inp, ref),
            "input_ssim": ssim(inp, ref),
        }
    report = MetricReport(rows)
    if out_dir:
        report.write(out_dir)
    return report
