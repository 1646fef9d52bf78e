"""Quantitative evaluation: inception score, accuracy, KL, SSIM, PSNR, SD and FID."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.signal import convolve2d

log = logging.getLogger(__name__)

DB_CAP = 100.0
KL_FLOOR = 1e-12
FID_EPS = 1e-6
IMAG_TOL = 1e-3


class MetricError(ValueError):
    pass


# ------------------------------------------------------------------ probability metrics


def check_probs(p: np.ndarray, name: str = "probabilities") -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if p.size == 0:
        raise MetricError(f"{name}: empty matrix")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise MetricError(f"{name}: rows must be non-negative and sum to 1")
    return p


def topk_smooth(p, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries; spread the remaining mass evenly over the rest.

    Works on one vector or row-wise on a matrix.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    c = p.shape[1]
    if not 1 <= k <= c:
        raise MetricError(f"k must lie in [1, {c}], got {k}")
    if k == c:
        out = p.copy()
    else:
        top = np.argsort(-p, axis=1, kind="stable")[:, :k]
        keep = np.zeros_like(p, dtype=bool)
        np.put_along_axis(keep, top, True, axis=1)
        eps = (1.0 - np.where(keep, p, 0.0).sum(axis=1, keepdims=True)) / (c - k)
        out = np.where(keep, p, eps)
    return out[0] if single else out


def _kl_rows(p, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, KL_FLOOR)) - np.log(np.maximum(q, KL_FLOOR))), 0.0)
    return terms.sum(axis=-1)


def inception_score(p, k: int | None = None, splits: int = 1) -> float:
    """``exp(mean KL(p(y|x) || p(y)))`` after top-k smoothing (``k=None``: all classes)."""
    p = check_probs(p)
    if k is not None:
        p = topk_smooth(p, k)
    scores = []
    for part in np.array_split(p, splits):
        if len(part) == 0:
            continue
        marginal = part.mean(axis=0, keepdims=True)
        scores.append(np.exp(_kl_rows(part, marginal).mean()))
    return float(np.mean(scores))


def topk_accuracy(real, fake, k: int, mode: str = "all") -> float:
    """Percent of rows whose real argmax label is among the fake row's top-k classes.

    ``mode="confident"`` keeps only rows whose real top-1 probability exceeds 0.5.
    """
    real = check_probs(real, "real")
    fake = check_probs(fake, "fake")
    if real.shape != fake.shape:
        raise MetricError(f"row/class mismatch: {real.shape} vs {fake.shape}")
    if not 1 <= k <= real.shape[1]:
        raise MetricError(f"k must lie in [1, {real.shape[1]}], got {k}")
    labels = real.argmax(axis=1)
    topk = np.argsort(-fake, axis=1, kind="stable")[:, :k]
    hits = (topk == labels[:, None]).any(axis=1)
    if mode == "confident":
        sel = real.max(axis=1) > 0.5
        if not sel.any():
            raise MetricError(f"no confident real rows (0 of {len(real)} exceed 0.5)")
        hits = hits[sel]
    elif mode != "all":
        raise MetricError(f"mode must be 'all' or 'confident', got {mode!r}")
    return 100.0 * float(hits.mean())


def kl_model_data(fake, real, batches: int = 10) -> tuple[float, float]:
    """Mean and std over contiguous fake batches of ``KL(q_batch || p_real)``."""
    fake = check_probs(fake, "fake")
    real = check_probs(real, "real")
    if batches < 1:
        raise MetricError("batches must be >= 1")
    p_real = real.mean(axis=0)
    scores = [_kl_rows(b.mean(axis=0), p_real) for b in np.array_split(fake, min(batches, len(fake)))]
    return float(np.mean(scores)), float(np.std(scores))


# ------------------------------------------------------------------ image-pair metrics


def _as_u8_float(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def luminance(x: np.ndarray) -> np.ndarray:
    x = _as_u8_float(x)
    if x.ndim == 2:
        return x
    return x[..., 0] * 0.299 + x[..., 1] * 0.587 + x[..., 2] * 0.114


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, y, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 255.0) -> float:
    """Mean SSIM of the 8-bit luminance over all full windows."""
    x, y = luminance(x), luminance(y)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < win:
        raise MetricError(f"image {x.shape} smaller than the {win}x{win} window")
    w = gaussian_window(win, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def filt(a):
        return convolve2d(a, w[::-1, ::-1], mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def psnr(x, y, data_range: float = 255.0) -> float:
    x, y = _as_u8_float(x), _as_u8_float(y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return DB_CAP
    return min(DB_CAP, float(10 * np.log10(data_range ** 2 / mse)))


def _grad_sum(x: np.ndarray) -> np.ndarray:
    gi = np.abs(x[1:, :-1] - x[:-1, :-1])
    gj = np.abs(x[:-1, 1:] - x[:-1, :-1])
    return gi + gj


def sharpness_difference(x, y, data_range: float = 255.0) -> float:
    """``10 log10(peak^2 / mean |grad(x) - grad(y)|)`` with forward differences."""
    x, y = _as_u8_float(x), _as_u8_float(y)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {y.shape}")
    d = np.mean(np.abs(_grad_sum(x) - _grad_sum(y)))
    if d == 0:
        return DB_CAP
    return min(DB_CAP, float(10 * np.log10(data_range ** 2 / d)))


# ------------------------------------------------------------------ FID


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid_from_stats(mu1, sigma1, mu2, sigma2, eps: float = FID_EPS) -> float:
    """Frechet distance between two Gaussians.

    ``tr((S1 S2)^1/2)`` is taken from the eigenvalues of the symmetric product
    ``S1^1/2 S2 S1^1/2``; both covariances get ``eps`` on the diagonal.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise MetricError("feature dimensions differ")
    for a in (mu1, mu2, s1, s2):
        if not np.all(np.isfinite(a)):
            raise MetricError("non-finite statistics")
    d = len(mu1)
    s1 = s1 + eps * np.eye(d)
    s2 = s2 + eps * np.eye(d)
    r = sqrtm_psd(s1)
    prod = r @ s2 @ r
    vals = np.linalg.eigvalsh((prod + prod.T) / 2)
    scale = max(np.abs(vals).max(), 1e-30)
    if vals.min() < -IMAG_TOL * scale:
        raise MetricError(f"covariance product has a large negative eigenvalue ({vals.min():.3g})")
    tr_covmean = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = mu1 - mu2
    return float(max(0.0, diff @ diff + np.trace(s1) + np.trace(s2) - 2 * tr_covmean))


def fid(real_acts, fake_acts) -> float:
    real_acts = np.atleast_2d(np.asarray(real_acts, dtype=np.float64))
    fake_acts = np.atleast_2d(np.asarray(fake_acts, dtype=np.float64))
    if real_acts.shape[1] != fake_acts.shape[1]:
        raise MetricError(f"feature dimensions differ: {real_acts.shape[1]} vs {fake_acts.shape[1]}")
    for name, a in (("real", real_acts), ("fake", fake_acts)):
        if not np.all(np.isfinite(a)):
            raise MetricError(f"{name} activations contain non-finite values")
        if len(a) < a.shape[1] + 1:
            warnings.warn(f"{name}: {len(a)} samples for {a.shape[1]}-d features; covariance is rank deficient")
    return fid_from_stats(real_acts.mean(0), np.cov(real_acts, rowvar=False),
                          fake_acts.mean(0), np.cov(fake_acts, rowvar=False))


# ------------------------------------------------------------------ matrix files


def save_matrix(path, m: np.ndarray):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    with Path(path).open("w") as fh:
        fh.write(f"{m.shape[0]} {m.shape[1]}\n")
        for row in m:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    with Path(path).open() as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise MetricError(f"{path}: header must be 'N C'")
        n, c = int(header[0]), int(header[1])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2) if n else np.zeros((0, c))
    if data.shape != (n, c):
        raise MetricError(f"{path}: header says {n}x{c}, found {data.shape}")
    return data


# ------------------------------------------------------------------ classifiers


class ClassifierHandle(Protocol):
    def probs(self, images) -> np.ndarray: ...

    def acts(self, images) -> np.ndarray: ...


@dataclass
class PrecomputedClassifier:
    """Serves probability/activation matrices computed elsewhere, keyed by image set."""

    table: dict = field(default_factory=dict)  # name -> (probs, acts)

    def probs(self, images) -> np.ndarray:
        return self.table[images][0]

    def acts(self, images) -> np.ndarray:
        return self.table[images][1]

    @classmethod
    def from_dir(cls, directory) -> "PrecomputedClassifier":
        d = Path(directory)
        return cls({name: (load_matrix(d / f"{name}_probs.txt"), load_matrix(d / f"{name}_acts.txt"))
                    for name in ("real", "fake")})


# ------------------------------------------------------------------ report

REPORT_COLUMNS = (
    "Inception Score, all",
    "Inception Score, Top-1",
    "Inception Score, Top-5",
    "Accuracy (Top-1, all)",
    "Accuracy (Top-1, 0.5)",
    "Accuracy (Top-5, all)",
    "Accuracy (Top-5, 0.5)",
    "KL(model || data)",
    "SSIM",
    "PSNR",
    "SD",
    "FID Score",
)


@dataclass
class MetricReport:
    values: dict  # column -> float, or (mean, std) for KL
    n: int = 0

    def formatted(self) -> dict:
        out = {}
        for col in REPORT_COLUMNS:
            v = self.values.get(col)
            if v is None or (isinstance(v, float) and np.isnan(v)):
                out[col] = "--"
            elif isinstance(v, tuple):
                out[col] = f"{v[0]:.4f} ± {v[1]:.2f}"
            else:
                out[col] = f"{v:.4f}"
        return out

    def to_csv(self, path, method: str = ""):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", *REPORT_COLUMNS])
            w.writerow([method, *self.formatted().values()])

    def to_text(self, method: str = "") -> str:
        return format_table({method or "value": self.formatted()})


def format_table(by_method: dict) -> str:
    """Metric rows by method columns, as aligned plain text."""
    methods = list(by_method)
    width = max(len(c) for c in REPORT_COLUMNS)
    cols = [max(len(m), *(len(by_method[m].get(c, "--")) for c in REPORT_COLUMNS)) for m in methods]
    lines = ["Methods".ljust(width) + "  " + "  ".join(m.rjust(w) for m, w in zip(methods, cols))]
    for c in REPORT_COLUMNS:
        lines.append(c.ljust(width) + "  " + "  ".join(by_method[m].get(c, "--").rjust(w)
                                                      for m, w in zip(methods, cols)))
    return "\n".join(lines) + "\n"


def read_report_csv(path) -> dict:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MetricError(f"{path}: empty report")
    return {c: rows[0].get(c, "--") or "--" for c in REPORT_COLUMNS}


def evaluate(fake_images, real_images, classifier: ClassifierHandle, kl_batches: int = 10) -> MetricReport:
    """Full battery over aligned fake/real sets of 8-bit ``H x W x 3`` images."""
    if len(fake_images) != len(real_images) or len(fake_images) == 0:
        raise MetricError(f"need equally sized non-empty sets, got {len(fake_images)} and {len(real_images)}")
    p_fake = check_probs(classifier.probs(fake_images), "fake")
    p_real = check_probs(classifier.probs(real_images), "real")
    c = p_fake.shape[1]
    k5 = min(5, c)

    def confident(k):
        try:
            return topk_accuracy(p_real, p_fake, k, "confident")
        except MetricError as exc:
            log.warning("%s; reporting '--'", exc)
            return float("nan")

    v = {
        "Inception Score, all": inception_score(p_fake),
        "Inception Score, Top-1": inception_score(p_fake, 1),
        "Inception Score, Top-5": inception_score(p_fake, k5),
        "Accuracy (Top-1, all)": topk_accuracy(p_real, p_fake, 1, "all"),
        "Accuracy (Top-1, 0.5)": confident(1),
        "Accuracy (Top-5, all)": topk_accuracy(p_real, p_fake, k5, "all"),
        "Accuracy (Top-5, 0.5)": confident(k5),
        "KL(model || data)": kl_model_data(p_fake, p_real, kl_batches),
        "SSIM": float(np.mean([ssim(f, r) for f, r in zip(fake_images, real_images)])),
        "PSNR": float(np.mean([psnr(f, r) for f, r in zip(fake_images, real_images)])),
        "SD": float(np.mean([sharpness_difference(f, r) for f, r in zip(fake_images, real_images)])),
        "FID Score": fid(classifier.acts(real_images), classifier.acts(fake_images)),
    }
    return MetricReport(v, n=len(fake_images))
