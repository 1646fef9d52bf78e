"""Slow scalar reference implementations used only by the tests."""

import math

import numpy as np


def warp_pixel_oracle(img, m, out_shape, fill=-1.0):
    """Per-pixel inverse mapping with explicit bilinear weights."""
    inv = np.linalg.inv(m)
    h, w = img.shape[:2]
    oh, ow = out_shape
    out = np.full((oh, ow) + img.shape[2:], fill, dtype=np.float64)
    valid = np.zeros((oh, ow), dtype=bool)
    for r in range(oh):
        for c in range(ow):
            x, y, z = inv @ np.array([c, r, 1.0])
            if z <= 0:
                continue
            x, y = x / z, y / z
            if not (-1e-7 <= x <= w - 1 + 1e-7 and -1e-7 <= y <= h - 1 + 1e-7):
                continue
            x = min(max(x, 0.0), w - 1.0)
            y = min(max(y, 0.0), h - 1.0)
            x0 = min(int(math.floor(x)), w - 2)
            y0 = min(int(math.floor(y)), h - 2)
            ax, ay = x - x0, y - y0
            val = ((1 - ax) * (1 - ay) * img[y0, x0] + ax * (1 - ay) * img[y0, x0 + 1]
                   + (1 - ax) * ay * img[y0 + 1, x0] + ax * ay * img[y0 + 1, x0 + 1])
            out[r, c] = val
            valid[r, c] = True
    return out, valid


def band_scan_oracle(frame, rects, width):
    """A pixel is in the band if its center lies within Chebyshev distance < width
    of some rectangle side that is not on the frame border."""
    h, w = frame
    band = np.zeros(frame, dtype=bool)
    sides = []
    for r0, r1, c0, c1 in rects:
        if r0 > 0:
            sides.append(("h", r0, c0, c1))
        if r1 < h:
            sides.append(("h", r1, c0, c1))
        if c0 > 0:
            sides.append(("v", c0, r0, r1))
        if c1 < w:
            sides.append(("v", c1, r0, r1))

    def interval_dist(t, lo, hi):
        return max(lo - t, 0.0, t - hi)

    for i in range(h):
        for j in range(w):
            y, x = i + 0.5, j + 0.5
            for kind, at, lo, hi in sides:
                if kind == "h":
                    d = max(abs(y - at), interval_dist(x, lo, hi))
                else:
                    d = max(abs(x - at), interval_dist(y, lo, hi))
                if d < width:
                    band[i, j] = True
                    break
    return band


def composite_oracle(inpaint, car, warped, m1, m2):
    out = np.empty_like(warped)
    for i in range(warped.shape[0]):
        for j in range(warped.shape[1]):
            if m1[i, j]:
                out[i, j] = inpaint[i, j]
            elif m2[i, j]:
                out[i, j] = car[i, j]
            else:
                out[i, j] = warped[i, j]
    return out


def ssim_window_oracle(x, y, win=11, sigma=1.5, data_range=255.0):
    """Direct per-window SSIM, one window at a time."""
    ax = np.arange(win) - (win - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    wgt = np.outer(g, g)
    wgt /= wgt.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(x.shape[0] - win + 1):
        for j in range(x.shape[1] - win + 1):
            a = x[i:i + win, j:j + win]
            b = y[i:i + win, j:j + win]
            mu_a, mu_b = (wgt * a).sum(), (wgt * b).sum()
            va = (wgt * (a - mu_a) ** 2).sum()
            vb = (wgt * (b - mu_b) ** 2).sum()
            cov = (wgt * (a - mu_a) * (b - mu_b)).sum()
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def psnr_oracle(x, y):
    n, total = 0, 0.0
    for a, b in zip(np.ravel(x).tolist(), np.ravel(y).tolist()):
        total += (float(a) - float(b)) ** 2
        n += 1
    mse = total / n
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(255.0 ** 2 / mse))


def sd_oracle(x, y):
    h, w = x.shape
    total, n = 0.0, 0
    for i in range(h - 1):
        for j in range(w - 1):
            gx = abs(x[i + 1, j] - x[i, j]) + abs(x[i, j + 1] - x[i, j])
            gy = abs(y[i + 1, j] - y[i, j]) + abs(y[i, j + 1] - y[i, j])
            total += abs(gx - gy)
            n += 1
    d = total / n
    return 100.0 if d == 0 else min(100.0, 10 * math.log10(255.0 ** 2 / d))


def random_quadruple(rng, lo=0.0, hi=255.0):
    """Four points with every triple well away from collinear."""
    while True:
        p = rng.uniform(lo, hi, size=(4, 2))
        ok = True
        for a, b, c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
            area = abs((p[b, 0] - p[a, 0]) * (p[c, 1] - p[a, 1]) - (p[b, 1] - p[a, 1]) * (p[c, 0] - p[a, 0]))
            if area < 0.05 * (hi - lo) ** 2:
                ok = False
        if ok:
            return p
