"""Accuracy, MSE, PSNR and SSIM for images in [0, 1]."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
# ITU-R BT.601 luma
_GRAY = (0.299, 0.587, 0.114)


def _as_tensor(a):
    if isinstance(a, torch.Tensor):
        return a.detach().to(torch.float64)
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ConfigError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def accuracy(logits, labels) -> float:
    """Argmax match rate; ties resolve to the lowest class index."""
    logits = _as_tensor(logits)
    labels = torch.as_tensor(np.asarray(labels) if not isinstance(labels, torch.Tensor) else labels)
    if logits.shape[0] == 0:
        raise ConfigError("accuracy of an empty batch is undefined")
    if logits.shape[0] != labels.shape[0]:
        raise ConfigError("logits and labels have different lengths")
    # torch.argmax returns the first maximal index
    pred = torch.argmax(logits, dim=1)
    return float((pred == labels.to(pred.device).long()).double().mean())


def mse(a, b) -> float:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)
    return float(((a - b) ** 2).mean())


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    if max_val <= 0:
        raise ConfigError("max_val must be positive")
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / err)


def to_gray(img: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) -> (..., H, W); 3 channels use BT.601 luma, 1 channel is squeezed."""
    if img.dim() < 3:
        return img
    c = img.shape[-3]
    if c == 1:
        return img[..., 0, :, :]
    if c == 3:
        w = img.new_tensor(_GRAY).reshape(3, 1, 1)
        return (img * w).sum(dim=-3)
    return img.mean(dim=-3)


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA, dtype=torch.float64):
    r = (size - 1) / 2.0
    g = torch.exp(-((torch.arange(size, dtype=dtype) - r) ** 2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_per_image(a, b, data_range: float = 1.0):
    """Mean SSIM of each image pair, returned as a 1-D float64 tensor.

    Accepts (H, W), (C, H, W) or (N, C, H, W).  Colour images are converted to
    luma first.  Uses an 11x11 Gaussian window (sigma 1.5) over the valid region;
    images smaller than the window fall back to one global window.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)
    if a.dim() == 2:
        a, b = a[None, None], b[None, None]
    elif a.dim() == 3:
        a, b = a[None], b[None]
    ga, gb = to_gray(a)[:, None], to_gray(b)[:, None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    h, w = ga.shape[-2:]
    if h < SSIM_WIN or w < SSIM_WIN:
        return _global_ssim(ga, gb, c1, c2)
    win = _gaussian_window().to(ga.device)[None, None]
    mu_a = F.conv2d(ga, win)
    mu_b = F.conv2d(gb, win)
    s_aa = F.conv2d(ga * ga, win) - mu_a**2
    s_bb = F.conv2d(gb * gb, win) - mu_b**2
    s_ab = F.conv2d(ga * gb, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return (num / den).mean(dim=(1, 2, 3))


def _global_ssim(ga, gb, c1, c2):
    fa, fb = ga.flatten(1), gb.flatten(1)
    mu_a, mu_b = fa.mean(1), fb.mean(1)
    s_aa = fa.var(1, unbiased=False)
    s_bb = fb.var(1, unbiased=False)
    s_ab = ((fa - mu_a[:, None]) * (fb - mu_b[:, None])).mean(1)
    return ((2 * mu_a * mu_b + c1) * (2 * s_ab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2))


def ssim(a, b, data_range: float = 1.0) -> float:
    return float(ssim_per_image(a, b, data_range).mean())


def ssim_uses_fallback(shape) -> bool:
    return shape[-1] < SSIM_WIN or shape[-2] < SSIM_WIN


@dataclass
class SimilarityReport:
    psnr_db: float
    ssim: float
    mse: float
    n_images: int
    window_fallback: bool = False

    def to_dict(self):
        d = asdict(self)
        # JSON has no infinity; keep the sentinel explicit
        if math.isinf(self.psnr_db):
            d["psnr_db"] = "inf"
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def per_image_psnr(a, b, max_val=1.0):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)
    errs = ((a - b) ** 2).flatten(1).mean(1)
    out = torch.full_like(errs, math.inf)
    nz = errs > 0
    out[nz] = 10.0 * torch.log10(max_val**2 / errs[nz])
    return out


def similarity_report(originals, reconstructions) -> SimilarityReport:
    """Batch report: PSNR and SSIM averaged over images, MSE over all pixels."""
    a, b = _as_tensor(originals), _as_tensor(reconstructions)
    _check_same_shape(a, b)
    if a.dim() == 3:
        a, b = a[None], b[None]
    return SimilarityReport(
        psnr_db=float(per_image_psnr(a, b).mean()),
        ssim=float(ssim_per_image(a, b).mean()),
        mse=mse(a, b),
        n_images=int(a.shape[0]),
        window_fallback=ssim_uses_fallback(a.shape),
    )


def write_per_image_csv(path, originals, reconstructions):
    a, b = _as_tensor(originals), _as_tensor(reconstructions)
    p = per_image_psnr(a, b)
    s = ssim_per_image(a, b)
    m = ((a - b) ** 2).flatten(1).mean(1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "psnr_db", "ssim", "mse"])
        for i in range(a.shape[0]):
            w.writerow([i, float(p[i]), float(s[i]), float(m[i])])
