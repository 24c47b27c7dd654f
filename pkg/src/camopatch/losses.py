"""Differentiable loss terms for patch optimization and their weighted sum.

Every term is a mean over its index set, so the weights do not need
re-tuning when the patch resolution changes.  Each ``*_grad`` function
returns (value, gradient w.r.t. the patch pixels).
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TV_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """alpha scales printability, beta smoothness, gamma colorfulness (0 = off).

    The objectness term always enters with weight 1.
    """

    alpha: float = 0.01
    beta: float = 2.5
    gamma: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be >= 0")

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d):
        return cls(alpha=float(d.get("alpha", 0.01)), beta=float(d.get("beta", 2.5)),
                   gamma=float(d.get("gamma", 0.0)))


@dataclass
class PrintableColorSet:
    colors: np.ndarray

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.colors.shape[0] == 0:
            raise ValueError("printable color set must be non-empty")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise ValueError("printable colors must lie in [0, 1]")

    @classmethod
    def default(cls):
        """30 colors: the 3x3x3 corner/mid lattice of the RGB cube plus two
        extra grays and a tan, a generic stand-in for a printer gamut."""
        levels = (0.0, 0.5, 1.0)
        lattice = [(r, g, b) for r in levels for g in levels for b in levels]
        extra = [(0.25, 0.25, 0.25), (0.75, 0.75, 0.75), (0.6, 0.5, 0.4)]
        return cls(np.array(lattice + extra))

    @classmethod
    def from_file(cls, path):
        """Plain text palette: one "R G B" triple per line, values in [0, 1]."""
        rows = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"expected 'R G B' per line, got {line!r}")
            rows.append([float(v) for v in parts])
        if not rows:
            raise ValueError(f"no colors found in {path}")
        return cls(np.array(rows))


@dataclass(frozen=True)
class ColorfulnessStats:
    """Opponent-channel statistics: rg = R - G, yb = 0.5 (R + G) - B."""

    mu_rg: float
    mu_yb: float
    sigma_rg: float
    sigma_yb: float


def colorfulness_stats(pixels):
    p = np.asarray(pixels, dtype=np.float64)
    rg = p[..., 0] - p[..., 1]
    yb = 0.5 * (p[..., 0] + p[..., 1]) - p[..., 2]
    return ColorfulnessStats(float(rg.mean()), float(yb.mean()), float(rg.std()), float(yb.std()))


def _pixels_of(patch):
    p = getattr(patch, "pixels", patch)
    return np.asarray(p, dtype=np.float64)


def nps_loss(patch, colors):
    """Mean over pixels of the distance to the nearest printable color."""
    p = _pixels_of(patch).reshape(-1, 3)
    c = colors.colors if isinstance(colors, PrintableColorSet) else np.asarray(colors, dtype=np.float64)
    if c.shape[0] == 0:
        raise ValueError("printable color set must be non-empty")
    d = np.linalg.norm(p[:, None, :] - c[None, :, :], axis=2)
    return float(d.min(axis=1).mean())


def nps_loss_grad(patch, colors):
    p3 = _pixels_of(patch)
    p = p3.reshape(-1, 3)
    c = colors.colors if isinstance(colors, PrintableColorSet) else np.asarray(colors, dtype=np.float64)
    if c.shape[0] == 0:
        raise ValueError("printable color set must be non-empty")
    diff = p[:, None, :] - c[None, :, :]
    d = np.linalg.norm(diff, axis=2)
    nearest = d.argmin(axis=1)
    dmin = d[np.arange(p.shape[0]), nearest]
    value = float(dmin.mean())
    # zero subgradient where the pixel sits exactly on a printable color
    safe = np.where(dmin > 0.0, dmin, 1.0)
    grad = diff[np.arange(p.shape[0]), nearest] / safe[:, None]
    grad[dmin == 0.0] = 0.0
    return value, (grad / p.shape[0]).reshape(p3.shape)


def tv_loss(patch):
    """Total variation: mean over interior positions and channels of
    sqrt(dh^2 + dv^2 + eps), eps keeping the root differentiable at zero."""
    p = _pixels_of(patch)
    dh = p[:-1, 1:] - p[:-1, :-1]
    dv = p[1:, :-1] - p[:-1, :-1]
    return float(np.sqrt(dh * dh + dv * dv + TV_EPS).mean())


def tv_loss_grad(patch):
    p = _pixels_of(patch)
    dh = p[:-1, 1:] - p[:-1, :-1]
    dv = p[1:, :-1] - p[:-1, :-1]
    root = np.sqrt(dh * dh + dv * dv + TV_EPS)
    value = float(root.mean())
    n = root.size
    gh = dh / (root * n)
    gv = dv / (root * n)
    grad = np.zeros_like(p)
    grad[:-1, :-1] -= gh + gv
    grad[:-1, 1:] += gh
    grad[1:, :-1] += gv
    return value, grad


def saliency_loss(patch):
    """Colorfulness of the patch from opponent-channel statistics:
    sqrt(sigma_rg^2 + sigma_yb^2) + 0.3 sqrt(mu_rg^2 + mu_yb^2)."""
    s = colorfulness_stats(_pixels_of(patch))
    return float(np.sqrt(s.sigma_rg**2 + s.sigma_yb**2) + 0.3 * np.sqrt(s.mu_rg**2 + s.mu_yb**2))


def saliency_loss_grad(patch):
    p = _pixels_of(patch)
    rg = p[..., 0] - p[..., 1]
    yb = 0.5 * (p[..., 0] + p[..., 1]) - p[..., 2]
    n = rg.size
    mu_rg, mu_yb = rg.mean(), yb.mean()
    var_rg, var_yb = rg.var(), yb.var()
    sig_root = np.sqrt(var_rg + var_yb)
    mu_root = np.sqrt(mu_rg**2 + mu_yb**2)
    value = float(sig_root + 0.3 * mu_root)
    d_rg = np.zeros_like(rg)
    d_yb = np.zeros_like(yb)
    if sig_root > 0.0:
        d_rg += (rg - mu_rg) / (n * sig_root)
        d_yb += (yb - mu_yb) / (n * sig_root)
    if mu_root > 0.0:
        d_rg += 0.3 * mu_rg / (n * mu_root)
        d_yb += 0.3 * mu_yb / (n * mu_root)
    grad = np.empty_like(p)
    grad[..., 0] = d_rg + 0.5 * d_yb
    grad[..., 1] = -d_rg + 0.5 * d_yb
    grad[..., 2] = -d_yb
    return value, grad


def objectness_loss(detector_output):
    """Mean over the batch of each image's maximum objectness score."""
    obj = np.asarray(getattr(detector_output, "objectness", detector_output), dtype=np.float64)
    if obj.shape[0] == 0:
        raise ValueError("objectness loss needs a non-empty batch")
    return float(obj.reshape(obj.shape[0], -1).max(axis=1).mean())


def objectness_loss_grad(detector_output):
    """Returns (value, gradient w.r.t. the objectness grid): 1/B at each
    image's argmax cell (first index on ties), zero elsewhere."""
    obj = np.asarray(getattr(detector_output, "objectness", detector_output), dtype=np.float64)
    if obj.shape[0] == 0:
        raise ValueError("objectness loss needs a non-empty batch")
    flat = obj.reshape(obj.shape[0], -1)
    idx = flat.argmax(axis=1)
    value = float(flat[np.arange(flat.shape[0]), idx].mean())
    grad = np.zeros_like(flat)
    grad[np.arange(flat.shape[0]), idx] = 1.0 / flat.shape[0]
    return value, grad.reshape(obj.shape)


def total_loss(patch, detector_output, weights, colors):
    """Weighted combination; returns (total, per-term breakdown, unweighted)."""
    nps = nps_loss(patch, colors)
    tv = tv_loss(patch)
    sal = saliency_loss(patch)
    obj = objectness_loss(detector_output)
    total = weights.alpha * nps + weights.beta * tv + weights.gamma * sal + obj
    return float(total), {"obj": obj, "nps": nps, "tv": tv, "sal": sal}
