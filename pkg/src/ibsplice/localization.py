"""Splice localization: dense per-patch signatures from the trained encoder,
two-component Gaussian-mixture EM over the signature field, and per-pixel
splice probabilities with automatic thresholding.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.linalg import solve_triangular
from scipy.ndimage import distance_transform_edt
from scipy.special import logsumexp

from .model import FingerprintNet

log = logging.getLogger(__name__)


@dataclass
class SignatureField:
    """Grid of per-patch feature vectors at a fixed stride over the image."""

    features: np.ndarray      # Gh x Gw x F
    patch_size: int
    stride: int
    offsets: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("signature field contains non-finite values")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.features.shape[:2]

    def flat(self) -> np.ndarray:
        return self.features.reshape(-1, self.features.shape[-1])


@dataclass
class Gmm2:
    """Two-component Gaussian mixture with full (ridge-regularized) covariances."""

    weights: np.ndarray            # (2,)
    means: np.ndarray              # (2, F)
    covariances: np.ndarray        # (2, F, F)
    loglik_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not np.isclose(self.weights.sum(), 1.0) or (self.weights < 0).any():
            raise ValueError("component weights must be a 2-point simplex")

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        """Per-component log densities, shape (N, 2)."""
        out = np.empty((x.shape[0], 2))
        for k in range(2):
            out[:, k] = _gaussian_logpdf(x, self.means[k], self.covariances[k])
        return out

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        """Posterior component probabilities, shape (N, 2)."""
        lp = self.log_prob(x) + np.log(self.weights)[None, :]
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def swapped(self) -> "Gmm2":
        return Gmm2(weights=self.weights[::-1].copy(), means=self.means[::-1].copy(),
                    covariances=self.covariances[::-1].copy(),
                    loglik_trace=list(self.loglik_trace))


@dataclass
class HeatMap:
    """Per-pixel probability of 'spliced', with optional threshold metadata."""

    prob: np.ndarray          # H x W in [0, 1]
    threshold: float | None = None
    threshold_method: str | None = None

    def __post_init__(self):
        if self.prob.min() < -1e-9 or self.prob.max() > 1 + 1e-9:
            raise ValueError("heatmap values must lie in [0, 1]")
        self.prob = np.clip(self.prob, 0.0, 1.0)

    def binarized(self, threshold: float | None = None) -> np.ndarray:
        t = threshold if threshold is not None else self.threshold
        if t is None:
            raise ValueError("no threshold set")
        return self.prob > t


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-6
    restarts: int = 5
    ridge: float = 1e-6        # scaled by trace/dim each M-step
    covariance: str = "full"   # or "diag"
    seed: int = 0

    def __post_init__(self):
        if self.covariance not in ("full", "diag"):
            raise ValueError(f"unknown covariance mode {self.covariance!r}")


def extract_signatures(image: np.ndarray, net: FingerprintNet, patch_size: int,
                       stride: int, feature_mode: str = "mu_sigma",
                       batch_size: int = 256) -> SignatureField:
    """Encode every grid patch deterministically; feature = [mu || sigma].

    feature_mode "mu" keeps only the code mean.
    """
    if feature_mode not in ("mu_sigma", "mu"):
        raise ValueError(f"unknown feature_mode {feature_mode!r}")
    h, w = image.shape[:2]
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {h}x{w} smaller than patch size {patch_size}")
    rows = list(range(0, h - patch_size + 1, stride))
    cols = list(range(0, w - patch_size + 1, stride))

    dtype = next(net.parameters()).dtype
    was_training = net.training
    net.eval()
    feats = []
    coords = [(r, c) for r in rows for c in cols]
    with torch.no_grad():
        for i in range(0, len(coords), batch_size):
            chunk = coords[i:i + batch_size]
            batch = np.stack([image[r:r + patch_size, c:c + patch_size] for r, c in chunk])
            xb = torch.from_numpy(batch).permute(0, 3, 1, 2).to(dtype)
            mu, sigma = net(xb)
            f = mu if feature_mode == "mu" else torch.cat([mu, sigma], dim=1)
            feats.append(f.double().numpy())
    if was_training:
        net.train()
    features = np.concatenate(feats).reshape(len(rows), len(cols), -1)
    return SignatureField(features=features, patch_size=patch_size, stride=stride)


def _gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    dim = x.shape[1]
    chol = np.linalg.cholesky(cov)
    solved = solve_triangular(chol, (x - mean).T, lower=True)
    maha = (solved ** 2).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (dim * np.log(2 * np.pi) + logdet + maha)


def _kmeans2(x: np.ndarray, rng: np.random.Generator, iters: int = 25) -> np.ndarray:
    """Plain Lloyd iteration with k=2; returns hard assignments."""
    n = x.shape[0]
    i0 = rng.integers(0, n)
    d0 = ((x - x[i0]) ** 2).sum(axis=1)
    if d0.max() == 0:
        return np.zeros(n, dtype=np.int64)
    i1 = int(d0.argmax())
    centers = np.stack([x[i0], x[i1]])
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new_assign = d.argmin(axis=1)
        if (new_assign == assign).all() and _ > 0:
            break
        assign = new_assign
        for k in range(2):
            if (assign == k).any():
                centers[k] = x[assign == k].mean(axis=0)
    return assign


def _regularize(cov: np.ndarray, ridge: float, diag_only: bool) -> np.ndarray:
    dim = cov.shape[0]
    if diag_only:
        cov = np.diag(np.diag(cov))
    eps = ridge * max(np.trace(cov) / dim, 1e-12)
    return cov + eps * np.eye(dim)


def fit_gmm2(field: SignatureField | np.ndarray, config: EmConfig = EmConfig()) -> Gmm2:
    """EM fit of a two-component mixture; best of k-means-seeded restarts.

    Iterates until the log-likelihood improves by less than `tol` or the
    iteration cap is hit; a trace-scaled ridge keeps covariances positive
    definite each M-step.
    """
    x = field.flat() if isinstance(field, SignatureField) else np.asarray(field, dtype=np.float64)
    n, dim = x.shape
    if n < 2 * dim + 2:
        raise ValueError(f"{n} grid cells are too few to estimate {dim}-dim covariances")
    if np.allclose(x, x[0], atol=1e-12):
        raise ValueError("no separable classes: all signature vectors identical")

    rng = np.random.default_rng([config.seed, 0xE9])
    best: Gmm2 | None = None
    diag_only = config.covariance == "diag"
    for _ in range(config.restarts):
        assign = _kmeans2(x, rng)
        if assign.min() == assign.max():  # degenerate seed: random split
            assign = rng.integers(0, 2, n)
        weights = np.array([max((assign == k).mean(), 1e-3) for k in range(2)])
        weights /= weights.sum()
        means = np.stack([x[assign == k].mean(axis=0) if (assign == k).any() else x.mean(axis=0)
                          for k in range(2)])
        covs = np.stack([_regularize(np.cov(x[assign == k].T, bias=True)
                                     if (assign == k).sum() > 1 else np.cov(x.T, bias=True),
                                     config.ridge, diag_only)
                         for k in range(2)])

        trace: list[float] = []
        for _it in range(config.max_iter):
            # E-step
            lp = np.empty((n, 2))
            for k in range(2):
                lp[:, k] = _gaussian_logpdf(x, means[k], covs[k]) + np.log(weights[k])
            norm = logsumexp(lp, axis=1)
            loglik = float(norm.sum())
            resp = np.exp(lp - norm[:, None])
            if trace and loglik - trace[-1] < config.tol:
                trace.append(loglik)
                break
            trace.append(loglik)
            # M-step
            nk = resp.sum(axis=0) + 1e-300
            weights = nk / n
            means = (resp.T @ x) / nk[:, None]
            for k in range(2):
                diff = x - means[k]
                cov = (resp[:, k][:, None] * diff).T @ diff / nk[k]
                covs[k] = _regularize(cov, config.ridge, diag_only)

        candidate = Gmm2(weights=weights, means=means, covariances=covs,
                         loglik_trace=trace)
        if best is None or trace[-1] > best.loglik_trace[-1]:
            best = candidate
    return best


def splice_probability(field: SignatureField, gmm: Gmm2,
                       image_shape: tuple[int, int], mode: str = "average") -> HeatMap:
    """Posterior of the minority component, broadcast from the patch grid to pixels.

    The minority component (smaller total responsibility mass) is read as
    "spliced"; a mass tie falls back to the component whose mean sits farther
    (Mahalanobis) from the global mean.  Pixel values average the posteriors
    of every covering patch ("average") or copy the nearest cell ("nearest");
    pixels no patch covers take the nearest covered value.
    """
    if mode not in ("average", "nearest"):
        raise ValueError(f"unknown broadcast mode {mode!r}")
    x = field.flat()
    resp = gmm.responsibilities(x)
    mass = resp.sum(axis=0)
    if np.isclose(mass[0], mass[1]):
        mu_all = x.mean(axis=0)
        cov_all = np.cov(x.T, bias=True) + 1e-9 * np.eye(x.shape[1])
        inv = np.linalg.inv(cov_all)
        d = [float((gmm.means[k] - mu_all) @ inv @ (gmm.means[k] - mu_all)) for k in range(2)]
        minority = int(np.argmax(d))
    else:
        minority = int(np.argmin(mass))

    gh, gw = field.grid_shape
    cell = resp[:, minority].reshape(gh, gw)
    h, w = image_shape
    p, s = field.patch_size, field.stride
    if mode == "nearest":
        ri = np.clip(np.round((np.arange(h) - field.offsets[0] - (p - 1) / 2) / s), 0, gh - 1)
        ci = np.clip(np.round((np.arange(w) - field.offsets[1] - (p - 1) / 2) / s), 0, gw - 1)
        return HeatMap(prob=cell[ri.astype(int)][:, ci.astype(int)])

    acc = np.zeros((h, w))
    cnt = np.zeros((h, w))
    for i in range(gh):
        for j in range(gw):
            r, c = field.offsets[0] + i * s, field.offsets[1] + j * s
            acc[r:r + p, c:c + p] += cell[i, j]
            cnt[r:r + p, c:c + p] += 1.0
    covered = cnt > 0
    heat = np.zeros((h, w))
    heat[covered] = acc[covered] / cnt[covered]
    if not covered.all():
        nearest = distance_transform_edt(~covered, return_distances=False,
                                         return_indices=True)
        heat = heat[tuple(nearest)]
    return HeatMap(prob=heat)


def otsu_threshold(heatmap: HeatMap | np.ndarray) -> float:
    """Threshold maximizing between-class variance over a 256-bin histogram."""
    values = heatmap.prob if isinstance(heatmap, HeatMap) else np.asarray(heatmap)
    values = values.ravel()
    if np.unique(values).size < 2:
        raise ValueError("degenerate histogram: map has fewer than 2 distinct values")
    counts, edges = np.histogram(values, bins=256, range=(0.0, 1.0))
    total = counts.sum()
    p = counts / total
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * centers)
    m_total = m0[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (m_total - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -np.inf
    k = int(np.argmax(between))
    return float(edges[k + 1])


def save_heatmap(path, heatmap: HeatMap, gmm: Gmm2 | None = None,
                 field: SignatureField | None = None):
    """8-bit grayscale PNG (probability x 255) plus a JSON sidecar."""
    path = Path(path)
    arr = np.round(heatmap.prob * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")
    sidecar = {
        "threshold_method": heatmap.threshold_method,
        "threshold": heatmap.threshold,
        "gmm_loglik": gmm.loglik_trace[-1] if gmm is not None else None,
        "grid_shape": list(field.grid_shape) if field is not None else None,
        "stride": field.stride if field is not None else None,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_heatmap(path) -> HeatMap:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    hm = HeatMap(prob=arr)
    sidecar = Path(path).with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        hm.threshold = meta.get("threshold")
        hm.threshold_method = meta.get("threshold_method")
    return hm


def localize(image: np.ndarray, net: FingerprintNet, stride: int | None = None,
             em_config: EmConfig = EmConfig(), feature_mode: str = "mu_sigma"
             ) -> tuple[HeatMap, Gmm2, SignatureField]:
    """Full pipeline for one image: signatures -> EM -> heatmap with Otsu threshold."""
    patch = net.encoder_config.patch_size
    if stride is None:
        stride = max(patch // 2, 1)
    field = extract_signatures(image, net, patch, stride, feature_mode=feature_mode)
    gmm = fit_gmm2(field, em_config)
    heat = splice_probability(field, gmm, image.shape[:2])
    try:
        heat.threshold = otsu_threshold(heat)
        heat.threshold_method = "otsu"
    except ValueError:
        log.warning("constant heatmap: no Otsu threshold")
    return heat, gmm, field
