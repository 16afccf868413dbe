"""Synthetic camera bank: per-model low-level fingerprints, rendered scenes,
spliced composites with ground-truth masks, and the on-disk dataset layout.

Each camera model is a tuple of low-level pipeline parameters (a tiled 2x2
gain pattern, a correlation kernel for the sensor noise, the noise level and
the quantization step).  Scenes are band-limited random textures so that
semantic content is a nuisance variable rather than a label cue.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import convolve, gaussian_filter

log = logging.getLogger(__name__)

QUANT_STEPS = (1 / 255, 2 / 255, 4 / 255)


@dataclass(frozen=True)
class BankMargins:
    """Minimum pairwise separation of generated camera specs."""

    noise_sigma: float = 0.012
    cfa_gain: float = 0.05
    noise_kernel: float = 0.25


@dataclass(frozen=True)
class CameraModelSpec:
    """Low-level fingerprint parameters of one synthetic camera model."""

    model_id: int
    cfa_gain: tuple = ((1.0, 1.0), (1.0, 1.0))  # 2x2, tiled over the image
    noise_kernel: tuple = ((0.0,) * 3,) * 3     # 3x3, correlates the sensor noise
    noise_sigma: float = 0.02
    quant_step: float = 1 / 255

    def __post_init__(self):
        gains = np.asarray(self.cfa_gain, dtype=np.float64)
        if gains.shape != (2, 2) or gains.min() < 0.8 or gains.max() > 1.2:
            raise ValueError("cfa_gain must be 2x2 with entries in [0.8, 1.2]")
        if np.asarray(self.noise_kernel, dtype=np.float64).shape != (3, 3):
            raise ValueError("noise_kernel must be 3x3")
        if not (0 < self.noise_sigma <= 0.1):
            raise ValueError("noise_sigma must be in (0, 0.1]")
        if not any(abs(self.quant_step - q) < 1e-12 for q in QUANT_STEPS):
            raise ValueError("quant_step must be one of {1/255, 2/255, 4/255}")

    def gain_array(self) -> np.ndarray:
        return np.asarray(self.cfa_gain, dtype=np.float64)

    def kernel_array(self) -> np.ndarray:
        return np.asarray(self.noise_kernel, dtype=np.float64)


@dataclass
class SyntheticImage:
    pixels: np.ndarray       # H x W x 3 in [0, 1]
    camera_id: int
    scene_seed: int


@dataclass
class SpliceCase:
    composite: np.ndarray    # H x W x 3 in [0, 1]
    mask: np.ndarray         # H x W bool, True = spliced
    host_id: int
    donor_id: int
    meta: dict = field(default_factory=dict)


def _spec_distinct(a: CameraModelSpec, b: CameraModelSpec, m: BankMargins) -> bool:
    if abs(a.noise_sigma - b.noise_sigma) >= m.noise_sigma:
        return True
    if abs(a.quant_step - b.quant_step) > 1e-12:
        return True
    if np.abs(a.gain_array() - b.gain_array()).max() >= m.cfa_gain:
        return True
    if np.linalg.norm(a.kernel_array() - b.kernel_array()) >= m.noise_kernel:
        return True
    return False


def make_camera_bank(num_models: int, seed: int,
                     margins: BankMargins = BankMargins()) -> list[CameraModelSpec]:
    """Deterministic bank of pairwise-distinct camera models."""
    if num_models < 2:
        raise ValueError("num_models must be >= 2")
    rng = np.random.default_rng([seed, 0xCA11])
    bank: list[CameraModelSpec] = []
    # Noise levels are spread across (0, 0.1] first: the dominant cue.
    lo, hi = 0.015, 0.095
    sigmas = np.linspace(lo, hi, num_models)
    sigmas = sigmas + rng.uniform(-0.3, 0.3, num_models) * (sigmas[1] - sigmas[0] if num_models > 1 else 0.0)
    sigmas = np.clip(sigmas, 0.005, 0.1)
    for i in range(num_models):
        for _ in range(1000):
            kernel = rng.uniform(0.0, 1.0, (3, 3))
            kernel[1, 1] += rng.uniform(0.5, 2.0)  # center-heavy, low-pass-ish
            kernel /= np.linalg.norm(kernel)       # unit L2: preserves noise variance
            spec = CameraModelSpec(
                model_id=i,
                cfa_gain=tuple(map(tuple, np.round(rng.uniform(0.85, 1.15, (2, 2)), 4))),
                noise_kernel=tuple(map(tuple, np.round(kernel, 6))),
                noise_sigma=round(float(sigmas[i]), 5),
                quant_step=QUANT_STEPS[i % len(QUANT_STEPS)],
            )
            if all(_spec_distinct(spec, other, margins) for other in bank):
                bank.append(spec)
                break
        else:
            raise RuntimeError("could not sample a distinct camera spec; relax the margins")
    return bank


def _scene(seed: int, size: tuple[int, int], rng_tag: int = 0x5CE9E) -> np.ndarray:
    """Band-limited random texture with gradients and a smoothly varying
    texture-energy field, so local statistics drift across the image."""
    h, w = size
    rng = np.random.default_rng([seed, rng_tag])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx / max(w, 1) + np.sin(theta) * yy / max(h, 1))
    ramp = (ramp - ramp.mean()) * rng.uniform(0.1, 0.35)

    tex = gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(1.2, 2.5))
    tex /= max(tex.std(), 1e-9)
    amp = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 5)
    amp = (amp - amp.min()) / max(np.ptp(amp), 1e-9)        # [0, 1]
    amp = 0.15 + 0.85 * amp                                  # keep some texture everywhere
    gray = 0.5 + ramp + 0.22 * amp * tex

    img = np.empty((h, w, 3))
    for c in range(3):
        tint = gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(4, 8))
        tint /= max(tint.std(), 1e-9)
        img[..., c] = gray + 0.04 * tint
    return np.clip(img, 0.02, 0.98)


def render(scene_seed: int, spec: CameraModelSpec, size: int | tuple[int, int]) -> SyntheticImage:
    """Push one scene through a camera model's pipeline.

    Pipeline order: multiply by the tiled gain pattern, add kernel-correlated
    Gaussian sensor noise, quantize to the model's step, clamp to [0, 1].
    """
    hw = (size, size) if isinstance(size, int) else tuple(size)
    x = _scene(scene_seed, hw)

    reps = (hw[0] + 1) // 2, (hw[1] + 1) // 2
    gain = np.tile(spec.gain_array(), reps)[:hw[0], :hw[1]]
    x = x * gain[..., None]

    cam_rng = np.random.default_rng([scene_seed, spec.model_id, 0x5E15])
    noise = cam_rng.standard_normal((hw[0], hw[1], 3)) * spec.noise_sigma
    for c in range(3):
        noise[..., c] = convolve(noise[..., c], spec.kernel_array(), mode="nearest")
    x = x + noise

    x = np.round(x / spec.quant_step) * spec.quant_step
    x = np.clip(x, 0.0, 1.0)
    return SyntheticImage(pixels=x, camera_id=spec.model_id, scene_seed=scene_seed)


FRACTION_BOUNDS = (0.05, 0.40)


def make_splice(host: SyntheticImage, donor: SyntheticImage, seed: int,
                target_fraction: float | None = None, max_tries: int = 200) -> SpliceCase:
    """Replace a random simply-connected region of the host with donor pixels.

    The realized spliced-area fraction is forced into FRACTION_BOUNDS by
    rejection so the untampered region always stays the majority.
    """
    if host.pixels.shape != donor.pixels.shape:
        raise ValueError("host and donor must have identical dimensions")
    if host.camera_id == donor.camera_id:
        raise ValueError("host and donor camera ids are identical: not a forgery")

    h, w = host.pixels.shape[:2]
    rng = np.random.default_rng([seed, 0x5147])
    lo, hi = FRACTION_BOUNDS
    if target_fraction is not None and not (lo <= target_fraction <= hi):
        log.warning("requested area fraction %.3f outside [%.2f, %.2f]; resampling",
                    target_fraction, lo, hi)
        target_fraction = None

    for _ in range(max_tries):
        frac = target_fraction if target_fraction is not None else rng.uniform(lo, hi)
        shape = rng.choice(["rect", "ellipse"])
        aspect = rng.uniform(0.5, 2.0)
        area = frac * h * w
        if shape == "rect":
            rh = int(round(np.sqrt(area * aspect)))
            rw = int(round(np.sqrt(area / aspect)))
        else:
            rh = int(round(2 * np.sqrt(area * aspect / np.pi)))
            rw = int(round(2 * np.sqrt(area / (aspect * np.pi))))
        rh, rw = min(max(rh, 2), h), min(max(rw, 2), w)
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        mask = np.zeros((h, w), dtype=bool)
        if shape == "rect":
            mask[r0:r0 + rh, c0:c0 + rw] = True
        else:
            cy, cx = r0 + (rh - 1) / 2, c0 + (rw - 1) / 2
            yy, xx = np.mgrid[0:h, 0:w]
            mask = ((yy - cy) / (rh / 2)) ** 2 + ((xx - cx) / (rw / 2)) ** 2 <= 1.0
        realized = mask.mean()
        if lo <= realized <= hi:
            composite = host.pixels.copy()
            composite[mask] = donor.pixels[mask]
            return SpliceCase(composite=composite, mask=mask,
                              host_id=host.camera_id, donor_id=donor.camera_id,
                              meta={"fraction": float(realized), "shape": str(shape),
                                    "seed": seed})
    raise RuntimeError("could not sample a splice region within the area bounds")


# ---------------------------------------------------------------------------
# Brute-force pixel-statistics baseline: certifies that a camera bank is
# distinguishable before any neural training happens.

_HP_FILTERS = [
    np.array([[0, -1, 0], [-1, 4, -1], [0, -1, 0]], dtype=np.float64),  # laplacian
    np.array([[0, 0, 0], [-1, 1, 0], [0, 0, 0]], dtype=np.float64),     # horiz diff
    np.array([[0, -1, 0], [0, 1, 0], [0, 0, 0]], dtype=np.float64),     # vert diff
]


def pixel_stats_features(pixels: np.ndarray) -> np.ndarray:
    """Per-image summary: log-variance of high-pass residuals + quantization step."""
    gray = pixels.mean(axis=2)
    feats = [np.log(np.maximum(convolve(gray, f, mode="nearest").var(), 1e-12))
             for f in _HP_FILTERS]
    bytes_ = np.unique(np.round(pixels * 255).astype(np.int64))
    step = int(np.diff(bytes_).min()) if bytes_.size > 1 else 1
    feats.append(float(min(step, 8)))
    return np.asarray(feats)


class PixelStatsBaseline:
    """Nearest-centroid classifier over the brute-force pixel statistics."""

    def __init__(self):
        self.centroids: np.ndarray | None = None
        self.scale: np.ndarray | None = None
        self.labels_: np.ndarray | None = None

    def fit(self, images: list[np.ndarray], labels: list[int]) -> "PixelStatsBaseline":
        X = np.stack([pixel_stats_features(im) for im in images])
        y = np.asarray(labels)
        self.scale = np.maximum(X.std(axis=0), 1e-9)
        Xn = X / self.scale
        self.labels_ = np.unique(y)
        self.centroids = np.stack([Xn[y == c].mean(axis=0) for c in self.labels_])
        return self

    def predict(self, images: list[np.ndarray]) -> np.ndarray:
        X = np.stack([pixel_stats_features(im) for im in images]) / self.scale
        d = ((X[:, None, :] - self.centroids[None]) ** 2).sum(axis=2)
        return self.labels_[d.argmin(axis=1)]

    def accuracy(self, images: list[np.ndarray], labels: list[int]) -> float:
        return float((self.predict(images) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# On-disk dataset: <root>/<split>/cam<k>/<image_id>.png + manifest.json,
# splices under <root>/splices/<case_id>/{image.png, mask.png, meta.json}.

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.2, 0.1)


@dataclass
class SynthConfig:
    num_models: int = 4
    images_per_model: int = 60
    image_size: int = 64
    splice_size: int = 128
    num_splices: int = 24
    seed: int = 7
    margins: BankMargins = field(default_factory=BankMargins)

    def __post_init__(self):
        if self.num_models < 2:
            raise ValueError("num_models must be >= 2")
        if self.images_per_model < len(SPLITS):
            raise ValueError("need at least one image per split per model")


def save_png(path, pixels: np.ndarray):
    """8-bit PNG; RGB for H x W x 3 input, grayscale for H x W."""
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr


def save_mask_png(path, mask: np.ndarray):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)) >= 128


def generate_dataset(root, config: SynthConfig) -> dict:
    """Render the full benchmark to disk; returns the manifest."""
    root = Path(root)
    bank = make_camera_bank(config.num_models, config.seed, config.margins)
    rng = np.random.default_rng([config.seed, 0xD5])

    images = []
    for spec in bank:
        order = rng.permutation(config.images_per_model)
        n_train = int(round(SPLIT_FRACTIONS[0] * config.images_per_model))
        n_val = int(round(SPLIT_FRACTIONS[1] * config.images_per_model))
        for rank, idx in enumerate(order):
            split = ("train" if rank < n_train
                     else "val" if rank < n_train + n_val else "test")
            scene_seed = int(config.seed * 1_000_003 + spec.model_id * 10_007 + idx)
            img = render(scene_seed, spec, config.image_size)
            rel = Path(split) / f"cam{spec.model_id}" / f"img{idx:05d}.png"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            save_png(root / rel, img.pixels)
            images.append({"id": f"cam{spec.model_id}/img{idx:05d}", "path": str(rel),
                           "camera": spec.model_id, "split": split,
                           "scene_seed": scene_seed})

    splices = []
    for case_idx in range(config.num_splices):
        host_cam = int(rng.integers(0, config.num_models))
        donor_cam = int((host_cam + 1 + rng.integers(0, config.num_models - 1))
                        % config.num_models)
        host_seed = int(config.seed * 2_000_003 + case_idx * 101 + 1)
        donor_seed = int(config.seed * 2_000_003 + case_idx * 101 + 2)
        host = render(host_seed, bank[host_cam], config.splice_size)
        donor = render(donor_seed, bank[donor_cam], config.splice_size)
        case = make_splice(host, donor, seed=int(config.seed * 3_000_017 + case_idx))
        case_id = f"case{case_idx:04d}"
        cdir = root / "splices" / case_id
        cdir.mkdir(parents=True, exist_ok=True)
        save_png(cdir / "image.png", case.composite)
        save_mask_png(cdir / "mask.png", case.mask)
        meta = {"case_id": case_id, "host_camera": case.host_id,
                "donor_camera": case.donor_id, "host_scene_seed": host_seed,
                "donor_scene_seed": donor_seed, **case.meta}
        (cdir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        splices.append(meta)

    manifest = {
        "format_version": 1,
        "seed": config.seed,
        "num_models": config.num_models,
        "image_size": config.image_size,
        "splice_size": config.splice_size,
        "specs": [asdict(s) for s in bank],
        "images": images,
        "splices": splices,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


@dataclass
class SplitData:
    """One split loaded into memory: images grouped per class."""

    images: list[np.ndarray]
    labels: list[int]
    class_ids: list[int]

    def by_class(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {c: [] for c in self.class_ids}
        for i, lab in enumerate(self.labels):
            out[lab].append(i)
        return out


def load_split(root, split: str, min_size: int | None = None) -> SplitData:
    """Load every PNG of a split; undersized images are skipped with a warning."""
    root = Path(root)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    sdir = root / split
    if not sdir.is_dir():
        raise FileNotFoundError(f"split directory {sdir} does not exist")
    images, labels = [], []
    cam_dirs = sorted(sdir.glob("cam*"))
    class_ids = [int(d.name[3:]) for d in cam_dirs]
    for d, cid in zip(cam_dirs, class_ids):
        for png in sorted(d.glob("*.png")):
            arr = load_png(png)
            if min_size is not None and min(arr.shape[:2]) < min_size:
                warnings.warn(f"skipping undersized image {png}")
                continue
            images.append(arr)
            labels.append(cid)
    return SplitData(images=images, labels=labels, class_ids=class_ids)


def load_splices(root) -> list[dict]:
    """All splice cases under <root>/splices, each with image, mask and meta."""
    root = Path(root)
    cases = []
    for cdir in sorted((root / "splices").glob("case*")):
        cases.append({
            "case_id": cdir.name,
            "image": load_png(cdir / "image.png"),
            "mask": load_mask_png(cdir / "mask.png"),
            "meta": json.loads((cdir / "meta.json").read_text()),
        })
    return cases
