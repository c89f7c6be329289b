"""Procedural multi-annotator segmentation data with a disagreement knob.

Each sample is a soft-edged elliptical blob (optionally a nested pair,
an outer disc with an inner cup) rendered onto a noisy background.  Rater
masks are thresholded signed distances perturbed per rater by a constant
bias and a smooth band-limited noise field, both scaled by the sample's
disagreement level delta.  Edge softness in the image also grows with
delta, so the visual ambiguity of a sample carries information about how
much its raters disagree; without that cue, predicting disagreement from
the image alone would be impossible.

A distortion bank (noise, blur, intensity and channel shifts) provides
the out-of-distribution inputs for robustness experiments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "SceneParams",
    "RaterSample",
    "generate_sample",
    "generate_dataset",
    "distort",
    "DISTORTION_KINDS",
    "rater_agreement",
    "binary_dice",
]

DISTORTION_KINDS = ("gauss_noise", "blur", "intensity_shift", "channel_shift")

MIN_BLOB_AREA = 9
MAX_REGENERATIONS = 10


@dataclass(frozen=True)
class SceneParams:
    image_size: tuple[int, int] = (32, 32)
    n_raters: int = 4
    delta_low: float = 0.5
    delta_high: float = 3.0
    ambiguity_mix: float = 0.5
    texture_noise: float = 0.05
    structure: str = "single_blob"
    channels: int = 1
    seed: int = 0

    def validate(self) -> None:
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError(f"image_size must be at least 16x16, got {self.image_size}")
        if not 2 <= self.n_raters <= 16:
            raise ValueError(f"n_raters must be in [2, 16], got {self.n_raters}")
        if not 0.0 <= self.delta_low <= self.delta_high:
            raise ValueError(f"need 0 <= delta_low <= delta_high, got "
                             f"{self.delta_low}, {self.delta_high}")
        if self.delta_high >= min(h, w) / 4:
            raise ValueError(f"delta_high={self.delta_high} too large for {self.image_size}")
        if not 0.0 <= self.ambiguity_mix <= 1.0:
            raise ValueError(f"ambiguity_mix must be in [0, 1], got {self.ambiguity_mix}")
        if self.texture_noise < 0:
            raise ValueError("texture_noise must be >= 0")
        if self.structure not in ("single_blob", "nested"):
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @classmethod
    def fixed_delta(cls, delta: float, **kwargs) -> "SceneParams":
        """Every sample drawn at one disagreement level."""
        return cls(delta_low=delta, delta_high=delta, **kwargs)

    def structure_names(self) -> tuple[str, ...]:
        return ("blob",) if self.structure == "single_blob" else ("disc", "cup")


@dataclass(frozen=True)
class RaterSample:
    """One image with its rater masks, (structures, raters, H, W)."""
    image: np.ndarray
    masks: np.ndarray
    true_mask: np.ndarray
    delta_used: float
    structure_names: tuple[str, ...]


def _band_limited_field(rng: np.random.Generator, shape: tuple[int, int],
                        cell: int = 8) -> np.ndarray:
    """Smooth unit-std noise: bilinear interpolation of a coarse grid."""
    h, w = shape
    coarse = rng.normal(size=(h // cell + 2, w // cell + 2))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    field = (coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
             + coarse[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
             + coarse[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
             + coarse[np.ix_(y0 + 1, x0 + 1)] * fy * fx)
    return field / max(field.std(), 1e-9)


def _flood(mask: np.ndarray, seed: tuple[int, int]) -> np.ndarray:
    comp = np.zeros_like(mask)
    comp[seed] = True
    frontier = comp.copy()
    while frontier.any():
        grown = np.zeros_like(mask)
        grown[:-1] |= frontier[1:]
        grown[1:] |= frontier[:-1]
        grown[:, :-1] |= frontier[:, 1:]
        grown[:, 1:] |= frontier[:, :-1]
        frontier = grown & mask & ~comp
        comp |= frontier
    return comp


def _largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected foreground component of a boolean mask."""
    remaining = mask.copy()
    best = np.zeros_like(mask)
    best_area = 0
    while remaining.sum() > best_area:
        seed = np.unravel_index(int(np.argmax(remaining)), remaining.shape)
        comp = _flood(remaining, seed)
        area = int(comp.sum())
        if area > best_area:
            best, best_area = comp, area
        remaining &= ~comp
    return best


def _wobbled_distance(rng: np.random.Generator, grid: tuple[np.ndarray, np.ndarray],
                      center: tuple[float, float], radius: float) -> np.ndarray:
    """Signed distance to a radially wobbled circle (negative inside)."""
    yy, xx = grid
    cy, cx = center
    rho = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)
    factor = np.ones_like(rho)
    for k in (2, 3, 4):
        amp = rng.normal(0.0, 0.05)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        factor += amp * np.cos(k * theta + phase)
    return rho - radius * np.clip(factor, 0.7, 1.3)


def _rater_masks(rng: np.random.Generator, dist: np.ndarray, delta: float,
                 n_raters: int) -> np.ndarray | None:
    masks = np.zeros((n_raters,) + dist.shape)
    for j in range(n_raters):
        bias = rng.normal(0.0, delta / 2.0) if delta > 0 else 0.0
        field = _band_limited_field(rng, dist.shape) * delta if delta > 0 else 0.0
        raw = (dist + bias + field) < 0.0
        if raw.sum() < MIN_BLOB_AREA:
            return None
        masks[j] = _largest_component(raw)
        if masks[j].sum() < MIN_BLOB_AREA:
            return None
    return masks


def _render(dist: np.ndarray, softness: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(np.clip(dist / softness, -50.0, 50.0)))


def _try_generate(params: SceneParams, rng: np.random.Generator) -> RaterSample | None:
    h, w = params.image_size
    delta = params.delta_high if rng.uniform() < params.ambiguity_mix else params.delta_low
    grid = np.mgrid[0:h, 0:w].astype(np.float64)
    center = (rng.uniform(0.35 * h, 0.65 * h), rng.uniform(0.35 * w, 0.65 * w))
    radius = rng.uniform(0.18, 0.28) * min(h, w)

    dists = [_wobbled_distance(rng, (grid[0], grid[1]), center, radius)]
    if params.structure == "nested":
        ratio = rng.uniform(0.45, 0.65)
        dists.append(_wobbled_distance(rng, (grid[0], grid[1]), center, radius * ratio))

    true_masks = np.stack([(d < 0.0).astype(np.float64) for d in dists])
    if params.structure == "nested":
        true_masks[1] *= true_masks[0]
    if any(m.sum() < MIN_BLOB_AREA for m in true_masks):
        return None

    all_masks = []
    for d in dists:
        m = _rater_masks(rng, d, delta, params.n_raters)
        if m is None:
            return None
        all_masks.append(m)
    masks = np.stack(all_masks)
    if params.structure == "nested":
        masks[1] *= masks[0]  # a cup annotation never leaves its disc
        if any(masks[1, j].sum() < MIN_BLOB_AREA for j in range(params.n_raters)):
            return None

    # Softer edges on high-disagreement samples: the visible cue.
    softness = 0.3 + 0.6 * delta
    if params.structure == "nested":
        intensity = 0.55 * _render(dists[0], softness) + 0.45 * _render(dists[1], softness)
    else:
        intensity = _render(dists[0], softness)
    gains = np.linspace(1.0, 0.7, params.channels)[:, None, None]
    image = intensity[None] * gains
    if params.texture_noise > 0:
        image = image + rng.normal(0.0, params.texture_noise, image.shape)
    image = np.clip(image, 0.0, 1.0)

    return RaterSample(image=image, masks=masks.astype(np.float64),
                       true_mask=true_masks, delta_used=float(delta),
                       structure_names=params.structure_names())


def generate_sample(params: SceneParams, rng: np.random.Generator) -> RaterSample:
    """One image plus rater masks; retries internally on degenerate blobs."""
    params.validate()
    for _ in range(MAX_REGENERATIONS):
        sample = _try_generate(params, rng)
        if sample is not None:
            return sample
    raise RuntimeError(f"degenerate blob (area < {MIN_BLOB_AREA} px) persisted "
                       f"through {MAX_REGENERATIONS} regenerations")


def generate_dataset(params: SceneParams, n_images: int,
                     rng: np.random.Generator) -> tuple[list[RaterSample], dict]:
    """n_images independent samples plus a JSON-ready manifest."""
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    samples = [generate_sample(params, rng) for _ in range(n_images)]
    manifest = {
        "n_images": n_images,
        "params": asdict(params),
        "structures": list(params.structure_names()),
        "images": [{"delta_used": s.delta_used, "n_raters": int(s.masks.shape[1])}
                   for s in samples],
    }
    return samples, manifest


def _noise_field(rng: np.random.Generator, shape, level: float) -> np.ndarray:
    return rng.normal(0.0, level, shape)


def _box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return image.copy()
    out = image.astype(np.float64)
    size = 2 * radius + 1
    for axis in (-2, -1):
        pad_width = [(0, 0)] * out.ndim
        pad_width[axis] = (radius, radius)
        padded = np.pad(out, pad_width, mode="reflect")
        acc = np.zeros_like(out)
        for offset in range(size):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offset, offset + out.shape[axis])
            acc += padded[tuple(sl)]
        out = acc / size
    return out


def distort(image: np.ndarray, kind: str, level: float,
            rng: np.random.Generator) -> np.ndarray:
    """Out-of-distribution corruption of a (C, H, W) image in [0, 1].

    level 0 is the identity for every kind.  channel_shift mixes each
    channel toward its neighbor (a hue-rotation analogue); on one-channel
    images it degrades to a contrast gain.
    """
    if kind not in DISTORTION_KINDS:
        raise ValueError(f"unknown distortion kind {kind!r}; choose from {DISTORTION_KINDS}")
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    image = np.asarray(image, dtype=np.float64)
    if level == 0:
        return image.copy()
    if kind == "gauss_noise":
        return np.clip(image + _noise_field(rng, image.shape, level), 0.0, 1.0)
    if kind == "blur":
        return _box_blur(image, int(round(level)))
    if kind == "intensity_shift":
        return np.clip(image + level, 0.0, 1.0)
    c = image.shape[0]
    if c == 1:
        return np.clip(image * (1.0 + level), 0.0, 1.0)
    t = min(level, 1.0)
    return np.clip((1.0 - t) * image + t * np.roll(image, -1, axis=0), 0.0, 1.0)


def binary_dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary masks; two empty masks count as 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def rater_agreement(masks: np.ndarray) -> dict:
    """Mean pairwise Dice across raters, plus the full pair matrix."""
    masks = np.asarray(masks)
    y = masks.shape[0]
    if y < 2:
        raise ValueError(f"rater_agreement needs >= 2 masks, got {y}")
    per_pair = np.ones((y, y))
    scores = []
    for i in range(y):
        for j in range(i + 1, y):
            d = binary_dice(masks[i], masks[j])
            per_pair[i, j] = per_pair[j, i] = d
            scores.append(d)
    return {"mean_pairwise_dice": float(np.mean(scores)), "per_pair": per_pair}
