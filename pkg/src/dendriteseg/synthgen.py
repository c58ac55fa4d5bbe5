"""Procedural dendrite-like volumes with exact ground truth.

Geometry is a union of capsules: primary arms radiate from a root near the
volume center, and each may spawn secondary arms part-way along its length,
so the foreground is always one connected component. The binary label is the
rasterized capsule union BEFORE blurring; the grayscale volume paints the
two intensity levels, blurs them (this is what makes the boundaries diffuse
and the task nontrivial), adds Gaussian noise, and quantizes to u8.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import SpecInvalid
from .volumeio import GrayVolume, LabelVolume


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple = (64, 64, 8)  # (width, height, depth)
    n_primary_arms: int = 5
    secondary_arm_probability: float = 0.5
    arm_radius: tuple = (2.0, 4.0)
    background_mean: float = 180.0
    dendrite_mean: float = 70.0
    blur_sigma: float = 1.0
    noise_sigma: float = 10.0
    seed: int = 0

    def __post_init__(self):
        w, h, d = self.dims
        if w < 16 or h < 16 or d < 4:
            raise SpecInvalid(f"dims {self.dims} below the 16x16x4 minimum")
        if not self.dendrite_mean < self.background_mean:
            raise SpecInvalid("dendrite_mean must be below background_mean")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise SpecInvalid("sigmas must be >= 0")
        if not 0 <= self.secondary_arm_probability <= 1:
            raise SpecInvalid("secondary_arm_probability must be in [0, 1]")
        lo, hi = self.arm_radius
        if not 0 < lo <= hi:
            raise SpecInvalid(f"bad arm radius range {self.arm_radius}")
        if self.n_primary_arms < 1:
            raise SpecInvalid("need at least one primary arm")


def _unit_direction(rng, z_damp):
    v = rng.normal(size=3)
    v[2] *= z_damp
    n = np.linalg.norm(v)
    if n < 1e-9:
        v = np.array([1.0, 0.0, 0.0])
        n = 1.0
    return v / n


def _rasterize_capsule(label, p0, p1, radius):
    """Mark voxels within `radius` of segment p0-p1 (coords are x, y, z)."""
    d, h, w = label.shape
    lo = np.floor(np.minimum(p0, p1) - radius - 1).astype(int)
    hi = np.ceil(np.maximum(p0, p1) + radius + 1).astype(int)
    x0, y0, z0 = np.maximum(lo, 0)
    x1 = min(hi[0] + 1, w)
    y1 = min(hi[1] + 1, h)
    z1 = min(hi[2] + 1, d)
    if x0 >= x1 or y0 >= y1 or z0 >= z1:
        return
    zz, yy, xx = np.meshgrid(
        np.arange(z0, z1), np.arange(y0, y1), np.arange(x0, x1), indexing="ij"
    )
    pts = np.stack([xx, yy, zz], axis=-1).astype(np.float64)
    seg = p1 - p0
    seg_len_sq = float(seg @ seg)
    rel = pts - p0
    if seg_len_sq == 0:
        dist_sq = (rel**2).sum(-1)
    else:
        t = np.clip((rel @ seg) / seg_len_sq, 0.0, 1.0)
        dist_sq = ((rel - t[..., None] * seg) ** 2).sum(-1)
    label[z0:z1, y0:y1, x0:x1] |= dist_sq <= radius * radius


def generate(spec: SynthSpec):
    """Seeded (GrayVolume, LabelVolume) pair; the label is pre-blur truth."""
    w, h, d = spec.dims
    rng = np.random.default_rng(spec.seed)
    center = np.array([w / 2, h / 2, d / 2])
    root = center + rng.uniform(-0.05, 0.05, size=3) * np.array([w, h, d])
    z_damp = d / max(w, h)
    label = np.zeros((d, h, w), dtype=bool)
    max_len = 0.45 * min(w, h)
    for _ in range(spec.n_primary_arms):
        direction = _unit_direction(rng, z_damp)
        length = rng.uniform(0.5, 1.0) * max_len
        radius = rng.uniform(*spec.arm_radius)
        tip = root + direction * length
        _rasterize_capsule(label, root, tip, radius)
        if rng.random() < spec.secondary_arm_probability:
            for _ in range(rng.integers(1, 3)):
                t = rng.uniform(0.25, 0.75)
                branch_point = root + direction * (length * t)
                sub_dir = _unit_direction(rng, z_damp)
                sub_len = length * rng.uniform(0.35, 0.6)
                sub_radius = max(1.0, radius * rng.uniform(0.5, 0.8))
                _rasterize_capsule(
                    label, branch_point, branch_point + sub_dir * sub_len, sub_radius
                )
    gray = np.where(label, np.float64(spec.dendrite_mean), np.float64(spec.background_mean))
    if spec.blur_sigma > 0:
        gray = gaussian_filter(gray, sigma=spec.blur_sigma, mode="nearest")
    if spec.noise_sigma > 0:
        gray = gray + rng.normal(0.0, spec.noise_sigma, size=gray.shape)
    gray = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    return GrayVolume(gray), LabelVolume(label.astype(np.uint8))


def generate_dataset(spec: SynthSpec, count: int):
    """Independent volumes; volume i uses seed spec.seed + i."""
    out = []
    for i in range(count):
        pair_spec = SynthSpec(
            dims=spec.dims,
            n_primary_arms=spec.n_primary_arms,
            secondary_arm_probability=spec.secondary_arm_probability,
            arm_radius=spec.arm_radius,
            background_mean=spec.background_mean,
            dendrite_mean=spec.dendrite_mean,
            blur_sigma=spec.blur_sigma,
            noise_sigma=spec.noise_sigma,
            seed=spec.seed + i,
        )
        out.append(generate(pair_spec))
    return out
