"""Procedural virtual slides: labeled multi-stain tissue images.

A slide is a set of disjoint blob-shaped regions (tumor / tissue / necrosis)
on a white background.  Cell nuclei are counterstain-absorbing ellipses with
Gaussian falloff; their density, size and distortion differ per class:
tumor regions get condensed large distorted nuclei, tissue regions regular
medium ones, necrosis sparse small fragments over pale debris.  Chromogen
stains mark a class-dependent fraction of cells, and a diffuse stroma field
carries the secondary stain.  Optional pen-mark streaks in a separate marker
color produce exclusion areas.  Everything is rendered through the
Beer-Lambert model, so unstained pixels are exactly white.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .constants import BACKGROUND, EXCLUDE, NECROSIS, TISSUE, TUMOR
from .stain import StainProfile, marker_stain, optical_density


@dataclass
class ClassTexture:
    """Nucleus statistics of one tissue class."""

    nucleus_density: float          # expected nuclei per pixel of region area
    nucleus_radius: tuple[float, float]       # semi-major axis range, pixels
    nucleus_eccentricity: tuple[float, float]  # major/minor axis ratio range
    stroma_scale: float             # multiplier on the diffuse secondary stain
    positive_fraction: float        # fraction of cells carrying the chromogen


@dataclass
class LayoutConfig:
    """Geometry and texture parameters of a generated slide."""

    height: int = 192
    width: int = 192
    region_counts: dict[int, int] = field(
        default_factory=lambda: {TUMOR: 2, TISSUE: 2, NECROSIS: 1})
    region_radius: tuple[float, float] = (0.10, 0.17)  # fraction of min(H, W)
    textures: dict[int, ClassTexture] = field(default_factory=lambda: {
        TUMOR: ClassTexture(0.022, (2.2, 4.0), (1.4, 2.8), 0.7, 0.45),
        TISSUE: ClassTexture(0.011, (1.3, 2.1), (1.0, 1.25), 1.0, 0.12),
        NECROSIS: ClassTexture(0.003, (0.7, 1.4), (1.6, 3.2), 0.30, 0.05),
    })
    exclude_prob: float = 0.25
    stroma_level: tuple[float, float] = (0.08, 0.22)
    stain_jitter: float = 0.06      # per-slide wobble of absorption directions
    intensity_jitter: float = 0.25  # per-slide multiplicative stain strength spread
    placement_retries: int = 60

    def validate(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("slide dims must be at least 8x8")
        if not 0 < self.region_radius[0] <= self.region_radius[1] < 0.5:
            raise ValueError("region_radius must be an increasing range inside (0, 0.5)")
        for cls, n in self.region_counts.items():
            if cls not in (TUMOR, TISSUE, NECROSIS):
                raise ValueError(f"region class {cls} is not a tissue class")
            if n < 0:
                raise ValueError("region counts must be >= 0")
        for cls, tx in self.textures.items():
            if tx.nucleus_density < 0:
                raise ValueError("nucleus density must be >= 0")
            if not 0 < tx.nucleus_radius[0] <= tx.nucleus_radius[1]:
                raise ValueError("nucleus radius range must be positive and increasing")
            if not 1.0 <= tx.nucleus_eccentricity[0] <= tx.nucleus_eccentricity[1]:
                raise ValueError("eccentricity range must start at >= 1")
        if not 0 <= self.exclude_prob <= 1:
            raise ValueError("exclude_prob must be a probability")
        if not 0 <= self.stroma_level[0] <= self.stroma_level[1]:
            raise ValueError("stroma_level must be a non-negative increasing range")


@dataclass
class VirtualSlide:
    """Rendered slide with exact per-pixel labels and generator ground truth."""

    image: np.ndarray               # [3,H,W] RGB in (0,1]
    labels: np.ndarray              # [H,W] over {0,1,2,3,255}
    profile: StainProfile
    seed: int
    concentrations: dict[str, np.ndarray]  # per-stain ground-truth maps
    warnings: list[str] = field(default_factory=list)


def _blob_mask(h, w, cy, cx, r0, harm_amps, harm_phases):
    """Rasterize a wobbly blob: radius r(theta) = r0*(1 + sum_k a_k cos(k theta + phi_k))."""
    pad = int(np.ceil(r0 * (1 + harm_amps.sum()))) + 1
    y0, y1 = max(0, int(cy) - pad), min(h, int(cy) + pad + 1)
    x0, x1 = max(0, int(cx) - pad), min(w, int(cx) + pad + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy = yy - cy
    dx = xx - cx
    theta = np.arctan2(dy, dx)
    boundary = r0 * (1 + sum(a * np.cos((k + 2) * theta + p)
                             for k, (a, p) in enumerate(zip(harm_amps, harm_phases))))
    local = np.hypot(dy, dx) <= boundary
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y1, x0:x1] = local
    return mask


def _paint_nucleus(conc, cy, cx, a, b, angle, amp):
    """Add one Gaussian ellipse of absorber onto a concentration map."""
    h, w = conc.shape
    pad = int(np.ceil(2.5 * a)) + 1
    y0, y1 = max(0, int(cy) - pad), min(h, int(cy) + pad + 1)
    x0, x1 = max(0, int(cx) - pad), min(w, int(cx) + pad + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy = yy - cy
    dx = xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dx * ca + dy * sa) / a
    v = (-dx * sa + dy * ca) / b
    conc[y0:y1, x0:x1] += amp * np.exp(-1.5 * (u * u + v * v))


def _smooth_field(rng, h, w, cell=16):
    """Low-frequency random field in [0,1] from a bilinearly upsampled coarse grid."""
    gh = h // cell + 2
    gw = w // cell + 2
    grid = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _pen_streak(rng, h, w):
    """Mask and soft concentration profile of a marker-pen line across the slide."""
    # endpoints on two distinct borders
    sides = rng.permutation(4)[:2]
    pts = []
    for s in sides:
        t = rng.uniform(0.1, 0.9)
        pts.append({0: (0.0, t * w), 1: (h - 1.0, t * w),
                    2: (t * h, 0.0), 3: (t * h, w - 1.0)}[int(s)])
    (ay, ax), (by, bx) = pts
    thickness = rng.uniform(1.5, 4.0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    vy, vx = by - ay, bx - ax
    vv = vy * vy + vx * vx
    t = np.clip(((yy - ay) * vy + (xx - ax) * vx) / vv, 0.0, 1.0)
    dist = np.hypot(yy - (ay + t * vy), xx - (ax + t * vx))
    mask = dist <= thickness
    conc = np.where(mask, 1.8 * np.clip(1.3 - dist / thickness, 0.0, 1.0), 0.0)
    return mask, conc


def synth_slide(profile: StainProfile, layout: LayoutConfig, seed: int) -> VirtualSlide:
    """Generate one labeled virtual slide, deterministic per (profile, layout, seed)."""
    layout.validate()
    rng = np.random.default_rng(seed)
    h, w = layout.height, layout.width

    # per-slide staining variability: lab-to-lab color and strength drift
    eps_actual = []
    strength = []
    for sv in profile.stains:
        wobble = sv.epsilon + layout.stain_jitter * rng.standard_normal(3)
        wobble = np.clip(wobble, 0.0, None)
        n = np.linalg.norm(wobble)
        eps_actual.append(wobble / n if n > 1e-9 else sv.epsilon)
        strength.append(rng.uniform(1 - layout.intensity_jitter, 1 + layout.intensity_jitter))

    labels = np.full((h, w), BACKGROUND, dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    concs = {sv.name: np.zeros((h, w)) for sv in profile.stains}
    counter = concs[profile.stains[0].name]
    secondary = concs[profile.stains[1].name] if len(profile.stains) > 1 else None
    chromogen = concs[profile.stains[-1].name] if len(profile.stains) > 1 else None
    warnings: list[str] = []

    rmin = layout.region_radius[0] * min(h, w)
    rmax = layout.region_radius[1] * min(h, w)
    stroma_base = _smooth_field(rng, h, w)
    stroma_lo, stroma_hi = layout.stroma_level

    for cls in (TUMOR, TISSUE, NECROSIS):
        tx = layout.textures[cls]
        for ridx in range(layout.region_counts.get(cls, 0)):
            mask = None
            for attempt in range(layout.placement_retries):
                shrink = 0.97 ** attempt  # crowded slides: progressively smaller candidates
                r0 = rng.uniform(rmin, max(rmin, rmax * shrink))
                cy = rng.uniform(r0 * 1.3, h - r0 * 1.3)
                cx = rng.uniform(r0 * 1.3, w - r0 * 1.3)
                amps = rng.uniform(0.02, 0.10, size=3)
                phases = rng.uniform(0, 2 * np.pi, size=3)
                cand = _blob_mask(h, w, cy, cx, r0, amps, phases)
                if not (cand & occupied).any():
                    mask = cand
                    break
            if mask is None:
                warnings.append(f"class {cls} region {ridx}: no free placement, skipped")
                continue
            labels[mask] = cls
            occupied |= mask
            area = int(mask.sum())

            # diffuse stroma of the secondary stain
            if secondary is not None:
                level = rng.uniform(stroma_lo, stroma_hi) * tx.stroma_scale
                secondary += mask * level * (0.5 + stroma_base)

            # nuclei on the counterstain; a class-dependent share carries chromogen
            flat = np.flatnonzero(mask)
            n_nuclei = int(round(tx.nucleus_density * area))
            if n_nuclei and flat.size:
                picks = rng.choice(flat, size=n_nuclei)
                for p in picks:
                    cy_n, cx_n = divmod(int(p), w)
                    a = rng.uniform(*tx.nucleus_radius)
                    ecc = rng.uniform(*tx.nucleus_eccentricity)
                    angle = rng.uniform(0, np.pi)
                    amp = rng.uniform(0.55, 1.0)
                    _paint_nucleus(counter, cy_n, cx_n, a, a / ecc, angle, amp)
                    if chromogen is not None and rng.random() < tx.positive_fraction:
                        _paint_nucleus(chromogen, cy_n, cx_n, a * 1.5, (a / ecc) * 1.5,
                                       angle, 0.8)

    marker_conc: Optional[np.ndarray] = None
    if rng.random() < layout.exclude_prob:
        streak_mask, marker_conc = _pen_streak(rng, h, w)
        labels[streak_mask] = EXCLUDE

    eps_list = list(eps_actual)
    conc_list = [concs[sv.name] * s for sv, s in zip(profile.stains, strength)]
    if marker_conc is not None:
        eps_list.append(marker_stain().epsilon)
        conc_list.append(marker_conc)
    image = 10.0 ** (-optical_density(eps_list, conc_list))

    return VirtualSlide(image=image, labels=labels, profile=profile, seed=seed,
                        concentrations=concs, warnings=warnings)
