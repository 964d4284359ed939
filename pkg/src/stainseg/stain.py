"""Beer-Lambert absorption model for brightfield stains.

Transmitted intensity through stained tissue follows I_t = I0 * 10^(-OD)
per color channel, with OD = eps * C summed over co-located stains (the
specimen thickness is folded into the concentration).  Optical densities
add; transmittances multiply.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np


@dataclass(frozen=True)
class StainVector:
    """Named absorption direction: eps per R,G,B channel, unit Euclidean length."""

    name: str
    epsilon: np.ndarray

    def __init__(self, name: str, epsilon):
        eps = np.asarray(epsilon, dtype=np.float64)
        if eps.shape != (3,):
            raise ValueError(f"stain {name!r}: epsilon must have 3 components, got {eps.shape}")
        if (eps < 0).any():
            raise ValueError(f"stain {name!r}: epsilon components must be non-negative")
        norm = float(np.linalg.norm(eps))
        if norm <= 0:
            raise ValueError(f"stain {name!r}: at least one epsilon component must be positive")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "epsilon", eps / norm)


@dataclass(frozen=True)
class StainProfile:
    """An ordered set of 1-3 stains; the first is the nuclear counterstain."""

    display_name: str
    stains: tuple[StainVector, ...] = field(default=())

    def __post_init__(self):
        if not 1 <= len(self.stains) <= 3:
            raise ValueError(f"profile {self.display_name!r} needs 1-3 stains, got {len(self.stains)}")
        names = [s.name for s in self.stains]
        if len(set(names)) != len(names):
            raise ValueError(f"profile {self.display_name!r} has duplicate stain names: {names}")


def transmittance(od: float) -> float:
    """Fraction of incident light surviving an optical density: 10^(-od), in (0, 1]."""
    if od < 0:
        raise ValueError(f"optical density must be >= 0, got {od}")
    return float(10.0 ** (-od))


def optical_density(eps_list: Iterable[np.ndarray], conc_list: Iterable[np.ndarray]) -> np.ndarray:
    """Total OD map [3,H,W] from per-stain absorption vectors and concentration maps."""
    od = None
    for eps, c in zip(eps_list, conc_list):
        term = eps.reshape(3, 1, 1) * c[None, :, :]
        od = term if od is None else od + term
    if od is None:
        raise ValueError("need at least one stain")
    return od


def render(concentrations, profile: StainProfile, intensity: float = 1.0) -> np.ndarray:
    """Render an RGB image [3,H,W] from per-stain concentration maps.

    ``concentrations`` holds one non-negative [H,W] map per profile stain,
    in profile order.
    """
    maps = [np.asarray(c, dtype=np.float64) for c in concentrations]
    if len(maps) != len(profile.stains):
        raise ValueError(
            f"profile {profile.display_name!r} has {len(profile.stains)} stains "
            f"but {len(maps)} concentration maps were given")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ValueError("concentration maps must share one shape")
        if (m < 0).any():
            raise ValueError("concentrations must be non-negative")
    od = optical_density([s.epsilon for s in profile.stains], maps)
    return intensity * 10.0 ** (-od)


# -- stain color registry and builtin profiles --

def _read_stain_lines(lines: Iterable[str], source: str) -> dict[str, StainVector]:
    out: dict[str, StainVector] = {}
    for ln, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{source}:{ln}: expected 'name r g b', got {line!r}")
        name = parts[0]
        try:
            rgb = [float(p) for p in parts[1:]]
        except ValueError as e:
            raise ValueError(f"{source}:{ln}: bad float in {line!r}") from e
        if name in out:
            raise ValueError(f"{source}:{ln}: duplicate stain {name!r}")
        out[name] = StainVector(name, rgb)
    if not out:
        raise ValueError(f"{source}: no stains found")
    return out


def load_stain_file(path: Union[str, Path]) -> dict[str, StainVector]:
    """Parse a plain-text stain file: one `name r g b` line per stain."""
    path = Path(path)
    return _read_stain_lines(path.read_text().splitlines(), str(path))


def builtin_colors() -> dict[str, StainVector]:
    """The packaged absorption table for the six principal colors plus pen marker."""
    text = importlib.resources.files("stainseg").joinpath("profiles/colors.txt").read_text()
    return _read_stain_lines(text.splitlines(), "profiles/colors.txt")


_BUILTIN_PROFILES = {
    # counterstain first, chromogens after
    "he": ("blue", "pink"),
    "ihc-brown": ("blue", "brown"),
    "ihc-brown-red": ("blue", "brown", "red"),
    "ihc-purple-yellow": ("blue", "purple", "yellow"),
}


def builtin_profile_names() -> list[str]:
    return sorted(_BUILTIN_PROFILES)


def get_profile(name: str) -> StainProfile:
    """Look up a builtin staining profile by name (e.g. 'he', 'ihc-brown-red')."""
    try:
        color_names = _BUILTIN_PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown stain profile {name!r}; builtin: {builtin_profile_names()}") from None
    colors = builtin_colors()
    return StainProfile(display_name=name, stains=tuple(colors[c] for c in color_names))


def marker_stain() -> StainVector:
    """The pen-marker color used for exclusion artifacts (not part of any profile)."""
    return builtin_colors()["marker"]


def profile_from_file(path: Union[str, Path], display_name: str | None = None) -> StainProfile:
    """Build a profile from a stain file, preserving line order."""
    stains = load_stain_file(path)
    return StainProfile(display_name=display_name or Path(path).stem, stains=tuple(stains.values()))
