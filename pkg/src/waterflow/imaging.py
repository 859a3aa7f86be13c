"""Underwater image formation: degradation, restoration, and scene synthesis.

The forward model per channel c is

    I_c(x) = J_c(x) * exp(-beta_D_c * z(x)) + A_c * (1 - exp(-beta_B_c * z(x)))

with a clean image J, depth z, background light A, and per-channel direct /
backscatter attenuation coefficients. Depth units are arbitrary; the
synthesizer normalizes z into [0, 4] and coefficients carry inverse units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import netpbm
from .errors import ContractError, DomainError, PipelineIOError, ShapeError
from .rng import RngState
from .validation import check_array_rank, check_finite, check_in_unit_range

DEPTH_SCALE = 4.0  # depth units encoded as full-scale in depth.pgm
DARK_FRACTION = 0.01
DEEP_QUANTILE = 0.75
TRANSMISSION_FLOOR = 1e-3
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ImagingParams:
    """Per-channel physical constants of one water column."""

    A: np.ndarray
    beta_D: np.ndarray
    beta_B: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        bd = np.asarray(self.beta_D, dtype=np.float64)
        bb = self.beta_B if self.beta_B is not None else bd
        bb = np.asarray(bb, dtype=np.float64)
        for name, v in (("A", A), ("beta_D", bd), ("beta_B", bb)):
            if v.shape != (3,):
                raise ShapeError(f"ImagingParams.{name}: expected 3 per-channel values, got {v.shape}")
            if not np.all(np.isfinite(v)):
                raise ContractError(f"ImagingParams.{name}: non-finite values")
        if np.any(A < 0) or np.any(A > 1):
            raise DomainError("ImagingParams.A must lie in [0, 1]")
        if np.any(bd <= 0) or np.any(bb <= 0):
            raise DomainError("ImagingParams attenuation coefficients must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "beta_D", bd)
        object.__setattr__(self, "beta_B", bb)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "beta_D": self.beta_D.tolist(), "beta_B": self.beta_B.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ImagingParams":
        return cls(np.asarray(d["A"]), np.asarray(d["beta_D"]), np.asarray(d["beta_B"]))


@dataclass
class Scene:
    """One synthetic quadruple: clean image, depth, mask, degraded image."""

    J: np.ndarray  # (3, H, W) in [0, 1]
    z: np.ndarray  # (H, W) >= 0
    G: np.ndarray  # (H, W) in {0, 1}
    I: np.ndarray  # (3, H, W) in [0, 1]
    clamp_fraction: float = 0.0

    def __post_init__(self):
        hw = self.z.shape
        if self.J.shape != (3, *hw) or self.I.shape != (3, *hw) or self.G.shape != hw:
            raise ShapeError(
                f"Scene components disagree: J {self.J.shape}, z {self.z.shape}, G {self.G.shape}, I {self.I.shape}"
            )


@dataclass
class Degraded:
    I: np.ndarray
    clamped: np.ndarray  # bool (3, H, W), pixels saturated by the [0, 1] clamp
    clamp_fraction: float


@dataclass
class Restored:
    J_hat: np.ndarray
    clamp_fraction: float


@dataclass
class BackgroundLight:
    A: np.ndarray  # (3,)
    low_confidence: bool


def _check_depth(z: np.ndarray) -> np.ndarray:
    z = check_array_rank(np.asarray(z, dtype=np.float64), 2, "depth")
    check_finite(z, "depth")
    if np.min(z) < 0:
        raise DomainError(f"depth must be non-negative, min is {np.min(z):.4g}")
    return z


def transmission(z: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Per-channel transmission maps exp(-beta_c * z), shape (3, H, W)."""
    z = _check_depth(z)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (3,):
        raise ShapeError(f"beta: expected 3 per-channel values, got {beta.shape}")
    if np.any(beta <= 0) or not np.all(np.isfinite(beta)):
        raise DomainError("beta must be positive and finite")
    return np.exp(-beta[:, None, None] * z[None])


def degrade(J: np.ndarray, z: np.ndarray, params: ImagingParams) -> Degraded:
    """Apply the forward model; clamps to [0, 1] and counts saturated pixels."""
    J = np.asarray(J, dtype=np.float64)
    z = _check_depth(z)
    if J.shape != (3, *z.shape):
        raise ShapeError(f"degrade: J dims {J.shape} vs depth dims {z.shape}")
    check_in_unit_range(J, "J")
    t_d = transmission(z, params.beta_D)
    t_b = transmission(z, params.beta_B)
    raw = J * t_d + params.A[:, None, None] * (1.0 - t_b)
    clamped = (raw < 0.0) | (raw > 1.0)
    return Degraded(np.clip(raw, 0.0, 1.0), clamped, float(clamped.mean()))


def restore(I: np.ndarray, z: np.ndarray, params: ImagingParams) -> Restored:
    """Invert the forward model with a transmission floor of 1e-3."""
    I = np.asarray(I, dtype=np.float64)
    z = _check_depth(z)
    if I.shape != (3, *z.shape):
        raise ShapeError(f"restore: I dims {I.shape} vs depth dims {z.shape}")
    t_d = transmission(z, params.beta_D)
    t_b = transmission(z, params.beta_B)
    raw = (I - params.A[:, None, None] * (1.0 - t_b)) / np.maximum(t_d, TRANSMISSION_FLOOR)
    clamped = (raw < 0.0) | (raw > 1.0)
    return Restored(np.clip(raw, 0.0, 1.0), float(clamped.mean()))


def restore_with_maps(I: np.ndarray, B: np.ndarray, T_D: np.ndarray) -> np.ndarray:
    """Restore from explicit backscatter / transmission maps (estimation path)."""
    if I.shape != B.shape or I.shape != T_D.shape:
        raise ShapeError(f"restore_with_maps: dims {I.shape}, {B.shape}, {T_D.shape} disagree")
    return np.clip((I - B) / np.maximum(T_D, TRANSMISSION_FLOOR), 0.0, 1.0)


def estimate_background_light(I: np.ndarray, z: np.ndarray) -> BackgroundLight:
    """Dark-pixel estimate of A: darkest 1% (min across channels) of the deepest quartile."""
    I = np.asarray(I, dtype=np.float64)
    z = _check_depth(z)
    if I.shape != (3, *z.shape):
        raise ShapeError(f"estimate_background_light: I dims {I.shape} vs depth dims {z.shape}")
    if z.size < 100:
        raise ContractError(f"estimate_background_light needs at least 100 pixels, got {z.size}")
    if float(np.ptp(I)) < 1e-9:
        return BackgroundLight(I.reshape(3, -1).mean(axis=1), low_confidence=True)
    deep = z >= np.quantile(z, DEEP_QUANTILE)
    flat = I.reshape(3, -1)[:, deep.ravel()]
    min_channel = flat.min(axis=0)
    k = max(1, int(np.ceil(DARK_FRACTION * min_channel.size)))
    darkest = np.argpartition(min_channel, k - 1)[:k]
    estimate = flat[:, darkest].mean(axis=1)
    low_confidence = bool(np.min(min_channel[darkest]) >= 0.5)
    return BackgroundLight(estimate, low_confidence)


# ---------------------------------------------------------------------------
# synthetic scenes


def _smooth_noise(gen, shape, sigma):
    field_ = gen.standard_normal(shape)
    field_ = gaussian_filter(field_, sigma=sigma, mode="wrap")
    lo, hi = field_.min(), field_.max()
    return (field_ - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def _ellipse_field(gen, h, w):
    """Normalized squared distance to a random rotated ellipse (<= 1 inside)."""
    cy = gen.uniform(0.22, 0.78) * h
    cx = gen.uniform(0.22, 0.78) * w
    ry = gen.uniform(0.08, 0.2) * h
    rx = gen.uniform(0.08, 0.22) * w
    theta = gen.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2


def synth_scene(rng: RngState, size: tuple[int, int], difficulty: float) -> tuple[Scene, ImagingParams]:
    """Generate one (J, z, G, I) quadruple plus the imaging parameters used."""
    h, w = size
    if h < 16 or w < 16:
        raise ContractError(f"scene size must be at least 16x16, got {h}x{w}")
    if not 0.0 <= difficulty <= 1.0:
        raise DomainError(f"difficulty must lie in [0, 1], got {difficulty}")
    gen = rng.generator()
    d = float(difficulty)

    # wavelength-ordered direct attenuation, red fastest
    beta_red = 0.004 + 0.008 * gen.uniform() + d * gen.uniform(0.6, 1.1)
    ratio_g = gen.uniform(0.5, 0.8)
    ratio_b = gen.uniform(0.5, 0.9)
    beta_d = np.array([beta_red, beta_red * ratio_g, beta_red * ratio_g * ratio_b])
    # backscatter attenuation: weak wavelength dependence, blue scatters most
    bb = 0.05 + 0.05 * gen.uniform() + d * gen.uniform(0.7, 1.1)
    beta_b = bb * np.array([0.9, 0.95, 1.0])
    # background light: blue-green water color scaled by difficulty
    mag = 0.02 + 0.03 * gen.uniform() + d * (0.25 + 0.2 * gen.uniform())
    a = np.clip(mag * np.array([0.35 + 0.2 * gen.uniform(), 0.75 + 0.15 * gen.uniform(), 1.0]), 0.0, 1.0)
    params = ImagingParams(A=a, beta_D=beta_d, beta_B=beta_b)

    # foreground objects
    n_obj = int(gen.integers(1, 4))
    e_min = np.full((h, w), np.inf)
    for _ in range(n_obj):
        e_min = np.minimum(e_min, _ellipse_field(gen, h, w))
    G = (e_min <= 1.0).astype(np.float64)
    soft = np.clip(1.25 - e_min, 0.0, 1.0) ** 0.75  # soft blend band just outside the rim

    # background texture with dark patches in the deepest area
    base = gen.uniform(0.2, 0.7, size=3)
    texture = _smooth_noise(gen, (h, w), sigma=max(2.0, h / 10)) * 0.5 + _smooth_noise(
        gen, (h, w), sigma=max(1.0, h / 32)
    ) * 0.5
    J = np.clip(base[:, None, None] + 0.3 * (texture[None] - 0.5), 0.05, 0.95)

    # depth: objects sit close, background recedes with smooth variation
    proximity = np.exp(-np.maximum(e_min - 1.0, 0.0) * gen.uniform(0.5, 1.5))
    depth_noise = _smooth_noise(gen, (h, w), sigma=max(2.0, h / 8))
    obj_depth = gen.uniform(0.03, 0.15)
    raw_depth = proximity * obj_depth + (1.0 - proximity) * (0.55 + 0.45 * depth_noise)
    z_min, z_max = gen.uniform(0.05, 0.3), gen.uniform(3.2, 4.0)
    lo, hi = raw_depth.min(), raw_depth.max()
    z = z_min + (z_max - z_min) * (raw_depth - lo) / max(hi - lo, 1e-9)

    # dark patches stamped where the water column is deepest
    dark = np.zeros((h, w))
    deep_cut = np.quantile(z, 0.9)
    for _ in range(2):
        flat_choices = np.flatnonzero((z >= deep_cut).ravel())
        idx = int(flat_choices[int(gen.integers(0, len(flat_choices)))])
        cy, cx = divmod(idx, w)
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = ((yy - cy) / (0.13 * h)) ** 2 + ((xx - cx) / (0.13 * w)) ** 2
        dark = np.maximum(dark, np.clip(1.2 - r2, 0.0, 1.0))
    J = J * (1.0 - 0.93 * dark[None])

    # paint objects with a contrasting color and mild shading
    for _ in range(8):
        color = gen.uniform(0.3, 0.95, size=3)
        if np.abs(color - base).sum() > 0.45:
            break
    shading = 0.85 + 0.3 * _smooth_noise(gen, (h, w), sigma=max(1.0, h / 16))
    J = J * (1.0 - soft[None]) + (color[:, None, None] * shading[None]) * soft[None]
    J = np.clip(J, 0.0, 1.0)

    degraded = degrade(J, z, params)
    scene = Scene(J=J, z=z, G=G, I=degraded.I, clamp_fraction=degraded.clamp_fraction)
    return scene, params


# ---------------------------------------------------------------------------
# on-disk scene layout: {I.ppm, J.ppm, depth.pgm, mask.pgm, scene.json}


def save_scene(folder, scene: Scene, params: ImagingParams, seed: int, index: int, difficulty: float) -> None:
    folder = Path(folder)
    try:
        folder.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineIOError(f"cannot create scene folder {folder}: {exc}") from exc
    netpbm.write_ppm(folder / "I.ppm", scene.I)
    netpbm.write_ppm(folder / "J.ppm", scene.J)
    netpbm.write_pgm(folder / "depth.pgm", scene.z / DEPTH_SCALE)
    netpbm.write_pgm(folder / "mask.pgm", scene.G)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "params": params.to_dict(),
        "seed": seed,
        "index": index,
        "difficulty": difficulty,
        "clamp_fraction": scene.clamp_fraction,
        "depth_scale": DEPTH_SCALE,
    }
    (folder / "scene.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_scene(folder) -> tuple[Scene, ImagingParams, dict]:
    folder = Path(folder)
    try:
        sidecar = json.loads((folder / "scene.json").read_text())
    except OSError as exc:
        raise PipelineIOError(f"cannot read scene sidecar in {folder}: {exc}") from exc
    I = netpbm.read_ppm(folder / "I.ppm")
    J = netpbm.read_ppm(folder / "J.ppm")
    z = netpbm.read_pgm(folder / "depth.pgm") * sidecar.get("depth_scale", DEPTH_SCALE)
    G = netpbm.read_mask(folder / "mask.pgm")
    params = ImagingParams.from_dict(sidecar["params"])
    scene = Scene(J=J, z=z, G=G, I=I, clamp_fraction=sidecar.get("clamp_fraction", 0.0))
    return scene, params, sidecar
