"""Physical prior features and their staged hierarchical encoding.

Eight feature families are computed from a degraded image and its depth map:
backscatter B, depth-gradient magnitude, per-bin attenuation estimates,
direct transmission, cross-channel transmission ratios, local channel
variance, the restored image, and a pair of global intensity maps. The
families are grouped into four stage inputs and each group is squeezed
through a small trainable conv encoder (PPE) to 1/4 .. 1/32 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from . import autodiff as ad
from .errors import ContractError, EstimationError, ShapeError
from .imaging import ImagingParams, estimate_background_light, restore_with_maps, transmission
from .validation import check_array_rank, check_finite

DEFAULT_BINS = 8
MIN_BIN_PIXELS = 16
EXCLUSION_THRESHOLD = 1e-3
RATIO_EPS = 1e-6
VARIANCE_WINDOW = 7
STAGE_CHANNELS = (16, 32, 64, 64)

FEATURE_CHANNELS = {
    "B": 3, "grad_z": 1, "beta_D_hat": 3, "T_D": 3, "R": 2, "Var": 3, "J_hat": 3, "Int": 2,
}
# shallow: boundary cues; middle: attenuation, then channel statistics; deep: global
DEFAULT_STAGE_MAP = (("B", "grad_z"), ("T_D", "beta_D_hat"), ("R", "Var"), ("J_hat", "Int"))
STAGE_INPUT_CHANNELS = (4, 6, 5, 5)


def validate_stage_map(stage_map) -> tuple[tuple[str, ...], ...]:
    """A stage map assigns each of the eight families to exactly one stage."""
    from .errors import ConfigError

    stages = tuple(tuple(s) for s in stage_map)
    if len(stages) != 4:
        raise ConfigError(f"stage map must have 4 stages, got {len(stages)}")
    flat = [name for s in stages for name in s]
    unknown = sorted(set(flat) - set(FEATURE_CHANNELS))
    if unknown:
        raise ConfigError(f"stage map names unknown features: {unknown}")
    missing = sorted(set(FEATURE_CHANNELS) - set(flat))
    if missing or len(flat) != len(FEATURE_CHANNELS):
        raise ConfigError(
            f"stage map must cover each feature family exactly once; missing {missing}, got {flat}"
        )
    return stages


def stage_input_channels(stage_map=DEFAULT_STAGE_MAP) -> tuple[int, ...]:
    return tuple(sum(FEATURE_CHANNELS[n] for n in stage) for stage in validate_stage_map(stage_map))


@dataclass
class PriorStack:
    """The eight feature families plus the bookkeeping needed to use them.

    `z` and `bin_edges` are not features; they let stage assembly broadcast
    the per-bin attenuation estimates back onto the pixel grid.
    """

    B: np.ndarray           # (3, H, W) backscatter
    grad_z: np.ndarray      # (1, H, W) depth-gradient magnitude
    beta_D_hat: np.ndarray  # (3, K) per-bin attenuation estimates
    T_D: np.ndarray         # (3, H, W) direct transmission
    R: np.ndarray           # (2, H, W) transmission ratios red/green, red/blue
    Var: np.ndarray         # (3, H, W) local channel variance
    J_hat: np.ndarray       # (3, H, W) restored image
    Int: np.ndarray         # (2, H, W) backscatter / attenuation intensity
    z: np.ndarray           # (H, W)
    bin_edges: np.ndarray   # (K + 1,)

    def __post_init__(self):
        missing = [
            name
            for name in ("B", "grad_z", "beta_D_hat", "T_D", "R", "Var", "J_hat", "Int")
            if getattr(self, name) is None
        ]
        if missing:
            raise ContractError(f"PriorStack is missing feature families: {missing}")
        hw = self.z.shape
        expected = {"B": (3, *hw), "grad_z": (1, *hw), "T_D": (3, *hw), "R": (2, *hw),
                    "Var": (3, *hw), "J_hat": (3, *hw), "Int": (2, *hw)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"PriorStack.{name}: expected dims {shape}, got {arr.shape}")
            check_finite(arr, f"PriorStack.{name}")
        if self.beta_D_hat.ndim != 2 or self.beta_D_hat.shape[0] != 3:
            raise ShapeError(f"PriorStack.beta_D_hat: expected (3, K), got {self.beta_D_hat.shape}")
        check_finite(self.beta_D_hat, "PriorStack.beta_D_hat")
        if self.bin_edges.shape != (self.beta_D_hat.shape[1] + 1,):
            raise ShapeError("PriorStack.bin_edges length disagrees with beta_D_hat bins")
        if np.any(self.T_D <= 0) or np.any(self.T_D > 1):
            raise ContractError("PriorStack.T_D must lie in (0, 1]")
        if np.any(self.Var < 0):
            raise ContractError("PriorStack.Var must be non-negative")
        if np.any(self.R <= 0):
            raise ContractError("PriorStack.R must be positive")
        if np.any(self.B < 0) or np.any(self.B > 1):
            raise ContractError("PriorStack.B must lie in [0, 1]")


@dataclass
class BetaEstimate:
    values: np.ndarray     # (3, K)
    inherited: np.ndarray  # (3, K) bool, True where a bin copied its neighbour
    edges: np.ndarray      # (K + 1,)


def backscatter_map(z: np.ndarray, A: np.ndarray, beta_B: np.ndarray) -> np.ndarray:
    """B_c(x) = A_c * (1 - exp(-beta_B_c * z(x)))."""
    if z is None:
        raise ContractError("backscatter_map requires a depth map")
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (3,):
        raise ShapeError(f"A: expected 3 per-channel values, got {A.shape}")
    return A[:, None, None] * (1.0 - transmission(z, beta_B))


def depth_gradient(z: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude, replicate-padded, shape (1, H, W)."""
    z = check_array_rank(np.asarray(z, dtype=np.float64), 2, "depth")
    h, w = z.shape
    if h < 3 or w < 3:
        raise ShapeError(f"depth_gradient needs at least 3x3, got {h}x{w}")
    zp = np.pad(z, 1, mode="edge")
    dy = (zp[2:, 1:-1] - zp[:-2, 1:-1]) * 0.5
    dx = (zp[1:-1, 2:] - zp[1:-1, :-2]) * 0.5
    return np.sqrt(dx * dx + dy * dy)[None]


def bin_index(z: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Map depths to bin indices 0..K-1 under the given edges."""
    k = len(edges) - 1
    return np.clip(np.searchsorted(edges, z, side="right") - 1, 0, k - 1)


def estimate_beta_D(I: np.ndarray, z: np.ndarray, A_hat: np.ndarray, bins: int = DEFAULT_BINS) -> BetaEstimate:
    """Depth-binned least-squares attenuation estimate.

    Within each depth bin, fits -log(I_c - A_c) against z; the slope is the
    per-bin attenuation for that channel. A bin counts as populated when it
    keeps at least 16 pixels after excluding I_c - A_c <= 1e-3 and its depths
    actually vary. Unpopulated bins inherit the nearest populated value and
    are flagged.
    """
    I = np.asarray(I, dtype=np.float64)
    z = check_array_rank(np.asarray(z, dtype=np.float64), 2, "depth")
    if I.shape != (3, *z.shape):
        raise ShapeError(f"estimate_beta_D: I dims {I.shape} vs depth dims {z.shape}")
    A_hat = np.asarray(A_hat, dtype=np.float64).reshape(-1)
    if A_hat.size == 1:
        A_hat = np.repeat(A_hat, 3)
    if A_hat.shape != (3,):
        raise ShapeError(f"A_hat: expected scalar or 3 values, got shape {A_hat.shape}")
    if bins < 1:
        raise ContractError(f"need at least one depth bin, got {bins}")

    zf = z.ravel()
    lo, hi = float(zf.min()), float(zf.max())
    edges = np.linspace(lo, hi, bins + 1)
    idx = bin_index(zf, edges)

    values = np.full((3, bins), np.nan)
    inherited = np.zeros((3, bins), dtype=bool)
    for c in range(3):
        signal = I[c].ravel() - A_hat[c]
        valid = signal > EXCLUSION_THRESHOLD
        y = np.where(valid, -np.log(np.maximum(signal, EXCLUSION_THRESHOLD)), 0.0)
        for k in range(bins):
            sel = valid & (idx == k)
            if int(sel.sum()) < MIN_BIN_PIXELS:
                continue
            zs = zf[sel]
            zc = zs - zs.mean()
            denom = float(np.dot(zc, zc))
            if denom <= 1e-12:
                continue
            values[c, k] = float(np.dot(zc, y[sel] - y[sel].mean()) / denom)
        populated = np.flatnonzero(~np.isnan(values[c]))
        if populated.size == 0:
            raise EstimationError(
                f"estimate_beta_D: no depth bin has {MIN_BIN_PIXELS}+ usable pixels with depth "
                f"variation for channel {c}"
            )
        for k in range(bins):
            if np.isnan(values[c, k]):
                nearest = populated[np.argmin(np.abs(populated - k))]
                values[c, k] = values[c, nearest]
                inherited[c, k] = True
    return BetaEstimate(values=values, inherited=inherited, edges=edges)


def transmission_ratio(T_D: np.ndarray) -> np.ndarray:
    """R = (T_r/T_g, T_r/T_b) with the denominators floored at 1e-6."""
    if T_D.ndim != 3 or T_D.shape[0] != 3:
        raise ShapeError(f"transmission_ratio: expected (3, H, W), got {T_D.shape}")
    return np.stack([T_D[0] / np.maximum(T_D[1], RATIO_EPS), T_D[0] / np.maximum(T_D[2], RATIO_EPS)])


def channel_variance(I: np.ndarray, window: int = VARIANCE_WINDOW) -> np.ndarray:
    """Per-channel local variance over a replicate-padded square window."""
    if I.ndim != 3 or I.shape[0] != 3:
        raise ShapeError(f"channel_variance: expected (3, H, W), got {I.shape}")
    mean = uniform_filter(I, size=(1, window, window), mode="nearest")
    mean_sq = uniform_filter(I * I, size=(1, window, window), mode="nearest")
    return np.maximum(mean_sq - mean * mean, 0.0)


def intensity_maps(B: np.ndarray, T_D: np.ndarray) -> np.ndarray:
    """Int = (mean_c B_c, 1 - mean_c T_D_c), shape (2, H, W)."""
    if B.shape != T_D.shape or B.ndim != 3 or B.shape[0] != 3:
        raise ShapeError(f"intensity_maps: expected matching (3, H, W), got {B.shape} and {T_D.shape}")
    return np.stack([B.mean(axis=0), 1.0 - T_D.mean(axis=0)])


def extract_priors(
    I: np.ndarray,
    z: np.ndarray,
    params: ImagingParams | None = None,
    bins: int = DEFAULT_BINS,
    strict: bool = True,
) -> tuple[PriorStack, dict]:
    """Assemble the full PriorStack plus an info dict describing the estimate.

    With known imaging parameters, B and T_D come from the exact forward
    model; the per-bin attenuation feature is still estimated from the image
    so that the feature reflects what is recoverable. Without parameters,
    everything is estimated: A from dark pixels, beta per depth bin, T_D by
    bin lookup, and beta_B falls back to the per-channel mean direct estimate.

    strict=False swallows a degenerate regression (e.g. constant depth): the
    attenuation table falls back to zeros, which yields the no-degradation
    limit T_D = 1, B = 0, and the info dict flags it.
    """
    I = np.asarray(I, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    info: dict = {"degenerate_regression": False, "low_confidence_A": False}
    if params is not None:
        A = params.A
        B = backscatter_map(z, params.A, params.beta_B)
        T_D = transmission(z, params.beta_D)
    else:
        bg = estimate_background_light(I, z)
        A = bg.A
        info["low_confidence_A"] = bg.low_confidence
    info["A_hat"] = A.tolist()
    try:
        est = estimate_beta_D(I, z, A, bins=bins)
    except EstimationError:
        if strict:
            raise
        lo = float(z.min())
        est = BetaEstimate(
            values=np.zeros((3, bins)),
            inherited=np.ones((3, bins), dtype=bool),
            edges=np.linspace(lo, lo + 1.0, bins + 1),
        )
        info["degenerate_regression"] = True
    if params is None:
        beta_map = est.values[:, bin_index(z, est.edges)]
        T_D = np.clip(np.exp(-beta_map * z[None]), RATIO_EPS, 1.0)
        beta_b = np.maximum(est.values.mean(axis=1), RATIO_EPS)
        B = np.clip(backscatter_map(z, A, beta_b), 0.0, 1.0)
    info["beta_D_hat"] = est.values.tolist()
    info["bin_edges"] = est.edges.tolist()
    info["inherited_bins"] = est.inherited.tolist()
    stack = PriorStack(
        B=B,
        grad_z=depth_gradient(z),
        beta_D_hat=est.values,
        T_D=T_D,
        R=transmission_ratio(T_D),
        Var=channel_variance(I),
        J_hat=restore_with_maps(I, B, T_D),
        Int=intensity_maps(B, T_D),
        z=z,
        bin_edges=est.edges,
    )
    return stack, info


def compute_priors(
    I: np.ndarray,
    z: np.ndarray,
    params: ImagingParams | None = None,
    bins: int = DEFAULT_BINS,
) -> PriorStack:
    """extract_priors without the info dict; raises on degenerate regressions."""
    stack, _ = extract_priors(I, z, params=params, bins=bins, strict=True)
    return stack


def stage_inputs(stack: PriorStack, stage_map=DEFAULT_STAGE_MAP) -> list[np.ndarray]:
    """Group the eight families into the four stage input tensors.

    The default map puts boundary cues (backscatter, depth gradient) in
    stage 1, distance-varying attenuation (transmission plus the per-bin
    estimates broadcast by depth-bin lookup) in stage 2, channel-difference
    statistics in stage 3, and the global constraints in stage 4.
    """
    stages = validate_stage_map(stage_map)
    maps = {
        name: getattr(stack, name)
        for name in FEATURE_CHANNELS
        if name != "beta_D_hat"
    }
    maps["beta_D_hat"] = stack.beta_D_hat[:, bin_index(stack.z, stack.bin_edges)]
    return [np.concatenate([maps[name] for name in stage]) for stage in stages]


@dataclass
class StagedPriors:
    """Encoded stage features at 1/4, 1/8, 1/16, 1/32 of the input resolution."""

    f1: ad.Tensor
    f2: ad.Tensor
    f3: ad.Tensor
    f4: ad.Tensor

    def __post_init__(self):
        feats = [self.f1, self.f2, self.f3, self.f4]
        for a, b in zip(feats, feats[1:]):
            ha, wa = a.data.shape[2], a.data.shape[3]
            hb, wb = b.data.shape[2], b.data.shape[3]
            if (ha, wa) != (2 * hb, 2 * wb):
                raise ShapeError(f"stage dims must halve: got {(ha, wa)} then {(hb, wb)}")
        for i, f in enumerate(feats, start=1):
            check_finite(f.data, f"StagedPriors.f{i}")

    def tensors(self) -> list[ad.Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]


class StageEncoder:
    """Four per-stage conv encoders (PPE): pool to half the target scale, then
    two stride-2 conv/norm/SiLU layers."""

    def __init__(self, store: ad.ParameterStore, gen: np.random.Generator,
                 in_channels=STAGE_INPUT_CHANNELS, out_channels=STAGE_CHANNELS, prefix: str = "ppe"):
        self.in_channels = tuple(in_channels)
        self.out_channels = tuple(out_channels)
        self.params = {}
        for n, (cin, cout) in enumerate(zip(self.in_channels, self.out_channels), start=1):
            layers = {}
            for layer, (ci, co) in (("conv1", (cin, cout)), ("conv2", (cout, cout))):
                std = np.sqrt(2.0 / (ci * 9))
                layers[f"{layer}.w"] = store.create(
                    f"{prefix}{n}.{layer}.w", gen.normal(0.0, std, size=(co, ci, 3, 3))
                )
                layers[f"{layer}.b"] = store.create(f"{prefix}{n}.{layer}.b", np.zeros(co))
            for ln in ("norm1", "norm2"):
                layers[f"{ln}.gain"] = store.create(f"{prefix}{n}.{ln}.gain", np.ones(cout))
                layers[f"{ln}.shift"] = store.create(f"{prefix}{n}.{ln}.shift", np.zeros(cout))
            self.params[n] = layers

    def encode(self, inputs: list[ad.Tensor]) -> list[ad.Tensor]:
        """inputs: four (N, C_n, H, W) tensors at full resolution."""
        if len(inputs) != 4:
            raise ShapeError(f"StageEncoder.encode expects 4 stage inputs, got {len(inputs)}")
        outs = []
        for n, x in enumerate(inputs, start=1):
            if x.data.shape[1] != self.in_channels[n - 1]:
                raise ShapeError(
                    f"stage {n} input has {x.data.shape[1]} channels, expected {self.in_channels[n - 1]}"
                )
            if n > 1:
                x = ad.downsample_avg(x, 2 ** (n - 1))
            p = self.params[n]
            groups = ad.group_count(self.out_channels[n - 1])
            x = ad.conv2d(x, p["conv1.w"], p["conv1.b"], stride=2, pad=1)
            x = ad.silu(ad.group_norm(x, groups, p["norm1.gain"], p["norm1.shift"]))
            x = ad.conv2d(x, p["conv2.w"], p["conv2.b"], stride=2, pad=1)
            x = ad.silu(ad.group_norm(x, groups, p["norm2.gain"], p["norm2.shift"]))
            outs.append(x)
        return outs


def encode_stages(stack: PriorStack, encoder: StageEncoder) -> StagedPriors:
    """Single-sample convenience wrapper around StageEncoder.encode."""
    h, w = stack.z.shape
    if h % 32 or w % 32:
        raise ShapeError(f"stage encoding needs dims divisible by 32, got {h}x{w}")
    inputs = [ad.constant(g[None]) for g in stage_inputs(stack)]
    f1, f2, f3, f4 = encoder.encode(inputs)
    return StagedPriors(f1=f1, f2=f2, f3=f3, f4=f4)
