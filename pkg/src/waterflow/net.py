"""Conditional vector-field network.

A small conv pyramid embeds the degraded image and the flow state X_t at
strides 4/8/16/32, each level is modulated by a sinusoidal time embedding,
fused with the staged physical priors (or zeros when priors are absent), and
decoded coarsest-to-finest into full-resolution mask logits. The final conv
is zero-initialized so a fresh network always emits logits of exactly zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor_io
from .errors import ConfigError, ContractError, PipelineIOError, ShapeError
from .priors import STAGE_INPUT_CHANNELS, StageEncoder

TIME_DIM = 64
TIME_SCALE = 1000.0
DEFAULT_CHANNELS = (16, 32, 64, 64)
DEFAULT_HEAD_CHANNELS = 8
CHECKPOINT_MAGIC = b"WFCK"
FINGERPRINT_BYTES = 32


def sinusoidal_time_embedding(t: float, dim: int = TIME_DIM) -> np.ndarray:
    """Interleaved (sin, cos) pairs: vector[2i] = sin(t*w_i), vector[2i+1] = cos(t*w_i).

    Frequencies w_i = 10000^(-2i/dim) * 1000 spread the unit interval across
    several octaves so nearby t values stay distinguishable.
    """
    if dim % 2:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    i = np.arange(dim // 2, dtype=np.float64)
    omega = np.power(10000.0, -2.0 * i / dim) * TIME_SCALE
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(t * omega)
    out[1::2] = np.cos(t * omega)
    return out


@dataclass
class NetworkActivations:
    """Forward-pass intermediates kept for inspection and tests."""

    pre1: np.ndarray                      # level-1 pre-activation embed sum
    OP: list[np.ndarray] = field(default_factory=list)
    F: list[np.ndarray] = field(default_factory=list)
    BF: list[np.ndarray] = field(default_factory=list)


class Network:
    """Pyramid + time fusion + prior fusion + decoder, all on the autodiff graph."""

    def __init__(self, gen: np.random.Generator,
                 channels=DEFAULT_CHANNELS, head_channels: int = DEFAULT_HEAD_CHANNELS,
                 time_dim: int = TIME_DIM, stage_in_channels=STAGE_INPUT_CHANNELS):
        if len(channels) != 4 or any(c < 1 for c in channels):
            raise ConfigError(f"channel schedule must be 4 positive values, got {channels}")
        self.channels = tuple(int(c) for c in channels)
        self.head_channels = int(head_channels)
        self.time_dim = int(time_dim)
        self.stage_in_channels = tuple(int(c) for c in stage_in_channels)
        self.store = ad.ParameterStore()
        self._build(gen)

    # -- construction -------------------------------------------------------

    def _conv(self, gen, name, co, ci, k, zero=False):
        if zero:
            w = np.zeros((co, ci, k, k))
        else:
            w = gen.normal(0.0, np.sqrt(2.0 / (ci * k * k)), size=(co, ci, k, k))
        self.store.create(f"{name}.w", w)
        self.store.create(f"{name}.b", np.zeros(co))

    def _norm(self, name, c):
        self.store.create(f"{name}.gain", np.ones(c))
        self.store.create(f"{name}.shift", np.zeros(c))

    def _build(self, gen):
        c1, c2, c3, c4 = self.channels
        cs = self.channels
        self._conv(gen, "embed_i", c1, 3, 7)
        self._conv(gen, "embed_x", c1, 1, 7)
        self._norm("enc1.norm1", c1)
        self._conv(gen, "enc1.refine", c1, c1, 3)
        self._norm("enc1.norm2", c1)
        for n in (2, 3, 4):
            self._conv(gen, f"enc{n}.down", cs[n - 1], cs[n - 2], 3)
            self._norm(f"enc{n}.norm1", cs[n - 1])
            self._conv(gen, f"enc{n}.refine", cs[n - 1], cs[n - 1], 3)
            self._norm(f"enc{n}.norm2", cs[n - 1])
        self.encoder = StageEncoder(self.store, gen, in_channels=self.stage_in_channels,
                                    out_channels=self.channels)
        for n in (1, 2, 3, 4):
            c = cs[n - 1]
            self.store.create(f"time{n}.scale.w", np.zeros((c, self.time_dim)))
            self.store.create(f"time{n}.scale.b", np.zeros(c))
            self.store.create(f"time{n}.shift.w", np.zeros((c, self.time_dim)))
            self.store.create(f"time{n}.shift.b", np.zeros(c))
            self._conv(gen, f"time{n}.block", c, c, 3)
            self._norm(f"time{n}.norm", c)
            self._conv(gen, f"merge{n}", c, 2 * c, 3)
            self._norm(f"merge{n}.norm", c)
        for n in (3, 2, 1):
            self._conv(gen, f"dec{n}", cs[n - 1], cs[n], 3)
            self._norm(f"dec{n}.norm", cs[n - 1])
        self._conv(gen, "head.conv1", self.head_channels, c1, 3)
        self._norm("head.norm1", self.head_channels)
        self._conv(gen, "head.conv2", self.head_channels, self.head_channels, 3)
        self._norm("head.norm2", self.head_channels)
        self._conv(gen, "head.final", 1, self.head_channels, 3, zero=True)

    def param_count(self) -> int:
        return self.store.count_values()

    def arch_descriptor(self) -> dict:
        """Architecture identity for the config fingerprint."""
        return {
            "backbone": "toy-pyramid",
            "channels": list(self.channels),
            "head_channels": self.head_channels,
            "time_dim": self.time_dim,
            "stage_input_channels": list(self.stage_in_channels),
        }

    # -- forward ------------------------------------------------------------

    def _p(self, name: str) -> ad.Tensor:
        return self.store[name]

    def _block(self, x, conv, norm, stride=1, pad=1):
        out = ad.conv2d(x, self._p(f"{conv}.w"), self._p(f"{conv}.b"), stride=stride, pad=pad)
        c = out.data.shape[1]
        return ad.silu(ad.group_norm(out, ad.group_count(c), self._p(f"{norm}.gain"), self._p(f"{norm}.shift")))

    def zero_priors(self, n: int, h: int, w: int) -> list[ad.Tensor]:
        """Stage-shaped zero tensors used whenever priors are absent."""
        return [
            ad.constant(np.zeros((n, c, h // (4 * 2 ** i), w // (4 * 2 ** i))))
            for i, c in enumerate(self.channels)
        ]

    def forward(self, I, x_t, t: float, staged: list[ad.Tensor] | None):
        """Compute mask logits; returns (logits Tensor, NetworkActivations).

        I: (N, 3, H, W) condition image; x_t: (N, 1, H, W) flow state;
        t: the scalar time shared by the batch; staged: four stage tensors
        or None for the zero-prior inference path.
        """
        I = np.asarray(I, dtype=np.float64)
        x_t = np.asarray(x_t, dtype=np.float64)
        if I.ndim != 4 or I.shape[1] != 3:
            raise ShapeError(f"forward: expected image batch (N, 3, H, W), got {I.shape}")
        n, _, h, w = I.shape
        if x_t.shape != (n, 1, h, w):
            raise ShapeError(f"forward: flow state dims {x_t.shape}, expected {(n, 1, h, w)}")
        if h % 32 or w % 32:
            raise ConfigError(f"input dims must be divisible by 32, got {h}x{w}")
        if not 0.0 <= t <= 1.0:
            raise ContractError(f"time must lie in [0, 1], got {t}")
        if staged is None:
            staged = self.zero_priors(n, h, w)
        if len(staged) != 4:
            raise ShapeError(f"expected 4 staged prior tensors, got {len(staged)}")
        for i, (f, c) in enumerate(zip(staged, self.channels), start=1):
            want = (n, c, h // (4 * 2 ** (i - 1)), w // (4 * 2 ** (i - 1)))
            if f.data.shape != want:
                raise ShapeError(f"stage {i} prior dims {f.data.shape}, expected {want}")

        ti = ad.constant(I)
        tx = ad.constant(x_t)
        pre = ad.add(
            ad.conv2d(ti, self._p("embed_i.w"), self._p("embed_i.b"), stride=4, pad=3),
            ad.conv2d(tx, self._p("embed_x.w"), self._p("embed_x.b"), stride=4, pad=3),
        )
        acts = NetworkActivations(pre1=pre.data)

        c1 = self.channels[0]
        hcur = ad.silu(ad.group_norm(pre, ad.group_count(c1), self._p("enc1.norm1.gain"), self._p("enc1.norm1.shift")))
        op = self._block(hcur, "enc1.refine", "enc1.norm2")
        ops = [op]
        for lvl in (2, 3, 4):
            hcur = self._block(ops[-1], f"enc{lvl}.down", f"enc{lvl}.norm1", stride=2)
            ops.append(self._block(hcur, f"enc{lvl}.refine", f"enc{lvl}.norm2"))
        acts.OP = [o.data for o in ops]

        temb = ad.constant(sinusoidal_time_embedding(t, self.time_dim))
        fs = []
        for lvl, op_n in enumerate(ops, start=1):
            scale = ad.linear(temb, self._p(f"time{lvl}.scale.w"), self._p(f"time{lvl}.scale.b"))
            shift = ad.linear(temb, self._p(f"time{lvl}.shift.w"), self._p(f"time{lvl}.shift.b"))
            mod = ad.scale_shift_channels(op_n, scale, shift)
            fs.append(self._block(mod, f"time{lvl}.block", f"time{lvl}.norm"))
        acts.F = [f.data for f in fs]

        bfs = []
        for lvl, (f_n, prior_n) in enumerate(zip(fs, staged), start=1):
            merged = ad.concat_channels(f_n, prior_n)
            bfs.append(self._block(merged, f"merge{lvl}", f"merge{lvl}.norm"))
        acts.BF = [b.data for b in bfs]

        d = bfs[3]
        for lvl in (3, 2, 1):
            up = ad.upsample_bilinear(d, 2)
            d = ad.add(self._block(up, f"dec{lvl}", f"dec{lvl}.norm"), bfs[lvl - 1])
        d = self._block(ad.upsample_bilinear(d, 2), "head.conv1", "head.norm1")
        d = self._block(ad.upsample_bilinear(d, 2), "head.conv2", "head.norm2")
        logits = ad.conv2d(d, self._p("head.final.w"), self._p("head.final.b"), stride=1, pad=1)
        return logits, acts


# ---------------------------------------------------------------------------
# checkpoint container: WFCK


def save_checkpoint(path, arrays: dict[str, np.ndarray], step: int, fingerprint: bytes) -> None:
    """Write named tensors + step count + config fingerprint; entries sorted by name."""
    if len(fingerprint) != FINGERPRINT_BYTES:
        raise ContractError(f"fingerprint must be {FINGERPRINT_BYTES} bytes, got {len(fingerprint)}")
    if step < 0:
        raise ContractError(f"step count must be non-negative, got {step}")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContractError(f"checkpoint entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(tensor_io.tensor_to_bytes(arrays[name]))
    parts.append(struct.pack("<Q", step))
    parts.append(fingerprint)
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise PipelineIOError(f"cannot write checkpoint to {path}: {exc}") from exc


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    step: int
    fingerprint: bytes


def load_checkpoint(path, expected_fingerprint: bytes | None = None) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise PipelineIOError(f"cannot read checkpoint from {path}: {exc}") from exc
    if len(buf) < 8 or buf[:4] != CHECKPOINT_MAGIC:
        raise PipelineIOError(f"{path}: not a checkpoint file (bad magic)")
    (count,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(buf):
            raise PipelineIOError(f"{path}: truncated checkpoint entry table")
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        size = tensor_io.blob_size(buf, offset)
        arrays[name] = tensor_io.tensor_from_bytes(buf[offset : offset + size])
        offset += size
    if offset + 8 + FINGERPRINT_BYTES != len(buf):
        raise PipelineIOError(f"{path}: checkpoint trailer has wrong length")
    (step,) = struct.unpack_from("<Q", buf, offset)
    fingerprint = buf[offset + 8 :]
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise ContractError(
            "checkpoint fingerprint does not match the current configuration; "
            "refusing to load weights built for a different architecture"
        )
    return Checkpoint(arrays=arrays, step=step, fingerprint=fingerprint)
