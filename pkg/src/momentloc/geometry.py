"""Temporal geometry: spans, IoU, and the candidate-moment grid of a dataset profile.

A profile describes how raw clip features become a base sequence of T0 units
(pooling) and how a stack of 1-d conv layers shrinks that sequence. Every unit
of every used layer is one candidate moment; its time span follows from the
composed kernel/stride arithmetic of the layers beneath it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, GeometryError, UnitError

BRANCH_LAYER = -1  # layer id for branch candidates in a CandidateSet


@dataclass(frozen=True)
class MomentSpan:
    """Half-open interval [start_unit, end_unit) in base units of unit_seconds each."""

    start_unit: int
    end_unit: int
    unit_seconds: float

    def __post_init__(self):
        if self.start_unit < 0 or self.end_unit <= self.start_unit:
            raise ContractError(f"bad span [{self.start_unit}, {self.end_unit})")
        if self.unit_seconds <= 0:
            raise ContractError(f"unit_seconds must be > 0, got {self.unit_seconds}")

    @property
    def seconds(self) -> float:
        return (self.end_unit - self.start_unit) * self.unit_seconds

    @property
    def start_seconds(self) -> float:
        return self.start_unit * self.unit_seconds

    @property
    def end_seconds(self) -> float:
        return self.end_unit * self.unit_seconds


def iou(a: MomentSpan, b: MomentSpan) -> float:
    """Intersection-over-union of two half-open spans; 0 when disjoint."""
    if a.unit_seconds != b.unit_seconds:
        raise UnitError(f"IoU of spans with different units: {a.unit_seconds} vs {b.unit_seconds}")
    inter = min(a.end_unit, b.end_unit) - max(a.start_unit, b.start_unit)
    if inter <= 0:
        return 0.0
    union = max(a.end_unit, b.end_unit) - min(a.start_unit, b.start_unit)
    return inter / union


def conv_out_len(t: int, kernel: int, stride: int) -> int:
    if t < kernel:
        raise GeometryError(f"input length {t} shorter than kernel {kernel}")
    return (t - kernel) // stride + 1


@dataclass(frozen=True)
class ConvLayer:
    kernel: int
    stride: int
    dim: int  # declared output temporal dimension, validated against the arithmetic


@dataclass(frozen=True)
class BranchSpec:
    """Overlapping candidate layer sliding a window over the base sequence."""

    window_units: int
    stride_units: int


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    input_clips: int
    clip_seconds: float
    pool_window: int
    pool_stride: int
    layers: tuple[ConvLayer, ...]
    used_layers: tuple[int, ...]  # 0-based indices into layers
    branch: BranchSpec | None = None

    def __post_init__(self):
        t = self.base_units
        for i, layer in enumerate(self.layers):
            t = conv_out_len(t, layer.kernel, layer.stride)
            if t != layer.dim:
                raise GeometryError(
                    f"{self.name}: layer {i} declares dim {layer.dim} but "
                    f"kernel {layer.kernel}/stride {layer.stride} gives {t}"
                )
        for i in self.used_layers:
            if not 0 <= i < len(self.layers):
                raise GeometryError(f"{self.name}: used layer index {i} out of range")
        if self.branch is not None and self.base_units < self.branch.window_units:
            raise GeometryError(f"{self.name}: branch window exceeds base length")

    @property
    def base_units(self) -> int:
        return conv_out_len(self.input_clips, self.pool_window, self.pool_stride)

    @property
    def unit_seconds(self) -> float:
        return self.clip_seconds * self.pool_stride

    @property
    def branch_count(self) -> int:
        if self.branch is None:
            return 0
        return conv_out_len(self.base_units, self.branch.window_units, self.branch.stride_units)

    @property
    def candidate_count(self) -> int:
        return sum(self.layers[i].dim for i in self.used_layers) + self.branch_count

    def layer_footprints(self) -> list[tuple[int, int]]:
        """Per layer, the (span_stride, span_length) in base units of one output unit.

        Unit i of layer k covers base units [i * stride_k, i * stride_k + length_k):
        the composed kernel/stride arithmetic of the stack below it.
        """
        out = []
        stride_prod = 1
        length = 1
        for layer in self.layers:
            length = length + (layer.kernel - 1) * stride_prod
            stride_prod *= layer.stride
            out.append((stride_prod, length))
        return out


@dataclass(frozen=True)
class Candidate:
    layer: int  # 1-based conv layer depth, or BRANCH_LAYER
    index: int
    span: MomentSpan


@dataclass(frozen=True)
class CandidateSet:
    """All candidate moments of one profile, in stable layer-major order."""

    profile: DatasetProfile
    entries: tuple[Candidate, ...] = field(compare=False)

    @property
    def count(self) -> int:
        return len(self.entries)

    def spans(self) -> list[MomentSpan]:
        return [c.span for c in self.entries]


def enumerate_candidates(profile: DatasetProfile) -> CandidateSet:
    """Every candidate moment of the profile: used conv layers first, then branch."""
    unit_s = profile.unit_seconds
    footprints = profile.layer_footprints()
    entries: list[Candidate] = []
    for li in profile.used_layers:
        stride, length = footprints[li]
        for i in range(profile.layers[li].dim):
            start = i * stride
            entries.append(Candidate(li + 1, i, MomentSpan(start, start + length, unit_s)))
    if profile.branch is not None:
        w, s = profile.branch.window_units, profile.branch.stride_units
        for i in range(profile.branch_count):
            entries.append(Candidate(BRANCH_LAYER, i, MomentSpan(i * s, i * s + w, unit_s)))
    if len(entries) != profile.candidate_count:
        raise GeometryError(
            f"{profile.name}: enumerated {len(entries)} candidates, "
            f"profile declares {profile.candidate_count}"
        )
    for c in entries:
        if c.span.end_unit > profile.base_units:
            raise GeometryError(f"{profile.name}: candidate {c} exceeds base length")
    return CandidateSet(profile, tuple(entries))


def positives_for(gt: MomentSpan, candidates: CandidateSet, threshold: float) -> list[int]:
    """Indices of candidates whose IoU with ``gt`` is >= threshold (may be empty)."""
    if not 0.0 < threshold <= 1.0:
        raise ContractError(f"IoU threshold must be in (0, 1], got {threshold}")
    return [i for i, c in enumerate(candidates.entries) if iou(c.span, gt) >= threshold]


def fit_length(features: np.ndarray, target_clips: int) -> np.ndarray:
    """Truncate or zero-pad a [C, T_raw] feature matrix to exactly target_clips columns."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] < 1:
        raise ContractError(f"features must be [C, T_raw] with T_raw >= 1, got {features.shape}")
    t = features.shape[1]
    if t == target_clips:
        return features
    if t > target_clips:
        return features[:, :target_clips]
    pad = np.zeros((features.shape[0], target_clips - t), dtype=features.dtype)
    return np.concatenate([features, pad], axis=1)


# ---------------------------------------------------------------------------
# shipped profiles
# ---------------------------------------------------------------------------


def _halving_layers(top: int) -> tuple[ConvLayer, ...]:
    layers = [ConvLayer(1, 1, top)]
    d = top
    while d > 1:
        d //= 2
        layers.append(ConvLayer(2, 2, d))
    return tuple(layers)


def didemo_profile() -> DatasetProfile:
    # 12 clips of 2.5 s pooled to 6 units of 5 s; stride-1 stack gives every
    # contiguous sub-interval of the 6 units: 6+5+4+3+2+1 = 21 candidates.
    layers = (ConvLayer(1, 1, 6),) + tuple(ConvLayer(2, 1, d) for d in (5, 4, 3, 2, 1))
    return DatasetProfile(
        name="didemo",
        input_clips=12,
        clip_seconds=2.5,
        pool_window=2,
        pool_stride=2,
        layers=layers,
        used_layers=tuple(range(6)),
    )


def charades_profile() -> DatasetProfile:
    # 64 clips of 1 s pooled to 32 units of 2 s; halving stack {32,16,8,4,2,1}
    # with candidates from the last 5 layers (31) plus a 6 s / 2 s-stride
    # branch: window 3 units, stride 1 -> 30. Total 61.
    return DatasetProfile(
        name="charades",
        input_clips=64,
        clip_seconds=1.0,
        pool_window=2,
        pool_stride=2,
        layers=_halving_layers(32),
        used_layers=tuple(range(1, 6)),
        branch=BranchSpec(window_units=3, stride_units=1),
    )


def activitynet_profile() -> DatasetProfile:
    # 512 clips of 1 s, no pooling; halving stack {512,...,1} -> 1023 candidates.
    return DatasetProfile(
        name="activitynet",
        input_clips=512,
        clip_seconds=1.0,
        pool_window=1,
        pool_stride=1,
        layers=_halving_layers(512),
        used_layers=tuple(range(10)),
    )


PROFILE_BUILDERS = {
    "didemo": didemo_profile,
    "charades": charades_profile,
    "activitynet": activitynet_profile,
}


def get_profile(name: str) -> DatasetProfile:
    try:
        return PROFILE_BUILDERS[name]()
    except KeyError:
        raise ContractError(f"unknown profile {name!r}; known: {sorted(PROFILE_BUILDERS)}") from None


def profile_from_config(cfg: dict) -> DatasetProfile:
    """Build a profile from a config mapping (inline profiles need no code change)."""
    try:
        layers = tuple(ConvLayer(int(k), int(s), int(d)) for k, s, d in cfg["layers"])
        branch = cfg.get("branch")
        return DatasetProfile(
            name=str(cfg.get("name", "custom")),
            input_clips=int(cfg["input_clips"]),
            clip_seconds=float(cfg["clip_seconds"]),
            pool_window=int(cfg.get("pool_window", 1)),
            pool_stride=int(cfg.get("pool_stride", 1)),
            layers=layers,
            used_layers=tuple(int(i) for i in cfg["used_layers"]),
            branch=BranchSpec(int(branch[0]), int(branch[1])) if branch else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"bad profile config: {exc}") from exc


def profile_to_config(profile: DatasetProfile) -> dict:
    return {
        "name": profile.name,
        "input_clips": profile.input_clips,
        "clip_seconds": profile.clip_seconds,
        "pool_window": profile.pool_window,
        "pool_stride": profile.pool_stride,
        "layers": [[l.kernel, l.stride, l.dim] for l in profile.layers],
        "used_layers": list(profile.used_layers),
        "branch": [profile.branch.window_units, profile.branch.stride_units]
        if profile.branch
        else None,
    }
