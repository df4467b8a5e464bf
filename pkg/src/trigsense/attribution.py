"""Hierarchical attribution refinement.

Coarse sensitivity maps are sharpened in four moves: peak-driven
segmentation of the input, perplexity ranking of the segments, an adaptive
segment budget, and a three-branch per-token assembly that spends
integrated-gradients attribution only where it pays (high-scoring tokens
inside the top segments), attention rollout on the rest of those segments,
and a flat dampening factor elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import CapabilityMissingError, InternalError, InvalidInputError
from .oracle.base import ModelHandle
from .sensitivity import SensitivityMap
from .types import EmbeddingGradient, ScalarTarget, TokenSequence

FINE_WINDOW = 5
COARSE_WINDOW = 20
DISPERSION_THRESHOLD = 0.15
DEFAULT_BETA = 0.5
DEFAULT_GAMMA = 0.3

BRANCH_IG = "ig"
BRANCH_ROLLOUT = "rollout"
BRANCH_DAMPENED = "dampened"

# Assembly bands: each branch family is min-max normalized over the tokens
# it serves, then mapped affinely into its band. Bands keep the branch
# hierarchy (exact attribution > cheap attribution > dampened) explicit in
# the assembled scores and stop a two-element family from sending its
# weaker member to 0.0, i.e. below every dampened token.
IG_BAND = (0.70, 1.0)
ROLLOUT_BAND = (0.35, 0.65)


@dataclass(frozen=True)
class Segment:
    """Half-open token span [start, end) with its perplexity, once scored."""

    start: int
    end: int
    zeta: float | None = None

    def __post_init__(self):
        if self.end <= self.start or self.start < 0:
            raise InvalidInputError(f"empty or negative segment [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start

    def positions(self) -> range:
        return range(self.start, self.end)


@dataclass(frozen=True)
class SegmentPartition:
    """Contiguous, non-overlapping segments covering [0, n) exactly."""

    segments: tuple[Segment, ...]
    granularity: str  # "fine" | "coarse"

    def __post_init__(self):
        if not self.segments:
            raise InvalidInputError("partition must contain at least one segment")
        cursor = 0
        for seg in self.segments:
            if seg.start != cursor:
                raise InvalidInputError("segments must be contiguous and non-overlapping")
            cursor = seg.end
        if self.granularity not in ("fine", "coarse"):
            raise InvalidInputError("granularity must be 'fine' or 'coarse'")

    @property
    def m(self) -> int:
        return len(self.segments)

    @property
    def n(self) -> int:
        return self.segments[-1].end


@dataclass(frozen=True)
class RefinedSensitivityMap:
    """Refined per-token scores plus the branch that produced each one."""

    scores: np.ndarray
    provenance: tuple[str, ...]

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.shape[0] != len(self.provenance):
            raise InvalidInputError("scores and provenance must align")
        if scores.min() < -1e-9 or scores.max() > 1.0 + 1e-9:
            raise InvalidInputError("refined scores must lie in [0, 1]")
        scores = np.clip(scores, 0.0, 1.0)
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @property
    def n(self) -> int:
        return int(self.scores.shape[0])


def detect_peaks(sens: SensitivityMap) -> list[int]:
    """Positions scoring strictly above mean + one standard deviation."""
    threshold = sens.mu + sens.sigma
    return [i for i in range(sens.n) if sens.scores[i] > threshold]


def _chunk(start: int, end: int, width: int) -> list[tuple[int, int]]:
    spans = []
    cursor = start
    while cursor < end:
        spans.append((cursor, min(cursor + width, end)))
        cursor = min(cursor + width, end)
    return spans


def _cluster_peaks(peaks: Sequence[int], gap: int) -> list[tuple[int, int]]:
    clusters = [[peaks[0], peaks[0]]]
    for p in peaks[1:]:
        if p - clusters[-1][1] <= gap:
            clusters[-1][1] = p
        else:
            clusters.append([p, p])
    return [(a, b) for a, b in clusters]


def segment(
    seq: TokenSequence,
    sens: SensitivityMap,
    boundaries: Sequence[int] | None = None,
    fine_window: int = FINE_WINDOW,
    coarse_window: int = COARSE_WINDOW,
    dispersion_threshold: float = DISPERSION_THRESHOLD,
) -> SegmentPartition:
    """Split the input into structural units sized by peak dispersion.

    Clustered peaks (normalized index std below the dispersion threshold)
    ask for fine windows centered on the clusters; dispersed or absent peaks
    fall back to sentence boundaries, or fixed-width windows without them.
    """
    n = seq.n
    if sens.n != n:
        raise InvalidInputError("sensitivity map does not match the sequence")
    if boundaries is not None:
        for b in boundaries:
            if not 0 < b <= n:
                raise InvalidInputError(f"sentence boundary {b} out of range")

    peaks = detect_peaks(sens)
    fine = False
    if peaks:
        dispersion = float(np.std(np.asarray(peaks, dtype=np.float64))) / n
        fine = dispersion < dispersion_threshold

    if fine:
        cuts = {0, n}
        for lo, hi in _cluster_peaks(peaks, fine_window):
            center = (lo + hi) // 2
            cuts.add(max(0, min(center - fine_window // 2, n)))
            cuts.add(max(0, min(center - fine_window // 2 + fine_window, n)))
        edges = sorted(cuts)
        spans: list[tuple[int, int]] = []
        for a, b in zip(edges, edges[1:]):
            spans.extend(_chunk(a, b, fine_window))
        return SegmentPartition(tuple(Segment(a, b) for a, b in spans), "fine")

    if boundaries:
        edges = sorted({0, n, *boundaries})
        spans = list(zip(edges, edges[1:]))
    else:
        spans = _chunk(0, n, coarse_window)
    return SegmentPartition(tuple(Segment(a, b) for a, b in spans), "coarse")


def score_segments(scorer: ModelHandle, seq: TokenSequence, partition: SegmentPartition) -> SegmentPartition:
    """Fill each segment's perplexity, scored on its own token span."""
    if partition.n != seq.n:
        raise InvalidInputError("partition does not cover this sequence")
    scored = tuple(
        Segment(s.start, s.end, zeta=scorer.perplexity(TokenSequence.of(seq.tokens[s.start : s.end])))
        for s in partition.segments
    )
    return SegmentPartition(scored, partition.granularity)


def segment_budget(peak_count: int, m: int, beta: float) -> int:
    """K = max(1, floor(beta * peak_count / m) * m), clamped to [1, m].

    The raw formula can exceed m (it multiplies back by m), so the result is
    clamped: K indexes segments.
    """
    if m < 1:
        raise InvalidInputError("partition must contain at least one segment")
    k = max(1, math.floor(beta * peak_count / m) * m)
    return min(k, m)


def adaptive_k(sens: SensitivityMap, partition: SegmentPartition, beta: float = DEFAULT_BETA) -> int:
    """Segment budget driven by the map's peak count."""
    return segment_budget(len(detect_peaks(sens)), partition.m, beta)


def top_k_segments(
    partition: SegmentPartition,
    k: int,
    key: str = "zeta",
    sens: SensitivityMap | None = None,
) -> list[int]:
    """Indices of the k highest-ranked segments (ties: earlier segment first).

    "zeta" ranks by segment perplexity; "sensitivity" ranks by the peak
    coarse score inside each segment (needs `sens`).
    """
    if k > partition.m:
        raise InvalidInputError("k exceeds the number of segments")
    if key == "zeta":
        if any(s.zeta is None for s in partition.segments):
            raise InvalidInputError("segments are not scored; run score_segments first")
        ranked = sorted(range(partition.m), key=lambda i: (-partition.segments[i].zeta, i))
    elif key == "sensitivity":
        if sens is None:
            raise InvalidInputError("sensitivity ranking needs the coarse map")
        peak = lambda s: float(sens.scores[s.start : s.end].max())
        ranked = sorted(range(partition.m), key=lambda i: (-peak(partition.segments[i]), i))
    else:
        raise InvalidInputError(f"unknown segment ranking key {key!r}")
    return sorted(ranked[:k])


# ---------------------------------------------------------------------------
# Attribution approximators
# ---------------------------------------------------------------------------


def ig_attribution(
    handle: ModelHandle,
    seq: TokenSequence,
    target: ScalarTarget,
    steps: int = 64,
    baseline: str = "mask",
    positions: Sequence[int] | None = None,
) -> np.ndarray:
    """Path-integrated gradients from a neutral baseline (midpoint rule).

    phi_i = (e_i - e0_i) . mean_k grad_i(alpha_k) with alpha_k = (k+0.5)/steps.
    Returns the full n-vector; `positions` only restricts which entries are
    meaningful to the caller, the path always interpolates every token.
    """
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    if not handle.has_gradients:
        raise CapabilityMissingError(f"backend {handle.backend_id!r} has no gradients")
    E = handle.token_embeddings(seq)
    E0 = handle.baseline_embeddings(seq, baseline)
    total = np.zeros_like(E)
    for k in range(steps):
        alpha = (k + 0.5) / steps
        total += handle.target_gradient(seq, target, alpha=alpha, baseline=baseline).grads
    phi = ((E - E0) * (total / steps)).sum(axis=1)
    if positions is not None:
        keep = np.zeros_like(phi)
        for p in positions:
            keep[p] = phi[p]
        phi = keep
    return phi


def gradient_magnitude_proxy(
    handle: ModelHandle, seq: TokenSequence, target: ScalarTarget
) -> np.ndarray:
    """Fallback token influence for backends without attention: |grad| norms."""
    grad: EmbeddingGradient = handle.target_gradient(seq, target, alpha=1.0)
    norms = np.linalg.norm(grad.grads, axis=1)
    total = norms.sum()
    return norms / total if total > 0 else np.full(seq.n, 1.0 / seq.n)


def rollout_attribution(handle: ModelHandle, seq: TokenSequence, readout: str = "first") -> np.ndarray:
    """Multiplicative aggregation of attention with residual mixing.

    Per layer the heads are averaged and blended with the identity,
    A_bar = row-normalize(0.5 (A + I)); the rollout is the product across
    layers and the attribution is read out at one position ("first" for
    encoders, "last" for decoders) or averaged over all query positions
    ("mean"), then normalized to sum to 1.
    """
    if not handle.has_attention:
        raise CapabilityMissingError(f"backend {handle.backend_id!r} exposes no attention")
    stack = handle.attention_maps(seq)
    n = stack.seq_len
    rollout = np.eye(n)
    for layer in range(stack.n_layers):
        mixed = 0.5 * (stack.maps[layer].mean(axis=0) + np.eye(n))
        mixed = mixed / mixed.sum(axis=1, keepdims=True)
        rollout = mixed @ rollout
    if readout == "first":
        row = rollout[0]
    elif readout == "last":
        row = rollout[n - 1]
    elif readout == "mean":
        row = rollout.mean(axis=0)
    else:
        raise InvalidInputError(f"unknown readout {readout!r}")
    total = row.sum()
    return row / total if total > 0 else np.full(n, 1.0 / n)


def default_readout(handle: ModelHandle) -> str:
    """Readout matching how the model aggregates tokens.

    Handles may advertise a readout_hint ("first"/"last"/"mean", e.g. mean
    for mean-pooled classifier heads); otherwise decoders read the last row
    and everything else the first.
    """
    hint = getattr(handle, "readout_hint", None)
    if hint in ("first", "last", "mean"):
        return hint
    return "last" if handle.is_decoder and not handle.is_encoder else "first"


# ---------------------------------------------------------------------------
# Three-branch assembly
# ---------------------------------------------------------------------------


def _family_normalize(values: Mapping[int, float], band: tuple[float, float]) -> dict[int, float]:
    """Min-max over the tokens a branch serves, mapped into the band.

    A constant (or singleton) family maps to the band top.
    """
    if not values:
        return {}
    lo_b, hi_b = band
    arr = np.array(list(values.values()), dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        return {k: hi_b for k in values}
    return {k: lo_b + (float(v) - lo) / (hi - lo) * (hi_b - lo_b) for k, v in values.items()}


def refine(
    sens: SensitivityMap,
    partition: SegmentPartition,
    k: int,
    ig: Mapping[int, float],
    rollout: Mapping[int, float] | np.ndarray,
    tau_shap: float | None = None,
    gamma: float = DEFAULT_GAMMA,
    rank_key: str = "zeta",
) -> RefinedSensitivityMap:
    """Assemble the refined map from the three branches.

    Tokens in a top-K segment take |IG| when their coarse score exceeds
    tau_shap (default: mean + std of the coarse map) and rollout otherwise;
    tokens outside the top segments keep gamma * score. IG and rollout
    values are min-max normalized over the tokens each branch serves and
    placed into IG_BAND / ROLLOUT_BAND respectively.
    """
    n = sens.n
    if partition.n != n:
        raise InvalidInputError("partition does not cover the map")
    if not 0.0 < gamma < 1.0:
        raise InvalidInputError("gamma must lie in (0, 1)")
    if tau_shap is None:
        tau_shap = sens.mu + sens.sigma
    top = set()
    for seg_idx in top_k_segments(partition, k, rank_key, sens):
        top.update(partition.segments[seg_idx].positions())

    if isinstance(rollout, np.ndarray):
        rollout = {i: float(rollout[i]) for i in range(len(rollout))}

    branch: list[str] = []
    for i in range(n):
        if i in top and sens.scores[i] > tau_shap:
            branch.append(BRANCH_IG)
        elif i in top:
            branch.append(BRANCH_ROLLOUT)
        else:
            branch.append(BRANCH_DAMPENED)

    ig_family = {}
    for i, b in enumerate(branch):
        if b == BRANCH_IG:
            if i not in ig:
                raise InternalError(f"no IG attribution was computed for eligible token {i}")
            ig_family[i] = abs(float(ig[i]))  # influence magnitude, sign-agnostic
    rollout_family = {}
    for i, b in enumerate(branch):
        if b == BRANCH_ROLLOUT:
            if i not in rollout:
                raise InternalError(f"no rollout attribution was computed for eligible token {i}")
            rollout_family[i] = float(rollout[i])

    ig_norm = _family_normalize(ig_family, IG_BAND)
    roll_norm = _family_normalize(rollout_family, ROLLOUT_BAND)

    scores = np.empty(n, dtype=np.float64)
    for i, b in enumerate(branch):
        if b == BRANCH_IG:
            scores[i] = ig_norm[i]
        elif b == BRANCH_ROLLOUT:
            scores[i] = roll_norm[i]
        else:
            scores[i] = gamma * sens.scores[i]
    return RefinedSensitivityMap(scores, tuple(branch))


def refine_sequence(
    model: ModelHandle,
    scorer: ModelHandle,
    seq: TokenSequence,
    sens: SensitivityMap,
    target: ScalarTarget,
    boundaries: Sequence[int] | None = None,
    beta: float = DEFAULT_BETA,
    gamma: float = DEFAULT_GAMMA,
    ig_steps: int = 64,
    baseline: str = "mask",
    readout: str | None = None,
    fine_window: int = FINE_WINDOW,
    coarse_window: int = COARSE_WINDOW,
    dispersion_threshold: float = DISPERSION_THRESHOLD,
    rank_key: str = "zeta",
) -> tuple[RefinedSensitivityMap, SegmentPartition, int]:
    """One-call refinement: segment, score, pick K, attribute, assemble."""
    partition = score_segments(
        scorer,
        seq,
        segment(seq, sens, boundaries, fine_window, coarse_window, dispersion_threshold),
    )
    k = adaptive_k(sens, partition, beta)
    tau_shap = sens.mu + sens.sigma
    top = set()
    for seg_idx in top_k_segments(partition, k, rank_key, sens):
        top.update(partition.segments[seg_idx].positions())
    ig_positions = [i for i in sorted(top) if sens.scores[i] > tau_shap]
    ig_vals: dict[int, float] = {}
    if ig_positions:
        phi = ig_attribution(model, seq, target, steps=ig_steps, baseline=baseline)
        ig_vals = {i: float(phi[i]) for i in ig_positions}
    if model.has_attention:
        roll = rollout_attribution(model, seq, readout or default_readout(model))
    else:
        roll = gradient_magnitude_proxy(model, seq, target)
    refined = refine(
        sens, partition, k, ig_vals, roll, tau_shap=tau_shap, gamma=gamma, rank_key=rank_key
    )
    return refined, partition, k
