"""Scalar rewards in a shared embedding space.

Cosine similarity against per-modality targets, weighted query averaging
across modalities, and low-rank bilinear pooling that fuses the target
embeddings into a single anchor the separated audio is scored against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REWARD_MODES = ("audio", "text", "video", "mixup", "pooled")


def _as_vector(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


def cosine_sim(u, v) -> float:
    """Cosine similarity, clamped into [-1, 1] against rounding."""
    u = _as_vector(u, "u")
    v = _as_vector(v, "v")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for zero-norm input")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def unimodal_rewards(e_sep, e_audio, e_text, e_video):
    """(audio-to-audio, text-to-audio, video-to-audio) cosine rewards."""
    return (
        cosine_sim(e_sep, e_audio),
        cosine_sim(e_sep, e_text),
        cosine_sim(e_sep, e_video),
    )


def query_mixup(q_a, q_v, q_t, w_a: float, w_v: float, w_t: float) -> np.ndarray:
    """Weighted average of per-modality query embeddings."""
    for name, w in (("w_a", w_a), ("w_v", w_v), ("w_t", w_t)):
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {w}")
    total = w_a + w_v + w_t
    if total <= 0.0:
        raise ValueError("at least one mixup weight must be positive")
    q_a = _as_vector(q_a, "q_a")
    q_v = _as_vector(q_v, "q_v")
    q_t = _as_vector(q_t, "q_t")
    return (w_a * q_a + w_v * q_v + w_t * q_t) / total


@dataclass(frozen=True)
class MlbpParams:
    """Per-modality projections (no bias), Hadamard fusion, output affine."""

    modality_weights: tuple
    output_weight: np.ndarray
    output_bias: np.ndarray

    def __post_init__(self):
        if len(self.modality_weights) < 2:
            raise ValueError("pooling needs at least 2 modalities")
        d = self.output_weight.shape[0]
        if self.output_weight.shape != (d, d):
            raise ValueError("output projection must be square (d x d)")
        if self.output_bias.shape != (d,):
            raise ValueError("output bias must be a d-vector")
        for k, w in enumerate(self.modality_weights):
            if w.ndim != 2 or w.shape[0] != d:
                raise ValueError(
                    f"modality projection {k} must be d x d_k with d={d}, "
                    f"got shape {w.shape}"
                )

    @property
    def shared_dim(self) -> int:
        return self.output_weight.shape[0]


def identity_mlbp(dim: int, n_modalities: int = 3) -> MlbpParams:
    """Fixed fusion: identity projections, zero bias. The default reward
    fusion is not trained, which keeps the reward stationary during RL."""
    eye = np.eye(dim)
    return MlbpParams(
        modality_weights=tuple(eye.copy() for _ in range(n_modalities)),
        output_weight=eye.copy(),
        output_bias=np.zeros(dim),
    )


def mlbp_fuse(params: MlbpParams, inputs) -> np.ndarray:
    """z = W_o (hadamard_k W_k x_k) + b."""
    if len(inputs) != len(params.modality_weights):
        raise ValueError(
            f"expected {len(params.modality_weights)} inputs, got {len(inputs)}"
        )
    fused = np.ones(params.shared_dim)
    for k, (w, x) in enumerate(zip(params.modality_weights, inputs)):
        x = _as_vector(x, f"input {k}")
        if x.shape[0] != w.shape[1]:
            raise ValueError(
                f"input {k} has dimension {x.shape[0]}, projection expects "
                f"{w.shape[1]}"
            )
        fused = fused * (w @ x)
    return params.output_weight @ fused + params.output_bias


@dataclass(frozen=True)
class RewardTargets:
    """Target-side embeddings a separated estimate is scored against."""

    audio: np.ndarray | None = None
    text: np.ndarray | None = None
    video: np.ndarray | None = None

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ValueError(f"reward mode needs target embeddings: {missing}")


def composite_reward(
    mode: str,
    e_sep,
    targets: RewardTargets,
    mlbp: MlbpParams | None = None,
    mixup_weights=(1.0, 1.0, 1.0),
) -> float:
    """Scalar reward for a separated-audio embedding under the given mode."""
    if mode not in REWARD_MODES:
        raise ValueError(f"mode must be one of {REWARD_MODES}, got {mode!r}")
    if mode == "audio":
        targets.require("audio")
        return cosine_sim(e_sep, targets.audio)
    if mode == "text":
        targets.require("text")
        return cosine_sim(e_sep, targets.text)
    if mode == "video":
        targets.require("video")
        return cosine_sim(e_sep, targets.video)
    if mode == "mixup":
        targets.require("audio", "video", "text")
        w_a, w_v, w_t = mixup_weights
        mixed = query_mixup(targets.audio, targets.video, targets.text, w_a, w_v, w_t)
        return cosine_sim(e_sep, mixed)
    targets.require("audio", "text", "video")
    if mlbp is None:
        mlbp = identity_mlbp(np.asarray(targets.audio).shape[0])
    anchor = mlbp_fuse(mlbp, [targets.audio, targets.text, targets.video])
    return cosine_sim(e_sep, anchor)
