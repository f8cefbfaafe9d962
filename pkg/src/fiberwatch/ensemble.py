"""Three-member primary classifier and its decision/fusion rules.

Partial decisions come from a per-class threshold rule; a single decision
is produced either by two-out-of-three voting on the hard labels, or by
score-level fusion that keeps the posterior information: L2-normalized
summation, or selection of the most confident member.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CLASS_COUNT
from .errors import ConfigurationError
from .features import NormalizerStats
from .tensornet import ClassScores, Network, forward, load_checkpoint, save_checkpoint

DEFAULT_THRESHOLD = 0.5


@dataclass
class EnsembleModel:
    members: list[Network]                 # exactly C1, C2, C3 in order
    thresholds: np.ndarray                 # (3, CLASS_COUNT), entries in (0, 1]
    normalizer: NormalizerStats | None = None

    def __post_init__(self):
        if len(self.members) != 3:
            raise ConfigurationError("ensemble needs exactly 3 members")
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds.shape != (3, CLASS_COUNT):
            raise ConfigurationError(f"thresholds must be 3 x {CLASS_COUNT}")
        if np.any(self.thresholds <= 0) or np.any(self.thresholds > 1):
            raise ConfigurationError("thresholds must lie in (0, 1]")


def default_thresholds() -> np.ndarray:
    return np.full((3, CLASS_COUNT), DEFAULT_THRESHOLD)


def predict_members(model: EnsembleModel, blob) -> list[ClassScores]:
    """Member outputs in fixed order, inference mode."""
    return [forward(net, blob, mode="infer") for net in model.members]


def threshold_decide(scores: ClassScores | np.ndarray, alpha: np.ndarray) -> int:
    """Most probable class if its score clears the class threshold, else 0.

    Argmax ties break toward the lowest index, biasing toward the
    non-alarm background class.
    """
    probs = np.asarray(getattr(scores, "probs", scores), dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    i_star = int(np.argmax(probs))
    return i_star if probs[i_star] >= alpha[i_star] else 0


def vote_two_of_three(c1: int, c2: int, c3: int) -> int:
    """Two-out-of-three agreement: an agreeing pair wins, otherwise 0."""
    d12 = 1 if c1 == c2 else 0
    d13 = 1 if c1 == c3 else 0
    d23 = 1 if c2 == c3 else 0
    return max(c1 * d12, c1 * d13, c2 * d23)


@dataclass
class FusedScores:
    vector: np.ndarray
    rule: str            # "l2" | "max_confidence"


def fuse_l2(scores) -> FusedScores:
    """Sum the member vectors and normalize to unit Euclidean length."""
    vecs = [np.asarray(getattr(s, "probs", s), dtype=np.float64) for s in scores]
    s = np.sum(vecs, axis=0)
    return FusedScores(s / np.linalg.norm(s), "l2")


def fuse_max_confidence(scores) -> FusedScores:
    """Return the member vector whose largest component is largest.

    Ties go to the lowest member index.
    """
    vecs = [np.asarray(getattr(s, "probs", s), dtype=np.float64) for s in scores]
    g = int(np.argmax([v.max() for v in vecs]))
    return FusedScores(vecs[g].copy(), "max_confidence")


def fuse_l2_batch(member_probs: np.ndarray) -> np.ndarray:
    """Vectorized L2 fusion; ``member_probs`` is (3, N, CLASS_COUNT)."""
    s = member_probs.sum(axis=0)
    return s / np.linalg.norm(s, axis=-1, keepdims=True)


def predict_fused(model: EnsembleModel, blobs: np.ndarray, rule: str = "l2",
                  batch: int = 256) -> np.ndarray:
    """Fused score vectors for a stack of blobs (N, subwindows, feature_dim)."""
    outs = []
    for net in model.members:
        probs = []
        for k in range(0, blobs.shape[0], batch):
            p, _, _ = net.forward_batch(blobs[k:k + batch])
            probs.append(p)
        outs.append(np.concatenate(probs, axis=0))
    member_probs = np.stack(outs)
    if rule == "l2":
        return fuse_l2_batch(member_probs)
    if rule == "max_confidence":
        n = member_probs.shape[1]
        best = np.argmax(member_probs.max(axis=-1), axis=0)
        return member_probs[best, np.arange(n)]
    raise ConfigurationError(f"unknown fusion rule {rule!r}")


def save_ensemble(model: EnsembleModel, path) -> Path:
    """Descriptor JSON referencing one checkpoint file per member."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    member_files = []
    for j, net in enumerate(model.members):
        fname = path.with_suffix(f".c{j + 1}.net")
        save_checkpoint(net, fname)
        member_files.append(fname.name)
    desc = {
        "members": member_files,
        "thresholds": model.thresholds.tolist(),
    }
    if model.normalizer is not None:
        desc["normalizer"] = {
            "mean": model.normalizer.mean.tolist(),
            "std": model.normalizer.std.tolist(),
            "std_eps": model.normalizer.std_eps,
        }
    with open(path, "w") as fh:
        json.dump(desc, fh, indent=1, sort_keys=True)
    return path


def load_ensemble(path) -> EnsembleModel:
    path = Path(path)
    with open(path) as fh:
        desc = json.load(fh)
    members = [load_checkpoint(path.parent / name) for name in desc["members"]]
    normalizer = None
    if "normalizer" in desc:
        nz = desc["normalizer"]
        normalizer = NormalizerStats(np.array(nz["mean"]), np.array(nz["std"]),
                                     nz.get("std_eps", 1e-8))
    return EnsembleModel(members, np.array(desc["thresholds"]), normalizer)
