"""Sampler strategies: how one of a layer's K candidates gets chosen.

Guided reconstruction picks the candidate nearest a target; random choice
drives generation; classifier and transform guides steer generation toward a
condition without ever asking the guide for gradients; top-k adds diversity;
weighted rank combination merges several guides; an external handle defers
the choice to another process (e.g. a human behind the session API).
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import imaging


class SamplerError(Exception):
    pass


class ExternalChoiceTimeout(SamplerError):
    """The external chooser did not supply an index in time."""


@dataclass
class GuidedL2:
    """Pick the candidate with the smallest mean squared distance to target."""

    target: np.ndarray


@dataclass
class RandomChoice:
    """Uniform over the K candidates; scores are ignored."""


@dataclass
class ClassifierGuide:
    """Maximize a black-box classifier's probability for one class.

    scorer maps a (K,H,W,C) candidate batch to (K, n_classes) scores; only
    forward evaluations are ever requested.
    """

    scorer: object
    class_id: int


@dataclass
class ScorerGuide:
    """Maximize a black-box per-candidate score: (K,H,W,C) -> (K,)."""

    scorer: object


@dataclass
class DomainTransform:
    """Pixel-domain projection into a condition domain."""

    kind: str  # downsample-average | grayscale | mask
    factor: int = 0
    luma: tuple = (0.299, 0.587, 0.114)
    mask: np.ndarray | None = None


@dataclass
class TransformGuide:
    """Minimize distance to a condition after projecting candidates."""

    transform: DomainTransform
    condition: np.ndarray


@dataclass
class TopK:
    """Uniform pick among the k best-scoring candidates of an inner guide."""

    k: int
    inner: object


@dataclass
class WeightedCombo:
    """Weighted rank combination of several guides (weights sum to 1)."""

    parts: list = field(default_factory=list)  # [(spec, weight), ...]


@dataclass
class External:
    """Defer the choice to a handle: handle.get_choice(layer, images, timeout)."""

    handle: object
    timeout: float = 30.0


def apply_transform(t, image):
    """Apply a DomainTransform to one (H,W,C) image."""
    image = np.asarray(image)
    h, w, c = image.shape
    if t.kind == "downsample-average":
        f = int(t.factor)
        if f <= 0 or h % f or w % f:
            raise SamplerError(f"downsample factor {t.factor} does not divide {h}x{w}")
        return image.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))
    if t.kind == "grayscale":
        if c == 1:
            return image.copy()
        if c != 3:
            raise SamplerError(f"grayscale needs 1 or 3 channels, got {c}")
        luma = np.asarray(t.luma, image.dtype)
        return (image * luma).sum(axis=2, keepdims=True)
    if t.kind == "mask":
        if t.mask is None or t.mask.shape != (h, w):
            got = None if t.mask is None else t.mask.shape
            raise SamplerError(f"mask shape {got} does not match image {h}x{w}")
        return image * np.asarray(t.mask, image.dtype)[:, :, None]
    raise SamplerError(f"unknown transform kind {t.kind!r}")


def _mean_sq(a, b):
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float(np.mean(d * d))


def score(spec, images):
    """Score (K,H,W,C) candidates under a spec; higher is better."""
    images = np.asarray(images)
    k = images.shape[0]
    if isinstance(spec, GuidedL2):
        if spec.target is None:
            raise SamplerError("guided sampler needs a target")
        if spec.target.shape != images.shape[1:]:
            raise SamplerError(
                f"target shape {spec.target.shape} does not match candidates {images.shape[1:]}")
        d = images.astype(np.float64) - spec.target.astype(np.float64)
        return -np.mean(d * d, axis=(1, 2, 3))
    if isinstance(spec, ClassifierGuide):
        out = np.asarray(spec.scorer(images), np.float64)
        if out.shape[0] != k or out.ndim != 2:
            raise SamplerError(f"classifier scorer returned shape {out.shape}")
        return out[:, spec.class_id]
    if isinstance(spec, ScorerGuide):
        out = np.asarray(spec.scorer(images), np.float64).reshape(-1)
        if out.shape[0] != k:
            raise SamplerError(f"scorer returned {out.shape[0]} values for {k} candidates")
        return out
    if isinstance(spec, TransformGuide):
        cond = np.asarray(spec.condition)
        if spec.transform.kind == "mask":
            m = np.asarray(spec.transform.mask, np.float64)
            denom = m.sum() * images.shape[3]
            if denom == 0:
                return np.zeros(k)
            d = (images.astype(np.float64) - cond.astype(np.float64)) * m[None, :, :, None]
            return -np.sum(d * d, axis=(1, 2, 3)) / denom
        scores = np.empty(k)
        for i in range(k):
            proj = apply_transform(spec.transform, images[i])
            if proj.shape != cond.shape:
                raise SamplerError(
                    f"transformed candidate {proj.shape} does not match condition {cond.shape}")
            scores[i] = -_mean_sq(proj, cond)
        return scores
    if isinstance(spec, TopK):
        return score(spec.inner, images)
    if isinstance(spec, WeightedCombo):
        return -_combined_ranks(spec, images).astype(np.float64)
    if isinstance(spec, (RandomChoice, External)):
        return np.zeros(k)
    raise SamplerError(f"unknown sampler spec {type(spec).__name__}")


def choose(spec, scores, rng=None):
    """Turn scores into one index. Deterministic argmax for plain guided
    specs (ties to the lowest index); stochastic for TopK/RandomChoice."""
    scores = np.asarray(scores, np.float64)
    k = scores.shape[0]
    if isinstance(spec, RandomChoice):
        if rng is None:
            raise SamplerError("random choice needs an rng")
        return int(rng.integers(k))
    if isinstance(spec, TopK):
        if spec.k < 1 or spec.k > k:
            raise SamplerError(f"top-k {spec.k} out of range for {k} candidates")
        if rng is None:
            raise SamplerError("top-k choice needs an rng")
        order = np.argsort(-scores, kind="stable")[:spec.k]
        return int(order[rng.integers(spec.k)])
    return int(np.argmax(scores))


def _combined_ranks(spec, images):
    parts = list(spec.parts)
    if len(parts) < 2:
        raise SamplerError("weighted combination needs at least 2 guides")
    weights = np.array([w for _, w in parts], np.float64)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise SamplerError(f"weights must be >= 0 and sum to 1, got {weights.tolist()}")
    k = images.shape[0]
    combined = np.zeros(k)
    for part, weight in parts:
        s = score(part, images)
        order = np.argsort(-s, kind="stable")
        ranks = np.empty(k)
        ranks[order] = np.arange(k)  # rank 0 = best
        combined += weight * ranks
    return combined


def combine_ranks(parts, images, rng):
    """Weighted rank combination; uniform pick among the two best combined."""
    combined = _combined_ranks(WeightedCombo(parts=list(parts)), images)
    order = np.lexsort((np.arange(combined.shape[0]), combined))
    top2 = order[:2] if combined.shape[0] >= 2 else order
    return int(top2[rng.integers(len(top2))])


def pick(spec, images, layer_index, rng=None):
    """Full per-layer choice: scores + choose, with the combo/external cases.

    Returns (index, score_of_choice).
    """
    if isinstance(spec, External):
        try:
            idx = spec.handle.get_choice(layer_index, images, spec.timeout)
        except ExternalChoiceTimeout:
            raise
        except Exception as e:
            raise SamplerError(f"external chooser failed: {e}") from e
        if idx is None:
            raise ExternalChoiceTimeout(
                f"no choice supplied for layer {layer_index} within {spec.timeout}s")
        idx = int(idx)
        if not 0 <= idx < images.shape[0]:
            raise SamplerError(f"external choice {idx} out of range")
        return idx, 0.0
    if isinstance(spec, WeightedCombo):
        if rng is None:
            raise SamplerError("weighted combination needs an rng")
        idx = combine_ranks(spec.parts, images, rng)
        return idx, 0.0
    s = score(spec, images)
    idx = choose(spec, s, rng=rng)
    return idx, float(s[idx])


class QueueChoiceHandle:
    """External handle fed by another thread (or a scripted test)."""

    def __init__(self):
        import queue

        self._q = queue.Queue()

    def put(self, index):
        self._q.put(index)

    def get_choice(self, layer_index, images, timeout):
        import queue

        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            raise ExternalChoiceTimeout(
                f"no choice supplied for layer {layer_index} within {timeout}s") from None


class SubprocessScorer:
    """Out-of-process scorer: candidates go out as a PNG batch in a temp
    directory, scores come back as a JSON array on stdout."""

    def __init__(self, command):
        self.command = list(command)

    def __call__(self, images):
        images = np.asarray(images)
        with tempfile.TemporaryDirectory(prefix="ddn-scorer-") as d:
            for i, img in enumerate(images):
                imaging.write_png(f"{d}/cand_{i:03d}.png", img)
            proc = subprocess.run(self.command + [d], capture_output=True, text=True)
            if proc.returncode != 0:
                raise SamplerError(f"scorer command failed: {proc.stderr.strip()}")
            try:
                scores = json.loads(proc.stdout)
            except json.JSONDecodeError as e:
                raise SamplerError(f"scorer output is not a JSON array: {e}") from e
        arr = np.asarray(scores, np.float64)
        if arr.shape[0] != images.shape[0]:
            raise SamplerError(
                f"scorer returned {arr.shape[0]} scores for {images.shape[0]} candidates")
        return arr
