"""One discrete-distribution layer: K candidate heads over a trunk feature.

Each output node is a 1x1 convolution from the trunk feature to an image;
one candidate gets selected per sample, the layer loss is computed on the
selected candidate only, and the selection (plus optional per-node "leak"
features from an extra 3x3 convolution) conditions the next layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import samplers
from . import tensor as T


class OutputNodeBank:
    """The K per-node heads of one layer, all slot-partitioned along K."""

    def __init__(self, k, feat_channels, img_channels, leak_channels=0, rng=None,
                 name="bank"):
        if k < 2:
            raise ValueError(f"need K >= 2 output nodes, got {k}")
        rng = rng or np.random.default_rng(0)
        self.k = k
        self.feat_channels = feat_channels
        self.img_channels = img_channels
        self.leak_channels = leak_channels
        w_scale = 1.0 / np.sqrt(feat_channels)
        self.proj_w = T.Parameter(
            rng.normal(0, w_scale, (k, img_channels, feat_channels, 1, 1)).astype(np.float32),
            slot_axis=0, name=f"{name}.proj_w")
        self.proj_b = T.Parameter(np.zeros((k, img_channels), np.float32),
                                  slot_axis=0, name=f"{name}.proj_b")
        if leak_channels:
            l_scale = np.sqrt(2.0 / (feat_channels * 9))
            self.leak_w = T.Parameter(
                rng.normal(0, l_scale,
                           (k, leak_channels, feat_channels, 3, 3)).astype(np.float32),
                slot_axis=0, name=f"{name}.leak_w")
            self.leak_b = T.Parameter(np.zeros((k, leak_channels), np.float32),
                                      slot_axis=0, name=f"{name}.leak_b")
        else:
            self.leak_w = None
            self.leak_b = None

    def parameters(self):
        ps = [self.proj_w, self.proj_b]
        if self.leak_w is not None:
            ps += [self.leak_w, self.leak_b]
        return ps


@dataclass
class CandidateSet:
    """The K candidate images (and optional leak features) of one layer."""

    images: T.Tensor  # (N,K,H,W,C)
    leak: T.Tensor | None  # (N,K,H,W,C_leak)
    layer_index: int

    @property
    def k(self):
        return self.images.shape[1]


@dataclass
class Selection:
    """Chosen candidate per sample: index k*, its image, and its score."""

    index: np.ndarray  # (N,) int64
    image: T.Tensor  # (N,H,W,C)
    leak: T.Tensor | None
    score: np.ndarray  # (N,) chosen candidate's sampler score


def _multi_head(feature, weight, bias, k, out_channels):
    """Run K per-node convs as one conv, then split the node axis out."""
    n, h, w, _ = feature.shape
    kk = weight.shape[3]
    w2 = T.reshape(weight, (k * out_channels, weight.shape[2], kk, kk))
    b2 = T.reshape(bias, (k * out_channels,))
    y = T.conv2d(feature, w2, b2)  # (N,H,W,K*C)
    y = T.reshape(y, (n, h, w, k, out_channels))
    return T.transpose(y, (0, 3, 1, 2, 4))  # (N,K,H,W,C)


def emit(bank, feature, prev_output=None, residual=False, layer_index=0):
    """Produce the layer's K candidates from a trunk feature.

    With residual mode on, each candidate is the previous layer's selected
    output plus this node's learned correction.
    """
    if feature.data.ndim != 4 or feature.shape[3] != bank.feat_channels:
        raise T.ShapeMismatch("emit", feature.shape,
                              ("N", "H", "W", bank.feat_channels))
    images = _multi_head(feature, bank.proj_w.value, bank.proj_b.value,
                         bank.k, bank.img_channels)
    if residual and layer_index > 0:
        if prev_output is None:
            raise ValueError(f"residual mode needs prev_output at layer {layer_index}")
        n, h, w, c = prev_output.shape
        images = T.add(images, T.reshape(prev_output, (n, 1, h, w, c)))
    leak = None
    if bank.leak_w is not None:
        leak = _multi_head(feature, bank.leak_w.value, bank.leak_b.value,
                           bank.k, bank.leak_channels)
    return CandidateSet(images=images, leak=leak, layer_index=layer_index)


def guided_indices(cands, target):
    """Per-sample argmin of mean squared distance to target; ties -> lowest.

    target: (N,H,W,C) numpy. Returns (indices (N,), distances (N,K))."""
    imgs = cands.images.data
    d = imgs.astype(np.float64) - np.asarray(target, np.float64)[:, None]
    d2 = np.mean(d * d, axis=(2, 3, 4))
    return np.argmin(d2, axis=1), d2


def gather_selection(cands, indices, scores=None):
    """Build a Selection from per-sample candidate indices (on the tape)."""
    indices = np.asarray(indices, dtype=np.int64)
    image = T.gather_nodes(cands.images, indices)
    leak = T.gather_nodes(cands.leak, indices) if cands.leak is not None else None
    if scores is None:
        scores = np.zeros(indices.shape[0])
    return Selection(index=indices, image=image, leak=leak, score=np.asarray(scores))


def select(cands, spec, target=None, rng=None):
    """Choose one candidate per sample under a sampler spec.

    GuidedL2 and RandomChoice are vectorized over the batch; other specs are
    applied per sample. A spec instance of GuidedL2 with target=None uses the
    `target` argument (batched)."""
    n, k = cands.images.shape[0], cands.k
    if isinstance(spec, samplers.GuidedL2) or (spec is None and target is not None):
        t = target if (spec is None or spec.target is None) else spec.target
        if t is None:
            raise samplers.SamplerError("guided selection needs a target")
        t = np.asarray(t)
        if t.ndim == 3:
            t = np.broadcast_to(t, (n,) + t.shape)
        idx, d2 = guided_indices(cands, t)
        return gather_selection(cands, idx, -d2[np.arange(n), idx])
    if isinstance(spec, samplers.RandomChoice):
        if rng is None:
            raise samplers.SamplerError("random choice needs an rng")
        idx = rng.integers(0, k, size=n)
        return gather_selection(cands, idx)
    idx = np.empty(n, np.int64)
    scores = np.empty(n)
    for i in range(n):
        idx[i], scores[i] = samplers.pick(spec, cands.images.data[i],
                                          cands.layer_index, rng=rng)
    return gather_selection(cands, idx, scores)


def layer_loss(sel, target):
    """Mean squared error between the selected image and the target.

    Gradient reaches only the selected node's slot (plus the trunk): the
    gather scatters into the chosen slice, every other slot slice stays 0."""
    t = target if isinstance(target, T.Tensor) else T.Tensor(np.asarray(target))
    return T.mse(sel.image, t)


def next_condition(sel):
    """Condition for the next layer: the selected image, with the selected
    node's leak features concatenated. Leak never enters distance or loss."""
    if sel.leak is None:
        return sel.image
    return T.concat_channels([sel.image, sel.leak])
