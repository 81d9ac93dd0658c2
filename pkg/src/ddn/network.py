"""The full generative network: trunk blocks composed with discrete
distribution layers, under either paradigm.

single-shot: every block and node bank has its own weights, stacked into one
deep decoder. recurrence: one shared block + bank applied L times, images in
and images out. Training follows the guided selection scheme: per layer, the
candidate nearest the training image is selected, the loss is taken on that
candidate only, losses are averaged over layers, and match counters feed the
split-and-prune rebalancer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint, layers, samplers, splitprune
from . import tensor as T

PARADIGMS = ("single-shot", "recurrence")


@dataclass
class ModelConfig:
    k: int = 8
    l: int = 3
    paradigm: str = "recurrence"
    image_shape: tuple = (28, 28, 1)  # (H, W, C)
    widths: tuple = (24, 48)
    chain_dropout: float = 0.05
    residual: bool = True
    leak: bool = True
    leak_channels: int = 4
    class_count: int | None = None
    class_embed: int = 16
    split_prune: bool = True
    lr: float = 1e-3
    init_seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.widths = tuple(int(v) for v in self.widths)
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.l < 1:
            raise ValueError(f"l must be >= 1, got {self.l}")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if not 0.0 <= self.chain_dropout <= 1.0:
            raise ValueError(f"chain_dropout must be in [0,1], got {self.chain_dropout}")
        h, w, _ = self.image_shape
        if h % 4 or w % 4:
            raise ValueError(f"image sides must be divisible by 4, got {h}x{w}")

    def to_json(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["image_shape"] = list(self.image_shape)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class TrainMetrics:
    """Per-step training record; the reported loss is the mean over layers."""

    step: int
    per_layer: list
    loss_value: float
    loss: T.Tensor | None = None
    events: int = 0

    @property
    def j(self):
        return self.loss_value


@dataclass
class ZscgAudit:
    """Evidence that a guided generation stayed gradient-free."""

    choice_rounds: int
    candidates_scored: int
    gradient_requests: int


def _he(rng, shape, fan_in):
    return rng.normal(0, np.sqrt(2.0 / fan_in), shape).astype(np.float32)


class _Conv:
    def __init__(self, rng, c_in, c_out, ksize, name):
        self.w = T.Parameter(_he(rng, (c_out, c_in, ksize, ksize), c_in * ksize * ksize),
                             name=f"{name}.w")
        self.b = T.Parameter(np.zeros(c_out, np.float32), name=f"{name}.b")

    def __call__(self, x):
        return T.relu(T.conv2d(x, self.w.value, self.b.value))

    def parameters(self):
        return [self.w, self.b]


class _UNetBlock:
    """Small down-2x / up-2x block with skip connections; feature out = w1."""

    def __init__(self, rng, c_in, w1, w2, name):
        self.c1 = _Conv(rng, c_in, w1, 3, f"{name}.c1")
        self.c2 = _Conv(rng, w1, w2, 3, f"{name}.c2")
        self.c3 = _Conv(rng, w2, w2, 3, f"{name}.c3")
        self.c4 = _Conv(rng, w2 + w2, w2, 3, f"{name}.c4")
        self.c5 = _Conv(rng, w2 + w1, w1, 3, f"{name}.c5")

    def __call__(self, x):
        a = self.c1(x)
        b = self.c2(T.avgpool2x2(a))
        c = self.c3(T.avgpool2x2(b))
        d = self.c4(T.concat_channels([T.upsample_nearest2x2(c), b]))
        e = self.c5(T.concat_channels([T.upsample_nearest2x2(d), a]))
        return e

    def parameters(self):
        return sum((c.parameters() for c in (self.c1, self.c2, self.c3, self.c4, self.c5)), [])


class _ShotBlock:
    """Two convolutions between consecutive distribution layers."""

    def __init__(self, rng, c_in, w1, name):
        self.c1 = _Conv(rng, c_in, w1, 3, f"{name}.c1")
        self.c2 = _Conv(rng, w1, w1, 3, f"{name}.c2")

    def __call__(self, x):
        return self.c2(self.c1(x))

    def parameters(self):
        return self.c1.parameters() + self.c2.parameters()


class DDN:
    def __init__(self, config):
        self.config = config
        self.step = 0
        rng = np.random.default_rng(config.init_seed)
        h, w, c_img = config.image_shape
        w1, w2 = config.widths
        leak_ch = config.leak_channels if config.leak else 0
        cond_ch = c_img + leak_ch
        if config.class_count:
            cond_ch += config.class_embed

        self.parameters = []
        if config.class_count:
            self.class_table = T.Parameter(
                rng.normal(0, 0.5, (config.class_count, config.class_embed)).astype(np.float32),
                name="class_embed")
            self.parameters.append(self.class_table)
        else:
            self.class_table = None

        if config.paradigm == "recurrence":
            self.block = _UNetBlock(rng, cond_ch, w1, w2, "block")
            self.parameters += self.block.parameters()
            self.banks = [layers.OutputNodeBank(config.k, w1, c_img,
                                                leak_channels=leak_ch, rng=rng, name="bank")]
        else:
            self.stem_const = T.Parameter(
                rng.normal(0, 0.1, (h // 4, w // 4, w2)).astype(np.float32), name="stem.const")
            self.stem_c1 = _Conv(rng, w2, w1, 3, "stem.c1")
            self.stem_c2 = _Conv(rng, w1, w1, 3, "stem.c2")
            self.parameters += [self.stem_const] + self.stem_c1.parameters() \
                + self.stem_c2.parameters()
            self.blocks = []
            self.banks = []
            for l in range(config.l):
                blk = _ShotBlock(rng, w1 + cond_ch, w1, f"block{l}")
                self.blocks.append(blk)
                self.parameters += blk.parameters()
                self.banks.append(layers.OutputNodeBank(
                    config.k, w1, c_img, leak_channels=leak_ch, rng=rng, name=f"bank{l}"))
        for bank in self.banks:
            self.parameters += bank.parameters()

        self.opt_states = [T.AdamState(p.shape, lr=config.lr) for p in self.parameters]
        self._state_of = {id(p): s for p, s in zip(self.parameters, self.opt_states)}
        self.sp_states = [splitprune.SplitPruneState(config.k) for _ in self.banks]

    # -- structure helpers ---------------------------------------------------

    def bank(self, l):
        return self.banks[0] if self.config.paradigm == "recurrence" else self.banks[l]

    def sp_state(self, l):
        return self.sp_states[0] if self.config.paradigm == "recurrence" else self.sp_states[l]

    def bank_slots(self, bank):
        return [(p, self._state_of[id(p)]) for p in bank.parameters()]

    def parameter_count(self):
        return int(sum(p.value.size for p in self.parameters))

    def parameter_bytes(self):
        return int(sum(p.value.data.nbytes for p in self.parameters))

    # -- forward machinery ---------------------------------------------------

    def _class_rows(self, n, labels):
        if labels is None:
            if self.config.class_count:
                raise ValueError("class-conditional model needs labels")
            return None
        if not self.config.class_count:
            raise ValueError("labels given but the model has no class conditioning")
        labels = np.asarray(labels, np.int64)
        if labels.ndim == 0:
            labels = np.full(n, int(labels), np.int64)
        if labels.min() < 0 or labels.max() >= self.config.class_count:
            raise ValueError(f"label out of range [0, {self.config.class_count})")
        return T.embed(self.class_table.value, labels)

    def _condition(self, n, sel_img, sel_leak, class_rows):
        h, w, c_img = self.config.image_shape
        leak_ch = self.config.leak_channels if self.config.leak else 0
        parts = []
        parts.append(sel_img if sel_img is not None
                     else T.Tensor(np.zeros((n, h, w, c_img), np.float32)))
        if leak_ch:
            parts.append(sel_leak if sel_leak is not None
                         else T.Tensor(np.zeros((n, h, w, leak_ch), np.float32)))
        if class_rows is not None:
            parts.append(T.broadcast_hw(class_rows, h, w))
        return T.concat_channels(parts) if len(parts) > 1 else parts[0]

    def _stem(self, n):
        x = T.broadcast_batch(self.stem_const.value, n)
        x = self.stem_c1(T.upsample_nearest2x2(x))
        return self.stem_c2(T.upsample_nearest2x2(x))

    def _run(self, n, choose, labels=None, want_layer_images=False):
        """Shared layer loop. choose(l, cands) -> (indices (n,), scores (n,)).

        Returns (latents, selections, layer_images)."""
        cfg = self.config
        class_rows = self._class_rows(n, labels)
        feature = self._stem(n) if cfg.paradigm == "single-shot" else None
        sel_img = sel_leak = None
        prev_sel = None
        latents = np.zeros((n, cfg.l), np.int64)
        layer_images = []
        last_sel = None
        for l in range(cfg.l):
            cond = self._condition(n, sel_img, sel_leak, class_rows)
            if cfg.paradigm == "recurrence":
                feat = self.block(cond)
            else:
                feat = self.blocks[l](T.concat_channels([feature, cond]))
                feature = feat
            cands = layers.emit(self.bank(l), feat,
                                prev_output=prev_sel, residual=cfg.residual, layer_index=l)
            idx, scores = choose(l, cands)
            sel = layers.gather_selection(cands, idx, scores)
            latents[:, l] = sel.index
            sel_img, sel_leak, prev_sel = sel.image, sel.leak, sel.image
            last_sel = sel
            if want_layer_images:
                layer_images.append(sel.image.data.copy())
        return latents, last_sel, layer_images

    # -- training ------------------------------------------------------------

    def forward_train(self, x, labels=None, rng=None):
        """One guided training pass over a batch.

        x: (N,H,W,C) float32 in [0,1]. Chain dropout swaps the guided choice
        for a uniform random one, per layer per sample; only guided picks
        update the match counters. Backward, the Adam step, and
        apply_split_prune are the trainer's responsibility.
        """
        cfg = self.config
        x = np.asarray(x, np.float32)
        n = x.shape[0]
        if x.shape[1:] != cfg.image_shape:
            raise T.ShapeMismatch("forward_train", x.shape, ("N",) + cfg.image_shape)
        if cfg.chain_dropout > 0 and rng is None:
            raise ValueError("chain dropout needs an rng")
        tx = T.Tensor(x)
        losses = []

        def choose(l, cands):
            guided, d2 = layers.guided_indices(cands, x)
            idx = guided
            guided_mask = np.ones(n, bool)
            if cfg.chain_dropout > 0:
                drop = rng.random(n) < cfg.chain_dropout
                if drop.any():
                    idx = np.where(drop, rng.integers(0, cfg.k, n), guided)
                    guided_mask = ~drop
            if guided_mask.any():
                splitprune.record_matches(self.sp_state(l), idx[guided_mask])
            return idx, -d2[np.arange(n), idx]

        latents = np.zeros((n, cfg.l), np.int64)

        class_rows = self._class_rows(n, labels)
        feature = self._stem(n) if cfg.paradigm == "single-shot" else None
        sel_img = sel_leak = prev_sel = None
        for l in range(cfg.l):
            cond = self._condition(n, sel_img, sel_leak, class_rows)
            if cfg.paradigm == "recurrence":
                feat = self.block(cond)
            else:
                feat = self.blocks[l](T.concat_channels([feature, cond]))
                feature = feat
            cands = layers.emit(self.bank(l), feat,
                                prev_output=prev_sel, residual=cfg.residual, layer_index=l)
            idx, scores = choose(l, cands)
            sel = layers.gather_selection(cands, idx, scores)
            losses.append(layers.layer_loss(sel, tx))
            latents[:, l] = sel.index
            sel_img, sel_leak, prev_sel = sel.image, sel.leak, sel.image

        loss = T.scale(T.add_n(losses), 1.0 / cfg.l)
        per_layer = [float(np.float64(j.data)) for j in losses]
        metrics = TrainMetrics(step=self.step, per_layer=per_layer,
                               loss_value=float(np.mean(per_layer)), loss=loss)
        return metrics, latents

    def apply_split_prune(self):
        """Run at most one split+prune event per node bank; returns events."""
        events = []
        for i, (state, bank) in enumerate(zip(self.sp_states, self.banks)):
            ev = splitprune.check_and_apply(state, self.bank_slots(bank), step=self.step)
            if ev is not None:
                events.append((i, ev))
        return events

    # -- inference -----------------------------------------------------------

    def generate(self, n, seed=0, class_label=None):
        """Sample n images by picking nodes uniformly at random per layer."""
        rng = np.random.default_rng(seed)
        labels = None if class_label is None else np.full(n, class_label, np.int64)
        with T.no_grad():
            latents, sel, _ = self._run(
                n, lambda l, cands: (rng.integers(0, self.config.k, n), np.zeros(n)),
                labels=labels)
        return sel.image.data.copy(), latents

    def reconstruct(self, x, class_label=None, return_layers=False):
        """Guided pass against x; no losses, no updates. Returns the latent
        per sample and the final selected image (plus per-layer mean squared
        errors when asked)."""
        x = np.asarray(x, np.float32)
        n = x.shape[0]
        labels = None if class_label is None else np.full(n, class_label, np.int64)

        def choose(l, cands):
            idx, d2 = layers.guided_indices(cands, x)
            return idx, -d2[np.arange(n), idx]

        with T.no_grad():
            latents, sel, layer_images = self._run(n, choose, labels=labels,
                                                   want_layer_images=return_layers)
        if return_layers:
            layer_mse = [float(np.mean((img.astype(np.float64) - x) ** 2))
                         for img in layer_images]
            return latents, sel.image.data.copy(), layer_mse
        return latents, sel.image.data.copy()

    def decode(self, latents, class_label=None):
        """Deterministically decode latent index sequences to images."""
        latents = np.asarray(latents, np.int64)
        squeeze = latents.ndim == 1
        if squeeze:
            latents = latents[None]
        if latents.ndim != 2 or latents.shape[1] != self.config.l:
            raise ValueError(f"latent must have length {self.config.l}, got {latents.shape}")
        if latents.min() < 0 or latents.max() >= self.config.k:
            raise ValueError(f"latent index out of range [0, {self.config.k})")
        n = latents.shape[0]
        labels = None if class_label is None else np.full(n, class_label, np.int64)
        with T.no_grad():
            _, sel, _ = self._run(n, lambda l, cands: (latents[:, l], np.zeros(n)),
                                  labels=labels)
        images = sel.image.data.copy()
        return images[0] if squeeze else images

    def zscg(self, spec, seed=0, class_label=None):
        """Guided conditional generation with an arbitrary sampler spec.

        Exactly L choice rounds; every layer scores at most K candidates; no
        gradients are ever requested. Returns (latent, image, audit)."""
        rng = np.random.default_rng(seed)
        labels = None if class_label is None else np.asarray([class_label], np.int64)
        backward_before = T.backward_call_count()
        scored = 0

        def choose(l, cands):
            nonlocal scored
            scored += cands.k
            try:
                idx, score = samplers.pick(spec, cands.images.data[0], l, rng=rng)
            except samplers.SamplerError as e:
                raise samplers.SamplerError(f"layer {l}: {e}") from e
            return np.array([idx], np.int64), np.array([score])

        with T.no_grad():
            latents, sel, _ = self._run(1, choose, labels=labels)
        audit = ZscgAudit(choice_rounds=self.config.l, candidates_scored=scored,
                          gradient_requests=T.backward_call_count() - backward_before)
        return latents[0], sel.image.data[0].copy(), audit

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        meta = {
            "config": self.config.to_json(),
            "step": self.step,
            "split_prune": [s.to_json() for s in self.sp_states],
        }
        checkpoint.save_state(path, meta, self.parameters, self.opt_states)

    @classmethod
    def load(cls, path):
        meta, params, states = checkpoint.load_state(path)
        config = ModelConfig.from_json(meta["config"])
        model = cls(config)
        if len(params) != len(model.parameters):
            raise checkpoint.CheckpointError(
                f"{path}: {len(params)} parameters, model needs {len(model.parameters)}")
        for mine, theirs in zip(model.parameters, params):
            if mine.name != theirs.name or mine.shape != theirs.shape:
                raise checkpoint.CheckpointError(
                    f"{path}: parameter mismatch {theirs.name}{theirs.shape} "
                    f"vs {mine.name}{mine.shape}")
            mine.value.data[...] = theirs.value.data
        for mine, theirs in zip(model.opt_states, states):
            mine.m[...] = theirs.m
            mine.v[...] = theirs.v
            mine.t = theirs.t
            mine.lr = theirs.lr
            mine.beta1, mine.beta2, mine.eps = theirs.beta1, theirs.beta2, theirs.eps
        model.sp_states = [splitprune.SplitPruneState.from_json(d)
                           for d in meta["split_prune"]]
        model.step = meta["step"]
        return model


class Trainer:
    """Owns the training loop around forward_train: backward, Adam,
    split-and-prune, and the JSON-lines logs."""

    def __init__(self, model, seed=0, metrics_file=None, events_file=None):
        self.model = model
        self.rng = np.random.default_rng(seed)
        self.metrics_file = metrics_file
        self.events_file = events_file

    def train_step(self, x, labels=None):
        import json

        model = self.model
        metrics, _ = model.forward_train(x, labels=labels, rng=self.rng)
        T.backward(metrics.loss)
        T.adam_step(model.parameters, model.opt_states)
        events = model.apply_split_prune() if model.config.split_prune else []
        metrics.events = len(events)
        if self.metrics_file:
            self.metrics_file.write(json.dumps(
                {"step": model.step, "J": metrics.loss_value,
                 "J_l": metrics.per_layer, "events": metrics.events}) + "\n")
        if self.events_file:
            for bank_idx, ev in events:
                self.events_file.write(json.dumps(
                    {"step": model.step, "layer": bank_idx,
                     "split_src": ev.split_src, "pruned": ev.pruned}) + "\n")
        model.step += 1
        return metrics
