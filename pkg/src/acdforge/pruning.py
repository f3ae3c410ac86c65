"""Two-stage compression: global weight sparsification, then iterative
channel pruning with per-step fine-tuning, then a recovery training run.

Channel candidates are ranked either by summed absolute weights or by a
first-order saliency (activation times activation-gradient at the
post-ReLU tap).  Scores are L2-normalized within each layer so layers
of different widths compete on a common scale, and the single globally
lowest channel is removed per iteration.  Recovery offers plain
fine-tuning, full re-training, scratch re-initialization, or knowledge
distillation against the uncompressed teacher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from . import network as N
from . import tensor as T
from . import training as TR
from .errors import SpecError

PRUNE_METHODS = ("magnitude", "taylor", "hybrid-magnitude", "hybrid-taylor")
RETRAIN_MODES = ("finetune-only", "retrain", "scratch", "distill")
DISTILL_VARIANTS = ("L1", "L2", "L3")


@dataclass
class PruneConfig:
    method: str = "hybrid-taylor"
    prune_sfeb: bool = False
    target_channel_fraction: float = 0.80
    finetune_epochs_per_step: int = 2
    sparsify_fraction: float = 0.95
    retrain_mode: str = "scratch"
    calib_batches: int = 2
    calib_batch_size: int = 16

    def validate(self):
        if self.method not in PRUNE_METHODS:
            raise SpecError(f"unknown pruning method {self.method!r}")
        if self.retrain_mode not in RETRAIN_MODES:
            raise SpecError(f"unknown retrain mode {self.retrain_mode!r}")
        if not 0.0 < self.target_channel_fraction < 1.0:
            raise SpecError("target_channel_fraction must lie in (0, 1), "
                            f"got {self.target_channel_fraction}")
        if not 0.0 <= self.sparsify_fraction < 1.0:
            raise SpecError("sparsify_fraction must lie in [0, 1), "
                            f"got {self.sparsify_fraction}")


@dataclass
class DistillConfig:
    loss_variant: str = "L3"
    temperature: float = 2.0
    alpha: float = 0.1

    @property
    def beta(self):
        return 1.0 - self.alpha

    def validate(self):
        if self.loss_variant not in DISTILL_VARIANTS:
            raise SpecError(f"unknown distill variant {self.loss_variant!r}")
        if self.temperature <= 0.0:
            raise SpecError(f"temperature must be positive, got "
                            f"{self.temperature}")


@dataclass
class ChannelScore:
    layer_id: int          # numeric conv index (1-based)
    layer: str             # conv layer name
    channel_idx: int
    raw: float
    normalized: float


# ---------------------------------------------------------------------------
# stage 1: weight sparsification


def sparsify_global(params, fraction):
    """Zero the globally smallest-magnitude conv/dense weights in place.

    Exactly ceil(fraction * W) entries go to zero, where W counts all
    conv and dense weight elements (biases and batchnorm excluded).
    Ties on magnitude resolve by flattened global position, so the
    result is deterministic.  Returns {key: bool mask}, True = kept.
    """
    if not 0.0 <= fraction < 1.0:
        raise SpecError(f"sparsify fraction must lie in [0, 1), got {fraction}")
    keys = [k for k in sorted(params) if k.endswith(".w")]
    sizes = [params[k].size for k in keys]
    total = int(sum(sizes))
    k_zero = math.ceil(fraction * total)
    flat = np.concatenate([np.abs(params[k]).ravel() for k in keys])
    order = np.argsort(flat, kind="stable")
    kill = order[:k_zero]
    keep = np.ones(total, dtype=bool)
    keep[kill] = False

    mask = {}
    off = 0
    for key, size in zip(keys, sizes):
        m = keep[off:off + size].reshape(params[key].shape)
        params[key] *= m
        mask[key] = m
        off += size
    return mask


def sparsity_of(mask):
    """Fraction of entries masked to zero."""
    total = sum(m.size for m in mask.values())
    zeros = sum(int((~m).sum()) for m in mask.values())
    return zeros / total if total else 0.0


# ---------------------------------------------------------------------------
# stage 2: channel ranking


def _conv_layers(spec):
    return [l for l in spec.layers if l.kind == G.CONV]


def _normalize(raw):
    # layer-wise L2; an all-zero layer stays all-zero rather than NaN
    norm = float(np.sqrt(np.sum(raw * raw)))
    if norm == 0.0:
        return np.zeros_like(raw)
    return raw / norm


def _to_scores(per_layer):
    scores = []
    for lid, name, raw in per_layer:
        normed = _normalize(raw)
        for c in range(raw.size):
            scores.append(ChannelScore(lid, name, c, float(raw[c]),
                                       float(normed[c])))
    return scores


def channel_scores_magnitude(spec, params):
    """Per-channel summed |w|, L2-normalized within each conv layer."""
    per_layer = []
    for l in _conv_layers(spec):
        w = params[f"{l.name}.w"]
        raw = np.abs(w).sum(axis=(1, 2, 3)).astype(np.float64)
        per_layer.append((int(l.name[4:]), l.name, raw))
    return _to_scores(per_layer)


def channel_saliency(act, grad):
    """Per-channel sum of act*grad plus the element count per channel."""
    prod = act * grad
    return prod.sum(axis=(0, 2, 3)), prod.shape[0] * prod.shape[2] * prod.shape[3]


def channel_scores_taylor(spec, params, batches):
    """First-order channel saliency from calibration batches.

    Runs eval-mode forwards (deterministic: running batchnorm stats,
    no dropout) with gradients enabled, scores each conv channel as
    |mean over batch and spatial positions of activation * gradient|
    at the post-ReLU tap, then L2-normalizes within each layer.
    """
    if not batches:
        raise SpecError("taylor scoring needs a nonempty calibration set")
    sums = {}
    counts = {}
    for xs, ys in batches:
        probs, cache = N.forward(spec, params, xs, train=False,
                                 want_taps=True, want_grads=True)
        loss = T.kl_div_loss(probs, T.tensor(ys))
        T.backward(loss)
        for name, tap in cache["taps"].items():
            s, cnt = channel_saliency(tap.data.astype(np.float64),
                                      tap.grad.astype(np.float64))
            if name not in sums:
                sums[name] = s
                counts[name] = cnt
            else:
                sums[name] += s
                counts[name] += cnt
    per_layer = []
    for l in _conv_layers(spec):
        raw = np.abs(sums[l.name] / counts[l.name])
        per_layer.append((int(l.name[4:]), l.name, raw))
    return _to_scores(per_layer)


def make_calib_batches(clips, labels, n_cls, length, batch_size, n_batches,
                       seed):
    """Deterministic calibration batches: random windows, one-hot labels."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_batches):
        xs = np.empty((batch_size, length), dtype=np.float32)
        ys = np.zeros((batch_size, n_cls), dtype=np.float32)
        for i in range(batch_size):
            j = int(rng.integers(0, len(clips)))
            xs[i] = TR.random_window(clips[j], length, rng) / TR.FULL_SCALE
            ys[i, int(labels[j])] = 1.0
        out.append((xs, ys))
    return out


# ---------------------------------------------------------------------------
# stage 2: channel removal


def select_channel(scores, spec, cfg):
    """Globally lowest normalized score among prunable channels.

    Layers already at one filter are protected, as are conv1/conv2
    unless the config opts the front end in.  Ties resolve by
    (layer_id, channel_idx).
    """
    filters = {l.name: l.filters for l in _conv_layers(spec)}
    eligible = [s for s in scores
                if filters[s.layer] > 1
                and (cfg.prune_sfeb or s.layer_id >= 3)]
    if not eligible:
        raise SpecError("no prunable channel remains above the per-layer floor")
    return min(eligible, key=lambda s: (s.normalized, s.layer_id, s.channel_idx))


def _consumer_of(spec, conv_name):
    """Layer whose weights read conv_name's channels directly, if any.

    Walking forward: another conv (or the classifier head) consumes
    channels weight-wise; the channel/height swap re-interprets them as
    geometry, so nothing downstream needs weight surgery.
    """
    seen = False
    for l in spec.layers:
        if l.name == conv_name:
            seen = True
            continue
        if not seen:
            continue
        if l.kind == G.SWAP:
            return None
        if l.kind in (G.CONV, G.DENSE):
            return l
    return None


def prune_channel(spec, params, conv_name, channel_idx, mask=None):
    """Remove one conv output channel; returns the rewired spec.

    ``params`` (and ``mask`` if given) are modified in place: the
    filter row, its bias and batchnorm entries, and the consumer
    layer's matching input slice all disappear.
    """
    consumer = _consumer_of(spec, conv_name)
    new_spec = G.rewire_after_channel_removal(spec, conv_name, channel_idx)

    def drop(key, axis):
        params[key] = np.delete(params[key], channel_idx, axis=axis)
        if mask is not None and key in mask:
            mask[key] = np.delete(mask[key], channel_idx, axis=axis)

    num = conv_name[4:]
    drop(f"{conv_name}.w", 0)
    drop(f"{conv_name}.b", 0)
    for part in ("gamma", "beta", "mean", "var"):
        key = f"bn{num}.{part}"
        if key in params:
            params[key] = np.delete(params[key], channel_idx, axis=0)
    if consumer is not None:
        drop(f"{consumer.name}.w", 1)
    N.check_params_match(new_spec, params)
    return new_spec


# ---------------------------------------------------------------------------
# stage 3 loss: distillation


def _np_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def distill_loss(student_logits, teacher_logits, target, cfg):
    """Soft-target loss plus hard-label term.

    The soft term compares temperature-softened student and teacher
    distributions and is rescaled by beta * T^2 (the usual gradient
    compensation for tempered softmax); the hard term compares the
    plain student distribution with the data label at weight alpha.
    Variants: L1 = CE/CE, L2 = KL/CE, L3 = KL/KL (soft/hard).
    """
    cfg.validate()
    temp = float(cfg.temperature)
    dtype = student_logits.data.dtype
    s_soft = T.softmax(T.scale(student_logits, 1.0 / temp))
    t_soft = T.tensor(_np_softmax(np.asarray(teacher_logits, dtype=np.float64)
                                  / temp), dtype=dtype)
    s_hard = T.softmax(student_logits)
    y = T.tensor(target, dtype=dtype)

    soft_op = T.cross_entropy_loss if cfg.loss_variant == "L1" else T.kl_div_loss
    hard_op = T.kl_div_loss if cfg.loss_variant == "L3" else T.cross_entropy_loss
    soft = soft_op(s_soft, t_soft)
    hard = hard_op(s_hard, y)
    return T.add(T.scale(soft, cfg.beta * temp * temp),
                 T.scale(hard, cfg.alpha))


def make_distill_loss_fn(teacher_spec, teacher_params, cfg):
    """Adapter handing the trainer a distillation objective."""

    def loss_fn(probs, cache, xs, ys):
        _, tcache = N.forward(teacher_spec, teacher_params, xs, train=False)
        return distill_loss(cache["logits"], tcache["logits"].data, ys, cfg)

    return loss_fn


# ---------------------------------------------------------------------------
# the full pipeline


@dataclass
class PruneResult:
    spec: object
    params: dict
    rows: list = field(default_factory=list)
    mask: dict | None = None


def _finetune_cfg(train_cfg, epochs, seed):
    return TR.TrainConfig(epochs=epochs, lr0=train_cfg.lr0 / 100.0,
                          schedule=(), warmup_epochs=0,
                          momentum=train_cfg.momentum,
                          weight_decay=train_cfg.weight_decay,
                          batch_size=train_cfg.batch_size, seed=seed)


def channel_prune_loop(spec, params, clips, labels, prune_cfg, train_cfg,
                       val_clips=None, val_labels=None, mask=None, seed=0,
                       log=None):
    """Iteratively remove the weakest channel and fine-tune briefly.

    Stops once total conv filters reach
    ceil((1 - target_fraction) * original).  Returns (spec, rows) with
    one log row per iteration:
    (iteration, layer, channel, raw_score, params, flops, finetune_acc).
    """
    original = G.count_filters(spec)
    target_count = math.ceil((1.0 - prune_cfg.target_channel_fraction)
                             * original)
    n_convs = len(_conv_layers(spec))
    if target_count < n_convs:
        raise SpecError(f"target of {target_count} filters is below the "
                        f"{n_convs}-layer floor")
    calib = None
    if prune_cfg.method.endswith("taylor"):
        calib = make_calib_batches(clips, labels, spec.n_cls, spec.i_len,
                                   prune_cfg.calib_batch_size,
                                   prune_cfg.calib_batches, seed)
    rows = []
    iteration = 0
    while G.count_filters(spec) > target_count:
        iteration += 1
        if calib is not None:
            scores = channel_scores_taylor(spec, params, calib)
        else:
            scores = channel_scores_magnitude(spec, params)
        cand = select_channel(scores, spec, prune_cfg)
        spec = prune_channel(spec, params, cand.layer, cand.channel_idx, mask)
        ft = _finetune_cfg(train_cfg, prune_cfg.finetune_epochs_per_step,
                           seed + iteration)
        TR.train(spec, params, clips, labels, ft, mask=mask)
        acc = float("nan")
        if val_clips is not None and len(val_clips):
            acc = TR.ten_crop_eval(spec, params, val_clips, val_labels).accuracy
        row = (iteration, cand.layer, cand.channel_idx, cand.raw,
               G.count_params(spec), G.count_flops(spec), acc)
        rows.append(row)
        if log is not None:
            log(*row)
    return spec, rows


def hybrid_prune(spec, params, clips, labels, prune_cfg, train_cfg,
                 val_clips=None, val_labels=None, teacher=None,
                 distill_cfg=None, seed=0, log=None):
    """Sparsify, prune channels iteratively, then recover.

    ``teacher`` supplies (spec, params) of the uncompressed model for
    the distillation recovery mode.  The sparsity mask constrains only
    the per-step fine-tuning; recovery training runs unmasked.
    Returns a PruneResult; the caller's ``params`` stay untouched so
    the dense baseline remains available for comparison.
    """
    prune_cfg.validate()
    params = {key: val.copy() for key, val in params.items()}
    mask = None
    if prune_cfg.method.startswith("hybrid"):
        mask = sparsify_global(params, prune_cfg.sparsify_fraction)

    spec, rows = channel_prune_loop(spec, params, clips, labels, prune_cfg,
                                    train_cfg, val_clips, val_labels,
                                    mask=mask, seed=seed, log=log)

    mode = prune_cfg.retrain_mode
    if mode == "retrain":
        TR.train(spec, params, clips, labels, train_cfg,
                 val_clips=val_clips, val_labels=val_labels)
    elif mode == "scratch":
        params = N.init_params(spec, seed=train_cfg.seed)
        TR.train(spec, params, clips, labels, train_cfg,
                 val_clips=val_clips, val_labels=val_labels)
    elif mode == "distill":
        if teacher is None:
            raise SpecError("distill recovery needs a teacher model")
        dcfg = distill_cfg if distill_cfg is not None else DistillConfig()
        params = N.init_params(spec, seed=train_cfg.seed)
        TR.train(spec, params, clips, labels, train_cfg,
                 val_clips=val_clips, val_labels=val_labels,
                 loss_fn=make_distill_loss_fn(teacher[0], teacher[1], dcfg))
    # finetune-only: the loop's own fine-tuning is the final state
    return PruneResult(spec=spec, params=params, rows=rows, mask=mask)
