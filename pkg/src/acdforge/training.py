"""Between-class training and windowed evaluation.

Training examples are mixtures of two clips: a gain-aware ratio decides
how much of each clip enters the waveform, and the label is the same
ratio split across the two classes.  The network therefore learns from
soft targets and is scored with a KL objective.

Evaluation slides ten equal-length windows across a zero-padded clip
and averages the class probabilities before taking the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import network as N
from . import tensor as T
from .errors import DivergenceError, FiniteError, SpecError

FULL_SCALE = 32768.0
SILENCE_DB = -80.0


def gain_db(samples):
    """Peak level relative to 16-bit full scale, floored at -80 dB."""
    peak = float(np.max(np.abs(samples))) if len(samples) else 0.0
    if peak <= 0.0:
        return SILENCE_DB
    return max(SILENCE_DB, 20.0 * np.log10(peak / FULL_SCALE))


def mix_ratio(g1, g2, r):
    """Mixing coefficient for the first clip.

    Equalizes perceived level: a clip that is louder by d dB gets its
    share shrunk by the factor 10^(d/20) so the draw ``r`` expresses
    the listener's balance rather than raw amplitude:

        p = 1 / (1 + 10^((g1 - g2)/20) * (1 - r) / r)
    """
    if not 0.0 < r < 1.0:
        raise SpecError(f"mix_ratio: r must lie strictly inside (0, 1), got {r}")
    return 1.0 / (1.0 + 10.0 ** ((g1 - g2) / 20.0) * (1.0 - r) / r)


def bc_mix(s1, s2, p):
    """Mix two aligned waveforms with energy renormalization.

    The divisor sqrt(p^2 + (1-p)^2) keeps the expected energy of the
    mixture at the level of its parts.
    """
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape:
        raise SpecError(f"bc_mix: length mismatch {s1.shape} vs {s2.shape}")
    return (p * s1 + (1.0 - p) * s2) / np.sqrt(p * p + (1.0 - p) ** 2)


def random_window(samples, length, rng):
    """Pad by length/2 on both sides, then crop ``length`` at random."""
    samples = np.asarray(samples)
    if samples.size == 0:
        raise SpecError("random_window: empty clip")
    half = length // 2
    padded = np.concatenate([np.zeros(half, samples.dtype), samples,
                             np.zeros(half, samples.dtype)])
    lo = padded.size - length
    if lo < 0:
        raise SpecError(f"random_window: window {length} exceeds padded clip "
                        f"{padded.size}")
    start = int(rng.integers(0, lo + 1))
    return padded[start:start + length]


def make_training_example(clip_a, label_a, clip_b, label_b, n_cls, length, rng):
    """One mixed waveform plus its soft two-class label.

    Both clips are windowed independently, gains are measured on the
    windows, and the normalized mixture is scaled into [-1, 1] by full
    scale.  Returns (waveform float32, label float32[n_cls]).
    """
    wa = random_window(clip_a, length, rng)
    wb = random_window(clip_b, length, rng)
    r = float(rng.uniform(0.0, 1.0))
    r = min(max(r, 1e-7), 1.0 - 1e-7)
    p = mix_ratio(gain_db(wa), gain_db(wb), r)
    x = bc_mix(wa, wb, p) / FULL_SCALE
    y = np.zeros(n_cls, dtype=np.float32)
    y[label_a] += p
    y[label_b] += 1.0 - p
    return x.astype(np.float32), y


def sample_batch(clips, labels, n_cls, length, batch_size, rng):
    """Batch of between-class examples; pair members always differ in class."""
    labels = np.asarray(labels)
    xs = np.empty((batch_size, length), dtype=np.float32)
    ys = np.empty((batch_size, n_cls), dtype=np.float32)
    for i in range(batch_size):
        a = int(rng.integers(0, len(clips)))
        others = np.flatnonzero(labels != labels[a])
        if others.size == 0:
            raise SpecError("sample_batch: need at least two classes")
        b = int(others[rng.integers(0, others.size)])
        xs[i], ys[i] = make_training_example(
            clips[a], int(labels[a]), clips[b], int(labels[b]),
            n_cls, length, rng)
    return xs, ys


# ---------------------------------------------------------------------------
# schedule / loop


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr0: float = 0.1
    schedule: tuple = (600, 1200, 1800)
    warmup_epochs: int = 10
    warmup_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0


@dataclass
class TrainResult:
    params: dict
    curve: list = field(default_factory=list)  # (epoch, lr, loss, val_acc)
    best_val: float = float("nan")
    diverged: bool = False


def learning_rate(cfg, epoch):
    """Epoch is 1-indexed: a damped warmup, then tenfold decays after
    each schedule milestone."""
    if epoch <= cfg.warmup_epochs:
        return cfg.lr0 * cfg.warmup_factor
    drops = sum(1 for s in cfg.schedule if epoch > s)
    return cfg.lr0 * (0.1 ** drops)


def train(spec, params, clips, labels, cfg, val_clips=None, val_labels=None,
          mask=None, log=None, loss_fn=None):
    """SGD training loop over between-class batches.

    ``mask`` optionally pins a sparsity pattern: masked weights are
    re-zeroed after every optimizer step.  A non-finite loss aborts the
    run and restores the last state that finished an epoch cleanly;
    if no epoch ever finished, ``DivergenceError`` is raised.

    ``loss_fn(probs, cache, xs, ys)`` may replace the default KL
    objective; it must return a scalar graph tensor.

    Returns a ``TrainResult`` whose params are the best-validation
    snapshot when validation clips are given, the final state otherwise.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = T.SGDState(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    trainable = set(N.trainable_keys(spec))
    result = TrainResult(params=params)
    steps = max(1, len(clips) // cfg.batch_size)

    def snapshot():
        return {k: v.copy() for k, v in params.items()}

    last_finite = None
    best = None
    best_acc = -1.0

    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(cfg, epoch)
        losses = []
        try:
            for _ in range(steps):
                xs, ys = sample_batch(clips, labels, spec.n_cls,
                                      spec.i_len, cfg.batch_size, rng)
                probs, cache = N.forward(spec, params, xs, train=True, rng=rng)
                if loss_fn is None:
                    loss = T.kl_div_loss(probs, T.tensor(ys))
                else:
                    loss = loss_fn(probs, cache, xs, ys)
                lval = float(loss.data)
                if not np.isfinite(lval):
                    raise FiniteError("train loss")
                T.backward(loss)
                grads = {k: g for k, g in N.collect_grads(cache).items()
                         if k in trainable}
                T.sgd_nesterov_step(params, grads, opt, lr)
                if mask is not None:
                    apply_mask(params, mask)
                losses.append(lval)
        except FiniteError:
            result.diverged = True
            if last_finite is None:
                raise DivergenceError(
                    "training diverged before completing an epoch") from None
            params.clear()
            params.update(last_finite)
            break

        mean_loss = float(np.mean(losses))
        val_acc = float("nan")
        if val_clips is not None and len(val_clips):
            report = ten_crop_eval(spec, params, val_clips, val_labels)
            val_acc = report.accuracy
            if val_acc >= best_acc:
                best_acc = val_acc
                best = snapshot()
        result.curve.append((epoch, lr, mean_loss, val_acc))
        last_finite = snapshot()
        if log is not None:
            log(epoch, lr, mean_loss, val_acc)

    if best is not None and not result.diverged:
        params.clear()
        params.update(best)
        result.best_val = best_acc
    result.params = params
    return result


def apply_mask(params, mask):
    """Zero out masked entries in place (mask True = keep)."""
    for k, m in mask.items():
        params[k] *= m


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    accuracy: float
    ci_low: float
    ci_high: float
    n_clips: int
    per_clip: list = field(default_factory=list)  # bool per clip


def eval_windows(clip, length):
    """Ten window start offsets spanning the padded clip.

    The clip is padded by length/2 on each side; starts are evenly
    spaced so the first window begins at the padded start and the last
    ends exactly at the padded end.
    """
    clip = np.asarray(clip)
    half = length // 2
    padded = np.concatenate([np.zeros(half, clip.dtype), clip,
                             np.zeros(half, clip.dtype)])
    span = padded.size - length
    if span < 0:
        raise SpecError(f"eval_windows: window {length} exceeds padded clip "
                        f"{padded.size}")
    starts = [int(round(i * span / 9.0)) for i in range(10)]
    return np.stack([padded[s:s + length] for s in starts]), starts


def ten_crop_eval(spec, params, clips, labels, batch_clips=8):
    """Mean-probability, ten-window evaluation.

    Windows are scaled by full scale like the training pipeline.  The
    prediction for a clip is the argmax of the mean softmax across its
    windows.
    """
    n = len(clips)
    correct = []
    for i in range(0, n, batch_clips):
        group = clips[i:i + batch_clips]
        wins = np.concatenate(
            [eval_windows(c, spec.i_len)[0] for c in group], axis=0)
        probs = N.predict_probs(spec, params, wins.astype(np.float32) / FULL_SCALE,
                                batch=wins.shape[0])
        probs = probs.reshape(len(group), 10, spec.n_cls).mean(axis=1)
        preds = probs.argmax(axis=1)
        for j, p in enumerate(preds):
            correct.append(bool(p == labels[i + j]))
    acc = float(np.mean(correct)) if correct else 0.0
    return EvalReport(accuracy=acc, ci_low=acc, ci_high=acc,
                      n_clips=n, per_clip=correct)


def bootstrap_ci(values, n_resamples=1000, seed=0):
    """Resampled normal-approximation interval for a mean.

    Draws ``n_resamples`` same-size resamples with replacement, takes
    each resample's mean, and reports (mu, mu - 1.96 s/sqrt(N),
    mu + 1.96 s/sqrt(N)) where mu and s summarize the resample means.
    Degenerate inputs (all values equal) give a zero-width interval.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise SpecError("bootstrap_ci: empty value list")
    if np.all(vals == vals[0]):
        v = float(vals[0])
        return v, v, v
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, vals.size, size=(n_resamples, vals.size))
    means = vals[idx].mean(axis=1)
    mu = float(means.mean())
    half = 1.96 * float(means.std()) / np.sqrt(n_resamples)
    return mu, mu - half, mu + half
