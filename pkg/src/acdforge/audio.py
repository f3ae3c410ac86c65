"""WAV ingestion, resampling, and the synthetic benchmark dataset.

Clips stay in raw 16-bit integer scale end to end; the trainer divides
by full scale at windowing time, so nothing here normalizes amplitudes.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.signal import resample_poly

from .errors import AudioFormatError, DataError

N_FOLDS = 5

_FORMAT_NAMES = {
    1: "pcm",
    3: "ieee-float",
    6: "a-law",
    7: "mu-law",
    65534: "extensible",
}


@dataclass
class LabeledClip:
    samples: np.ndarray
    sr: int
    label: int = -1
    fold: int = 0
    name: str = ""


@dataclass
class Dataset:
    clips: list
    class_names: list
    n_folds: int = N_FOLDS

    def validate(self):
        n_cls = len(self.class_names)
        for clip in self.clips:
            if not 0 <= clip.label < n_cls:
                raise DataError(f"{clip.name or 'clip'}: label {clip.label} "
                                f"outside [0, {n_cls})")
            if not 1 <= clip.fold <= self.n_folds:
                raise DataError(f"{clip.name or 'clip'}: fold {clip.fold} "
                                f"outside [1, {self.n_folds}]")
        return self

    def fold_split(self, test_fold):
        """Train/test clip lists for one cross-validation round."""
        if not 1 <= test_fold <= self.n_folds:
            raise DataError(f"test fold {test_fold} outside [1, {self.n_folds}]")
        train = [c for c in self.clips if c.fold != test_fold]
        test = [c for c in self.clips if c.fold == test_fold]
        tr_x = [c.samples for c in train]
        tr_y = np.array([c.label for c in train], dtype=np.int64)
        te_x = [c.samples for c in test]
        te_y = np.array([c.label for c in test], dtype=np.int64)
        return tr_x, tr_y, te_x, te_y


# ---------------------------------------------------------------------------
# RIFF WAV


def load_wav(path):
    """Read a PCM 16-bit RIFF WAV file.

    Returns a LabeledClip with integer-valued samples (stereo is
    averaged to mono with floor division).  The label is not set here;
    it comes from dataset metadata.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        size = struct.unpack_from("<I", blob, pos + 4)[0]
        body = blob[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise AudioFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise AudioFormatError(f"{path}: data chunk truncated "
                                       f"({len(body)} of {size} bytes)")
            data = body
        pos += 8 + size + (size & 1)    # chunks are word-aligned

    if fmt is None or data is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sr, _, _, bits = fmt
    if audio_format != 1:
        name = _FORMAT_NAMES.get(audio_format, str(audio_format))
        raise AudioFormatError(f"{path}: unsupported format '{name}'; "
                               "only PCM is readable")
    if bits != 16:
        raise AudioFormatError(f"{path}: unsupported sample width {bits} bit")
    if channels not in (1, 2):
        raise AudioFormatError(f"{path}: {channels} channels unsupported")

    samples = np.frombuffer(data, dtype="<i2").astype(np.int16)
    if channels == 2:
        if samples.size % 2:
            raise AudioFormatError(f"{path}: odd sample count for stereo")
        pair = samples.reshape(-1, 2).astype(np.int32)
        samples = ((pair[:, 0] + pair[:, 1]) // 2).astype(np.int16)
    return LabeledClip(samples=samples, sr=sr,
                       name=os.path.basename(path))


def write_wav(path, samples, sr):
    """Write mono PCM 16-bit WAV (test fixtures and exports)."""
    pcm = np.asarray(samples)
    if pcm.dtype != np.int16:
        pcm = np.clip(np.round(pcm), -32768, 32767).astype(np.int16)
    payload = pcm.astype("<i2").tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sr, sr * 2, 2, 16)
    hdr += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as fh:
        fh.write(hdr + payload)
    return path


# ---------------------------------------------------------------------------
# resampling


def resample(clip, target_sr):
    """Polyphase windowed-sinc resampling to target_sr.

    Output length is len * target / src rounded to nearest; identity
    rates return an exact copy.
    """
    if target_sr <= 0:
        raise DataError(f"target rate {target_sr} must be positive")
    if clip.sr == target_sr:
        return LabeledClip(samples=clip.samples.copy(), sr=clip.sr,
                           label=clip.label, fold=clip.fold, name=clip.name)
    g = math.gcd(clip.sr, target_sr)
    up, down = target_sr // g, clip.sr // g
    out_len = round(Fraction(len(clip.samples) * target_sr, clip.sr))
    y = resample_poly(clip.samples.astype(np.float64), up, down)
    y = y[:out_len].astype(np.float32)
    return LabeledClip(samples=y, sr=target_sr, label=clip.label,
                       fold=clip.fold, name=clip.name)


# ---------------------------------------------------------------------------
# synthetic benchmark


def class_bands(n_cls, sr):
    """Disjoint (lo, hi) frequency bands, one per class, with guards."""
    nyq = sr / 2.0
    usable_lo, usable_hi = 0.05 * nyq, 0.95 * nyq
    width = (usable_hi - usable_lo) / n_cls
    bands = []
    for k in range(n_cls):
        lo = usable_lo + k * width + 0.15 * width
        hi = usable_lo + (k + 1) * width - 0.15 * width
        bands.append((lo, hi))
    return bands


def _band_noise(rng, length, sr, lo, hi):
    noise = rng.standard_normal(length)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(length, d=1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n=length)
    peak = np.abs(x).max()
    return x / peak if peak > 0 else x


def make_synthetic_dataset(n_cls, clips_per_class, sr, length, seed=0):
    """Band-limited noise classes with random amplitude envelopes.

    Each class occupies a disjoint frequency band, so spectral energy
    separates the classes linearly; the raw waveforms still require a
    learned front end.  Folds are stratified round-robin.
    """
    if n_cls < 2 or clips_per_class < 1:
        raise DataError("need at least two classes and one clip per class")
    rng = np.random.default_rng(seed)
    bands = class_bands(n_cls, sr)
    t = np.arange(length) / sr
    clips = []
    for cls, (lo, hi) in enumerate(bands):
        for i in range(clips_per_class):
            x = _band_noise(rng, length, sr, lo, hi)
            env_f = rng.uniform(0.5, 3.0)
            env_ph = rng.uniform(0.0, 2 * np.pi)
            env = 1.0 + 0.8 * np.sin(2 * np.pi * env_f * t + env_ph)
            x = x * env
            amp = rng.uniform(8000.0, 28000.0)
            x = x / np.abs(x).max() * amp
            clips.append(LabeledClip(
                samples=np.round(x).astype(np.int16), sr=sr, label=cls,
                fold=(i % N_FOLDS) + 1, name=f"band{cls}_{i:03d}"))
    names = [f"band{k}" for k in range(n_cls)]
    return Dataset(clips=clips, class_names=names).validate()


# ---------------------------------------------------------------------------
# metadata-driven corpora


def load_csv_dataset(csv_path, target_sr=None):
    """Load clips listed in a `path,label,fold` metadata file.

    Relative paths resolve against the CSV's directory.  Labels are
    nonnegative integers; class names are the sorted label values.
    """
    base = os.path.dirname(os.path.abspath(csv_path))
    clips = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label", "fold"]:
            raise DataError(f"{csv_path}: expected header 'path,label,fold'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{csv_path}:{lineno}: expected 3 fields")
            rel, label_s, fold_s = (v.strip() for v in row)
            try:
                label, fold = int(label_s), int(fold_s)
            except ValueError:
                raise DataError(f"{csv_path}:{lineno}: label and fold "
                                "must be integers") from None
            wav = rel if os.path.isabs(rel) else os.path.join(base, rel)
            clip = load_wav(wav)
            if target_sr is not None:
                clip = resample(clip, target_sr)
            clip.label, clip.fold = label, fold
            clips.append(clip)
    if not clips:
        raise DataError(f"{csv_path}: no clips listed")
    n_cls = max(c.label for c in clips) + 1
    names = [str(i) for i in range(n_cls)]
    return Dataset(clips=clips, class_names=names).validate()
