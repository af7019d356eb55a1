"""Signal-derived control features: chroma, melody salience, chord labels,
onsets, and frame-grid resampling.

All analysis runs on magnitude STFTs with frames centered every hop. The
default hop of 320 samples at 8 kHz gives a 25 Hz feature rate equal to the
latent frame rate, so resampling to the latent grid is usually an identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import medfilt

from .corpus import (
    MELODY_MIN_MIDI,
    MELODY_NUM_BINS,
    NUM_CHORD_LABELS,
    SAMPLE_RATE,
    midi_to_hz,
)

CHROMA_WINDOW = 1024
CHROMA_HOP = 320
_N_FFT = 4096  # zero-padded for semitone resolution at the low end

MELODY_THRESHOLD = 0.5
CHORD_MATCH_THRESHOLD = 0.3
CHORD_MEDIAN_WIDTH = 5


def stft_magnitude(wave: np.ndarray, window: int, hop: int, n_fft: int) -> np.ndarray:
    """Hann-windowed magnitude STFT, frames centered at n*hop; (frames, bins)."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0:
        raise ValueError("empty waveform")
    n_frames = int(np.ceil(wave.size / hop))
    padded = np.pad(wave, (window // 2, window + hop * n_frames))
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * np.hanning(window)[None, :]
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1))


def _fft_bin_freqs(n_fft: int = _N_FFT) -> np.ndarray:
    return np.fft.rfftfreq(n_fft, d=1.0 / SAMPLE_RATE)


@dataclass
class Chromagram:
    """Nonnegative per-frame pitch-class energies (frames x 12)."""

    data: np.ndarray
    hop: int = CHROMA_HOP
    window: int = CHROMA_WINDOW

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


_chroma_fold = None


def _chroma_fold_matrix() -> np.ndarray:
    """(bins, 12) 0/1 matrix mapping FFT bins to equal-tempered pitch classes."""
    global _chroma_fold
    if _chroma_fold is None:
        freqs = _fft_bin_freqs()
        fold = np.zeros((freqs.size, 12))
        usable = (freqs >= 60.0) & (freqs < 3960.0)
        midi = np.zeros_like(freqs)
        midi[usable] = 69.0 + 12.0 * np.log2(freqs[usable] / 440.0)
        pc = np.round(midi).astype(int) % 12
        fold[np.nonzero(usable)[0], pc[usable]] = 1.0
        _chroma_fold = fold
    return _chroma_fold


def chroma(wave: np.ndarray) -> Chromagram:
    """Fold the magnitude STFT into 12 pitch classes."""
    mag = stft_magnitude(wave, CHROMA_WINDOW, CHROMA_HOP, _N_FFT)
    return Chromagram(mag @ _chroma_fold_matrix())


_sal_idx = None
_sal_weight = None


def _salience_tables() -> tuple[np.ndarray, np.ndarray]:
    """Per-bin FFT indices and weights for a 4-harmonic salience sum."""
    global _sal_idx, _sal_weight
    if _sal_idx is None:
        freqs = _fft_bin_freqs()
        df = freqs[1] - freqs[0]
        nyq = SAMPLE_RATE / 2.0
        f0 = midi_to_hz(np.arange(MELODY_MIN_MIDI, MELODY_MIN_MIDI + MELODY_NUM_BINS))
        idx = np.zeros((MELODY_NUM_BINS, 4), dtype=np.int64)
        w = np.zeros((MELODY_NUM_BINS, 4))
        for k in range(1, 5):
            fk = f0 * k
            ok = fk < nyq * 0.98
            idx[ok, k - 1] = np.round(fk[ok] / df).astype(np.int64)
            w[ok, k - 1] = 0.8 ** (k - 1)
        _sal_idx, _sal_weight = idx, w
    return _sal_idx, _sal_weight


def melody_saliency(wave: np.ndarray) -> np.ndarray:
    """Harmonic-sum salience over the 53 semitone bins, per-frame max-normalized.

    Returns (frames, 53) scores in [0, 1]; all-zero frames stay zero.
    """
    mag = stft_magnitude(wave, CHROMA_WINDOW, CHROMA_HOP, _N_FFT)
    idx, w = _salience_tables()
    sal = (mag[:, idx] * w[None, :, :]).sum(axis=2)
    peak = sal.max(axis=1, keepdims=True)
    nz = peak[:, 0] > 0
    sal[nz] /= peak[nz]
    return sal


def binarize_melody(sal: np.ndarray, threshold: float = MELODY_THRESHOLD) -> np.ndarray:
    """Keep only the per-frame maximal above-threshold score, set to 1.

    Ties pick the lowest bin index; frames with no survivor stay all-zero.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    sal = np.asarray(sal, dtype=np.float64)
    kept = np.where(sal >= threshold, sal, 0.0)
    out = np.zeros_like(kept)
    best = kept.argmax(axis=1)
    rows = np.arange(kept.shape[0])
    alive = kept[rows, best] > 0
    out[rows[alive], best[alive]] = 1.0
    return out


_templates = None


def _chord_templates() -> np.ndarray:
    """(24, 12) unit-norm binary triad templates; row order matches labels 1..24."""
    global _templates
    if _templates is None:
        t = np.zeros((NUM_CHORD_LABELS - 1, 12))
        for r in range(12):
            t[r, [r, (r + 4) % 12, (r + 7) % 12]] = 1.0  # major
            t[12 + r, [r, (r + 3) % 12, (r + 7) % 12]] = 1.0  # minor
        _templates = t / np.sqrt(3.0)
    return _templates


def chord_labels(c: Chromagram | np.ndarray) -> np.ndarray:
    """Per-frame chord labels in [0, 24] by cosine template match.

    Frames whose best cosine falls below the acceptance threshold, and
    all-zero frames, get the no-chord label 0. A width-5 median filter
    smooths the label sequence.
    """
    data = c.data if isinstance(c, Chromagram) else np.asarray(c, dtype=np.float64)
    norms = np.linalg.norm(data, axis=1)
    scores = data @ _chord_templates().T
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(norms[:, None] > 0, scores / np.maximum(norms, 1e-12)[:, None], 0.0)
    labels = scores.argmax(axis=1) + 1
    labels[(norms <= 0) | (scores.max(axis=1) < CHORD_MATCH_THRESHOLD)] = 0
    if labels.size >= CHORD_MEDIAN_WIDTH:
        labels = medfilt(labels.astype(np.float64), CHORD_MEDIAN_WIDTH).astype(np.int64)
    return labels.astype(np.int64)


ONSET_WINDOW = 256
ONSET_HOP = 80


def detect_onsets(wave: np.ndarray) -> np.ndarray:
    """Onset times in seconds via half-wave-rectified spectral flux.

    Adaptive-mean thresholding and peak picking with a 50 ms minimum
    separation; silence yields an empty list.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0:
        return np.zeros(0)
    mag = stft_magnitude(wave, ONSET_WINDOW, ONSET_HOP, ONSET_WINDOW)
    prev = np.vstack([np.zeros((1, mag.shape[1])), mag[:-1]])
    flux = np.maximum(mag - prev, 0.0).sum(axis=1)

    w = 8  # local mean window (frames)
    pad = np.pad(flux, w, mode="edge")
    local_mean = np.convolve(pad, np.ones(2 * w + 1) / (2 * w + 1), mode="valid")
    thresh = 1.3 * local_mean + 0.05 * flux.max(initial=0.0) + 1e-12

    min_gap = int(round(0.05 * SAMPLE_RATE / ONSET_HOP))
    cand = []
    for n in range(flux.size):
        lo, hi = max(0, n - min_gap), min(flux.size, n + min_gap + 1)
        if flux[n] > thresh[n] and flux[n] == flux[lo:hi].max():
            cand.append(n)
    picked: list[int] = []
    for n in cand:
        if picked and n - picked[-1] < min_gap:
            if flux[n] > flux[picked[-1]]:
                picked[-1] = n
        else:
            picked.append(n)
    return np.array([n * ONSET_HOP / SAMPLE_RATE for n in picked], dtype=np.float64)


def resample_features(seq: np.ndarray, target_len: int, mode: str) -> np.ndarray:
    """Resample a feature sequence along its first axis to target_len frames.

    mode 'nearest' maps each target frame center to the closest source frame
    center (for categorical streams); 'linear' interpolates componentwise.
    """
    seq = np.asarray(seq)
    if seq.shape[0] == 0:
        raise ValueError("cannot resample an empty sequence")
    if target_len <= 0:
        raise ValueError(f"target_len must be positive, got {target_len}")
    s = seq.shape[0]
    if mode == "nearest":
        src = np.floor((np.arange(target_len) + 0.5) * s / target_len).astype(np.int64)
        return seq[np.clip(src, 0, s - 1)]
    if mode == "linear":
        x = np.clip((np.arange(target_len) + 0.5) * s / target_len - 0.5, 0, s - 1)
        xp = np.arange(s, dtype=np.float64)
        if seq.ndim == 1:
            return np.interp(x, xp, seq.astype(np.float64))
        cols = [np.interp(x, xp, seq[:, j].astype(np.float64)) for j in range(seq.shape[1])]
        return np.stack(cols, axis=1)
    raise ValueError(f"unknown resample mode {mode!r}")


def melody_frames_to_binary(melody_frames: np.ndarray) -> np.ndarray:
    """Ground-truth melody track (midi per frame, 0 = rest) to a binary matrix."""
    melody_frames = np.asarray(melody_frames, dtype=np.int64)
    out = np.zeros((melody_frames.size, MELODY_NUM_BINS))
    voiced = melody_frames > 0
    bins = melody_frames[voiced] - MELODY_MIN_MIDI
    if np.any((bins < 0) | (bins >= MELODY_NUM_BINS)):
        raise ValueError("melody note outside the 53-bin range")
    out[np.nonzero(voiced)[0], bins] = 1.0
    return out
