"""Fixed (not learned) audio codec: filterbank encoder to a 16-dim latent
sequence, residual vector quantizer, approximate sinusoidal decoder.

The encoder analyzes 64 semitone-spaced log-magnitude bands and projects
them to N_enc dims with a fixed seeded orthogonal mix of a pitch-class fold
(12 dims) and coarse spectral-envelope sums (4 dims). Keeping the fold
inside the projection's column space means the decoder's least-squares
band reconstruction preserves harmonic content; a plain Gaussian random
projection loses ~3/4 of the band energy and makes decoded audio useless
for chord or melody measurement.

The quantizer is a classic residual cascade: each codebook is k-means fit
on the residuals left by the previous stages, and greedy nearest-centroid
encoding passes its residual down the cascade.
"""
from __future__ import annotations

import struct

import numpy as np

from .corpus import SAMPLE_RATE, FRAME_RATE, midi_to_hz, read_manifest
from .features import stft_magnitude

N_ENC = 16
N_BANDS = 64
BAND_MIN_MIDI = 36  # C2 .. B6, one band per semitone
RVQ_CODEBOOKS = 4
RVQ_CODEBOOK_SIZE = 64

_WINDOW = 1024
_HOP = SAMPLE_RATE // FRAME_RATE  # 320
_N_FFT = 4096

_CODEC_MAGIC = b"TFCD1"


def _band_filters() -> np.ndarray:
    """(N_BANDS, fft_bins) triangular filters, each normalized to unit sum."""
    freqs = np.fft.rfftfreq(_N_FFT, d=1.0 / SAMPLE_RATE)
    centers = midi_to_hz(np.arange(BAND_MIN_MIDI - 1, BAND_MIN_MIDI + N_BANDS + 1))
    filt = np.zeros((N_BANDS, freqs.size))
    for b in range(N_BANDS):
        lo, mid, hi = centers[b], centers[b + 1], centers[b + 2]
        up = (freqs >= lo) & (freqs <= mid)
        down = (freqs > mid) & (freqs <= hi)
        filt[b, up] = (freqs[up] - lo) / (mid - lo)
        filt[b, down] = (hi - freqs[down]) / (hi - mid)
        s = filt[b].sum()
        if s > 0:
            filt[b] /= s
    return filt


_filters = None


def band_filters() -> np.ndarray:
    global _filters
    if _filters is None:
        _filters = _band_filters()
    return _filters


def _band_response() -> np.ndarray:
    """Filterbank response to a unit-amplitude sinusoid at each band center."""
    t = np.arange(_WINDOW) / SAMPLE_RATE
    win = np.hanning(_WINDOW)
    centers = midi_to_hz(np.arange(BAND_MIN_MIDI, BAND_MIN_MIDI + N_BANDS))
    frames = np.sin(2.0 * np.pi * centers[:, None] * t[None, :]) * win
    mags = np.abs(np.fft.rfft(frames, n=_N_FFT, axis=1))
    resp = (mags * band_filters()).sum(axis=1)
    return np.maximum(resp, 1e-9)


def band_log_magnitudes(wave: np.ndarray) -> np.ndarray:
    """(T, N_BANDS) log1p band magnitudes on the latent frame grid."""
    mag = stft_magnitude(wave, _WINDOW, _HOP, _N_FFT)
    return np.log1p(mag @ band_filters().T)


def _structured_projection(seed: int) -> np.ndarray:
    """(N_BANDS, N_ENC) fold times a seeded random orthogonal rotation.

    Fold = 12 pitch-class indicator columns plus 4 smooth Gaussian bumps
    over band position. The bumps grade each band's register, so a pitch
    class active in two octaves produces distinguishable measurements and
    the decoder's nonnegative inversion can place energy in the right
    octave (hard octave-group indicators cannot disambiguate).
    """
    fold = np.zeros((N_BANDS, N_ENC))
    b = np.arange(N_BANDS)
    for i in range(N_BANDS):
        fold[i, (BAND_MIN_MIDI + i) % 12] = 1.0
    centers = np.linspace(4, N_BANDS - 5, 4)
    for c, mu in enumerate(centers):
        fold[:, 12 + c] = np.exp(-((b - mu) ** 2) / (2.0 * 8.0**2))
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((N_ENC, N_ENC)))
    q *= np.sign(np.diag(r))  # unique orthogonal factor
    return fold @ q


class Codec:
    """Deterministic encoder/decoder plus optional fitted RVQ codebooks."""

    def __init__(
        self,
        projection: np.ndarray,
        scale: np.ndarray,
        codebooks: np.ndarray | None = None,
        sample_rate: int = SAMPLE_RATE,
        frame_rate: int = FRAME_RATE,
    ):
        self.projection = np.asarray(projection, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        self.mean = np.zeros(N_ENC)  # scale-only standardization keeps 0 = silence
        self.codebooks = None if codebooks is None else np.asarray(codebooks, dtype=np.float64)
        self.sample_rate = sample_rate
        self.frame_rate = frame_rate
        self._pinv = np.linalg.pinv(self.projection)
        self._response = _band_response()

    # -- continuous path ------------------------------------------------

    def encode(self, wave: np.ndarray) -> np.ndarray:
        """Waveform to (T, N_ENC) standardized latents, T = round(dur * f_r)."""
        wave = np.asarray(wave, dtype=np.float64)
        if wave.size == 0:
            raise ValueError("cannot encode an empty waveform")
        z_raw = band_log_magnitudes(wave) @ self.projection
        return z_raw / self.scale

    def decode(self, z: np.ndarray, phase_seed: int = 0) -> np.ndarray:
        """Latents back to a waveform via band-sinusoid resynthesis.

        Band log-magnitudes are recovered per frame by nonnegative least
        squares against the encoder projection (band patterns are sparse,
        so the constrained inverse is far more faithful than a clamped
        pseudo-inverse). A zero latent decodes to silence. Fidelity is
        best-effort, a listening aid only.
        """
        from scipy.optimize import nnls

        z = np.asarray(z, dtype=np.float64)
        y = z * self.scale
        log_bands = np.zeros((z.shape[0], N_BANDS))
        basis = self.projection.T
        for t in range(z.shape[0]):
            if np.abs(y[t]).max() > 1e-12:
                log_bands[t], _ = nnls(basis, y[t])
        mags = np.expm1(np.minimum(log_bands, 30.0))
        amps = mags / self._response  # undo analysis gain per band

        t_frames, n = z.shape[0], int(round(z.shape[0] / self.frame_rate * self.sample_rate))
        sample_t = np.arange(n) / self.sample_rate
        frame_centers = np.arange(t_frames) * _HOP / self.sample_rate
        centers = midi_to_hz(np.arange(BAND_MIN_MIDI, BAND_MIN_MIDI + N_BANDS))
        rng = np.random.default_rng(phase_seed)
        phases = rng.uniform(0, 2 * np.pi, N_BANDS)

        wave = np.zeros(n)
        for b in range(N_BANDS):
            if amps[:, b].max() <= 1e-8:
                continue
            env = np.interp(sample_t, frame_centers, amps[:, b])
            wave += env * np.sin(2.0 * np.pi * centers[b] * sample_t + phases[b])
        return wave

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_CODEC_MAGIC)
            k, n = (self.codebooks.shape[:2]) if self.codebooks is not None else (0, 0)
            fh.write(struct.pack("<6I", self.sample_rate, self.frame_rate, N_ENC, k, n, N_BANDS))
            for arr in (self.mean, self.scale, self.projection):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            if self.codebooks is not None:
                fh.write(np.ascontiguousarray(self.codebooks, dtype="<f4").tobytes())

    @staticmethod
    def load(path) -> "Codec":
        with open(path, "rb") as fh:
            if fh.read(5) != _CODEC_MAGIC:
                raise ValueError(f"{path}: not a codec file")
            fs, fr, n_enc, k, n, n_bands = struct.unpack("<6I", fh.read(24))
            if n_enc != N_ENC or n_bands != N_BANDS:
                raise ValueError(f"{path}: unsupported codec geometry")

            def read_f4(count):
                return np.frombuffer(fh.read(4 * count), dtype="<f4").astype(np.float64)

            mean = read_f4(n_enc)
            scale = read_f4(n_enc)
            proj = read_f4(n_bands * n_enc).reshape(n_bands, n_enc)
            books = read_f4(k * n * n_enc).reshape(k, n, n_enc) if k else None
        codec = Codec(proj, scale, books, sample_rate=fs, frame_rate=fr)
        codec.mean = mean
        return codec


# ----------------------------------------------------------------------------
# residual vector quantization


def _kmeans(data: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    """Plain k-means with k-means++ init; empty clusters are reseeded from
    the points currently worst-represented (deterministic given rng)."""
    m = data.shape[0]
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(m)]
    d2 = ((data - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        p = d2 / d2.sum() if d2.sum() > 0 else np.full(m, 1.0 / m)
        centers[j] = data[rng.choice(m, p=p)]
        d2 = np.minimum(d2, ((data - centers[j]) ** 2).sum(axis=1))

    for _ in range(iters):
        dist = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        err = dist[np.arange(m), assign]
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = data[mask].mean(axis=0)
            else:
                worst = int(err.argmax())
                centers[j] = data[worst]
                err[worst] = 0.0
    return centers


def rvq_fit(
    latents: np.ndarray,
    n_codebooks: int = RVQ_CODEBOOKS,
    codebook_size: int = RVQ_CODEBOOK_SIZE,
    seed: int = 0,
    iters: int = 20,
) -> np.ndarray:
    """Fit the residual cascade: stage k clusters what stages 1..k-1 left.

    Returns (n_codebooks, codebook_size, dim); requires at least
    codebook_size training frames.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[0] < codebook_size:
        raise ValueError(
            f"need at least {codebook_size} frames to fit a codebook, got {latents.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    books = np.empty((n_codebooks, codebook_size, latents.shape[1]))
    residual = latents.copy()
    for k in range(n_codebooks):
        books[k] = _kmeans(residual, codebook_size, iters, rng)
        idx = _nearest(residual, books[k])
        residual = residual - books[k][idx]
    return books


def _nearest(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per row; ties resolve to the lowest index."""
    d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def rvq_encode(z: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Greedy residual quantization to (T, K) integer token streams."""
    z = np.asarray(z, dtype=np.float64)
    residual = z.copy()
    streams = np.empty((z.shape[0], codebooks.shape[0]), dtype=np.int64)
    for k in range(codebooks.shape[0]):
        idx = _nearest(residual, codebooks[k])
        streams[:, k] = idx
        residual -= codebooks[k][idx]
    return streams


def reconstruct_first_stream(streams: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Coarsest approximation: codebook-1 centroids only, other streams dropped."""
    return codebooks[0][np.asarray(streams)[:, 0]]


def reconstruct_full(streams: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    streams = np.asarray(streams)
    out = codebooks[0][streams[:, 0]].copy()
    for k in range(1, codebooks.shape[0]):
        out += codebooks[k][streams[:, k]]
    return out


def residual_energies(z: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Mean squared residual energy after 0..K stages (length K+1)."""
    z = np.asarray(z, dtype=np.float64)
    residual = z.copy()
    out = [float((residual**2).mean())]
    for k in range(codebooks.shape[0]):
        idx = _nearest(residual, codebooks[k])
        residual = residual - codebooks[k][idx]
        out.append(float((residual**2).mean()))
    return np.array(out)


# ----------------------------------------------------------------------------
# corpus fitting


def fit_codec(
    corpus_dir,
    manifest_path,
    seed: int = 0,
    max_clips: int | None = None,
    rvq_sample_frames: int = 20000,
) -> Codec:
    """Standardization scale from corpus latents, then RVQ on a frame sample."""
    import os

    records = read_manifest(manifest_path)
    if max_clips is not None:
        records = records[:max_clips]
    projection = _structured_projection(seed)

    from .corpus import read_wav

    sq_sum = np.zeros(N_ENC)
    count = 0
    raw_frames = []
    for rec in records:
        wave, _ = read_wav(os.path.join(str(corpus_dir), rec["mix_path"]))
        z_raw = band_log_magnitudes(wave) @ projection
        sq_sum += (z_raw**2).sum(axis=0)
        count += z_raw.shape[0]
        raw_frames.append(z_raw)
    scale = np.sqrt(np.maximum(sq_sum / max(count, 1), 1e-12))

    all_frames = np.concatenate(raw_frames, axis=0) / scale
    rng = np.random.default_rng(seed)
    if all_frames.shape[0] > rvq_sample_frames:
        pick = rng.choice(all_frames.shape[0], rvq_sample_frames, replace=False)
        sample = all_frames[pick]
    else:
        sample = all_frames
    books = rvq_fit(sample, seed=seed)
    return Codec(projection, scale, books)
