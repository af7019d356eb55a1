"""Deterministic synthetic music corpus with exact ground-truth annotations.

Every clip is rendered from a ClipSpec: band-limited additive chord tones
(harmony stem), a monophonic melody tone with envelope (melody stem) and
band-passed noise bursts (drum stem). The mix is the exact sample-wise sum
of the three stems, so annotations describe the audio precisely and can be
used as oracle labels for the feature extractors and adherence metrics.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfilt

SAMPLE_RATE = 8000
CLIP_SECONDS = 5.0
FRAME_RATE = 25
NUM_FRAMES = int(round(CLIP_SECONDS * FRAME_RATE))

# melody is restricted to the 53-semitone analysis range starting at G2
MELODY_MIN_MIDI = 43
MELODY_NUM_BINS = 53
MELODY_MAX_MIDI = MELODY_MIN_MIDI + MELODY_NUM_BINS - 1

PITCH_CLASSES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]
CHORD_LABELS = (
    ["N"]
    + [f"{p}:maj" for p in PITCH_CLASSES]
    + [f"{p}:min" for p in PITCH_CLASSES]
)
CHORD_INDEX = {label: i for i, label in enumerate(CHORD_LABELS)}
NUM_CHORD_LABELS = len(CHORD_LABELS)  # 25: 12 maj + 12 min + no-chord

NUM_STYLES = 8

# per-style (tempo_lo, tempo_hi, drum_density, melody_octave_shift, brightness)
_STYLE_TABLE = [
    (70, 90, 0.30, 0, 0.35),
    (80, 105, 0.55, 0, 0.45),
    (95, 120, 0.70, 12, 0.55),
    (110, 140, 0.85, 12, 0.65),
    (60, 80, 0.20, 0, 0.30),
    (85, 110, 0.50, 12, 0.50),
    (100, 130, 0.75, 0, 0.60),
    (120, 150, 0.90, 12, 0.70),
]

_PCM_SCALE = 32768.0  # power of two so int -> float is exact and additive
_PEAK_TARGET = 0.95


def midi_to_hz(midi) -> np.ndarray | float:
    return 440.0 * 2.0 ** ((np.asarray(midi, dtype=float) - 69.0) / 12.0)


def chord_pitch_classes(label: str) -> list[int]:
    """Triad pitch classes for a chord label; empty for no-chord."""
    if label == "N":
        return []
    root, quality = label.split(":")
    r = PITCH_CLASSES.index(root)
    third = 4 if quality == "maj" else 3
    return [r % 12, (r + third) % 12, (r + 7) % 12]


@dataclass
class ClipSpec:
    """Symbolic description of one clip; rendering is pure given the seed."""

    seed: int
    duration: float = CLIP_SECONDS
    tempo: float = 100.0
    progression: list = field(default_factory=list)  # (chord label, beats)
    melody: list = field(default_factory=list)  # (midi, onset beat, duration beats)
    drum_pattern: list = field(default_factory=list)  # (onset beat, velocity)
    style_tag: int = 0

    def validate(self) -> None:
        if self.tempo <= 0:
            raise ValueError(f"tempo must be positive, got {self.tempo}")
        spb = 60.0 / self.tempo
        for note, onset, dur in self.melody:
            if not (MELODY_MIN_MIDI <= note <= MELODY_MAX_MIDI):
                raise ValueError(
                    f"melody note {note} outside [{MELODY_MIN_MIDI}, {MELODY_MAX_MIDI}]"
                )
            if onset * spb >= self.duration:
                raise ValueError(f"melody onset at beat {onset} past clip end")
        for beat, _vel in self.drum_pattern:
            if beat * spb >= self.duration:
                raise ValueError(f"drum onset at beat {beat} past clip end")
        for label, _beats in self.progression:
            if label not in CHORD_INDEX:
                raise ValueError(f"unknown chord label {label!r}")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "duration": self.duration,
            "tempo": self.tempo,
            "progression": [[l, b] for l, b in self.progression],
            "melody": [[int(n), o, d] for n, o, d in self.melody],
            "drum_pattern": [[b, v] for b, v in self.drum_pattern],
            "style_tag": self.style_tag,
        }

    @staticmethod
    def from_json(obj: dict) -> "ClipSpec":
        return ClipSpec(
            seed=obj["seed"],
            duration=obj["duration"],
            tempo=obj["tempo"],
            progression=[(l, b) for l, b in obj["progression"]],
            melody=[(int(n), o, d) for n, o, d in obj["melody"]],
            drum_pattern=[(b, v) for b, v in obj["drum_pattern"]],
            style_tag=obj["style_tag"],
        )


@dataclass
class Stems:
    harmony: np.ndarray
    melody: np.ndarray
    drums: np.ndarray
    sample_rate: int = SAMPLE_RATE


@dataclass
class Annotations:
    chord_frames: np.ndarray  # int labels in [0, 24] per latent frame
    melody_frames: np.ndarray  # midi per frame, 0 = rest
    drum_onsets: np.ndarray  # seconds
    style_tag: int
    frame_rate: int = FRAME_RATE

    def to_json(self) -> dict:
        return {
            "frame_rate": self.frame_rate,
            "num_frames": int(len(self.chord_frames)),
            "chord_frames": [int(c) for c in self.chord_frames],
            "melody_frames": [int(m) for m in self.melody_frames],
            "drum_onsets": [float(t) for t in self.drum_onsets],
            "style_tag": int(self.style_tag),
        }

    @staticmethod
    def from_json(obj: dict) -> "Annotations":
        return Annotations(
            chord_frames=np.asarray(obj["chord_frames"], dtype=np.int64),
            melody_frames=np.asarray(obj["melody_frames"], dtype=np.int64),
            drum_onsets=np.asarray(obj["drum_onsets"], dtype=np.float64),
            style_tag=obj["style_tag"],
            frame_rate=obj["frame_rate"],
        )


def _tone(freq: float, t: np.ndarray, brightness: float, n_harmonics: int = 4) -> np.ndarray:
    """Additive tone; harmonic k gets amplitude brightness**(k-1)."""
    out = np.zeros_like(t)
    nyq = SAMPLE_RATE / 2.0
    for k in range(1, n_harmonics + 1):
        f = freq * k
        if f >= nyq * 0.95:
            break
        out += (brightness ** (k - 1)) * np.sin(2.0 * np.pi * f * t)
    return out


def _fade(n: int, edge: int) -> np.ndarray:
    """Raised-cosine fade-in/out envelope to avoid segment clicks."""
    env = np.ones(n)
    e = min(edge, n // 2)
    if e > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(e) / e)
        env[:e] = ramp
        env[n - e :] = ramp[::-1]
    return env


def _render_harmony(spec: ClipSpec, n: int, brightness: float) -> np.ndarray:
    out = np.zeros(n)
    spb = 60.0 / spec.tempo
    t_axis = np.arange(n) / SAMPLE_RATE
    pos = 0.0
    for label, beats in spec.progression:
        t0, t1 = pos, min(pos + beats * spb, spec.duration)
        pos = t1
        pcs = chord_pitch_classes(label)
        if t1 <= t0:
            break
        s0, s1 = int(round(t0 * SAMPLE_RATE)), int(round(t1 * SAMPLE_RATE))
        if pcs:
            seg_t = t_axis[s0:s1]
            seg = np.zeros(s1 - s0)
            root_pc = pcs[0]
            base = 48 + root_pc  # roots in C3..B3
            intervals = [0, (pcs[1] - root_pc) % 12, 7]
            for iv in intervals:
                seg += _tone(midi_to_hz(base + iv), seg_t, brightness)
            seg *= _fade(len(seg), int(0.010 * SAMPLE_RATE))
            out[s0:s1] += 0.10 * seg
        if pos >= spec.duration:
            break
    return out


def _render_melody(spec: ClipSpec, n: int) -> np.ndarray:
    out = np.zeros(n)
    spb = 60.0 / spec.tempo
    t_axis = np.arange(n) / SAMPLE_RATE
    for note, onset_beat, dur_beats in spec.melody:
        t0 = onset_beat * spb
        t1 = min(t0 + dur_beats * spb, spec.duration)
        s0, s1 = int(round(t0 * SAMPLE_RATE)), int(round(t1 * SAMPLE_RATE))
        if s1 <= s0:
            continue
        seg_t = t_axis[s0:s1]
        seg = _tone(midi_to_hz(note), seg_t, brightness=0.25)
        m = s1 - s0
        env = np.minimum(1.0, np.arange(m) / max(1, int(0.005 * SAMPLE_RATE)))
        # sustained envelope keeps the melody on top of the chord tones
        env *= 0.4 + 0.6 * np.exp(-np.arange(m) / (0.5 * SAMPLE_RATE))
        env *= _fade(m, int(0.008 * SAMPLE_RATE))
        out[s0:s1] += 0.40 * seg * env
    return out


_DRUM_SOS = butter(2, [100.0, 2000.0], btype="bandpass", fs=SAMPLE_RATE, output="sos")


def _render_drums(spec: ClipSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(n)
    spb = 60.0 / spec.tempo
    burst_len = int(0.120 * SAMPLE_RATE)
    decay = np.exp(-np.arange(burst_len) / (0.030 * SAMPLE_RATE))
    for beat, vel in spec.drum_pattern:
        s0 = int(round(beat * spb * SAMPLE_RATE))
        noise = rng.standard_normal(burst_len)
        burst = sosfilt(_DRUM_SOS, noise * decay)
        s1 = min(n, s0 + burst_len)
        out[s0:s1] += 0.35 * vel * burst[: s1 - s0]
    return out


def _annotate(spec: ClipSpec) -> Annotations:
    """Frame-grid labels at FRAME_RATE; frame n describes time n / FRAME_RATE."""
    times = np.arange(NUM_FRAMES) / FRAME_RATE
    spb = 60.0 / spec.tempo

    chord = np.zeros(NUM_FRAMES, dtype=np.int64)
    pos = 0.0
    for label, beats in spec.progression:
        t0, t1 = pos, min(pos + beats * spb, spec.duration)
        pos = t1
        chord[(times >= t0) & (times < t1)] = CHORD_INDEX[label]
        if pos >= spec.duration:
            break

    melody = np.zeros(NUM_FRAMES, dtype=np.int64)
    for note, onset_beat, dur_beats in spec.melody:
        t0 = onset_beat * spb
        t1 = min(t0 + dur_beats * spb, spec.duration)
        melody[(times >= t0) & (times < t1)] = note

    onsets = np.array(sorted(b * spb for b, _v in spec.drum_pattern), dtype=np.float64)
    return Annotations(chord, melody, onsets, spec.style_tag)


def generate_clip(spec: ClipSpec) -> tuple[np.ndarray, Stems, Annotations]:
    """Render a spec to (mix, stems, annotations); pure given spec.seed.

    Returned waveforms are int16-quantized floats on a 1/32768 grid, so the
    mix equals the sample-wise sum of the stems exactly and disk round-trips
    are bit-identical.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration * SAMPLE_RATE))
    brightness = _STYLE_TABLE[spec.style_tag % NUM_STYLES][4]

    h = _render_harmony(spec, n, brightness)
    m = _render_melody(spec, n)
    d = _render_drums(spec, n, rng)

    peak = np.max(np.abs(h + m + d), initial=1e-9)
    if peak > _PEAK_TARGET:
        scale = _PEAK_TARGET / peak
        h, m, d = h * scale, m * scale, d * scale

    hi = np.round(h * (_PCM_SCALE - 1)).astype(np.int32)
    mi = np.round(m * (_PCM_SCALE - 1)).astype(np.int32)
    di = np.round(d * (_PCM_SCALE - 1)).astype(np.int32)
    mix_i = hi + mi + di

    stems = Stems(
        harmony=hi.astype(np.float64) / _PCM_SCALE,
        melody=mi.astype(np.float64) / _PCM_SCALE,
        drums=di.astype(np.float64) / _PCM_SCALE,
    )
    mix = mix_i.astype(np.float64) / _PCM_SCALE
    return mix, stems, _annotate(spec)


# ----------------------------------------------------------------------------
# spec sampling and corpus building

_SCALE_MAJ = [0, 2, 4, 5, 7, 9, 11]
_SCALE_MIN = [0, 2, 3, 5, 7, 8, 10]


def sample_spec(seed: int, style_tag: int | None = None) -> ClipSpec:
    """Draw a random but reproducible ClipSpec for the given seed."""
    rng = np.random.default_rng(seed)
    if style_tag is None:
        style_tag = int(rng.integers(NUM_STYLES))
    lo, hi, density, oct_shift, _bright = _STYLE_TABLE[style_tag % NUM_STYLES]
    tempo = float(rng.uniform(lo, hi))
    spb = 60.0 / tempo
    total_beats = CLIP_SECONDS / spb

    beats_per_chord = int(rng.choice([2, 4]))
    n_chords = int(np.ceil(total_beats / beats_per_chord))
    triads = CHORD_LABELS[1:]
    progression = [
        (triads[int(rng.integers(len(triads)))], beats_per_chord) for _ in range(n_chords)
    ]

    melody = []
    beat = float(rng.uniform(0.0, 0.5))
    base = 67 + oct_shift  # G4 or G5 register
    while beat * spb < CLIP_SECONDS - 0.15:
        seg = int(beat // beats_per_chord)
        label = progression[min(seg, n_chords - 1)][0]
        pcs = chord_pitch_classes(label)
        root = pcs[0] if pcs else 0
        scale = _SCALE_MAJ if label.endswith("maj") else _SCALE_MIN
        degree = int(rng.integers(len(scale)))
        note = base + ((root + scale[degree]) % 12)
        note = int(np.clip(note, MELODY_MIN_MIDI, MELODY_MAX_MIDI))
        gap = float(rng.choice([0.5, 1.0, 1.0, 2.0]))
        if rng.random() > 0.2:  # occasional rest
            melody.append((note, beat, gap * float(rng.uniform(0.5, 0.95))))
        beat += gap

    drums = []
    eighth = 0.5
    b = 0.0
    while b * spb < CLIP_SECONDS - 0.13:
        on_beat = abs(b - round(b)) < 1e-9
        if on_beat or rng.random() < density:
            vel = float(rng.uniform(0.6, 1.0)) if on_beat else float(rng.uniform(0.3, 0.7))
            drums.append((b, vel))
        b += eighth

    return ClipSpec(
        seed=seed,
        tempo=tempo,
        progression=progression,
        melody=melody,
        drum_pattern=drums,
        style_tag=style_tag,
    )


def write_wav(path, wave: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """16-bit PCM mono."""
    from scipy.io import wavfile

    pcm = np.clip(np.round(wave * _PCM_SCALE), -32768, 32767).astype(np.int16)
    wavfile.write(path, sample_rate, pcm)


def read_wav(path) -> tuple[np.ndarray, int]:
    from scipy.io import wavfile

    sr, pcm = wavfile.read(path)
    if pcm.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM")
    return pcm.astype(np.float64) / _PCM_SCALE, int(sr)


def build_corpus(n: int, seed: int, out_dir) -> str:
    """Render n clips and a JSONL manifest; returns the manifest path.

    Per-clip seeds are spawned from (seed, index) so rebuilds are identical
    and clips could be rendered in parallel.
    """
    if n <= 0:
        raise ValueError(f"corpus size must be positive, got {n}")
    out_dir = str(out_dir)
    audio_dir = os.path.join(out_dir, "audio")
    ann_dir = os.path.join(out_dir, "annotations")
    os.makedirs(audio_dir, exist_ok=True)
    os.makedirs(ann_dir, exist_ok=True)

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    root = np.random.SeedSequence(seed)
    with open(manifest_path, "w") as mf:
        for i in range(n):
            clip_seed = int(np.random.default_rng([seed, i]).integers(2**31 - 1))
            spec = sample_spec(clip_seed)
            mix, stems, ann = generate_clip(spec)

            cid = f"{i:06d}"
            paths = {
                "mix": os.path.join(audio_dir, f"{cid}_mix.wav"),
                "harmony": os.path.join(audio_dir, f"{cid}_harmony.wav"),
                "melody": os.path.join(audio_dir, f"{cid}_melody.wav"),
                "drums": os.path.join(audio_dir, f"{cid}_drums.wav"),
            }
            write_wav(paths["mix"], mix)
            write_wav(paths["harmony"], stems.harmony)
            write_wav(paths["melody"], stems.melody)
            write_wav(paths["drums"], stems.drums)

            ann_path = os.path.join(ann_dir, f"{cid}.json")
            with open(ann_path, "w") as af:
                json.dump({"annotations": ann.to_json(), "spec": spec.to_json()}, af)

            record = {
                "id": cid,
                "mix_path": os.path.relpath(paths["mix"], out_dir),
                "stem_paths": {
                    k: os.path.relpath(paths[k], out_dir)
                    for k in ("harmony", "melody", "drums")
                },
                "annotation_path": os.path.relpath(ann_path, out_dir),
                "style_tag": spec.style_tag,
                "seed": clip_seed,
            }
            mf.write(json.dumps(record, sort_keys=True) + "\n")
    _ = root
    return manifest_path


def read_manifest(manifest_path) -> list[dict]:
    with open(manifest_path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_annotation(corpus_dir, record: dict) -> tuple[Annotations, ClipSpec]:
    with open(os.path.join(str(corpus_dir), record["annotation_path"])) as fh:
        obj = json.load(fh)
    return Annotations.from_json(obj["annotations"]), ClipSpec.from_json(obj["spec"])


def manifest_digest(manifest_path) -> str:
    with open(manifest_path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
