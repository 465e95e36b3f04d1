"""Audio and manifest I/O plus the deterministic synthetic-accent generator.

All audio is RIFF PCM16 mono 16 kHz. The synthetic generator renders each
transcript character as a fixed-duration pair of sinusoids, so examples are
analytically predictable and every corpus is reproducible byte-for-byte.
"""

from __future__ import annotations

import math
import os
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import AudioFormatError, DataError, ManifestError

SAMPLE_RATE = 16000

# transcript alphabet: a..z, space, apostrophe (CTC blank lives in asr_head)
ALPHABET = "abcdefghijklmnopqrstuvwxyz '"
CHAR_INDEX = {c: i for i, c in enumerate(ALPHABET)}

ROLES = ("generic_unlabeled", "accent_unlabeled", "labeled", "eval")

BASE_CHAR_SAMPLES = 960  # 60 ms at 16 kHz
FADE_SAMPLES = 80  # 5 ms linear fade in/out


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and float(np.max(np.abs(self.samples))) > 1.0:
            raise DataError("waveform samples exceed [-1, 1]")


@dataclass
class Utterance:
    id: str
    audio: "str | Waveform"
    transcript: str | None = None


@dataclass
class Manifest:
    utterances: list[Utterance]
    role: str
    accent_tag: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ManifestError(f"unknown manifest role {self.role!r}")
        seen = set()
        for utt in self.utterances:
            if utt.id in seen:
                raise ManifestError(f"duplicate utterance id {utt.id!r}")
            seen.add(utt.id)
            if self.role == "labeled" and utt.transcript is None:
                raise ManifestError(f"labeled manifest but {utt.id!r} has no transcript")
        if self.role == "accent_unlabeled" and not self.accent_tag:
            raise ManifestError("accent_unlabeled manifest requires an accent tag")


@dataclass
class AccentSpec:
    """Parametric 'accent': tone-frequency scaling, speaking rate, spectral
    tilt and additive noise. The canonical accent is factors 1/1, tilt 0,
    snr_db=inf."""

    accent_id: str
    formant_factor: float = 1.0
    rate_factor: float = 1.0
    tilt: float = 0.0
    snr_db: float = math.inf
    seed: int = 0

    def __post_init__(self):
        if not (0.5 <= self.formant_factor <= 2.0):
            raise DataError(f"formant_factor {self.formant_factor} outside [0.5, 2.0]")
        if not (0.5 <= self.rate_factor <= 2.0):
            raise DataError(f"rate_factor {self.rate_factor} outside [0.5, 2.0]")
        if not (-1.0 <= self.tilt <= 1.0):
            raise DataError(f"tilt {self.tilt} outside [-1, 1]")


def read_wav(path: str) -> Waveform:
    """Read a RIFF PCM16 mono file; samples scaled by 1/32768."""
    if not os.path.exists(path):
        raise DataError(f"audio file not found: {path}")
    try:
        with wave.open(path, "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: truncated or non-WAVE file ({exc})") from exc
    if sampwidth != 2:
        raise AudioFormatError(f"{path}: expected PCM16, got sample width {sampwidth}")
    if n_channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {n_channels} channels")
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32768.0, sample_rate=rate)


def write_wav(path: str, w: Waveform) -> None:
    ints = np.clip(np.rint(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(path, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(ints.tobytes())


def normalize_transcript(text: str) -> str:
    text = text.lower()
    for c in text:
        if c not in CHAR_INDEX:
            raise ManifestError(f"character {c!r} outside the transcript alphabet")
    return text


def load_manifest(path: str) -> Manifest:
    """Parse the TSV manifest: header `#role=<role>\taccent=<tag>` then
    `id<TAB>audio_path<TAB>transcript?` rows."""
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#role="):
        raise ManifestError(f"{path}: missing `#role=...` header line")
    header = lines[0][1:].split("\t")
    fields = dict(item.split("=", 1) for item in header if "=" in item)
    role = fields.get("role", "")
    accent = fields.get("accent") or None
    base = os.path.dirname(os.path.abspath(path))
    utts = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise ManifestError(f"{path}:{lineno}: expected 2 or 3 tab-separated columns")
        utt_id, audio_path = cols[0], cols[1]
        transcript = normalize_transcript(cols[2]) if len(cols) == 3 and cols[2] else None
        if not os.path.isabs(audio_path):
            audio_path = os.path.join(base, audio_path)
        utts.append(Utterance(id=utt_id, audio=audio_path, transcript=transcript))
    return Manifest(utterances=utts, role=role, accent_tag=accent)


def save_manifest(manifest: Manifest, path: str) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#role={manifest.role}\taccent={manifest.accent_tag or ''}\n")
        for utt in manifest.utterances:
            audio = utt.audio if isinstance(utt.audio, str) else ""
            if audio.startswith(base + os.sep):
                audio = os.path.relpath(audio, base)
            if utt.transcript is not None:
                fh.write(f"{utt.id}\t{audio}\t{utt.transcript}\n")
            else:
                fh.write(f"{utt.id}\t{audio}\n")


def char_frequencies(c: str, formant_factor: float) -> tuple[float, float]:
    idx = CHAR_INDEX[c]
    return formant_factor * (300.0 + 40.0 * idx), formant_factor * (1200.0 + 60.0 * idx)


def render_text(spec: AccentSpec, text: str, rng: np.random.Generator) -> Waveform:
    """Render one transcript through the accent transform.

    Per character: round(rate_factor * 960) samples of two sinusoids at
    f1 = formant_factor*(300 + 40*idx), f2 = formant_factor*(1200 + 60*idx),
    amplitude 0.4 each with 5 ms linear fades; then the one-pole tilt filter
    y[n] = x[n] + tilt*y[n-1], renormalized to peak 0.8; then Gaussian noise
    at snr_db (skipped when snr_db is +inf).
    """
    text = normalize_transcript(text)
    dur = int(round(spec.rate_factor * BASE_CHAR_SAMPLES))
    pieces = []
    for c in text:
        f1, f2 = char_frequencies(c, spec.formant_factor)
        n = np.arange(dur, dtype=np.float64)
        tone = 0.4 * np.sin(2 * np.pi * f1 * n / SAMPLE_RATE)
        tone += 0.4 * np.sin(2 * np.pi * f2 * n / SAMPLE_RATE)
        fade = min(FADE_SAMPLES, dur // 2)
        if fade > 0:
            ramp = np.linspace(0.0, 1.0, fade, endpoint=False)
            tone[:fade] *= ramp
            tone[-fade:] *= ramp[::-1]
        pieces.append(tone)
    x = np.concatenate(pieces) if pieces else np.zeros(0)
    if spec.tilt == 0.0:
        y = x.copy()
    else:
        y = np.empty_like(x)
        acc = 0.0
        for i in range(x.size):
            acc = x[i] + spec.tilt * acc
            y[i] = acc
    peak = float(np.max(np.abs(y))) if y.size else 0.0
    if peak > 0:
        y *= 0.8 / peak
    if math.isfinite(spec.snr_db) and y.size:
        sig_power = float(np.mean(y * y))
        noise_power = sig_power / (10.0 ** (spec.snr_db / 10.0))
        y = y + rng.normal(0.0, math.sqrt(noise_power), y.size)
    y = np.clip(y, -1.0, 1.0)
    return Waveform(y)


def synth_corpus(
    spec: AccentSpec,
    texts: list[str],
    out_dir: str,
    role: str = "generic_unlabeled",
    accent_tag: str | None = None,
    with_transcripts: bool | None = None,
) -> Manifest:
    """Render `texts` to WAV files under out_dir and write manifest.tsv.

    Deterministic: the same (spec, texts) always yields identical bytes.
    """
    os.makedirs(out_dir, exist_ok=True)
    if with_transcripts is None:
        with_transcripts = role in ("labeled", "eval")
    if accent_tag is None and role == "accent_unlabeled":
        accent_tag = spec.accent_id
    rng = np.random.default_rng(spec.seed)
    utts = []
    for i, text in enumerate(texts):
        text = normalize_transcript(text)
        w = render_text(spec, text, rng)
        name = f"{spec.accent_id}_{i:05d}"
        wav_path = os.path.join(out_dir, name + ".wav")
        write_wav(wav_path, w)
        utts.append(
            Utterance(id=name, audio=wav_path, transcript=text if with_transcripts else None)
        )
    manifest = Manifest(utterances=utts, role=role, accent_tag=accent_tag)
    save_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest


# small lexicon for generating random desk-scale corpora
LEXICON = (
    "the a of to in is it he she we you they and or but on at by for was "
    "were be not this that with from have has had say see go do know can "
    "will one two red blue cat dog sun day night hand eye word time"
).split()


def random_texts(n: int, seed: int, min_words: int = 2, max_words: int = 3) -> list[str]:
    rng = np.random.default_rng(seed)
    texts = []
    for _ in range(n):
        k = int(rng.integers(min_words, max_words + 1))
        words = [LEXICON[int(rng.integers(0, len(LEXICON)))] for _ in range(k)]
        texts.append(" ".join(words))
    return texts
