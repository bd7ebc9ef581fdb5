"""Audio frontend: manifest ingestion, intent labels, log-mel features.

Datasets arrive as CSV manifests pointing at 16 kHz WAV files. The intent of
an utterance is the (action, object, location) triple; triples are ranked
lexicographically to obtain stable dense class ids. Features are 40-band
log-mel filterbank matrices, cached to disk as small binary blobs.
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ManifestRow",
    "FrontendConfig",
    "ManifestError",
    "IntentRegistry",
    "load_manifest",
    "build_registry",
    "intent_label",
    "logmel",
    "FeatureCache",
    "load_waveform",
    "load_corpus",
]

REQUIRED_COLUMNS = ("action", "object", "location")


class ManifestError(ValueError):
    """Manifest missing, malformed, or lacking required columns."""


@dataclass(frozen=True)
class ManifestRow:
    audio_path: str
    action: str
    object: str
    location: str
    transcription: str = ""

    @property
    def intent_triple(self) -> tuple[str, str, str]:
        return (self.action, self.object, self.location)


@dataclass(frozen=True)
class FrontendConfig:
    """Log-mel extraction parameters. Window and hop are in milliseconds."""

    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 40
    log_floor: float = 1e-10

    def __post_init__(self):
        if not self.window_ms > self.hop_ms > 0:
            raise ValueError("need window_ms > hop_ms > 0")
        if self.n_mels < 1 or self.log_floor <= 0:
            raise ValueError("n_mels must be >= 1 and log_floor > 0")

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def cache_key(self) -> str:
        text = (
            f"{self.sample_rate}:{self.window_ms}:{self.hop_ms}"
            f":{self.n_mels}:{self.log_floor!r}"
        )
        return hashlib.sha1(text.encode()).hexdigest()[:12]


def load_manifest(path: str | os.PathLike) -> list[ManifestRow]:
    """Parse a CSV manifest into rows, reporting defects with line numbers."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    rows: list[ManifestRow] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        path_col = next((c for c in ("path", "audio_path") if c in header), None)
        if path_col is None:
            raise ManifestError(f"{path}: no 'path' or 'audio_path' column")
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise ManifestError(f"{path}: missing required column {col!r}")
        for lineno, rec in enumerate(reader, start=2):
            audio = (rec.get(path_col) or "").strip()
            if not audio:
                raise ManifestError(f"{path}:{lineno}: empty {path_col!r} field")
            values = {}
            for col in REQUIRED_COLUMNS:
                value = (rec.get(col) or "").strip()
                if not value:
                    raise ManifestError(f"{path}:{lineno}: empty {col!r} field")
                values[col] = value
            rows.append(
                ManifestRow(
                    audio_path=audio,
                    action=values["action"],
                    object=values["object"],
                    location=values["location"],
                    transcription=(rec.get("transcription") or "").strip(),
                )
            )
    return rows


class IntentRegistry:
    """Frozen bijection from intent triples to dense ids 0..K-1.

    Ids are the lexicographic rank of the triple, so the mapping does not
    depend on the order rows were seen in.
    """

    def __init__(self, triples: Iterable[tuple[str, str, str]]):
        ordered = sorted(set(triples))
        self._id_of = {triple: i for i, triple in enumerate(ordered)}
        self._triple_of = ordered

    def __len__(self) -> int:
        return len(self._triple_of)

    def id_of(self, triple: tuple[str, str, str]) -> int:
        return self._id_of[triple]

    def triple_of(self, class_id: int) -> tuple[str, str, str]:
        return self._triple_of[class_id]

    def items(self):
        return self._id_of.items()


def build_registry(rows: Iterable[ManifestRow]) -> IntentRegistry:
    return IntentRegistry(r.intent_triple for r in rows)


def intent_label(row: ManifestRow, registry: IntentRegistry) -> int:
    return registry.id_of(row.intent_triple)


def _mel_scale(hz: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_inverse(mel: np.ndarray) -> np.ndarray:
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular unit-peak mel filters over rfft bins, shape [n_mels, n_bins]."""
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    edges = _mel_inverse(np.linspace(0.0, _mel_scale(sample_rate / 2.0), n_mels + 2))
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / max(center - lo, 1e-12)
        down = (hi - freqs) / max(hi - center, 1e-12)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def logmel(waveform: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Log-mel filterbank features, shape [n_mels x n_frames].

    Frames are Hann-windowed with no padding, so
    n_frames = 1 + (len - win) // hop. Energies below ``cfg.log_floor``
    are clamped before the natural log, keeping every entry finite.
    """
    wav = np.asarray(waveform, dtype=np.float64).reshape(-1)
    win, hop = cfg.win_samples, cfg.hop_samples
    if wav.size < win:
        raise ValueError(f"waveform of {wav.size} samples is shorter than one window ({win})")
    n_frames = 1 + (wav.size - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = wav[idx] * np.hanning(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=win, axis=1)) ** 2
    bank = mel_filterbank(cfg.n_mels, win, cfg.sample_rate)
    energies = power @ bank.T
    return np.log(np.maximum(energies, cfg.log_floor)).T


def load_waveform(path: str | os.PathLike, expected_rate: int = 16000) -> np.ndarray:
    """Read a mono WAV file into float64 in [-1, 1]."""
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate}, expected {expected_rate}")
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max)
    return np.asarray(data, dtype=np.float64)


_CACHE_MAGIC = b"LMF1"


class FeatureCache:
    """Disk cache of feature matrices, one binary blob per utterance.

    Blob layout: 4-byte magic, then little-endian u32 n_mels and u32
    n_frames, then row-major little-endian f32 payload. Entries are keyed
    by (audio file content hash, frontend config hash); writes go through a
    temp file and an atomic rename, so concurrent writers of the same key
    are last-writer-wins with identical content.
    """

    def __init__(self, cache_dir: str | os.PathLike):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _path_for(self, audio_path: Path, cfg: FrontendConfig) -> Path:
        digest = hashlib.sha1()
        with open(audio_path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 16), b""):
                digest.update(chunk)
        return self.cache_dir / f"{digest.hexdigest()}-{cfg.cache_key()}.lmf"

    @staticmethod
    def encode(features: np.ndarray) -> bytes:
        n_mels, n_frames = features.shape
        header = _CACHE_MAGIC + struct.pack("<II", n_mels, n_frames)
        return header + features.astype("<f4").tobytes(order="C")

    @staticmethod
    def decode(blob: bytes) -> np.ndarray:
        if blob[:4] != _CACHE_MAGIC:
            raise ValueError("not a feature cache blob")
        n_mels, n_frames = struct.unpack("<II", blob[4:12])
        flat = np.frombuffer(blob[12:], dtype="<f4", count=n_mels * n_frames)
        return flat.reshape(n_mels, n_frames).astype(np.float64)

    def get_or_compute(self, audio_path: str | os.PathLike, cfg: FrontendConfig) -> np.ndarray:
        audio_path = Path(audio_path)
        entry = self._path_for(audio_path, cfg)
        if entry.exists():
            return self.decode(entry.read_bytes())
        features = logmel(load_waveform(audio_path, cfg.sample_rate), cfg)
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.encode(features))
            os.replace(tmp, entry)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return features


def _find_manifest(data_dir: Path, split: str) -> Path:
    for candidate in (data_dir / f"{split}_data.csv", data_dir / "data" / f"{split}_data.csv"):
        if candidate.exists():
            return candidate
    raise ManifestError(f"no {split}_data.csv under {data_dir}")


def load_corpus(data_dir: str | os.PathLike, cache_dir: str | os.PathLike, cfg: FrontendConfig):
    """Load an FSC-style corpus into samples plus a split map.

    Expects ``{train,valid,test}_data.csv`` under ``data_dir`` (or its
    ``data/`` subdirectory) with audio paths relative to ``data_dir``.
    Returns (samples, split_of, registry); sample ids are the manifest
    audio paths.
    """
    from .scenario import Sample

    data_dir = Path(data_dir)
    manifests = {
        "train": load_manifest(_find_manifest(data_dir, "train")),
        "val": load_manifest(_find_manifest(data_dir, "valid")),
        "test": load_manifest(_find_manifest(data_dir, "test")),
    }
    registry = build_registry(r for rows in manifests.values() for r in rows)
    cache = FeatureCache(cache_dir)
    samples = []
    split_of: dict[str, str] = {}
    for split, rows in manifests.items():
        for row in rows:
            features = cache.get_or_compute(data_dir / row.audio_path, cfg)
            samples.append(
                Sample(id=row.audio_path, features=features, label=intent_label(row, registry))
            )
            split_of[row.audio_path] = split
    return samples, split_of, registry
