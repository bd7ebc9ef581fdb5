"""Manifest parsing, intent ids, log-mel features, and the feature cache."""

import math
import struct

import numpy as np
import pytest
from scipy.io import wavfile

from intentcl.frontend import (
    FeatureCache,
    FrontendConfig,
    IntentRegistry,
    ManifestError,
    build_registry,
    intent_label,
    load_corpus,
    load_manifest,
    logmel,
    mel_filterbank,
)

HEADER = "path,speakerId,transcription,action,object,location\n"


def write_manifest(path, lines):
    path.write_text(HEADER + "".join(lines))
    return path


def test_manifest_parses_rows(tmp_path):
    manifest = write_manifest(
        tmp_path / "train.csv",
        [
            "wavs/a.wav,spk1,turn up the heat,increase,heat,kitchen\n",
            "wavs/b.wav,spk2,lights off,deactivate,lights,none\n",
        ],
    )
    rows = load_manifest(manifest)
    assert len(rows) == 2
    assert rows[0].intent_triple == ("increase", "heat", "kitchen")
    assert rows[1].audio_path == "wavs/b.wav"


def test_manifest_header_only_is_empty(tmp_path):
    assert load_manifest(write_manifest(tmp_path / "m.csv", [])) == []


def test_manifest_missing_value_names_column_and_line(tmp_path):
    manifest = write_manifest(
        tmp_path / "m.csv",
        [
            "wavs/a.wav,spk1,ok,increase,heat,kitchen\n",
            "wavs/b.wav,spk1,broken,,heat,kitchen\n",
        ],
    )
    with pytest.raises(ManifestError, match=r"m\.csv:3.*'action'"):
        load_manifest(manifest)


def test_manifest_missing_file_and_column(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "absent.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("path,action,object\nx.wav,a,b\n")
    with pytest.raises(ManifestError, match="'location'"):
        load_manifest(bad)


def test_registry_is_stable_and_order_independent():
    triples = [("increase", "heat", "kitchen"), ("decrease", "heat", "none"), ("activate", "music", "none")]
    sorted_reg = IntentRegistry(triples)
    shuffled_reg = IntentRegistry(reversed(triples))
    assert dict(sorted_reg.items()) == dict(shuffled_reg.items())
    assert sorted_reg.id_of(("increase", "heat", "kitchen")) == sorted_reg.id_of(("increase", "heat", "kitchen"))


def test_registry_is_dense_bijection_over_31_triples():
    triples = [(f"action{i % 7}", f"object{i % 5}", f"location{i}") for i in range(31)]
    registry = IntentRegistry(triples)
    assert len(registry) == 31
    ids = {registry.id_of(t) for t in triples}
    assert ids == set(range(31))
    for t in triples:
        assert registry.triple_of(registry.id_of(t)) == t


def test_intent_label_uses_lexicographic_rank(tmp_path):
    manifest = write_manifest(
        tmp_path / "m.csv",
        [
            "a.wav,s,x,zebra,one,two\n",
            "b.wav,s,x,apple,one,two\n",
        ],
    )
    rows = load_manifest(manifest)
    registry = build_registry(rows)
    assert intent_label(rows[1], registry) == 0  # apple sorts first
    assert intent_label(rows[0], registry) == 1


def test_logmel_frame_count_one_second():
    cfg = FrontendConfig()
    wav = np.random.default_rng(0).normal(size=16000)
    feats = logmel(wav, cfg)
    assert feats.shape == (40, 98)  # 1 + (16000 - 400) // 160


def test_logmel_frame_count_formula_various_lengths():
    cfg = FrontendConfig()
    rng = np.random.default_rng(1)
    for n in (400, 401, 559, 560, 561, 4000, 12345):
        feats = logmel(rng.normal(size=n), cfg)
        assert feats.shape == (40, 1 + (n - 400) // 160)
        assert np.isfinite(feats).all()


def test_logmel_silence_hits_log_floor():
    cfg = FrontendConfig()
    feats = logmel(np.zeros(3200), cfg)
    assert np.allclose(feats, math.log(cfg.log_floor))


def test_logmel_rejects_short_waveform():
    with pytest.raises(ValueError, match="shorter than one window"):
        logmel(np.zeros(399), FrontendConfig())


def _naive_logmel(wav, cfg):
    """Frame-by-frame reference: explicit window, rfft, triangular weights."""
    win, hop = cfg.win_samples, cfg.hop_samples
    window = np.hanning(win)
    mel_max = 2595.0 * np.log10(1.0 + (cfg.sample_rate / 2.0) / 700.0)
    edges = 700.0 * (10.0 ** (np.linspace(0.0, mel_max, cfg.n_mels + 2) / 2595.0) - 1.0)
    bins = np.arange(win // 2 + 1) * cfg.sample_rate / win
    cols = []
    for start in range(0, len(wav) - win + 1, hop):
        spec = np.abs(np.fft.rfft(wav[start : start + win] * window)) ** 2
        col = []
        for m in range(cfg.n_mels):
            lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
            weights = np.zeros_like(bins)
            rising = (bins >= lo) & (bins <= center)
            falling = (bins > center) & (bins <= hi)
            weights[rising] = (bins[rising] - lo) / (center - lo)
            weights[falling] = (hi - bins[falling]) / (hi - center)
            col.append(math.log(max(float(weights @ spec), cfg.log_floor)))
        cols.append(col)
    return np.array(cols).T


def test_logmel_matches_naive_reference_on_noise():
    cfg = FrontendConfig()
    wav = np.random.default_rng(7).normal(size=2000)
    got = logmel(wav, cfg)
    want = _naive_logmel(wav, cfg)
    assert got.shape == want.shape == (40, 11)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_filterbank_rows_cover_spectrum():
    bank = mel_filterbank(40, 400, 16000)
    assert bank.shape == (40, 201)
    assert (bank >= 0).all()
    assert (bank.max(axis=1) > 0).all()


def _write_wav(path, seconds=0.5, rate=16000, seed=0):
    rng = np.random.default_rng(seed)
    wav = (rng.normal(size=int(rate * seconds)) * 8000).astype(np.int16)
    wavfile.write(path, rate, wav)
    return path


def test_cache_blob_layout(tmp_path):
    feats = np.arange(12, dtype=np.float64).reshape(3, 4)
    blob = FeatureCache.encode(feats)
    assert blob[:4] == b"LMF1"
    n_mels, n_frames = struct.unpack("<II", blob[4:12])
    assert (n_mels, n_frames) == (3, 4)
    payload = np.frombuffer(blob[12:], dtype="<f4")
    np.testing.assert_array_equal(payload, np.arange(12, dtype=np.float32))
    np.testing.assert_allclose(FeatureCache.decode(blob), feats)


def test_cache_hits_skip_recompute(tmp_path, monkeypatch):
    wav_path = _write_wav(tmp_path / "u.wav")
    cache = FeatureCache(tmp_path / "cache")
    cfg = FrontendConfig()
    first = cache.get_or_compute(wav_path, cfg)

    import intentcl.frontend as frontend_mod

    def boom(*args, **kwargs):
        raise AssertionError("logmel re-invoked on a cache hit")

    monkeypatch.setattr(frontend_mod, "logmel", boom)
    second = cache.get_or_compute(wav_path, cfg)
    np.testing.assert_allclose(first, second, atol=1e-6)


def test_cache_key_tracks_config(tmp_path):
    wav_path = _write_wav(tmp_path / "u.wav")
    cache = FeatureCache(tmp_path / "cache")
    a = cache.get_or_compute(wav_path, FrontendConfig())
    b = cache.get_or_compute(wav_path, FrontendConfig(n_mels=20))
    assert a.shape[0] == 40 and b.shape[0] == 20
    assert len(list((tmp_path / "cache").glob("*.lmf"))) == 2


def test_load_corpus_builds_samples(tmp_path):
    (tmp_path / "wavs").mkdir()
    for name, seed in (("a", 1), ("b", 2), ("c", 3), ("d", 4)):
        _write_wav(tmp_path / "wavs" / f"{name}.wav", seed=seed)
    write_manifest(
        tmp_path / "train_data.csv",
        ["wavs/a.wav,s,x,increase,heat,kitchen\n", "wavs/b.wav,s,x,decrease,heat,kitchen\n"],
    )
    write_manifest(tmp_path / "valid_data.csv", ["wavs/c.wav,s,x,increase,heat,kitchen\n"])
    write_manifest(tmp_path / "test_data.csv", ["wavs/d.wav,s,x,decrease,heat,kitchen\n"])
    samples, split_of, registry = load_corpus(tmp_path, tmp_path / "cache", FrontendConfig())
    assert len(registry) == 2
    assert {split_of[s.id] for s in samples} == {"train", "val", "test"}
    assert all(s.features.shape[0] == 40 for s in samples)
