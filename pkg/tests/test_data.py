import json
from pathlib import Path

import numpy as np
import pytest

from affectfusion import data
from affectfusion.data import (FeatureLoader, SynthConfig, generate_synthetic, load_checkpoint,
                               load_features, load_manifest, save_checkpoint, write_manifest,
                               write_matrix)
from affectfusion.errors import ChecksumError, ConfigError, DataError, SchemaVersionError
from affectfusion.features import Lexicon, bundled_lexicons
from affectfusion.models import ModelSpec, build_model, predict_batch
from affectfusion.nncore import OptimizerState, make_rng
from affectfusion.objectives import pearson

from conftest import TINY_DIMS


def _row(uid, vid="v1", split="train", arousal=0.5, valence=0.0, start=0.0):
    return {"utterance_id": uid, "video_id": vid, "start_time": start, "split": split,
            "arousal": arousal, "valence": valence, "transcript_path": f"{uid}.txt",
            "visual_path": f"{uid}.visual.csv", "audio_path": f"{uid}.audio.csv"}


def _write(tmp_path, rows):
    path = tmp_path / "manifest.csv"
    write_manifest(path, rows)
    return path


def _same_tree(a: Path, b: Path):
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


# ---------------------------------------------------------------- manifest

def test_manifest_three_rows(tmp_path):
    m = load_manifest(_write(tmp_path, [_row("a"), _row("b", start=1.0), _row("c", "v2", "val")]))
    assert len(m.records) == 3
    assert m.counts == {"train": 2, "val": 1, "test": 0}
    assert m.records[0].visual_path == tmp_path / "a.visual.csv"


def test_manifest_rejects_out_of_range_arousal(tmp_path):
    with pytest.raises(DataError, match=r"line 3.*arousal 1.5.*\[0, 1\]"):
        load_manifest(_write(tmp_path, [_row("a"), _row("b", arousal=1.5)]))


def test_manifest_rejects_out_of_range_valence(tmp_path):
    with pytest.raises(DataError, match="valence"):
        load_manifest(_write(tmp_path, [_row("a", valence=-1.2)]))


def test_manifest_rejects_duplicate_id(tmp_path):
    with pytest.raises(DataError, match="'dup'"):
        load_manifest(_write(tmp_path, [_row("dup"), _row("dup")]))


def test_manifest_rejects_video_across_splits(tmp_path):
    with pytest.raises(DataError, match="video 'v1'"):
        load_manifest(_write(tmp_path, [_row("a"), _row("b", split="val")]))


def test_manifest_rejects_bad_split_and_header(tmp_path):
    with pytest.raises(DataError, match="split"):
        load_manifest(_write(tmp_path, [_row("a", split="dev")]))
    bad = tmp_path / "bad.csv"
    bad.write_text("id,split\nx,train\n", encoding="utf-8")
    with pytest.raises(DataError, match="header"):
        load_manifest(bad)


def test_manifest_reports_malformed_number(tmp_path):
    with pytest.raises(DataError, match="line 2.*arousal"):
        load_manifest(_write(tmp_path, [_row("a", arousal="high")]))


def test_manifest_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.csv")


# ---------------------------------------------------------------- features from files

@pytest.fixture
def one_video(tmp_path):
    rng = np.random.default_rng(0)
    rows = [_row("a", start=0.0), _row("b", start=2.0), _row("c", start=5.0)]
    texts = {"a": "good day", "b": "", "c": "bad awful bad"}
    for r in rows:
        uid = r["utterance_id"]
        write_matrix(tmp_path / f"{uid}.visual.csv", rng.normal(size=(40, 4)))
        write_matrix(tmp_path / f"{uid}.audio.csv", rng.normal(size=(1, 3)))
        (tmp_path / f"{uid}.txt").write_text(texts[uid], encoding="utf-8")
    return load_manifest(_write(tmp_path, rows))


def test_load_features_samples_visual(one_video):
    lex = bundled_lexicons()
    rec = one_video.records[0]
    b = load_features(rec, one_video, lex, visual_dim=4, audio_dim=3)
    raw = data.read_matrix(rec.visual_path)
    assert b.visual.shape == (20, 4)
    assert np.array_equal(b.visual, raw[::2])
    assert b.audio.shape == (3,) and b.text.shape == (10,)


def test_load_features_wrong_audio_width(one_video):
    with pytest.raises(DataError, match="width is 3, expected 7"):
        load_features(one_video.records[0], one_video, bundled_lexicons(), 4, 7)


def test_empty_transcript_uses_nearest_neighbour(one_video):
    l1 = Lexicon("l1", frozenset({"good"}), frozenset({"bad"}))
    l2 = Lexicon("l2", frozenset({"day"}), frozenset({"awful"}))
    loader = FeatureLoader(one_video, [l1, l2], 4, 3)
    a, b = loader.text(one_video.records[0]), loader.text(one_video.records[1])
    # b sits at t=2: a (t=0) is nearer than c (t=5)
    assert np.array_equal(b[:4], a[:4])
    assert b[8] == 2.0
    assert b[9] == 5.0


def test_missing_feature_file(one_video):
    one_video.records[0].visual_path.unlink()
    with pytest.raises(OSError):
        load_features(one_video.records[0], one_video, bundled_lexicons(), 4, 3)


# ---------------------------------------------------------------- checkpoints

@pytest.fixture
def trained_like():
    spec = ModelSpec("trimodal-early", "valence", **TINY_DIMS)
    model = build_model(spec, make_rng(3))
    rng = make_rng(4)
    for p in model.params.values():
        p += rng.normal(0, 1e-3, p.shape) * np.pi  # awkward decimals
    model.scaler = {m: (rng.normal(size=d), rng.uniform(0.5, 2, d))
                    for m, d in [("visual", 6), ("audio", 5), ("text", 10)]}
    return model


def _bundles(spec, n, seed):
    from conftest import random_split
    return random_split(n, seed, seq_len=spec.seq_len, visual_dim=spec.visual_dim,
                        audio_dim=spec.audio_dim).bundles


def test_checkpoint_round_trip_is_bit_exact(tmp_path, trained_like):
    path = tmp_path / "ck.json"
    save_checkpoint(trained_like, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == trained_like.spec
    for k, v in trained_like.params.items():
        assert np.array_equal(loaded.params[k], v)
    bundles = _bundles(trained_like.spec, 9, 0)
    assert np.array_equal(predict_batch(loaded, bundles), predict_batch(trained_like, bundles))


def test_checkpoint_records_head_activation(tmp_path, trained_like):
    path = tmp_path / "ck.json"
    save_checkpoint(trained_like, path)
    assert load_checkpoint(path).spec.head_activation == "tanh"


def test_checkpoint_with_optimizer_state(tmp_path, trained_like):
    opt = OptimizerState(lr=1e-3, step=5, m={"x": np.ones(2) / 3}, v={"x": np.ones(2) / 7})
    path = tmp_path / "ck.json"
    save_checkpoint(trained_like, path, optimizer=opt)
    _, state = load_checkpoint(path, with_optimizer=True)
    assert state.step == 5 and np.array_equal(state.m["x"], opt.m["x"])


def test_checkpoint_tamper_detected(tmp_path, trained_like):
    path = tmp_path / "ck.json"
    save_checkpoint(trained_like, path)
    doc = json.loads(path.read_text())
    doc["payload"]["params"]["head.out.b"]["data"] = "0.5"
    path.write_text(json.dumps(doc))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_checkpoint_truncated_file(tmp_path, trained_like):
    path = tmp_path / "ck.json"
    save_checkpoint(trained_like, path)
    path.write_text(path.read_text()[:200])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path, trained_like):
    path = tmp_path / "ck.json"
    save_checkpoint(trained_like, path)
    doc = json.loads(path.read_text())
    doc["version"] = 2
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaVersionError, match="version 2"):
        load_checkpoint(path)


# ---------------------------------------------------------------- synthetic data

def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(n_val=1).validate()
    with pytest.raises(ConfigError):
        SynthConfig(noise_audio=-0.1).validate()
    with pytest.raises(ConfigError):
        SynthConfig(visual_dim=0).validate()


def test_generation_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_train=12, n_val=6, n_test=4)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    _same_tree(tmp_path / "a", tmp_path / "b")


def test_noiseless_audio_depends_only_on_arousal():
    rng = np.random.default_rng(0)
    a = data.synth_audio(0.3, 12, 0.0, rng)
    b = data.synth_audio(0.3, 12, 0.0, rng)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a[0], np.sin(np.arange(1, 13) * np.pi * 0.3), atol=1e-15)


def test_noiseless_visual_formula():
    omega, phi = np.array([0.3, 0.7]), np.array([0.1, 2.0])
    m = data.synth_visual(0.4, -0.5, 3, omega, phi, 0.0, np.random.default_rng(0))
    t = np.arange(3.0)[:, None]
    expected = 0.2 * np.sin(omega * t + phi) - 0.25 * np.cos(omega * t)
    np.testing.assert_allclose(m, expected, atol=1e-15)


def test_positive_transcript_uses_positive_words_only():
    l1, l2 = bundled_lexicons()
    pos = sorted(l1.positive | l2.positive)
    neg = sorted(l1.negative | l2.negative)
    text = data.synth_transcript(1.0, 25, pos, neg, 0.0, np.random.default_rng(1))
    from affectfusion.features import Transcript, text_features
    utt = Transcript("u", text)
    vec = text_features(utt, [utt], [l1, l2])
    assert all(w in set(pos) for w in utt.tokens)
    assert np.all(vec[:4] >= 0)
    assert vec[0] + vec[1] <= 1.0 and vec[2] + vec[3] <= 1.0
    assert vec[1] == 0.0 and vec[3] == 0.0


def test_generated_dataset_loads_and_respects_ranges(small_dataset):
    m = load_manifest(small_dataset)
    assert m.counts == {"train": 40, "val": 16, "test": 12}
    loader = FeatureLoader(m, bundled_lexicons(), 16, 12)
    for rec in m.records:
        b = loader.load(rec, ("visual", "audio", "audio_frames", "text"))
        assert b.visual.shape == (20, 16) and b.audio.shape == (12,)
        assert b.audio_frames.shape == (20, 12)
        assert 0 <= rec.arousal <= 1 and -1 <= rec.valence <= 1


def test_generated_video_entries_agree(small_dataset):
    m = load_manifest(small_dataset)
    loader = FeatureLoader(m, bundled_lexicons(), 16, 12)
    videos = {}
    for rec in m.records:
        videos.setdefault(rec.video_id, []).append(loader.text(rec)[4:])
    for rows in videos.values():
        for r in rows[1:]:
            assert np.array_equal(r[:4], rows[0][:4]) and r[5] == rows[0][5]


def test_generated_text_tracks_valence(tmp_path):
    path = generate_synthetic(SynthConfig(n_train=200, n_val=2, n_test=2, max_frames=9), tmp_path)
    m = load_manifest(path)
    loader = FeatureLoader(m, bundled_lexicons(), 16, 12)
    recs = m.split("train")
    freq = [loader.text(r)[0] for r in recs]
    assert pearson([r.valence for r in recs], freq) > 0.5


def test_synth_writes_config_summary(small_dataset):
    meta = json.loads((small_dataset.parent / "synth_config.json").read_text())
    assert meta["seed"] == 7 and meta["visual_dim"] == 16
