"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line; the lines are
repeated in the terminal summary.  Criteria 4 to 6 share one set of trained
models on the default synthetic dataset.
"""
import time

import numpy as np
import pytest

from affectfusion import cli
from affectfusion import models as M
from affectfusion import training as T
from affectfusion.data import (FeatureLoader, SynthConfig, generate_synthetic, load_checkpoint,
                               load_manifest, save_checkpoint, write_manifest, write_matrix)
from affectfusion.features import (Lexicon, Transcript, resolve_missing_transcript,
                                   sample_frames, text_features)
from affectfusion.models import ModelSpec, predict_batch
from affectfusion.nncore import make_rng
from affectfusion.objectives import ccc

RESULTS: dict[int, str] = {}
UNIMODAL = ("visual", "audio", "audio-lstm", "text")
TARGETS = ("arousal", "valence")


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------- shared fixtures

@pytest.fixture(scope="session")
def default_data(tmp_path_factory):
    path = generate_synthetic(SynthConfig(seed=7), tmp_path_factory.mktemp("default"))
    manifest = load_manifest(path)
    from affectfusion.features import bundled_lexicons
    loader = FeatureLoader(manifest, bundled_lexicons(), 16, 12)
    return manifest, loader


def _split(loader, name, spec):
    bundles, labels, recs = loader.load_split(name, spec.modalities, spec.target)
    return T.Split(bundles, labels, [r.video_id for r in recs])


@pytest.fixture(scope="session")
def zoo(default_data):
    """(kind, target) -> (phase1 model, phase2 model, val split), trained with seed 7."""
    _, loader = default_data
    out = {}
    for target in TARGETS:
        cfg = T.TrainConfig(target, seed=7, verbose=False)
        for kind in UNIMODAL + ("trimodal-early",):
            spec = ModelSpec(kind, target, visual_dim=16, audio_dim=12)
            train, val = _split(loader, "train", spec), _split(loader, "val", spec)
            p1, p2, _ = T.train_model(spec, train, val, cfg)
            out[kind, target] = (p1, p2, val)
    return out


def _val_ccc(model, val):
    return T.evaluate_model(model, val).ccc


# ---------------------------------------------------------------- 1 gradients

def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = cli.run_gradcheck(seed=7, eps=1e-5)
    elapsed = time.perf_counter() - start
    worst_key = max(results, key=results.get)
    kinds = {k for k, _, _ in results}
    losses = {l for _, _, l in results}
    ok = (kinds == set(M.KINDS) and losses == {"mse", "one_minus_ccc"}
          and results[worst_key] < 1e-4 and elapsed < 60)
    verdict(1, ok, f"max rel err {results[worst_key]:.2e} at {worst_key}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2 ccc oracle

def test_criterion_2_ccc_oracles():
    rng = np.random.default_rng(7)
    fails = []
    x = rng.normal(size=50)
    if ccc(x, x) != 1.0:
        fails.append("identity")
    if ccc([0, 1], [1, 0]) != -1.0:
        fails.append("reversal")
    if ccc(np.full(30, 0.4), rng.normal(size=30)) != 0.0:
        fails.append("constant")
    worst = 0.0
    for _ in range(100):
        gnd = rng.normal(size=int(rng.integers(2, 200))) * rng.uniform(0.1, 3)
        c = rng.uniform(-3, 3)
        var = np.var(gnd)
        worst = max(worst, abs(ccc(gnd + c, gnd) - 2 * var / (2 * var + c * c)))
    if worst > 1e-12:
        fails.append(f"shifted copy err {worst:.1e}")
    out_of_range = 0
    for _ in range(10**4):
        n = int(rng.integers(2, 40))
        p, g = rng.normal(size=n) * rng.uniform(0.01, 5), rng.normal(size=n) * rng.uniform(0.01, 5)
        r = ccc(p + rng.normal() * 3, g)
        out_of_range += not -1.0 <= r <= 1.0
    if out_of_range:
        fails.append(f"{out_of_range} pairs out of [-1, 1]")
    verdict(2, not fails, f"shifted-copy max err {worst:.1e}; " + (", ".join(fails) or "all oracles hold"))


# ---------------------------------------------------------------- 3 overfit

@pytest.mark.slow
def test_criterion_3_overfit(default_data):
    manifest, loader = default_data
    spec = ModelSpec("trimodal-early", "arousal", visual_dim=16, audio_dim=12)
    recs = manifest.split("train")[:32]
    bundles = [loader.load(r) for r in recs]
    labels = np.array([r.arousal for r in recs])
    data = T.Split(bundles, labels)
    cfg = T.TrainConfig("arousal", max_epochs=2000, patience=None, seed=7, verbose=False)
    start = time.perf_counter()
    model = M.build_model(spec, np.random.Generator(np.random.PCG64(7)))
    M.fit_scaler(model, M.stack_inputs(spec, bundles))
    best, hist = T.train_phase(model, data, data, cfg, "mse")
    elapsed = time.perf_counter() - start
    train_mse = float(np.mean((predict_batch(best, bundles) - labels) ** 2))
    verdict(3, train_mse < 1e-3 and elapsed < 300,
            f"training MSE {train_mse:.2e} (best epoch {hist.best_epoch}), {elapsed:.0f}s")


# ---------------------------------------------------------------- 4 fusion ordering

@pytest.mark.slow
def test_criterion_4_trimodal_beats_unimodal(zoo):
    parts, ok = [], True
    for target in TARGETS:
        tri = _val_ccc(zoo["trimodal-early", target][1], zoo["trimodal-early", target][2])
        uni = {k: _val_ccc(zoo[k, target][1], zoo[k, target][2]) for k in UNIMODAL}
        margin = tri - max(uni.values())
        ok &= margin >= 0.05
        parts.append(f"{target}: trimodal {tri:.3f} vs "
                     + " ".join(f"{k} {v:.3f}" for k, v in uni.items())
                     + f" (margin {margin:+.3f})")
    verdict(4, ok, "; ".join(parts))


# ---------------------------------------------------------------- 5 early vs late

@pytest.mark.slow
def test_criterion_5_early_vs_late(zoo, default_data):
    _, loader = default_data
    parts, ok = [], True
    for target in TARGETS:
        members = [zoo[k, target][1] for k in ("visual", "audio", "text")]
        spec = ModelSpec("trimodal-early", target, visual_dim=16, audio_dim=12)
        combiner = T.fit_late_fusion(members, _split(loader, "train", spec), target)
        val = zoo["trimodal-early", target][2]
        late = T.evaluate_model(M.LateFusionEnsemble(members, combiner), val).ccc
        early = _val_ccc(zoo["trimodal-early", target][1], val)
        ok &= early >= late - 0.02
        parts.append(f"{target}: early {early:.3f} late {late:.3f}")
    verdict(5, ok, "; ".join(parts))


# ---------------------------------------------------------------- 6 fine-tuning

@pytest.mark.slow
def test_criterion_6_fine_tuning(zoo):
    parts, no_regress, some_gain = [], True, False
    for target in TARGETS:
        p1, p2, val = zoo["trimodal-early", target]
        c1, c2 = _val_ccc(p1, val), _val_ccc(p2, val)
        no_regress &= c2 >= c1 - 0.02
        some_gain |= c2 >= c1
        parts.append(f"{target}: phase1 {c1:.3f} phase2 {c2:.3f}")
    verdict(6, no_regress and some_gain, "; ".join(parts))


# ---------------------------------------------------------------- 7 features

def test_criterion_7_feature_determinism():
    rows = lambda n: np.arange(n, dtype=np.float64)[:, None]  # noqa: E731
    checks = {
        "N=40 even": sample_frames(rows(40), 20)[:, 0].tolist() == list(range(0, 40, 2)),
        "N=3 pad": sample_frames(rows(3), 20)[:, 0].tolist() == [0, 1, 2] + [2] * 17,
    }
    l1 = Lexicon("l1", frozenset({"good"}), frozenset({"bad"}))
    l2 = Lexicon("l2", frozenset({"good"}), frozenset({"awful"}))
    utt = Transcript("u", "good bad awful day")
    checks["hand count"] = text_features(utt, [utt], [l1, l2]).tolist() == [0.25] * 8 + [4.0, 4.0]
    near = [Transcript("a", "good", 4.0), Transcript("e", "", 5.0), Transcript("b", "bad", 7.0)]
    checks["nearest"] = resolve_missing_transcript(near[1], near).raw == "good"
    tie = [Transcript("a", "good", 4.0), Transcript("e", "", 5.0), Transcript("b", "bad", 6.0)]
    checks["tie-break"] = resolve_missing_transcript(tie[1], tie).raw == "good"
    failed = [k for k, v in checks.items() if not v]
    verdict(7, not failed, f"{len(checks) - len(failed)}/{len(checks)} exact"
            + (f", failed: {failed}" if failed else ""))


# ---------------------------------------------------------------- 8 early stopping

def _scripted(monkeypatch, losses, patience, max_epochs):
    from conftest import TINY_DIMS, random_split
    it = iter(losses)
    monkeypatch.setattr(T, "_validation_loss", lambda loss, pred, labels: next(it))
    spec = ModelSpec("text", "valence", **TINY_DIMS)
    cfg = T.TrainConfig("valence", max_epochs=max_epochs, patience=patience, batch_size=8,
                        verbose=False)
    _, hist = T.train_phase(M.build_model(spec, make_rng(0)), random_split(10, 0),
                            random_split(6, 1), cfg)
    return len(hist.records), hist.best_epoch


def test_criterion_8_early_stopping(monkeypatch):
    # (losses, patience, max_epochs) -> (stop epoch, best epoch)
    cases = [
        (([1.0, 0.9, 0.95, 0.91], 2, 300), (4, 2)),
        (([1.0, 1.0, 1.0], 2, 300), (3, 1)),
        (([3.0, 2.0, 2.5, 1.0, 1.5, 1.2, 0.9], 2, 300), (6, 4)),
        (([5.0, 4.0, 3.0, 2.0], 2, 3), (3, 3)),
        (([1.0] + [0.5] + [0.6] * 20, 20, 300), (22, 2)),
    ]
    got = [_scripted(monkeypatch, *args) for args, _ in cases]
    want = [w for _, w in cases]
    verdict(8, got == want, f"{sum(g == w for g, w in zip(got, want))}/{len(cases)} scripted runs"
            f" matched (stop, best) {got}")


# ---------------------------------------------------------------- 9 persistence

@pytest.mark.slow
def test_criterion_9_persistence(zoo, default_data, tmp_path):
    model, val = zoo["trimodal-early", "valence"][1], zoo["trimodal-early", "valence"][2]
    save_checkpoint(model, tmp_path / "ck.json")
    loaded = load_checkpoint(tmp_path / "ck.json")
    same_pred = np.array_equal(predict_batch(loaded, val.bundles), predict_batch(model, val.bundles))
    same_params = all(np.array_equal(loaded.params[k], v) for k, v in model.params.items())

    cfg = SynthConfig(n_train=30, n_val=10, n_test=10, seed=7)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same_tree = files == sorted(p.relative_to(tmp_path / "b")
                                for p in (tmp_path / "b").rglob("*") if p.is_file())
    same_tree &= all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                     for f in files)
    verdict(9, same_pred and same_params and same_tree,
            f"bit-identical predictions {same_pred}, params {same_params}; "
            f"byte-identical dataset ({len(files)} files) {same_tree}")


# ---------------------------------------------------------------- 10 full-scale dims

def test_criterion_10_full_scale_dims(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for k, n_frames in enumerate([40, 7]):
        uid = f"u{k}"
        write_matrix(tmp_path / f"{uid}.visual.csv", rng.normal(size=(n_frames, 4805)))
        write_matrix(tmp_path / f"{uid}.audio.csv", rng.normal(size=(1, 1582)))
        (tmp_path / f"{uid}.txt").write_text("good day" if k else "", encoding="utf-8")
        rows.append({"utterance_id": uid, "video_id": "v", "start_time": k, "split": "val",
                     "arousal": 0.5, "valence": 0.1, "transcript_path": f"{uid}.txt",
                     "visual_path": f"{uid}.visual.csv", "audio_path": f"{uid}.audio.csv"})
    write_manifest(tmp_path / "m.csv", rows)
    from affectfusion.features import bundled_lexicons
    loader = FeatureLoader(load_manifest(tmp_path / "m.csv"), bundled_lexicons(), 4805, 1582)
    bundles = [loader.load(r) for r in loader.manifest.records]
    spec = ModelSpec("trimodal-early", "arousal", visual_dim=4805, audio_dim=1582)
    model = M.build_model(spec, make_rng(7))
    shapes = {k: v.shape for k, v in model.params.items()}
    checks = {
        "bundle shapes": all(b.visual.shape == (20, 4805) and b.audio.shape == (1582,)
                             and b.text.shape == (10,) for b in bundles),
        "fusion 768": spec.fusion_width == 768,
        "lstm 64": shapes["visual.lstm.U"] == (64, 256) and shapes["visual.lstm.W"] == (4805, 256),
        "decision 1024": shapes["head.hidden.W"] == (768, 1024) and shapes["head.out.W"] == (1024, 1),
        "branches 256": shapes["audio.dense.W"] == (1582, 256) and shapes["text.dense.W"] == (10, 256),
        "forward": predict_batch(model, bundles).shape == (2,),
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(10, not failed, f"{len(checks) - len(failed)}/{len(checks)} shape checks"
            + (f", failed: {failed}" if failed else ""))
