"""Command-line entry point.

    affectfusion synth --out DIR [--seed 7]
    affectfusion train --manifest M --fusion early --target arousal --out DIR
    affectfusion evaluate --checkpoint DIR/checkpoint.json --manifest M --split val
    affectfusion featurize-text --manifest M --out DIR
    affectfusion gradcheck [--seed 7]

Exit codes: 0 success, 2 configuration, 3 I/O or data, 4 numerical.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import data as D
from . import features as F
from . import models as M
from . import training as T
from .errors import (AffectError, ConfigError, DataError, DegenerateInputError,
                     InsufficientDataError, NumericalError, ShapeError)
from .models import ModelSpec
from .nncore import make_rng

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

FUSION_KIND = {
    "unimodal-visual": "visual",
    "unimodal-audio": "audio",
    "unimodal-audio-lstm": "audio-lstm",
    "unimodal-text": "text",
    "early": "trimodal-early",
}
LATE_MEMBERS = ("visual", "audio", "text")
GRADCHECK_TOL = 1e-4


def _int_pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two integers 'Dv,Da', got {text!r}") from None
    if a <= 0 or b <= 0:
        raise argparse.ArgumentTypeError("dims must be positive")
    return a, b


def _int_triple(text: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 3 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return vals  # type: ignore[return-value]


def _add_lexicon_flags(p: argparse.ArgumentParser) -> None:
    defaults = F.bundled_lexicon_paths()
    for key in ("pos1", "neg1", "pos2", "neg2"):
        p.add_argument(f"--lexicon-{key}", type=Path, default=defaults[key],
                       help=f"word list (default: bundled {defaults[key].name})")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--dims", type=_int_pair, default=None,
                   help="visual and audio widths 'Dv,Da' (default: read from the first record)")
    p.add_argument("--frames", type=int, default=F.DEFAULT_FRAMES,
                   help="frames sampled per utterance (default 20)")
    _add_lexicon_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affectfusion", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset with known latent labels")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--dims", type=_int_pair, default=(16, 12))
    s.add_argument("--counts", type=_int_triple, default=(400, 100, 100),
                   help="utterances per split 'train,val,test'")
    s.add_argument("--noise", type=float, default=None,
                   help="one noise level for all three modalities (default 0.6 each)")
    _add_lexicon_flags(s)

    t = sub.add_parser("train", help="train a unimodal, early-fusion or late-fusion model")
    _add_data_flags(t)
    t.add_argument("--fusion", choices=sorted(FUSION_KIND) + ["late"], required=True)
    t.add_argument("--target", choices=("arousal", "valence"), required=True)
    t.add_argument("--lr", type=float, default=None,
                   help="default 1e-2 for arousal, 1e-3 for valence")
    t.add_argument("--fine-tune-lr", type=float, default=None, help="default: --lr")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--patience", type=int, default=20, help="0 disables early stopping")
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--seed", type=int, default=7)
    t.add_argument("--hidden", type=_int_triple, default=(64, 256, 1024),
                   help="LSTM, modality dense and decision widths")
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--late-fit-split", choices=("train", "val"), default="train")
    t.add_argument("--no-standardize", action="store_true",
                   help="feed raw features instead of train-split standardized ones")
    t.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")
    t.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("evaluate", help="report CCC / MSE / Pearson for a trained model")
    _add_data_flags(e)
    e.add_argument("--checkpoint", type=Path, required=True,
                   help="checkpoint or late-fusion combiner file, or a train output directory")
    e.add_argument("--split", choices=D.SPLITS, default="val")
    e.add_argument("--per-video", action="store_true", help="average CCC over videos")

    f = sub.add_parser("featurize-text", help="write the 10-dim lexicon features per utterance")
    f.add_argument("--manifest", type=Path, required=True)
    f.add_argument("--split", choices=D.SPLITS, default=None)
    f.add_argument("--out", type=Path, required=True)
    _add_lexicon_flags(f)

    g = sub.add_parser("gradcheck", help="finite-difference check of every model kind")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    g.add_argument("--kinds", default=",".join(M.KINDS))
    g.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    return parser


# ---------------------------------------------------------------- helpers

def _lexicons(args) -> tuple[F.Lexicon, F.Lexicon]:
    for key in ("pos1", "neg1", "pos2", "neg2"):
        path = getattr(args, f"lexicon_{key}")
        if not Path(path).is_file():
            raise FileNotFoundError(f"lexicon file not found: {path}")
    return (F.Lexicon.from_files("lexicon1", args.lexicon_pos1, args.lexicon_neg1),
            F.Lexicon.from_files("lexicon2", args.lexicon_pos2, args.lexicon_neg2))


def _loader(args, manifest: D.Manifest, seq_len: Optional[int] = None) -> D.FeatureLoader:
    if not manifest.records:
        raise DataError(f"{manifest.path}: manifest has no records")
    dims = args.dims or D.infer_dims(manifest.records[0])
    n = seq_len or args.frames
    return D.FeatureLoader(manifest, _lexicons(args), dims[0], dims[1], n, n)


def _split(loader: D.FeatureLoader, name: str, spec: ModelSpec) -> T.Split:
    bundles, labels, records = loader.load_split(name, spec.modalities, spec.target)
    if not bundles:
        raise InsufficientDataError(f"split {name!r} is empty")
    return T.Split(bundles, labels, [r.video_id for r in records])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _print_report(report, header: str) -> None:
    pearson = "undefined" if report.pearson is None else f"{report.pearson:.6f}"
    print(header)
    print(f"  {'metric':<8} {'value':>12}")
    print(f"  {'CCC':<8} {report.ccc:>12.6f}")
    print(f"  {'MSE':<8} {report.mse:>12.6f}")
    print(f"  {'Pearson':<8} {pearson:>12}")
    print(f"  {'n':<8} {report.n:>12d}")
    print(report.as_line())


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    noise = {} if args.noise is None else {
        "noise_visual": args.noise, "noise_audio": args.noise, "noise_text": args.noise}
    cfg = D.SynthConfig(
        n_train=args.counts[0], n_val=args.counts[1], n_test=args.counts[2],
        visual_dim=args.dims[0], audio_dim=args.dims[1], seed=args.seed,
        lexicon_paths={k: str(getattr(args, f"lexicon_{k}")) for k in ("pos1", "neg1", "pos2", "neg2")},
        **noise,
    )
    path = D.generate_synthetic(cfg, args.out)
    counts = D.load_manifest(path).counts
    print(f"wrote {path}")
    print(f"utterances train={counts['train']} val={counts['val']} test={counts['test']} "
          f"dims Dv={cfg.visual_dim} Da={cfg.audio_dim} Dt={F.TEXT_DIM} seed={cfg.seed}")
    return EXIT_OK


def _train_config(args) -> T.TrainConfig:
    return T.TrainConfig(
        target=args.target, max_epochs=args.epochs,
        patience=args.patience if args.patience > 0 else None,
        batch_size=args.batch, lr=args.lr, fine_tune_lr=args.fine_tune_lr,
        seed=args.seed, verbose=not args.quiet)


def _spec(args, kind: str, dims: tuple[int, int]) -> ModelSpec:
    lstm, branch, decision = args.hidden
    return ModelSpec(kind, args.target, visual_dim=dims[0], audio_dim=dims[1],
                     seq_len=args.frames, lstm_hidden=lstm, branch_hidden=branch,
                     decision_hidden=decision, dropout=args.dropout)


def _train_one(args, loader, kind: str, cfg: T.TrainConfig, out: Path, stem: str):
    spec = _spec(args, kind, (loader.visual_dim, loader.audio_dim))
    train, val = _split(loader, "train", spec), _split(loader, "val", spec)
    if not args.quiet:
        print(f"# {kind} {args.target}: epoch\ttrain_loss\tval_loss\tval_ccc")
    _, model, (h1, h2) = T.train_model(spec, train, val, cfg, standardize=not args.no_standardize)
    ckpt = out / f"{stem}.json"
    D.save_checkpoint(model, ckpt, config=cfg)
    _write_json(out / f"{stem}.history.json", {"phase1": h1.to_dict(), "phase2": h2.to_dict()})
    return model, ckpt, val


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = D.load_manifest(args.manifest)
    loader = _loader(args, manifest)

    if args.fusion == "late":
        members, paths = [], []
        for kind in LATE_MEMBERS:
            model, ckpt, val = _train_one(args, loader, kind, cfg, out, f"{kind}.checkpoint")
            members.append(model)
            paths.append(ckpt.name)
        fit_spec = _spec(args, "trimodal-early", (loader.visual_dim, loader.audio_dim))
        fit_data = _split(loader, args.late_fit_split, fit_spec)
        val = _split(loader, "val", fit_spec)
        combiner = T.fit_late_fusion(members, fit_data, args.target)
        D.save_combiner(combiner, paths, out / "combiner.json")
        predictor = M.LateFusionEnsemble(members, combiner)
    else:
        predictor, _, val = _train_one(args, loader, FUSION_KIND[args.fusion], cfg, out,
                                       "checkpoint")

    report = T.evaluate_model(predictor, val)
    _write_json(out / "report.json", {"split": "val", "fusion": args.fusion,
                                      "target": args.target, **report.to_dict()})
    _print_report(report, f"validation ({args.fusion}, {args.target})")
    return EXIT_OK


def _load_predictor(path: Path):
    if path.is_dir():
        path = path / ("combiner.json" if (path / "combiner.json").exists() else "checkpoint.json")
    if D.is_combiner_file(path):
        combiner, members = D.load_combiner(path)
        models = [D.load_checkpoint(path.parent / m) for m in members]
        return M.LateFusionEnsemble(models, combiner), models[0].spec, "trimodal-early"
    model = D.load_checkpoint(path)
    return model, model.spec, model.spec.kind


def cmd_evaluate(args) -> int:
    predictor, spec, kind = _load_predictor(args.checkpoint)
    manifest = D.load_manifest(args.manifest)
    n = len(manifest.split(args.split))
    if n < 2:
        raise InsufficientDataError(f"split {args.split!r} has {n} utterance(s); n >= 2 required")
    loader = _loader(args, manifest, spec.seq_len)
    data_spec = ModelSpec(kind, spec.target, visual_dim=loader.visual_dim,
                          audio_dim=loader.audio_dim, seq_len=spec.seq_len)
    report = T.evaluate_model(predictor, _split(loader, args.split, data_spec), args.per_video)
    _print_report(report, f"{args.split} ({spec.target})")
    return EXIT_OK


def cmd_featurize_text(args) -> int:
    manifest = D.load_manifest(args.manifest)
    loader = D.FeatureLoader(manifest, _lexicons(args))
    records = manifest.records if args.split is None else manifest.split(args.split)
    args.out.mkdir(parents=True, exist_ok=True)
    for r in records:
        D.write_matrix(args.out / f"{r.utterance_id}.text.csv", loader.text(r))
    print(f"wrote {len(records)} text feature files to {args.out}")
    return EXIT_OK


def gradcheck_spec(kind: str, target: str) -> ModelSpec:
    """Synthetic input widths with small hidden layers, so every entry can be perturbed."""
    return ModelSpec(kind, target, visual_dim=16, audio_dim=12, seq_len=5,
                     lstm_hidden=4, branch_hidden=6, decision_hidden=8)


def run_gradcheck(seed: int = 7, eps: float = 1e-5, kinds: Sequence[str] = M.KINDS,
                  flip_sign: bool = False, batch: int = 6) -> dict[tuple[str, str, str], float]:
    rng = make_rng(seed)
    results = {}
    for kind in kinds:
        for target in ("arousal", "valence"):
            spec = gradcheck_spec(kind, target)
            model = M.build_model(spec, rng)
            M.jitter_biases(model, rng)
            bundles = [M.FeatureBundle(visual=rng.normal(size=(spec.seq_len, spec.visual_dim)),
                                       audio=rng.normal(size=spec.audio_dim),
                                       audio_frames=rng.normal(size=(spec.seq_len, spec.audio_dim)),
                                       text=rng.normal(size=spec.text_dim))
                       for _ in range(batch)]
            inputs = M.stack_inputs(spec, bundles)
            lo, hi = M.TARGET_RANGE[target]
            labels = rng.uniform(lo, hi, batch)
            for loss in ("mse", "one_minus_ccc"):
                err, _ = M.gradient_check(model, inputs, labels, loss, eps,
                                          rng=make_rng(seed + 1), flip_sign=flip_sign)
                results[(kind, target, loss)] = err
    return results


def cmd_gradcheck(args) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    for k in kinds:
        if k not in M.KINDS:
            raise ConfigError(f"unknown model kind {k!r}; expected one of {M.KINDS}")
    results = run_gradcheck(args.seed, args.eps, kinds, args.inject_sign_flip)
    worst_by_kind: dict[str, float] = {}
    for (kind, target, loss), err in results.items():
        print(f"{kind}\t{target}\t{loss}\t{err:.3e}")
        worst_by_kind[kind] = max(worst_by_kind.get(kind, 0.0), err)
    failed = False
    for kind in kinds:
        ok = worst_by_kind[kind] < args.tol
        failed |= not ok
        print(f"{kind}: max relative error {worst_by_kind[kind]:.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "featurize-text": cmd_featurize_text,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, InsufficientDataError, ShapeError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AffectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
