"""Command-line entry point: synth-data, pretrain, adapt, finetune, decode,
evaluate, params, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 data/config error.
Every training/decoding run writes its fully resolved config next to its
outputs so results are reproducible from the artifacts alone.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

from . import data_io, evaluation, pipeline
from .asr_head import CharNGramLM
from .config import Config
from .encoder import count_params
from .errors import AccentSslError, ConfigError, DataError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override; repeatable")
    p.add_argument("--seed", type=int, help="overrides stage.seed")


def _resolve(args) -> Config:
    cfg = Config.from_overrides(getattr(args, "config", None), args.set)
    if getattr(args, "seed", None) is not None:
        cfg.set_value("stage.seed", args.seed)
    return cfg


def _write_run_artifacts(out_dir: str, cfg: Config, metrics: list[dict]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps())
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    pipeline.write_metrics(metrics, metrics_path)
    return metrics_path


def cmd_synth_data(args) -> int:
    spec = data_io.AccentSpec(
        accent_id=args.accent_id, formant_factor=args.formant,
        rate_factor=args.rate, tilt=args.tilt,
        snr_db=math.inf if args.snr_db is None else args.snr_db,
        seed=args.seed,
    )
    if args.texts_file:
        with open(args.texts_file, "r", encoding="utf-8") as fh:
            texts = [line.strip() for line in fh if line.strip()]
    else:
        texts = data_io.random_texts(args.n_utts, seed=args.text_seed)
    manifest = data_io.synth_corpus(spec, texts, args.out, role=args.role,
                                    accent_tag=args.accent_tag)
    print(f"synth-data: {len(manifest.utterances)} utterances -> "
          f"{os.path.join(args.out, 'manifest.tsv')}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    manifest = data_io.load_manifest(args.manifest)
    best, final = pipeline.run_pretrain(cfg, manifest)
    os.makedirs(args.out, exist_ok=True)
    pipeline.save_checkpoint(best, os.path.join(args.out, "best.ckpt"))
    pipeline.save_checkpoint(final, os.path.join(args.out, "final.ckpt"))
    metrics_path = _write_run_artifacts(args.out, cfg, final.metrics)
    print(f"pretrain: best and final checkpoints in {args.out}; "
          f"metrics at {metrics_path}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _resolve(args)
    base = pipeline.load_checkpoint(args.base)
    manifest = data_io.load_manifest(args.manifest)
    ckpt = pipeline.run_adapt(cfg, base, manifest, args.mode)
    os.makedirs(args.out, exist_ok=True)
    pipeline.save_checkpoint(ckpt, os.path.join(args.out, "best.ckpt"))
    metrics_path = _write_run_artifacts(args.out, ckpt.cfg(), ckpt.metrics)
    print(f"adapt[{args.mode}]: checkpoint at "
          f"{os.path.join(args.out, 'best.ckpt')}; metrics at {metrics_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    base = pipeline.load_checkpoint(args.ckpt)
    manifest = data_io.load_manifest(args.manifest)
    ckpt = pipeline.run_finetune(cfg, base, manifest)
    os.makedirs(args.out, exist_ok=True)
    pipeline.save_checkpoint(ckpt, os.path.join(args.out, "final.ckpt"))
    metrics_path = _write_run_artifacts(args.out, ckpt.cfg(), ckpt.metrics)
    print(f"finetune: checkpoint at {os.path.join(args.out, 'final.ckpt')}; "
          f"metrics at {metrics_path}")
    return 0


def cmd_decode(args) -> int:
    cfg = _resolve(args)
    ckpt = pipeline.load_checkpoint(args.ckpt)
    manifest = data_io.load_manifest(args.manifest)
    lm = None
    if args.lm_texts:
        with open(args.lm_texts, "r", encoding="utf-8") as fh:
            texts = [data_io.normalize_transcript(t.strip()) for t in fh if t.strip()]
        lm = CharNGramLM.fit(texts, cfg["decode.lm_order"], cfg["decode.lm_k"])
    hyps = evaluation.decode_manifest(ckpt, manifest, cfg, lm)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "hypotheses.tsv")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        for utt in manifest.utterances:
            fh.write(f"{utt.id}\t{hyps[utt.id]}\n")
    _write_run_artifacts(args.out, cfg, [])
    print(f"decode: {len(hyps)} hypotheses -> {out_path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    baseline = pipeline.load_checkpoint(args.baseline)
    adapted = {}
    for item in args.adapted or []:
        if "=" not in item:
            raise ConfigError(f"--adapted expects name=ckpt, got {item!r}")
        name, path = item.split("=", 1)
        adapted[name] = pipeline.load_checkpoint(path)
    manifests = {}
    for item in args.eval or []:
        if "=" not in item:
            raise ConfigError(f"--eval expects name=manifest, got {item!r}")
        name, path = item.split("=", 1)
        manifests[name] = data_io.load_manifest(path)
    if not manifests:
        raise ConfigError("evaluate needs at least one --eval name=manifest")
    rows = evaluation.experiment_report(baseline, adapted, manifests, cfg)
    evaluation.write_report(rows, args.out)
    _write_run_artifacts(args.out, cfg, [])
    print(f"evaluate: {len(rows)} rows -> {os.path.join(args.out, 'report.tsv')}")
    return 0


def cmd_params(args) -> int:
    cfg = _resolve(args)
    if args.reference:
        cfg.apply_preset(args.reference)
        for item in args.set:  # overrides win over the preset
            key, raw = item.split("=", 1)
            cfg.set(key.strip(), raw.strip())
    report = count_params(cfg)
    print(f"{'group':<14}{'parameters':>14}")
    for group in ("theta_f", "theta_T", "theta_A", "theta_ada", "theta_d"):
        print(f"{group:<14}{report[group]:>14,}")
    print(f"{'base total':<14}{report['base_total']:>14,}")
    print(f"adapter share: {report['adapter_share_pct']:.1f}% of base "
          f"(B_ada={cfg['model.B_ada']})")
    return 0


def cmd_gradcheck(args) -> int:
    report = evaluation.gradcheck(args.component, seed=args.seed or 0, eps=args.eps)
    print(f"gradcheck[{report.component}]: max rel err {report.max_rel_err:.3e} "
          f"at {report.worst_param} over {report.n_params} parameters")
    return 0 if report.max_rel_err <= 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="accentssl",
        description="Accent-adaptive continual self-supervision, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic accented corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--accent-id", default="canonical")
    p.add_argument("--accent-tag")
    p.add_argument("--role", default="generic_unlabeled", choices=data_io.ROLES)
    p.add_argument("--formant", type=float, default=1.0)
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--tilt", type=float, default=0.0)
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texts-file")
    p.add_argument("--n-utts", type=int, default=100)
    p.add_argument("--text-seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="stage 1: generic SSL pretraining")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="stage 2: accent-adaptive SSL")
    _add_common(p)
    p.add_argument("--base", required=True, help="stage-1 checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", required=True, choices=("full", "adapters"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("finetune", help="stage 3: CTC decoder fine-tuning")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="transcribe a manifest")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lm-texts", help="training text for the fusion LM")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="WER/WERR report across checkpoints")
    _add_common(p)
    p.add_argument("--baseline", required=True)
    p.add_argument("--adapted", action="append", metavar="NAME=CKPT")
    p.add_argument("--eval", action="append", metavar="NAME=MANIFEST")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("params", help="exact parameter accounting")
    _add_common(p)
    p.add_argument("--reference", help="geometry preset, e.g. hubert-large")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_common(p)
    p.add_argument("--component", required=True,
                   choices=evaluation.GRADCHECK_COMPONENTS)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except AccentSslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
