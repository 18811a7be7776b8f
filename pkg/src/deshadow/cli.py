"""Command-line interface.

One subcommand per workflow step: synthesize data, train the three model
parts, run inference, and produce evaluation/variance/cross-dataset/study
reports.  Every report directory pairs CSV/JSON output with rendered PNG
figures, plus a ``run_manifest.json`` recording the command line, config
hash, seeds, and wall time.

Exit codes: 0 on success, 1 for command-line usage errors, 2 for runtime
failures (missing files, incompatible checkpoints, empty datasets).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .codec import CodecConfig, encode
from .data import load_image, load_pair_dataset, save_image, write_synthetic_dataset
from .denoiser import DenoiserConfig
from .detail_injection import decode_with_injection, pca_visualize, semantic_features
from .metrics import cross_dataset_eval, evaluate, seed_variance
from .parameterization_study import StudyConfig, run_parameterization_study
from .pipeline import (
    ShadowRemover,
    parse_train_config,
    train_codec,
    train_stage_one,
    train_stage_two,
)
from .report import image_grid_figure, write_run_manifest

__all__ = ["main", "build_parser"]


def _kv_pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, _, value = text.partition("=")
    return key.strip(), value.strip()


def _add_train_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    sub.add_argument("--dataset", type=Path, default=None, help="paired dataset root")
    sub.add_argument("--out", type=Path, required=True, help="output directory")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument(
        "--set",
        dest="overrides",
        type=_kv_pair,
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )


def _add_ckpt_args(sub: argparse.ArgumentParser, *, di: bool = True) -> None:
    sub.add_argument("--ckpt-codec", type=Path, required=True)
    sub.add_argument("--ckpt-denoiser", type=Path, required=True)
    if di:
        sub.add_argument("--ckpt-di", type=Path, default=None, help="detail-injection checkpoint")


def _add_sampler_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--steps", type=int, default=10, help="sampling steps")
    sub.add_argument("--eta", type=float, default=0.0, help="stochasticity in [0, 1]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deshadow", description="Two-stage diffusion shadow removal."
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="write a synthetic paired dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=16, help="training pairs")
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--test-count", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = subs.add_parser("train-codec", help="train the image codec")
    _add_train_args(p)
    p.add_argument("--codec-downscale", type=int, default=8)
    p.add_argument("--latent-channels", type=int, default=4)
    p.add_argument("--codec-width", type=int, default=32)

    p = subs.add_parser("train-stage1", help="train the conditioned latent denoiser")
    _add_train_args(p)
    p.add_argument("--ckpt-codec", type=Path, required=True)
    p.add_argument(
        "--parameterization", choices=("z0_pred", "eps_pred"), default="z0_pred"
    )
    p.add_argument("--widths", type=int, nargs="+", default=None, help="denoiser stage widths")

    p = subs.add_parser("train-stage2", help="train detail injection")
    _add_train_args(p)
    p.add_argument("--ckpt-codec", type=Path, required=True)
    p.add_argument("--ckpt-denoiser", type=Path, required=True)
    p.add_argument("--no-semantic", action="store_true", help="disable semantic guidance")
    p.add_argument(
        "--unfreeze-decoder", action="store_true", help="fine-tune the decoder as well"
    )

    p = subs.add_parser("infer", help="remove the shadow from one image")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output PNG path")
    _add_ckpt_args(p)
    _add_sampler_args(p)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--hi-res-k", type=int, default=1)
    p.add_argument("--no-stage-two", action="store_true")

    p = subs.add_parser("eval", help="PSNR/SSIM report over a dataset split")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True)
    _add_ckpt_args(p)
    _add_sampler_args(p)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--hi-res-k", type=int, default=1)
    p.add_argument("--no-stage-two", action="store_true")
    p.add_argument("--eval-size", type=int, default=256)

    p = subs.add_parser("variance", help="per-image PSNR variance across seeds")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True)
    _add_ckpt_args(p)
    _add_sampler_args(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--eval-size", type=int, default=256)

    p = subs.add_parser("cross-eval", help="evaluate on a foreign dataset")
    p.add_argument("--dataset", type=Path, required=True, help="test dataset root")
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True)
    _add_ckpt_args(p)
    _add_sampler_args(p)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--eval-size", type=int, default=256)

    p = subs.add_parser("study", help="clean-vs-noise prediction stability study")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trial-seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--sample-steps", type=int, default=10)
    p.add_argument("--train-iters", type=int, default=300)

    p = subs.add_parser("visualize", help="stage outputs and feature maps for one image")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_ckpt_args(p)
    _add_sampler_args(p)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--branch", type=int, default=1, help="injection branch to render")

    return parser


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def _train_config(args, stage: str):
    overrides = dict(args.overrides)
    overrides["stage"] = stage
    if args.dataset is not None:
        overrides["dataset_root"] = str(args.dataset)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return parse_train_config(args.config, overrides)


def _load_remover(args) -> ShadowRemover:
    return ShadowRemover.from_checkpoints(
        args.ckpt_codec,
        args.ckpt_denoiser,
        getattr(args, "ckpt_di", None),
        steps=args.steps,
        eta=args.eta,
    )


def _cmd_gen_data(args) -> tuple[Path, dict, list[int]]:
    write_synthetic_dataset(
        args.out, count=args.count, size=args.size, seed=args.seed, test_count=args.test_count
    )
    return args.out, {"count": args.count, "size": args.size}, [args.seed]


def _cmd_train_codec(args) -> tuple[Path, dict, list[int]]:
    cfg = _train_config(args, "codec")
    codec_config = CodecConfig(
        spatial_downscale=args.codec_downscale,
        latent_channels=args.latent_channels,
        base_width=args.codec_width,
    )
    ckpt = train_codec(cfg, args.out, codec_config)
    return args.out, {"checkpoint": str(ckpt), "config_used": cfg.to_dict()}, [cfg.seed]


def _cmd_train_stage1(args) -> tuple[Path, dict, list[int]]:
    cfg = _train_config(args, "one")
    dcfg = None
    if args.widths is not None or args.parameterization != "z0_pred":
        codec_meta = json.loads(args.ckpt_codec.with_suffix(".json").read_text())
        kwargs = {
            "latent_channels": codec_meta["config"]["latent_channels"],
            "parameterization": args.parameterization,
        }
        if args.widths is not None:
            kwargs["widths"] = tuple(args.widths)
        dcfg = DenoiserConfig(**kwargs)
    ckpt = train_stage_one(cfg, args.ckpt_codec, args.out, dcfg)
    return args.out, {"checkpoint": str(ckpt), "config_used": cfg.to_dict()}, [cfg.seed]


def _cmd_train_stage2(args) -> tuple[Path, dict, list[int]]:
    overrides = dict(args.overrides)
    if args.no_semantic:
        overrides["use_semantic"] = "false"
    if args.unfreeze_decoder:
        overrides["freeze_decoder"] = "false"
    args.overrides = list(overrides.items())
    cfg = _train_config(args, "two")
    ckpt = train_stage_two(cfg, args.ckpt_codec, args.ckpt_denoiser, args.out)
    return args.out, {"checkpoint": str(ckpt), "config_used": cfg.to_dict()}, [cfg.seed]


def _cmd_infer(args) -> tuple[Path, dict, list[int]]:
    remover = _load_remover(args)
    image = load_image(args.input)
    out, info = remover.remove(
        image,
        seed=args.seed,
        hi_res_k=args.hi_res_k,
        use_stage_two=not args.no_stage_two,
        return_info=True,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_image(args.out, out)
    return args.out.parent, {"output": str(args.out), **info}, [args.seed]


def _cmd_eval(args) -> tuple[Path, dict, list[int]]:
    remover = _load_remover(args)
    dataset = load_pair_dataset(args.dataset, args.split)

    def model_fn(image: np.ndarray) -> np.ndarray:
        return remover.remove(
            image,
            seed=args.seed,
            hi_res_k=args.hi_res_k,
            use_stage_two=not args.no_stage_two,
        )

    record = evaluate(
        model_fn,
        dataset,
        seed=args.seed,
        eval_size=args.eval_size,
        out_dir=args.out,
    )
    summary = record.summary()
    print(
        f"{record.label}: mean PSNR {summary['mean_psnr']:.4f} dB, "
        f"mean SSIM {summary['mean_ssim']:.4f} over {record.count} images"
    )
    return args.out, {"summary": summary}, [args.seed]


def _cmd_variance(args) -> tuple[Path, dict, list[int]]:
    remover = _load_remover(args)
    dataset = load_pair_dataset(args.dataset, args.split)

    def model_fn(image: np.ndarray, seed: int) -> np.ndarray:
        return remover.remove(image, seed=seed)

    report = seed_variance(
        model_fn, dataset, args.seeds, eval_size=args.eval_size, out_dir=args.out
    )
    print(
        f"seeds {args.seeds}: mean PSNR {report.mean_psnr:.4f} dB, "
        f"mean variance {report.mean_variance:.6f}"
    )
    return args.out, {"mean_variance": report.mean_variance}, list(args.seeds)


def _cmd_cross_eval(args) -> tuple[Path, dict, list[int]]:
    remover = _load_remover(args)
    record = cross_dataset_eval(
        remover,
        args.dataset,
        split=args.split,
        seed=args.seed,
        eval_size=args.eval_size,
        out_dir=args.out,
    )
    summary = record.summary()
    print(f"{record.label}: mean PSNR {summary['mean_psnr']:.4f} dB")
    return args.out, {"summary": summary}, [args.seed]


def _cmd_study(args) -> tuple[Path, dict, list[int]]:
    cfg = StudyConfig(
        trial_seeds=tuple(args.trial_seeds),
        sample_steps=args.sample_steps,
        train_iters=args.train_iters,
    )
    result = run_parameterization_study(cfg, out_dir=args.out)
    wins = result.wins
    print(f"clean-prediction wins {wins['z0_pred']}/{len(result.trials)} trials")
    return args.out, {"wins": wins}, list(args.trial_seeds)


def _cmd_visualize(args) -> tuple[Path, dict, list[int]]:
    remover = _load_remover(args)
    image = load_image(args.input)
    final = remover.remove(image, seed=args.seed)
    stage_one = remover.remove(image, seed=args.seed, use_stage_two=False)
    panels = {"input": image, "latent stage": stage_one, "with detail injection": final}

    if remover.injector is not None:
        z_x, taps = encode(remover.codec, image)
        from .pipeline import _sample_clean_latent  # shared with inference

        z0 = _sample_clean_latent(
            remover.denoiser, remover.schedule, remover.plan, z_x, args.seed
        )
        sem = (
            semantic_features(image, remover.embedder)
            if remover.embedder is not None
            else None
        )
        _, features = decode_with_injection(remover.codec, remover.injector, z0, taps, sem)
        if args.branch not in features:
            raise ValueError(
                f"branch {args.branch} not available; have {sorted(features)}"
            )
        panels[f"branch {args.branch} features (PCA)"] = pca_visualize(
            features[args.branch]
        )
    image_grid_figure(args.out / "visualize.png", panels, title=args.input.name)
    return args.out, {"panels": list(panels)}, [args.seed]


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-codec": _cmd_train_codec,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "variance": _cmd_variance,
    "cross-eval": _cmd_cross_eval,
    "study": _cmd_study,
    "visualize": _cmd_visualize,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help; report usage as 1.
        return 0 if exc.code == 0 else 1
    started = time.time()
    try:
        out_dir, extra, seeds = _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single CLI failure boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_run_manifest(
        out_dir,
        command=" ".join(["deshadow"] + argv),
        config_hash=_config_hash({k: v for k, v in vars(args).items() if k != "command"}),
        seeds=seeds,
        started_at=started,
        extra=extra,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
