"""Command-line surface: dataset synthesis, two-stage training, separation,
oracle baselines and evaluation reports.

Exit codes: 0 success, 1 numerical failure, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint as ckptlib
from .config import load_config
from .datasets import load_entry_audio, load_manifest, synth_dataset
from .dsp import read_wav, write_wav
from .errors import InvalidInput, NumericalError, Unsupported
from .evaluation import evaluate_set, oracle_eval
from .masks import MASK_KINDS
from .prestage import PreStageConfig, PreStageModel, prestage_separate
from .postfilter import E2epfConfig, PostFilterModel, e2epf_forward
from .reporting import write_report
from .training import train_e2epf, train_prestage


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (see README for the key reference)")
    p.add_argument("--profile", default="toy", choices=("toy", "full"),
                   help="config profile used for defaults")
    p.add_argument("--sources", type=int, default=None, help="number of sources S")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")


def _config_from_args(args) -> "RunConfig":
    overrides = list(args.overrides)
    if args.sources is not None:
        overrides.insert(0, f"data.source_count={args.sources}")
    if args.seed is not None:
        overrides.insert(0, f"run.seed={args.seed}")
        overrides.insert(0, f"data.seed={args.seed}")
    return load_config(args.config, profile=args.profile, overrides=overrides)


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out or cfg.paths.data_dir)
    counts = {"train": cfg.data.train, "val": cfg.data.val, "test": cfg.data.test}
    manifests = synth_dataset(out_dir, counts, cfg.data.mix_spec(),
                              kinds=cfg.data.source_kinds(), base_seed=cfg.data.seed,
                              sample_rate=cfg.data.sample_rate)
    for split, path in manifests.items():
        print(f"{split}: {counts[split]} mixtures, manifest {path}")
    return 0


def cmd_train_pre(args) -> int:
    cfg = _config_from_args(args)
    data_dir = Path(args.data or cfg.paths.data_dir)
    ckpt_path = Path(args.ckpt or Path(cfg.paths.checkpoint_dir) / "prestage.ckpt")
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = ckpt_path.with_suffix(".log.jsonl")
    _, log = train_prestage(cfg.train_pre, data_dir / "train.jsonl", data_dir / "val.jsonl",
                            data_dir, cfg.prestage, cfg.loss, ckpt_path, log_path,
                            cfg.frame_len, cfg.hop)
    for entry in log:
        print(entry.to_json())
    print(f"checkpoint written to {ckpt_path}")
    return 0


def cmd_train_post(args) -> int:
    cfg = _config_from_args(args)
    data_dir = Path(args.data or cfg.paths.data_dir)
    pre_path = Path(args.pre or Path(cfg.paths.checkpoint_dir) / "prestage.ckpt")
    if not pre_path.exists():
        raise InvalidInput(f"pre-stage checkpoint {pre_path} does not exist; run train-pre first")
    ckpt_path = Path(args.ckpt or Path(cfg.paths.checkpoint_dir) / "postfilter.ckpt")
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    if args.no_attention:
        cfg.e2epf.use_attention = False
    log_path = ckpt_path.with_suffix(".log.jsonl")
    _, log = train_e2epf(cfg.train_post, data_dir / "train.jsonl", data_dir / "val.jsonl",
                         data_dir, pre_path, cfg.e2epf, ckpt_path, log_path,
                         cfg.frame_len, cfg.hop)
    for entry in log:
        print(entry.to_json())
    print(f"checkpoint written to {ckpt_path}")
    return 0


def _load_models(pre_path, post_path):
    pre = ckptlib.load_checkpoint(pre_path)
    if pre.kind != "prestage":
        raise InvalidInput(f"{pre_path} is not a pre-stage checkpoint")
    pre_model = PreStageModel(PreStageConfig(**pre.config))
    ckptlib.load_into_module(pre_model, pre.params)
    pre_model.eval()
    post_model = None
    if post_path is not None:
        post = ckptlib.load_checkpoint(post_path)
        if post.kind != "postfilter":
            raise InvalidInput(f"{post_path} is not a post-filter checkpoint")
        ckptlib.check_prestage_fingerprint(post.metadata, pre.fingerprint)
        post_model = PostFilterModel(E2epfConfig(**post.config))
        ckptlib.load_into_module(post_model, post.params)
        post_model.eval()
    return pre, pre_model, post_model


def _separate_one(mixture, pre, pre_model, post_model, frame_len, hop, pre_only):
    estimates = prestage_separate(mixture, pre_model, pre.stats, frame_len, hop)
    if not pre_only:
        estimates = e2epf_forward(mixture, estimates, post_model)
    return estimates


def cmd_separate(args) -> int:
    cfg = _config_from_args(args)
    if bool(args.mixture) == bool(args.manifest):
        raise InvalidInput("pass exactly one of a mixture WAV path or --manifest")
    pre_path = Path(args.pre or Path(cfg.paths.checkpoint_dir) / "prestage.ckpt")
    post_path = None
    if not args.pre_only:
        post_path = Path(args.post or Path(cfg.paths.checkpoint_dir) / "postfilter.ckpt")
        if not post_path.exists():
            raise InvalidInput(f"post-filter checkpoint {post_path} does not exist "
                               "(use --pre-only for pre-stage output)")
    pre, pre_model, post_model = _load_models(pre_path, post_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    if args.mixture:
        jobs.append((Path(args.mixture).stem, read_wav(args.mixture)))
    else:
        entries = load_manifest(args.manifest)
        root = Path(args.manifest).parent
        for entry in entries:
            utt_id = Path(entry.mixture_path).parent.name or Path(entry.mixture_path).stem
            jobs.append((utt_id, read_wav(root / entry.mixture_path)))

    for utt_id, mixture in jobs:
        if mixture.sample_rate != cfg.data.sample_rate:
            raise InvalidInput(
                f"{utt_id}: sample rate {mixture.sample_rate} != configured {cfg.data.sample_rate}")
        estimates = _separate_one(mixture, pre, pre_model, post_model,
                                  cfg.frame_len, cfg.hop, args.pre_only)
        dest = out_dir / utt_id if len(jobs) > 1 else out_dir
        dest.mkdir(parents=True, exist_ok=True)
        for i, est in enumerate(estimates, start=1):
            write_wav(dest / f"est_{i}.wav", est)
        print(f"{utt_id}: wrote {len(estimates)} estimates to {dest}")
    return 0


def cmd_evaluate(args) -> int:
    entries = load_manifest(args.manifest)
    if not entries:
        raise InvalidInput(f"manifest {args.manifest} is empty")
    root = Path(args.manifest).parent
    est_root = Path(args.estimates)
    errors = []
    loaded = []
    for entry in entries:
        utt_id = Path(entry.mixture_path).parent.name or Path(entry.mixture_path).stem
        est_dir = est_root / utt_id if (est_root / utt_id).is_dir() else est_root
        paths = [est_dir / f"est_{i}.wav" for i in range(1, len(entry.source_paths) + 1)]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            errors.append({"id": utt_id, "error": f"missing estimates: {missing}"})
            continue
        mixture, sources = load_entry_audio(entry, root)
        ests = [read_wav(p) for p in paths]
        loaded.append((utt_id, ests, sources, mixture))

    modes = ("default", "optimal") if args.mode == "both" else (args.mode,)
    reports = {}
    for mode in modes:
        rep = evaluate_set(loaded, mode=mode, filter_len=args.filter_len,
                           compute_bss=not args.no_bss)
        rep.errors = errors
        reports[mode] = rep
    json_path = write_report(reports, args.out, name=args.name)
    for mode, rep in reports.items():
        print(f"{mode}: {rep.summary}")
    print(f"report written to {json_path}")
    return 0


def cmd_oracle(args) -> int:
    entries = load_manifest(args.manifest)
    if not entries:
        raise InvalidInput(f"manifest {args.manifest} is empty")
    root = Path(args.manifest).parent
    rep = oracle_eval(entries, root, args.mask, filter_len=args.filter_len,
                      compute_bss=not args.no_bss)
    json_path = write_report({"default": rep}, args.out, name=f"oracle_{args.mask}")
    print(f"oracle {args.mask}: {rep.summary}")
    print(f"report written to {json_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seppipe",
                                     description="Two-stage monaural source separation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a mixture dataset with manifests")
    _add_config_args(p)
    p.add_argument("--out", help="dataset root (default: paths.data_dir)")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-pre", help="train the time-frequency pre-separation stage")
    _add_config_args(p)
    p.add_argument("--data", help="dataset root containing train.jsonl / val.jsonl")
    p.add_argument("--ckpt", help="output checkpoint path")
    p.set_defaults(fn=cmd_train_pre)

    p = sub.add_parser("train-post", help="train the waveform post-filter")
    _add_config_args(p)
    p.add_argument("--data", help="dataset root containing train.jsonl / val.jsonl")
    p.add_argument("--pre", help="pre-stage checkpoint path")
    p.add_argument("--ckpt", help="output checkpoint path")
    p.add_argument("--no-attention", action="store_true",
                   help="ablation: drop the attention fusion branch")
    p.set_defaults(fn=cmd_train_post)

    p = sub.add_parser("separate", help="separate one mixture WAV or a whole manifest")
    _add_config_args(p)
    p.add_argument("mixture", nargs="?", help="input mixture WAV")
    p.add_argument("--manifest", help="batch mode: separate every mixture in a manifest")
    p.add_argument("--pre", help="pre-stage checkpoint path")
    p.add_argument("--post", help="post-filter checkpoint path")
    p.add_argument("--pre-only", action="store_true", help="emit pre-stage outputs only")
    p.add_argument("--out", required=True, help="output directory for est_<s>.wav files")
    p.set_defaults(fn=cmd_separate)

    p = sub.add_parser("evaluate", help="score estimates against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--estimates", required=True, help="directory with est_<s>.wav files")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--mode", default="both", choices=("default", "optimal", "both"))
    p.add_argument("--filter-len", type=int, default=512,
                   help="projection filter taps for the SDR/SIR/SAR decomposition")
    p.add_argument("--no-bss", action="store_true", help="skip SDR/SIR/SAR (SI-SNR only)")
    p.add_argument("--name", default="report", help="basename for report files")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("oracle", help="score an ideal-mask baseline on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mask", default="irm", choices=MASK_KINDS)
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--filter-len", type=int, default=512)
    p.add_argument("--no-bss", action="store_true", help="skip SDR/SIR/SAR (SI-SNR only)")
    p.set_defaults(fn=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidInput, Unsupported, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
