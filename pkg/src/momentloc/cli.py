"""Operator surface: gen, train, eval, query, verify.

Configuration comes from an optional JSON file (--config) with per-command
sections; explicit flags override file values, which override built-in
defaults. Exit codes: 0 success, 1 internal failure, 2 usage/config error,
3 I/O or file-format error. Progress output is line-oriented key=value.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import numcore as nc
from .errors import ConfigError, ContractError, FormatError, MomentlocError
from .geometry import get_profile, profile_from_config
from .model import encode_sentence
from .retrieval import (
    EvalSettings,
    build_index,
    evaluate,
    evaluate_prior,
    query_top_k,
)
from .synthdata import SyntheticSpec, generate_corpus, read_features, tag_split, write_features
from .training import Hyperparams, fit, load_checkpoint, save_checkpoint
from .validation import as_sentence_matrix, check_corpus
from .verify import run_all

log = logging.getLogger(__name__)

HYPER_FIELDS = {f.name for f in dataclasses.fields(Hyperparams)}


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _pick(flag_value, config: dict, key: str, default):
    """Flag beats config file beats default (flags use None as 'unset')."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _resolve_profile(args, config, corpus=None):
    name_or_cfg = _pick(getattr(args, "profile", None), config, "profile", None)
    if isinstance(name_or_cfg, dict):
        return profile_from_config(name_or_cfg)
    if isinstance(name_or_cfg, str):
        return get_profile(name_or_cfg)
    if corpus is not None and isinstance(corpus.meta.get("profile"), str):
        return get_profile(corpus.meta["profile"])
    return get_profile("didemo")


def _select_split(corpus, requested: str | None, default_tag: str):
    tagged = any(v.split for v in corpus.videos)
    choice = requested or (default_tag if tagged else "all")
    if choice == "all":
        return corpus
    subset = corpus.subset(choice)
    if not subset.videos:
        raise ConfigError(f"no videos tagged {choice!r} in the feature file")
    return subset


def _hyper_from(args, config) -> Hyperparams:
    values = {}
    file_hyper = config.get("hyper", {})
    if not isinstance(file_hyper, dict):
        raise ConfigError("config key 'hyper' must be an object")
    for key, val in file_hyper.items():
        if key not in HYPER_FIELDS:
            raise ConfigError(f"unknown hyperparameter {key!r} in config")
        values[key] = val
    for key in ("variant", "loss_mode", "pooling", "epochs", "batch_size", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "lr", None) is not None:
        values["learning_rate"] = args.lr
    try:
        return Hyperparams(**values)
    except TypeError as exc:
        raise ConfigError(f"bad hyperparameters: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    config = _load_config(args.config)
    spec_source = _pick(args.spec, config, "spec", "default")
    if isinstance(spec_source, str) and spec_source != "default":
        with open(spec_source, "r", encoding="utf-8") as fh:
            try:
                spec_source = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"spec file {args.spec} is not valid JSON: {exc}") from exc
    fields = {} if spec_source == "default" else dict(spec_source)
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        spec = SyntheticSpec(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from exc
    profile = _resolve_profile(args, config)
    if spec.clips_per_video != profile.input_clips:
        print(f"event=gen_adjust clips_per_video={profile.input_clips} "
              f"reason=profile_{profile.name}")
        spec = dataclasses.replace(spec, clips_per_video=profile.input_clips)
    corpus = generate_corpus(spec, profile)
    fraction = _pick(args.test_fraction, config, "test_fraction", 0.25)
    corpus = tag_split(corpus, float(fraction), spec.seed)
    write_features(args.out, corpus)
    print(f"event=gen out={args.out} videos={len(corpus.videos)} "
          f"profile={profile.name} seed={spec.seed}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    corpus = read_features(args.features)
    profile = _resolve_profile(args, config, corpus)
    check_corpus(corpus, profile)
    hyper = _hyper_from(args, config)
    train_corpus = _select_split(corpus, args.split, "train")
    checkpoint, reports = fit(train_corpus, profile, hyper)
    for epoch, r in enumerate(reports):
        print(f"event=epoch epoch={epoch} lr={hyper.learning_rate * hyper.lr_decay**epoch:.6g} "
              f"intra={r.intra:.6f} video={r.video:.6f} reg={r.reg:.6f} "
              f"total={r.total:.6f} skipped={r.skipped_sentences}")
    save_checkpoint(args.out, checkpoint)
    print(f"event=train out={args.out} epochs={checkpoint.epoch} "
          f"final_loss={checkpoint.metrics['final_loss']:.6f} variant={hyper.variant} "
          f"loss_mode={hyper.loss_mode}")
    return 0


def _checkpoint_path(args) -> str:
    path = args.checkpoint
    if args.ablate:
        if os.path.isdir(path):
            path = os.path.join(path, f"{args.ablate}.hmc")
        elif not os.path.exists(path):
            raise ConfigError(f"--ablate given but checkpoint {path} does not exist")
    return path


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    corpus = read_features(args.features)
    settings = EvalSettings(
        k_values=tuple(int(k) for k in (args.k or config.get("k_values", (10, 100)))),
        iou_values=tuple(float(m) for m in (args.iou or config.get("iou_values", (0.5, 0.7)))),
        min_annotations=int(_pick(args.min_annotations, config, "min_annotations", 1)),
    )
    eval_corpus = _select_split(corpus, args.split, "test")

    if args.baseline == "prior":
        profile = _resolve_profile(args, config, corpus)
        train_corpus = _select_split(corpus, None, "train")
        seed = args.seed if args.seed is not None else 0
        report = evaluate_prior(train_corpus, eval_corpus, profile, settings, seed=seed)
        label = "prior"
    elif not args.checkpoint:
        raise ConfigError("eval needs --checkpoint or --baseline prior")
    else:
        path = _checkpoint_path(args)
        ck = load_checkpoint(path)
        if args.ablate and ck.metrics.get("loss_mode") not in (None, args.ablate):
            raise ConfigError(
                f"checkpoint {path} was trained with loss_mode="
                f"{ck.metrics.get('loss_mode')!r}, not {args.ablate!r}"
            )
        check_corpus(corpus, ck.profile)
        report = evaluate(ck.params, eval_corpus, ck.profile, settings, threads=args.threads)
        label = args.ablate or ck.metrics.get("loss_mode", "model")

    print(f"event=eval subject={label} queries={report.query_count}")
    print(report.table())
    if args.report:
        doc = {
            "subject": label,
            "settings": {
                "k_values": list(settings.k_values),
                "iou_values": list(settings.iou_values),
                "min_annotations": settings.min_annotations,
            },
            "report": report.to_dict(),
        }
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
    return 0


def cmd_query(args) -> int:
    corpus = read_features(args.features)
    ck = load_checkpoint(args.checkpoint)
    index_corpus = _select_split(corpus, args.split, "all")
    index = build_index(index_corpus, ck.params, ck.profile, threads=args.threads)
    try:
        with open(args.vector, "r", encoding="utf-8") as fh:
            vector = json.load(fh)
        matrix = as_sentence_matrix(vector, ck.params.sent_dim)
    except (json.JSONDecodeError, UnicodeDecodeError, ContractError) as exc:
        raise FormatError(f"bad query vector file {args.vector}: {exc}") from exc
    embedding = encode_sentence(matrix, ck.params, mode="infer").data[0]
    result = query_top_k(index, embedding, args.k)
    for rank, entry in enumerate(result.entries, start=1):
        print(f"rank={rank} video={entry.video_id} start_s={entry.span.start_seconds:g} "
              f"end_s={entry.span.end_seconds:g} score={entry.score:.6f}")
    return 0


def cmd_verify(args) -> int:
    checks = run_all()
    failed = [c for c in checks if not c.passed]
    for c in checks:
        status = "pass" if c.passed else "fail"
        print(f"check={c.name} status={status} detail={c.detail!r}")
    if failed:
        print(f"event=verify status=fail failed={','.join(c.name for c in failed)}")
        return 1
    print(f"event=verify status=pass checks={len(checks)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file; flags override its values")
    sub.add_argument("--seed", type=int, default=None, help="RNG seed for this command")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker cap for index building and scans")
    sub.add_argument("--precision", type=int, choices=(32, 64), default=32,
                     help="build-wide float width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momentloc",
        description="Text-based localization of moments in a video corpus.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="generate a synthetic feature file")
    gen.add_argument("--spec", default=None,
                     help="'default' or a JSON file of synthetic-spec fields")
    gen.add_argument("--profile", default=None, help="dataset profile name")
    gen.add_argument("--test-fraction", dest="test_fraction", type=float, default=None)
    gen.add_argument("--out", required=True, help="output feature file (HMF1)")
    gen.set_defaults(handler=cmd_gen)
    _add_common(gen)

    train = subs.add_parser("train", help="train a model on a feature file")
    train.add_argument("--features", required=True)
    train.add_argument("--out", required=True, help="output checkpoint file (HMC1)")
    train.add_argument("--variant", choices=("sum", "max"), default=None)
    train.add_argument("--loss-mode", dest="loss_mode",
                       choices=("proposed", "intra", "video"), default=None)
    train.add_argument("--pooling", choices=("log", "ave"), default=None)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--profile", default=None)
    train.add_argument("--split", choices=("train", "test", "all"), default=None)
    train.set_defaults(handler=cmd_train)
    _add_common(train)

    ev = subs.add_parser("eval", help="evaluate a checkpoint or baseline")
    ev.add_argument("--features", required=True)
    ev.add_argument("--checkpoint", help="checkpoint file, or directory with --ablate")
    ev.add_argument("--ablate", choices=("intra", "video", "proposed"), default=None)
    ev.add_argument("--baseline", choices=("prior",), default=None)
    ev.add_argument("--report", help="write a machine-readable JSON report here")
    ev.add_argument("--split", choices=("train", "test", "all"), default=None)
    ev.add_argument("--min-annotations", dest="min_annotations", type=int, default=None)
    ev.add_argument("--k", type=int, nargs="+", default=None)
    ev.add_argument("--iou", type=float, nargs="+", default=None)
    ev.add_argument("--profile", default=None)
    ev.set_defaults(handler=cmd_eval)
    _add_common(ev)

    qr = subs.add_parser("query", help="rank moments for one sentence feature vector")
    qr.add_argument("--features", required=True)
    qr.add_argument("--checkpoint", required=True)
    qr.add_argument("--vector", required=True, help="JSON array with the query feature")
    qr.add_argument("--k", type=int, default=10)
    qr.add_argument("--split", choices=("train", "test", "all"), default=None)
    qr.set_defaults(handler=cmd_query)
    _add_common(qr)

    vf = subs.add_parser("verify", help="run the built-in verification suite")
    vf.set_defaults(handler=cmd_verify)
    _add_common(vf)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    nc.set_precision(args.precision)
    try:
        return args.handler(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except MomentlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
