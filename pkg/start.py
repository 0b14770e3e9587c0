#!/usr/bin/env python3
"""
PolyVivid toy stack - command-line entry point.

    python start.py layout       --prompt "A man is playing guitar" --subject man --subject guitar
    python start.py rope-dump    (same inputs) [--rope-mode sequential]
    python start.py demo-train   --output runs/ckpt [--train-steps N] [--mode adapter]
    python start.py demo-generate --checkpoint runs/ckpt --output video.pvtd [--scene 0]
    python start.py demo-eval    --checkpoint runs/ckpt [--baseline runs/base]
    python start.py consolidate  --input obs.jsonl [--tau-dist 0.3 --tau-clip 0.25 --total-frames 9]
    python start.py metrics      --frames feats.pvtd [--reference ref.pvtd --other gt.pvtd]
    python start.py runs         [--kind demo-train]

Exit codes: 0 success, 1 computational failure, 2 usage or input error.
"""

import argparse
import hashlib
import logging
import shlex
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from core.core_config import RunConfig, parse_config, parse_override
from core.core_constants import MANIFEST_NAME, SEED_EVAL, derive_seed
from core.core_database import get_ledger
from core.core_errors import (
    ConfigError, ConsolidationError, LayoutError, MetricsError, NumericsError, TensorFileError,
)
from layers.layer_rope import assign_sequential, assign_stream
from layers.layer_tokens import SubjectSpec, layout_template
from services.service_consolidation import (
    FileSubjectProvider, MockSubjectProvider, SubprocessSubjectProvider, run_consolidation,
)
from services.service_dataset import make_dataset
from services.service_metrics import FeatureSet, metrics_report
from services.service_pipeline import (
    coefficient_of_variation, evaluate, generate_scene, load_pipeline, per_frame_identity_profile,
    save_pipeline, train,
)
from utilities.util_parser import format_rope_table
from utilities.util_tensorfile import atomic_write_text, dumps_document, read_tensor, write_tensor

logger = logging.getLogger("polyvivid")

USAGE_ERRORS = (ConfigError, LayoutError, TensorFileError, MetricsError, ConsolidationError)
DEFAULT_PROMPT = "A man is playing guitar"
DEFAULT_SUBJECTS = ("man", "guitar")


def setup_logging(verbose: bool, log_file: Optional[str]) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def emit(text: str, output: Optional[str]) -> None:
    """Write a document to `output` atomically, or to stdout."""
    if output:
        atomic_write_text(output, text)
        logger.info(f"Wrote {output}")
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


# ============================================================================
# CONFIG
# ============================================================================
def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults <- --config file <- --set KEY=VALUE <- dedicated flags."""
    overrides: Dict[str, Any] = {}
    for item in args.set or []:
        overrides.update(parse_override(item))
    for key in ("seed", "mode", "train_steps", "sample_steps", "rope_mode", "tau_dist", "tau_clip"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return parse_config(args.config, overrides)


def subjects_from_args(args: argparse.Namespace, config: RunConfig) -> List[SubjectSpec]:
    words = args.subject if args.subject is not None else list(DEFAULT_SUBJECTS)
    return [SubjectSpec(w, tuple(config.sem_grid), tuple(config.vae_grid)) for w in words]


# ============================================================================
# SUBCOMMANDS
# ============================================================================
def cmd_layout(args: argparse.Namespace, config: RunConfig) -> int:
    stream = layout_template(args.prompt, subjects_from_args(args, config))
    emit(dumps_document(stream.to_document()), args.output)
    return 0


def cmd_rope_dump(args: argparse.Namespace, config: RunConfig) -> int:
    stream = layout_template(args.prompt, subjects_from_args(args, config))
    indices = assign_stream(stream) if config.rope_mode == "interaction_3d" else assign_sequential(stream)
    rows = [(e.seq_pos, e.kind.value, e.subject_id, *idx) for e, idx in zip(stream.entries, indices)]
    emit(format_rope_table(rows), args.output)
    return 0


def cmd_demo_train(args: argparse.Namespace, config: RunConfig) -> int:
    result = train(config, show_progress=not args.quiet and sys.stderr.isatty())
    manifest = save_pipeline(result.pipeline, args.output, {"training": result.summary()})
    digest = hashlib.sha256((Path(args.output) / MANIFEST_NAME).read_bytes()).hexdigest()
    if not args.no_ledger:
        get_ledger(args.ledger_url).record_run("demo-train", config.seed, config.to_dict(),
                                               result.summary(), config.mode, digest)
    emit(dumps_document({"checkpoint": str(args.output), "manifest_sha256": digest,
                         "tensors": len(manifest["tensors"]), **result.summary()}), None)
    return 0


def cmd_demo_generate(args: argparse.Namespace, config: RunConfig) -> int:
    pipeline = load_pipeline(args.checkpoint)
    c = pipeline.config
    scenes = make_dataset(c.seed, max(c.dataset_size, args.scene + 1), c)
    video = generate_scene(pipeline, scenes[args.scene], args.sample_steps)
    write_tensor(args.output, video)
    logger.info(f"Generated scene {args.scene} ({scenes[args.scene].prompt!r}) -> {args.output}")
    return 0


def cmd_demo_eval(args: argparse.Namespace, config: RunConfig) -> int:
    pipeline = load_pipeline(args.checkpoint)
    c = pipeline.config
    count = args.count or c.eval_count
    scenes = make_dataset(derive_seed(c.seed, SEED_EVAL), count, c)
    report = evaluate(pipeline, scenes, args.sample_steps)
    if pipeline.denoiser.injections[0] is not None:
        profile = per_frame_identity_profile(pipeline, scenes[0])
        report["frame_profile"] = profile
        report["frame_profile_cv"] = coefficient_of_variation(profile)
    if args.baseline:
        baseline = evaluate(load_pipeline(args.baseline), scenes, args.sample_steps)
        report["baseline"] = baseline
        report["identity_gap"] = report["identity_similarity"] - baseline["identity_similarity"]
    if not args.no_ledger:
        get_ledger(args.ledger_url).record_run("demo-eval", c.seed, c.to_dict(), report, c.mode)
    emit(dumps_document(report), args.output)
    return 0


def cmd_consolidate(args: argparse.Namespace, config: RunConfig) -> int:
    if args.provider == "file":
        if not args.input:
            raise ConfigError("input", "--input is required with the file provider")
        provider = FileSubjectProvider(args.input)
    elif args.provider == "subprocess":
        if not args.provider_command:
            raise ConfigError("provider_command", "--command is required with the subprocess provider")
        provider = SubprocessSubjectProvider(shlex.split(args.provider_command))
    else:
        provider = MockSubjectProvider(config.seed, frames=args.total_frames or 12)
    records = provider.observations()
    manifest = run_consolidation(records, config.tau_dist, config.tau_clip, args.total_frames, config.node_cap)
    emit(dumps_document(manifest), args.output)
    return 0


def cmd_metrics(args: argparse.Namespace, config: RunConfig) -> int:
    frames = FeatureSet(read_tensor(args.frames), label=str(args.frames))
    reference = read_tensor(args.reference) if args.reference else None
    other = FeatureSet(read_tensor(args.other), label=str(args.other)) if args.other else None
    text = read_tensor(args.text) if args.text else None
    emit(dumps_document(metrics_report(frames, reference, other, text)), args.output)
    return 0


def cmd_runs(args: argparse.Namespace, config: RunConfig) -> int:
    emit(dumps_document(get_ledger(args.ledger_url).list_runs(args.kind)), args.output)
    return 0


COMMANDS = {
    "layout": cmd_layout,
    "rope-dump": cmd_rope_dump,
    "demo-train": cmd_demo_train,
    "demo-generate": cmd_demo_generate,
    "demo-eval": cmd_demo_eval,
    "consolidate": cmd_consolidate,
    "metrics": cmd_metrics,
    "runs": cmd_runs,
}


# ============================================================================
# ARGUMENTS
# ============================================================================
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--output", help="write the result here instead of stdout")
    common.add_argument("--log-file")
    common.add_argument("--verbose", action="store_true")
    common.add_argument("--quiet", action="store_true", help="no progress bar")
    common.add_argument("--no-ledger", action="store_true", help="do not record the run")
    common.add_argument("--ledger-url", help="SQLAlchemy URL of the run ledger")

    parser = argparse.ArgumentParser(prog="start.py", description="PolyVivid toy conditioning stack")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("layout", "rope-dump"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--prompt", default=DEFAULT_PROMPT)
        p.add_argument("--subject", action="append", help="entity word, once per subject")
        if name == "rope-dump":
            p.add_argument("--rope-mode", dest="rope_mode", choices=("interaction_3d", "sequential"))

    p = sub.add_parser("demo-train", parents=[common])
    p.add_argument("--mode", choices=("attention_inherited", "token_concat", "adapter"))
    p.add_argument("--train-steps", dest="train_steps", type=int)
    p.set_defaults(output_required=True)

    p = sub.add_parser("demo-generate", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--sample-steps", dest="sample_steps", type=int)
    p.set_defaults(output_required=True)

    p = sub.add_parser("demo-eval", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="checkpoint to compare against")
    p.add_argument("--count", type=int)
    p.add_argument("--sample-steps", dest="sample_steps", type=int)

    p = sub.add_parser("consolidate", parents=[common])
    p.add_argument("--input", help="observation JSONL")
    p.add_argument("--provider", choices=("file", "mock", "subprocess"), default="file")
    p.add_argument("--command", dest="provider_command", help="provider command line (subprocess provider)")
    p.add_argument("--tau-dist", dest="tau_dist", type=float)
    p.add_argument("--tau-clip", dest="tau_clip", type=float)
    p.add_argument("--total-frames", dest="total_frames", type=int)

    p = sub.add_parser("metrics", parents=[common])
    p.add_argument("--frames", required=True, help="TensorFile feature matrix (n x d)")
    p.add_argument("--reference", help="TensorFile reference vector")
    p.add_argument("--other", help="TensorFile feature matrix for the Frechet distance")
    p.add_argument("--text", help="TensorFile text feature vector")

    p = sub.add_parser("runs", parents=[common])
    p.add_argument("--kind")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.verbose, args.log_file)

    if getattr(args, "output_required", False) and not args.output:
        logger.error(f"{args.command}: --output is required")
        return 2
    if args.command == "demo-generate" and args.scene < 0:
        logger.error("--scene must be >= 0")
        return 2

    try:
        config = build_config(args)
        return COMMANDS[args.command](args, config)
    except USAGE_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        return 2
    except NumericsError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
