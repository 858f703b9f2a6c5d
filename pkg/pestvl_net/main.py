"""
Command-line entry point for PestVL-Net.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 invalid input
or data, 5 runtime failure (external service, divergence, failed self-test).
"""

import argparse
import asyncio
import json
import logging
import sys
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import torch

from . import __version__
from .config import get_settings, load_model_config
from .schemas.cli import CliSummary
from .schemas.config import ModelConfig
from .services.caption_service import (
    CaptionJob,
    CaptionService,
    MllmClient,
    load_cot_template,
    load_expert_knowledge,
    read_caption_store,
)
from .services.checkpoint_service import load_checkpoint
from .services.dataset_service import (
    IMAGE_SUFFIXES,
    attach_captions,
    build_manifest,
    load_image,
    load_manifest,
    make_toy_dataset,
    save_manifest,
)
from .services.self_test_service import SUITES, run_self_test
from .services.text_encoder import (
    EmbeddingStore,
    MockTextEncoder,
    RemoteTextEncoder,
    TextEncoder,
    build_embedding_store,
)
from .services.training_service import (
    ABLATION_VARIANTS,
    DEFAULT_ABLATIONS,
    evaluate,
    load_model,
    run_ablation_study,
    train,
)
from .services.visualization_service import (
    draw_partition_overlay,
    export_feature_maps,
    partition_view,
    write_saliency,
)
from .utils.exceptions import ConfigError, DataError, PestVLError, ValidationError
from .utils.logging_config import run_id_var, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_RUNTIME = 5


@dataclass
class CommandResult:
    outputs: Dict[str, str] = field(default_factory=dict)
    result: Dict[str, Any] = field(default_factory=dict)
    exit_code: int = EXIT_OK


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (ValidationError, DataError)):
        return EXIT_DATA
    return EXIT_RUNTIME


def _require_out(args: argparse.Namespace) -> Path:
    if not args.out:
        raise ValidationError(f"{args.command} requires --out")
    return Path(args.out)


def _load_store(config: ModelConfig, path: Optional[str]) -> Optional[EmbeddingStore]:
    if config.ablation.disable_fusion or config.fusion_count == 0:
        return None
    if not path:
        raise ValidationError("--embeddings is required when fusion is enabled")
    store = EmbeddingStore.load(path)
    if store.dimension != config.embedding_dim:
        raise ConfigError(
            f"Embedding store dimension {store.dimension} does not match embedding_dim {config.embedding_dim}",
            key="embedding_dim",
        )
    return store


# Subcommand handlers


def cmd_saliency(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    out = _require_out(args)
    image = load_image(args.input)
    saliency = write_saliency(image, config, out, args.raw)
    result = CommandResult(outputs={"saliency": str(out)})
    if args.raw:
        result.outputs["raw"] = args.raw
    result.result = {"height": saliency.shape[-2], "width": saliency.shape[-1]}
    return result


def cmd_partition_viz(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    out = _require_out(args)
    image = load_image(args.input, config.image_size)
    view = partition_view(image, config)
    draw_partition_overlay(image, view, out)
    return CommandResult(
        outputs={"overlay": str(out)},
        result={"energies": view.energies, "selected_windows": view.selected},
    )


def _caption_jobs(root: Path) -> List[CaptionJob]:
    jobs = []
    for directory in sorted(p for p in root.iterdir() if p.is_dir()):
        for path in sorted(directory.iterdir()):
            if path.suffix.lower() in IMAGE_SUFFIXES:
                jobs.append(
                    CaptionJob(
                        image_path=str(path),
                        image_id=path.relative_to(root).as_posix(),
                        species=directory.name,
                    )
                )
    if not jobs:
        raise DataError(f"No images found under {root}")
    return jobs


def cmd_caption_gen(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    out = _require_out(args)
    settings = get_settings()
    knowledge = {} if args.plain else load_expert_knowledge(args.knowledge)
    template = None if args.plain else load_cot_template(args.template)
    jobs = _caption_jobs(Path(args.images))
    if out.exists():
        out.unlink()

    async def run() -> Any:
        async with MllmClient(settings) as client:
            service = CaptionService(
                client,
                knowledge,
                template,
                out,
                max_concurrent=settings.caption_concurrency,
                plain=args.plain,
            )
            return await service.run(jobs, mode=config.data.caption_mode)

    batch = asyncio.run(run())
    return CommandResult(
        outputs={"captions": str(out)},
        result={"captioned": len(batch.records), "failures": batch.failures},
        exit_code=EXIT_RUNTIME if batch.failures else EXIT_OK,
    )


def cmd_encode_text(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    out = _require_out(args)
    records = read_caption_store(args.captions)
    encoder: TextEncoder
    if args.encoder == "remote":
        encoder = RemoteTextEncoder(config.embedding_dim)
    else:
        encoder = MockTextEncoder(config.embedding_dim, seed=args.seed)
    store = build_embedding_store((r.caption for r in records), encoder)
    store.save(out)
    return CommandResult(
        outputs={"embeddings": str(out)},
        result={"captions": len(records), "distinct": len(store), "dimension": store.dimension},
    )


def cmd_split(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    out = _require_out(args)
    manifest = build_manifest(args.root, config.data.split_ratio, config.optimizer.seed)
    if args.captions:
        manifest = attach_captions(manifest, read_caption_store(args.captions))
    save_manifest(manifest, out)
    return CommandResult(
        outputs={"manifest": str(out)},
        result={name: len(indices) for name, indices in manifest.splits.items()},
    )


def cmd_train(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    out = _require_out(args)
    manifest = load_manifest(args.manifest)
    store = _load_store(config, args.embeddings)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(config, manifest, store, out_dir=out, resume=resume)
    final = result.final("train")
    return CommandResult(
        outputs={"checkpoint": str(result.checkpoint_path), "metrics": str(result.metrics_path)},
        result={
            "epochs": result.checkpoint.epoch,
            "steps": result.steps,
            "train_accuracy": final.accuracy,
            "train_loss": final.loss,
        },
    )


def cmd_eval(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    checkpoint = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    store = _load_store(checkpoint.config, args.embeddings)
    report, loss = evaluate(checkpoint, manifest, store, args.split)
    result = CommandResult(result={"split": args.split, "loss": loss, **report.model_dump()})
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result.result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        result.outputs["report"] = str(out)
    return result


def cmd_export_features(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    out = _require_out(args)
    checkpoint = load_checkpoint(args.checkpoint)
    model = load_model(checkpoint)
    image = load_image(args.input, checkpoint.config.image_size)
    text = None
    if args.caption and model.uses_text:
        store = _load_store(checkpoint.config, args.embeddings)
        assert store is not None
        text = torch.from_numpy(store.get(args.caption).copy())
    stages = args.stages if args.stages is not None else list(range(model.stage_count))
    paths = export_feature_maps(model, image, stages, out, text)
    return CommandResult(
        outputs={f"stage_{i}": str(p) for i, p in zip(stages, paths)},
        result={"stages": stages},
    )


def cmd_self_test(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    report = run_self_test(args.suite)
    for suite in report.suites:
        status = "PASS" if suite.passed else "FAIL"
        print(
            f"{status} {suite.name}: max error {suite.max_error:.3e} (tolerance {suite.tolerance:.0e})"
            + (f" {suite.detail}" if suite.detail else ""),
            file=sys.stderr,
        )
    return CommandResult(
        result={"suites": [s.model_dump() for s in report.suites], "failing": report.failing()},
        exit_code=EXIT_OK if report.passed else EXIT_RUNTIME,
    )


def cmd_toy_data(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    out = _require_out(args)
    toy = make_toy_dataset(
        out,
        classes=args.classes,
        per_class=args.per_class,
        size=config.image_size,
        seed=config.optimizer.seed,
        embedding_dim=config.embedding_dim,
        ratio=config.data.split_ratio,
    )
    return CommandResult(
        outputs={
            "manifest": str(toy.manifest_path),
            "captions": str(toy.captions_path),
            "embeddings": str(toy.embeddings_path),
        },
        result={"classes": args.classes, "per_class": args.per_class},
    )


def cmd_ablate(args: argparse.Namespace, config: ModelConfig) -> CommandResult:
    out = _require_out(args)
    manifest = load_manifest(args.manifest)
    store = EmbeddingStore.load(args.embeddings) if args.embeddings else None
    report = run_ablation_study(
        config, manifest, store, seeds=args.seeds, epochs=args.epochs, variants=args.variants, out_dir=out
    )
    return CommandResult(
        outputs={"report": str(out / "ablation.json"), "table": str(out / "ablation.csv")},
        result=report.to_dict(),
    )


COMMANDS: Dict[str, Callable[[argparse.Namespace, ModelConfig], CommandResult]] = {
    "saliency": cmd_saliency,
    "partition-viz": cmd_partition_viz,
    "caption-gen": cmd_caption_gen,
    "encode-text": cmd_encode_text,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-features": cmd_export_features,
    "self-test": cmd_self_test,
    "toy-data": cmd_toy_data,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML model/training configuration")
    common.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted config override, e.g. optimizer.epochs=1 (repeatable)",
    )
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    common.add_argument("--json", action="store_true", help="Print a JSON summary on stdout")
    common.add_argument("--out", help="Output file or directory")

    parser = argparse.ArgumentParser(
        prog="pestvl",
        description="Saliency-guided RWKV pest classification with caption fusion.",
        epilog=(
            "Environment: MLLM_API_URL, MLLM_API_KEY (caption-gen), TEXT_ENCODER_API_URL "
            "(encode-text --encoder remote). Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 runtime."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("saliency", parents=[common], help="Spectral residual saliency PNG")
    p.add_argument("--in", dest="input", required=True, help="PNG/JPEG image")
    p.add_argument("--raw", help="Also write the float map as a tensor file")

    p = sub.add_parser("partition-viz", parents=[common], help="Draw the selected refinement windows")
    p.add_argument("--in", dest="input", required=True)

    p = sub.add_parser("caption-gen", parents=[common], help="Caption images with the MLLM")
    p.add_argument("--images", required=True, help="Root of the class-per-directory tree")
    p.add_argument("--knowledge", default="data/expert_knowledge.json")
    p.add_argument("--template", default="data/cot_template.json")
    p.add_argument("--plain", action="store_true", help="Prompt without expert knowledge or CoT")

    p = sub.add_parser("encode-text", parents=[common], help="Encode captions into an embedding store")
    p.add_argument("--captions", required=True)
    p.add_argument("--encoder", choices=("mock", "remote"), default="mock")
    p.add_argument("--seed", type=int, default=0, help="Mock encoder seed")

    p = sub.add_parser("split", parents=[common], help="Build a stratified dataset manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--captions", help="Caption store to attach caption hashes from")

    p = sub.add_parser("train", parents=[common], help="Train and write checkpoint + metric CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--resume", help="Checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("export-features", parents=[common], help="Heat maps of stage features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--stages", type=int, nargs="+")
    p.add_argument("--caption", help="Caption text to fuse (looked up in --embeddings)")
    p.add_argument("--embeddings")

    p = sub.add_parser("self-test", parents=[common], help="Run the embedded oracle suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES))

    p = sub.add_parser("toy-data", parents=[common], help="Write the synthetic toy dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=8)

    p = sub.add_parser("ablate", parents=[common], help="Ablation study over seeds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument(
        "--variants", nargs="+", choices=sorted(ABLATION_VARIANTS), default=list(DEFAULT_ABLATIONS)
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK

    settings = get_settings()
    level = {0: settings.log_level, 1: "INFO"}.get(args.verbose, "DEBUG")
    setup_logging(log_level=level, log_file=settings.log_file, enable_json_logging=settings.enable_json_logging)
    run_id = uuid.uuid4().hex[:12]
    run_id_var.set(run_id)

    started = time.perf_counter()
    error: Optional[PestVLError] = None
    try:
        config = load_model_config(args.config, args.override)
        outcome = COMMANDS[args.command](args, config)
    except PestVLError as e:
        logger.error(f"{args.command} failed: {e.message}")
        outcome, error = CommandResult(exit_code=exit_code_for(e)), e
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}")
        outcome = CommandResult(exit_code=EXIT_RUNTIME)
        error = PestVLError(f"{type(e).__name__}: {e}")

    if args.json:
        summary = CliSummary(
            command=args.command,
            status="ok" if outcome.exit_code == EXIT_OK else "error",
            exit_code=outcome.exit_code,
            run_id=run_id,
            duration_seconds=time.perf_counter() - started,
            outputs=outcome.outputs,
            result=outcome.result,
            error=error.to_dict() if error is not None else None,
        )
        print(summary.model_dump_json())
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
