"""
Command-line entry point: ``python -m pipelines.cli <stage|run> [flags]``.

Stages run in order generate, pretrain, finetune, shap, select, dknn, eval,
report. Each stage reads the artifacts of earlier stages from the output
directory and is skipped when its fingerprint (config sections plus upstream
hashes) matches the manifest and its outputs are intact.
"""

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import src.config as config
from pipelines.context import StageContext
from pipelines.explain_pipeline import OUTPUTS as SHAP_OUTPUTS
from pipelines.explain_pipeline import run_shap
from pipelines.feature_pipeline import OUTPUTS as GENERATE_OUTPUTS
from pipelines.feature_pipeline import run_generate
from pipelines.inference_pipeline import (
    DKNN_OUTPUTS,
    dknn_epsilon,
    eval_inputs,
    eval_methods,
    run_dknn,
    run_eval,
)
from pipelines.model_training_pipeline import run_finetune, run_pretrain, run_select
from pipelines.report_pipeline import INPUTS as REPORT_INPUTS
from pipelines.report_pipeline import run_report
from src.config import ExperimentConfig, dump_experiment_config, load_experiment_config, parse_experiment_config
from src.errors import ConfigError, DependencyError
from src.pipeline_utils import STAGES, ArtifactStore

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_DEPENDENCY = 0, 1, 2, 3
RESOLVED_CONFIG = "resolved_config.json"
METHOD_CHOICES = ["exhaustive", "hierarchical", "binary", "learned", "fixed", "svd", "oracle"]

PRODUCERS = {
    **{name: "generate" for name in GENERATE_OUTPUTS},
    "twin_model.btmd": "pretrain",
    "real_only_model.btmd": "pretrain",
    "augmented.btds": "finetune",
    "finetuned_model.btmd": "finetune",
    "transfer.csv": "finetune",
    **{name: "shap" for name in SHAP_OUTPUTS},
    "selection.json": "select",
    "topk.csv": "select",
    **{name: "dknn" for name in DKNN_OUTPUTS},
    "metrics.csv": "eval",
}


def producer_of(name: str) -> str:
    if name.startswith(("reduced_", "fixed_")):
        return "select"
    return PRODUCERS[name]


@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable[[StageContext], List[str]]
    inputs: Callable[[StageContext], List[str]] = lambda ctx: []
    sections: Sequence[str] = ()
    extra: Callable[[StageContext], dict] = lambda ctx: {}


REGISTRY: Dict[str, Stage] = {
    stage.name: stage
    for stage in [
        Stage(
            "generate",
            run_generate,
            sections=("scene", "twin", "array", "measurement", "dataset"),
        ),
        Stage(
            "pretrain",
            run_pretrain,
            inputs=lambda ctx: ["twin.btds", "real.btds"],
            sections=("train",),
        ),
        Stage(
            "finetune",
            run_finetune,
            inputs=lambda ctx: ["twin.btds", "real.btds", "twin_model.btmd", "real_only_model.btmd"],
            sections=("finetune", "dataset", "eval"),
        ),
        Stage(
            "shap",
            run_shap,
            inputs=lambda ctx: ["twin_model.btmd", "twin.btds", "background.btds"],
            sections=("shap", "selection"),
        ),
        Stage(
            "select",
            run_select,
            inputs=lambda ctx: [
                "shap_report.json",
                "shap_psi.npy",
                "twin.btds",
                "real.btds",
                "twin_narrow.btds",
                "real_narrow.btds",
            ],
            sections=("train", "finetune", "dataset", "selection", "eval"),
        ),
        Stage(
            "dknn",
            run_dknn,
            inputs=lambda ctx: ["finetuned_model.btmd", "augmented.btds", "real.btds"],
            sections=("dknn",),
            extra=lambda ctx: {"epsilon": dknn_epsilon(ctx)},
        ),
        Stage(
            "eval",
            run_eval,
            inputs=eval_inputs,
            sections=("array", "measurement", "dataset", "selection", "timing", "eval"),
            extra=lambda ctx: {"methods": eval_methods(ctx)},
        ),
        Stage(
            "report",
            run_report,
            inputs=lambda ctx: list(REPORT_INPUTS),
            sections=("timing",),
        ),
    ]
}
assert list(REGISTRY) == STAGES


def execute_stage(stage: Stage, ctx: StageContext) -> bool:
    """
    Run one stage unless its recorded fingerprint is still valid.

    Returns True when the stage ran, False when it was skipped.

    Raises:
        DependencyError: If an upstream artifact is missing.
    """
    store = ctx.store
    upstream = {}
    for name in stage.inputs(ctx):
        upstream.update(store.require(stage.name, [name], producer_of(name)))
    stage_fp = ctx.stage_fingerprint(stage.name, list(stage.sections), upstream, stage.extra(ctx))
    if store.is_fresh(stage.name, stage_fp):
        logger.info(f"Stage '{stage.name}' is up to date, skipping")
        return False

    logger.info(f"Running stage '{stage.name}'")
    outputs = stage.run(ctx)
    store.ensure()
    store.record(stage.name, stage_fp, outputs)
    logger.info(f"Stage '{stage.name}' wrote {len(outputs)} artifacts")
    return True


def run_pipeline(cfg: ExperimentConfig, stages: Sequence[str] = STAGES, **overrides) -> ArtifactStore:
    """Run ``stages`` in order and write the resolved config beside the outputs."""
    store = ArtifactStore(cfg.resolved_output_dir())
    ctx = StageContext(cfg, store, **overrides)
    for name in stages:
        execute_stage(REGISTRY[name], ctx)
    dump_experiment_config(cfg, store.path(RESOLVED_CONFIG))
    return store


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Load ``--config`` and apply the command-line overrides with full validation."""
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    document = cfg.model_dump(mode="json")
    if args.seed is not None:
        document["seed"] = args.seed
    if args.threads is not None:
        document["threads"] = args.threads
    if args.out is not None:
        document["output_dir"] = str(args.out)
    return parse_experiment_config(document)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="experiment config JSON")
    common.add_argument("--out", type=Path, default=None, help="artifact directory")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--seed", type=int, default=None, help="root seed override")
    common.add_argument("--method", action="append", choices=METHOD_CHOICES, help="eval methods to run")
    common.add_argument("--epsilon", type=float, default=None, help="FGSM step for the dknn stage")

    parser = argparse.ArgumentParser(prog="beamlab", description="mmWave beam alignment lab")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run every stage in order")
    run.add_argument("--stage", choices=STAGES, default=None, help="run a single stage")
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=config.LOG_LEVEL,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "run":
            stages = [args.stage] if args.stage else STAGES
        else:
            stages = [args.command]
        store = run_pipeline(cfg, stages, epsilon=args.epsilon, methods=args.method)
        logger.info(f"Artifacts in {store.root}")
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except DependencyError as e:
        logger.error(f"Missing upstream artifact: {e}")
        return EXIT_DEPENDENCY
    except Exception as e:
        logger.exception(f"Pipeline failed: {e}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
