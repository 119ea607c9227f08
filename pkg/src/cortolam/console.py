import argparse
import sys
from os import environ
from pathlib import Path
from shlex import quote
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from loguru import logger

from . import __version__
from .argtype import KSetType, PathType, RaterLabelsType, collect_rater_labels
from .config import NNI_MODES, PipelineConfig
from .errors import CortolamError
from .pipeline import Pipeline

logger.disable("cortolam")  # Disable emit logs by default

description = """
cortolam segments cortical layers at the level of single neurons.

It computes spatial and shape features of every detected neuron, derives sparse, average
and dense regions with the cortical depth of each neuron, trains one boosted tree model
per rater, fuses the raters by summing probabilities, and explains the predictions with
SHAP attributions. A seeded synthetic cortex generator provides data with ground truth.
"""  # noqa

# Additional console help message text at the end
epilog = """
A typical run on synthetic data:

    cortolam synth --workdir run1 --seed 7
    cortolam features --workdir run1
    cortolam regions --workdir run1
    cortolam train --workdir run1
    cortolam predict --workdir run1
    cortolam explain --workdir run1
    cortolam eval --workdir run1
    cortolam plot --workdir run1 --side-by-side --source run1/truth.csv --source run1/predictions.csv
"""  # noqa

CommandType = Callable[..., Any]


def cmd_synth(config: PipelineConfig) -> None:
    """Generate a synthetic section with ground truth and simulated raters."""
    Pipeline(config).synth()


def cmd_features(config: PipelineConfig) -> None:
    """Compute the feature table."""
    Pipeline(config).features()


def cmd_regions(config: PipelineConfig) -> None:
    """Write the region tags and summaries."""
    Pipeline(config).regions()


def cmd_train(config: PipelineConfig) -> None:
    """Train one model per rater and write the ensemble."""
    Pipeline(config).train()


def cmd_predict(config: PipelineConfig) -> None:
    """Predict the layer of every neuron."""
    Pipeline(config).predict()


def cmd_explain(config: PipelineConfig) -> None:
    """Write SHAP attributions, global importances and contribution breakdowns."""
    Pipeline(config).explain()


def cmd_eval(config: PipelineConfig) -> None:
    """Write the agreement and accuracy report."""
    Pipeline(config).evaluate()


def cmd_plot(
    config: PipelineConfig,
    sources: Optional[Sequence[Path]] = None,
    output: Optional[Path] = None,
    column: str = "layer",
    side_by_side: bool = False,
    titles: Optional[Sequence[str]] = None,
) -> List[Path]:
    """Draw layer maps; defaults to the predictions of the work folder."""
    if not sources:
        sources = [config.require("predictions")]
    output = output or config.workdir / "layers.svg"
    return Pipeline(config).plot(sources, output, column, side_by_side, titles)


COMMANDS: Dict[str, Tuple[CommandType, str]] = {
    "synth": (cmd_synth, "Generate a synthetic section"),
    "features": (cmd_features, "Compute per-neuron features"),
    "regions": (cmd_regions, "Derive sparse/average/dense regions and cortical depth"),
    "train": (cmd_train, "Train the per-rater models"),
    "predict": (cmd_predict, "Predict neuron layers by the rater ensemble"),
    "explain": (cmd_explain, "Explain the model predictions"),
    "eval": (cmd_eval, "Evaluate predictions against the raters"),
    "plot": (cmd_plot, "Draw SVG layer maps"),
}


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        metavar="TOML",
        type=PathType(exists=True, type="file"),
        help="Path to the pipeline configuration; flags override its values",
    )
    parser.add_argument(
        "--workdir",
        metavar="DIR",
        type=PathType(),
        default=argparse.SUPPRESS,
        help="Folder of all pipeline artifacts (default: .)",
    )
    parser.add_argument(
        "--seed",
        type=int,
        metavar="N",
        default=argparse.SUPPRESS,
        help="Seed of all randomness (default: 0)",
    )
    parser.add_argument(
        "--neurons",
        metavar="CSV",
        type=PathType(),
        default=argparse.SUPPRESS,
        help="Path to the neurons CSV (default: <workdir>/neurons.csv)",
    )
    parser.add_argument(
        "--resolution",
        metavar="UM_PER_PX",
        type=float,
        dest="resolution_um_per_px",
        default=argparse.SUPPRESS,
        help="Neuron coordinates are in pixels of this resolution (shape columns are read as is)",
    )


def _add_feature_arguments(parser: argparse.ArgumentParser) -> None:
    grp = parser.add_argument_group("Features")
    grp.add_argument(
        "--k-set",
        metavar="K,K,...",
        type=KSetType(),
        dest="features.k_set",
        default=argparse.SUPPRESS,
        help="Neighbourhood sizes (default: 50,100,250,500,1000)",
    )
    grp.add_argument(
        "--region-k",
        metavar="K",
        type=int,
        dest="features.region_k",
        default=argparse.SUPPRESS,
        help="Neighbourhood size deriving the regions (default: 500)",
    )
    grp.add_argument(
        "--sectors",
        metavar="R",
        type=int,
        dest="slice.sectors",
        default=argparse.SUPPRESS,
        help="Angular slices of a neighbourhood (default: 8)",
    )
    grp.add_argument(
        "--k-slice",
        metavar="K",
        type=int,
        dest="slice.k",
        default=argparse.SUPPRESS,
        help="Neighbourhood size of the slices (default: 500)",
    )
    grp.add_argument(
        "--nni-mode",
        choices=NNI_MODES,
        dest="features.nni_mode",
        default=argparse.SUPPRESS,
        help="Numerator of the nearest neighbour index (default: nearest)",
    )
    grp.add_argument(
        "--neighbor-size",
        action="store_true",
        dest="features.neighbor_size",
        default=argparse.SUPPRESS,
        help="Add the mean soma area of the neighbours per neighbourhood size",
    )
    grp.add_argument(
        "--jobs",
        metavar="N",
        type=int,
        dest="features.jobs",
        default=argparse.SUPPRESS,
        help="Worker threads (default: 1)",
    )


def _add_train_arguments(parser: argparse.ArgumentParser) -> None:
    grp = parser.add_argument_group("Boosting")
    for flag, key, typ, help_text in [
        ("--rounds", "train.rounds", int, "Boosting rounds (default: 200)"),
        ("--max-depth", "train.max_depth", int, "Maximal tree depth (default: 6)"),
        ("--learning-rate", "train.learning_rate", float, "Shrinkage (default: 0.1)"),
        ("--l2-leaf-reg", "train.l2_leaf_reg", float, "L2 regularisation of leaves (default: 1)"),
        ("--min-samples-leaf", "train.min_samples_leaf", int, "Minimal neurons per leaf (default: 20)"),
        ("--train-fraction", "train.train_fraction", float, "Training share of the split (default: 0.75)"),
        ("--jobs", "train.jobs", int, "Worker threads (default: 1)"),
    ]:
        grp.add_argument(
            flag,
            type=typ,
            metavar=typ.__name__.upper(),
            dest=key,
            default=argparse.SUPPRESS,
            help=help_text,
        )


def _add_labels_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--labels",
        metavar="RATER=CSV",
        type=RaterLabelsType(),
        action="append",
        dest="labels",
        default=argparse.SUPPRESS,
        help="Label file of one rater; repeat per rater (default: <workdir>/labels_*.csv)",
    )


def create_console_parser() -> argparse.ArgumentParser:
    """Create cortolam's commandline parser.

    See :class:`~cortolam.config.PipelineConfig` for the details of each
    parameter. Flags that are not given keep the value of the ``--config`` file, or the
    default.
    """

    class ConsoleHelpFormatter(
        argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter
    ):
        pass

    parser = argparse.ArgumentParser(
        prog="cortolam",
        description=description,
        epilog=epilog,
        formatter_class=ConsoleHelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"cortolam v{__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    commands = {}
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(
            name,
            help=help_text,
            description=help_text,
            formatter_class=ConsoleHelpFormatter,
            allow_abbrev=False,
        )
        _add_common_arguments(sub)
        commands[name] = sub

    synth = commands["synth"].add_argument_group("Synthetic section")
    for flag, key, typ, help_text in [
        ("--width", "synth.width_um", float, "Section width in µm (default: 3000)"),
        ("--height", "synth.height_um", float, "Section height in µm (default: 2800)"),
        ("--raters", "synth.n_raters", int, "Simulated raters (default: 3)"),
        ("--disagreement", "synth.disagreement_um", float,
         "Rater boundary jitter in µm (default: calibrated to --target-agreement)"),
        ("--target-agreement", "synth.target_agreement", float,
         "Mean pairwise rater agreement to calibrate to (default: 0.8)"),
        ("--label-window", "synth.label_window", float,
         "Centred fraction of the width labeled by the raters (default: 0.5)"),
    ]:
        synth.add_argument(
            flag,
            type=typ,
            metavar=typ.__name__.upper(),
            dest=key,
            default=argparse.SUPPRESS,
            help=help_text,
        )

    _add_feature_arguments(commands["features"])
    commands["regions"].add_argument(
        "--region-k",
        metavar="K",
        type=int,
        dest="features.region_k",
        default=argparse.SUPPRESS,
        help="Neighbourhood size deriving the regions (default: 500)",
    )

    _add_labels_argument(commands["train"])
    _add_train_arguments(commands["train"])

    explain = commands["explain"]
    explain.add_argument(
        "--sample",
        metavar="N",
        type=int,
        dest="explain_sample",
        default=argparse.SUPPRESS,
        help="Neurons sampled for the attributions; all neurons when 0 (default: 200)",
    )
    explain.add_argument(
        "--explain-id",
        metavar="ID",
        type=int,
        action="append",
        dest="explain_ids",
        default=argparse.SUPPRESS,
        help="Render the contribution breakdown of this neuron; repeatable",
    )

    _add_labels_argument(commands["eval"])
    commands["eval"].add_argument(
        "--truth",
        metavar="CSV",
        type=PathType(exists=True, type="file"),
        default=argparse.SUPPRESS,
        help="Ground-truth labels (default: <workdir>/truth.csv when present)",
    )

    plot = commands["plot"].add_argument_group("Plot")
    plot.add_argument(
        "--source",
        metavar="CSV",
        type=PathType(exists=True, type="file"),
        action="append",
        dest="sources",
        help="Table with an id column and the --column to color by; repeatable "
        "(default: <workdir>/predictions.csv)",
    )
    plot.add_argument(
        "--column",
        default="layer",
        help="Column to color by; 'layer' is drawn by class, other columns by value",
    )
    plot.add_argument(
        "--title",
        action="append",
        dest="titles",
        help="Panel title per source (default: the source file names)",
    )
    plot.add_argument(
        "--output",
        metavar="SVG",
        type=PathType(),
        help="Output SVG (default: <workdir>/layers.svg)",
    )
    plot.add_argument(
        "--side-by-side",
        action="store_true",
        help="Draw all sources as panels of one SVG",
    )
    return parser


PLOT_OPTIONS = ("sources", "output", "column", "side_by_side", "titles")
"""Options of ``cmd_plot`` that are not pipeline configuration."""


def parse_console(args=None) -> Tuple[CommandType, PipelineConfig, Dict[str, Any]]:
    """
    Parse the command-line arguments or the given `args` into the command to run, a
    :class:`~cortolam.config.PipelineConfig` object and the extra command options.
    """
    parser = create_console_parser()
    ns = vars(parser.parse_args(args))
    command = COMMANDS[ns.pop("command")][0]
    config_path = ns.pop("config", None)
    extra = {key: ns.pop(key) for key in PLOT_OPTIONS if key in ns}
    if "labels" in ns:
        try:
            ns["labels"] = collect_rater_labels(ns["labels"])
        except argparse.ArgumentTypeError as e:
            parser.error(str(e))
    config = PipelineConfig.from_toml(config_path, overrides=ns)
    console_parameters = " ".join(map(quote, args if args is not None else sys.argv[1:]))
    logger.info(f"Running cortolam v{__version__} with parameters: {console_parameters}")
    logger.debug(f"Effective config: {config!r}")
    return command, config, extra


def setup_logger() -> None:
    """Set up stderr logging format.

    The logging format and colors can be overridden by setting up the
    environment variables such as ``LOGURU_FORMAT``.
    See `Loguru documentation`_ for details.

    .. _Loguru documentation: https://loguru.readthedocs.io/en/stable/api/logger.html#env
    """
    logger.remove()  # Remove the default setting

    # Set up the preferred logging colors and format unless overridden by its environment variable
    logger.level("INFO", color=environ.get("LOGURU_INFO_COLOR") or "<white>")
    logger.level("DEBUG", color=environ.get("LOGURU_DEBUG_COLOR") or "<d><white>")
    log_format = environ.get("LOGURU_FORMAT") or (
        "<b><level>{level: <8}</level></b> "
        "| <level>{message}</level>"
    )
    logger.add(sys.stderr, format=log_format)

    # By default all the logging messages are disabled
    logger.enable("cortolam")


def main(args=None) -> int:
    """Run one command and return its exit status.

    :class:`~cortolam.errors.CortolamError` are reported as ``[<category>] <message>``.
    """
    try:
        command, config, extra = parse_console(args)
        command(config, **extra)
    except CortolamError as e:
        logger.error(f"[{e.category}] {e}")
        return e.exit_code
    return 0


def run() -> None:
    """Entry point of the program.

    The ``cortolam`` command calls this function.
    """
    setup_logger()
    sys.exit(main())
