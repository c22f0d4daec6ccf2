"""Command-line interface for the quantitative T2* pipeline.

Subcommands map one-to-one onto pipeline stages; `run` chains them all.
Exit codes: 0 success, 1 runtime failure, 2 configuration or contract
error. Set T2S_NO_COLOR to disable ANSI colors on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import pipeline
from .config import PipelineConfig, load_config
from .errors import ConfigError, IntegrityError, ToolkitError
from .pipeline import StageRunner
from .report import report_stage


def _use_color() -> bool:
    if "T2S_NO_COLOR" in os.environ:
        return False
    return hasattr(sys.stderr, "isatty") and sys.stderr.isatty()


def make_logger():
    color = _use_color()

    def log(msg: str) -> None:
        if color and msg.startswith("["):
            head, _, tail = msg.partition("]")
            msg = f"\x1b[36m{head}]\x1b[0m{tail}"
        print(msg, file=sys.stderr)

    return log


def _fail(msg: str) -> None:
    if _use_color():
        msg = f"\x1b[31merror:\x1b[0m {msg}"
    else:
        msg = f"error: {msg}"
    print(msg, file=sys.stderr)


def _parse_indices(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def configure(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "input", None):
        config.input_dir = args.input
    if args.out:
        config.out_dir = args.out
    if args.threads:
        config.threads = int(args.threads)
    if args.seed is not None:
        config.seed = int(args.seed)
    if getattr(args, "skip_denoise", False):
        config.denoise.enabled = False
    if getattr(args, "keep", None):
        config.qc.keep = _parse_indices(args.keep)
    if getattr(args, "drop", None):
        config.qc.drop = _parse_indices(args.drop)
    return config


def _series_dir(config: PipelineConfig) -> Path:
    """Series directory downstream stages read: denoised when enabled."""
    raw = config.require_input()
    if not config.denoise.enabled:
        return raw
    den = Path(config.require_out()) / "denoised"
    if not den.is_dir():
        raise IntegrityError(
            f"denoised series not found at {den}; run the denoise stage first "
            "or disable denoising (--skip-denoise / denoise.enabled=false)"
        )
    return den


def cmd_simulate(args) -> int:
    pipeline.simulate_dataset(configure(args), make_logger())
    return 0


def cmd_denoise(args) -> int:
    config = configure(args)
    pipeline.denoise_stage(config, StageRunner(config.require_out(), make_logger()))
    return 0


def cmd_fit(args) -> int:
    config = configure(args)
    runner = StageRunner(config.require_out(), make_logger())
    pipeline.fit_stage(config, _series_dir(config), runner)
    return 0


def cmd_qc(args) -> int:
    config = configure(args)
    runner = StageRunner(config.require_out(), make_logger())
    pipeline.qc_stage(config, _series_dir(config), runner)
    return 0


def cmd_recon(args) -> int:
    config = configure(args)
    runner = StageRunner(config.require_out(), make_logger())
    pipeline.recon_stage(config, _series_dir(config), runner)
    return 0


def cmd_stats(args) -> int:
    config = configure(args)
    runner = StageRunner(config.require_out(), make_logger())
    if not pipeline.stats_stage(config, runner):
        raise ConfigError(
            "statistics need a label map: set labels_path or use a simulated "
            "series with a truth/ directory"
        )
    return 0


def cmd_growth(args) -> int:
    config = configure(args)
    pipeline.growth_stage(config, args.stats_csvs, make_logger())
    return 0


def cmd_report(args) -> int:
    config = configure(args)
    report_stage(config, StageRunner(config.require_out(), make_logger()))
    return 0


def cmd_run(args) -> int:
    pipeline.run_all(configure(args), make_logger())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="t2srecon",
        description=(
            "Quantitative T2* fetal-body pipeline: MP-PCA denoising, voxelwise "
            "relaxometry, motion QC, slice-to-volume reconstruction, and "
            "growth statistics."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, help_: str, func, with_input: bool = False):
        sp = sub.add_parser(name, help=help_, description=help_)
        if with_input:
            sp.add_argument(
                "input", nargs="?",
                help="input series directory (overrides config input_dir)",
            )
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--threads", type=int, help="worker thread cap")
        sp.add_argument("--seed", type=int, help="RNG seed (overrides config)")
        sp.set_defaults(func=func)
        return sp

    add("simulate", "generate a synthetic phantom dataset with ground truth",
        cmd_simulate)
    add("denoise", "MP-PCA denoise the dynamic series", cmd_denoise,
        with_input=True)
    add("fit", "fit per-dynamic T2* maps", cmd_fit, with_input=True)
    sp = add("qc", "score dynamics for motion and select the kept set", cmd_qc,
             with_input=True)
    sp.add_argument("--keep", help="comma-separated dynamics to force-keep")
    sp.add_argument("--drop", help="comma-separated dynamics to force-drop")
    add("recon", "motion-corrected reconstruction of structure and T2*",
        cmd_recon, with_input=True)
    add("stats", "per-organ statistics and the consistency check", cmd_stats,
        with_input=True)
    sp = add("growth", "fit growth curves from a cohort of organ_stats.csv files",
             cmd_growth)
    sp.add_argument("stats_csvs", nargs="+", metavar="organ_stats.csv",
                    help="per-case statistics files")
    add("report", "render figures and the markdown report", cmd_report)
    sp = add("run", "run the full pipeline on a series", cmd_run,
             with_input=True)
    sp.add_argument("--skip-denoise", action="store_true",
                    help="bypass denoising and fit the raw series")
    sp.add_argument("--keep", help="comma-separated dynamics to force-keep")
    sp.add_argument("--drop", help="comma-separated dynamics to force-drop")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as exc:
        _fail(str(exc))
        return exc.exit_code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
