"""Command-line entry point: ``relevance-forge <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import phantom
from .config import SEED_ENV, RunConfig, keys_for
from .dataset import load_split, write_dataset
from .errors import ForgeError, MissingInputError, UsageError
from .evaluation import EvalCase, evaluate_dataset
from .nn.models import CLASSIFIER, GENERATOR, load_params, predict_masks, save_params
from .nn.train import train_classifier, train_generator, write_metrics_tsv
from .objective import LossBreakdown
from .relevance import generate_relevance
from .volume import extract_slice, preprocess, read_volume, write_pgm, write_volume

log = logging.getLogger("relevance_forge")

EXIT_CODES = """exit codes:
  0  success
  1  usage error (invalid command-line option)
  2  config error (unknown key, bad value, invalid spec)
  3  missing input file or directory
  4  file format error
  5  training divergence (NaN/Inf)
  6  degenerate relevance map (constant combined scores)

environment:
  {env}  overrides the config seed when set
""".format(env=SEED_ENV)


def _keys_epilog(command: str) -> str:
    keys = keys_for(command)
    if not keys:
        return "config keys: none\n\n" + EXIT_CODES
    width = max(len(k.name) for k in keys)
    lines = ["config keys read:"] + [f"  {k.name.ljust(width)}  {k.help}" for k in keys]
    return "\n".join(lines) + "\n\n" + EXIT_CODES


def _require(path, what: str) -> Path:
    if path is None:
        raise MissingInputError(f"{what} path not given")
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_info(out: Path, entries: dict) -> None:
    """Run metadata; unlike outputs, this is descriptive and may vary between runs."""
    text = "".join(f"{k}={v}\n" for k, v in entries.items())
    (out / "run_metadata.txt").write_text(text)


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _outdir(args)
    spec = cfg.phantom_spec()
    spec.validate()
    labels = phantom.assign_labels(spec)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            cases = list(pool.map(phantom.make_case, [spec] * spec.count, range(spec.count), labels))
    else:
        cases = [phantom.make_case(spec, i, labels[i]) for i in range(spec.count)]
    parts = dict(zip(("train", "val", "test"), phantom.split(cases, cfg["split"], seed=cfg["seed"])))
    rows = write_dataset(out, parts)
    cfg.write_resolved(out)
    log.info("wrote %d cases to %s", len(rows), out)
    return 0


def cmd_train_classifier(args, cfg: RunConfig) -> int:
    data = _require(args.data, "dataset directory")
    train = load_split(data, "train", cfg["crop_dims"])
    val = load_split(data, "val", cfg["crop_dims"])
    out = _outdir(args)
    spec = cfg.classifier_spec(train.x.shape[1], train.x.shape[2:])
    t0 = time.perf_counter()
    model, metrics = train_classifier(
        train.x, train.y, val.x, val.y, spec, cfg["clf_lr"], cfg["clf_epochs"], cfg["clf_batch"], cfg["seed"]
    )
    save_params(model, out / "classifier.rnet")
    write_metrics_tsv(metrics, out / "classifier_metrics.tsv")
    cfg.write_resolved(out)
    _write_run_info(
        out,
        {
            "command": "train-classifier",
            "best_epoch": model.epoch,
            "best_val_auc": metrics[model.epoch].val_metric,
            "checksum": model.checksum(),
            "wall_seconds": f"{time.perf_counter() - t0:.1f}",
        },
    )
    log.info("classifier best epoch %d val AUC %.4f", model.epoch, metrics[model.epoch].val_metric)
    return 0


def cmd_train_generator(args, cfg: RunConfig) -> int:
    data = _require(args.data, "dataset directory")
    clf_path = _require(args.classifier, "classifier file")
    classifier = load_params(clf_path, expect=CLASSIFIER)
    train = load_split(data, "train", cfg["crop_dims"])
    val = load_split(data, "val", cfg["crop_dims"])
    out = _outdir(args)
    spec = cfg.generator_spec(train.x.shape[1], train.x.shape[2:])
    before = classifier.checksum()
    steps: list = []
    t0 = time.perf_counter()
    model, metrics = train_generator(
        train.x,
        val.x,
        classifier,
        spec,
        cfg["gen_lr"],
        cfg["gen_epochs"],
        cfg["gen_batch"],
        cfg.loss_config(),
        cfg["seed"],
        step_log=steps,
    )
    save_params(model, out / "generator.rnet")
    write_metrics_tsv(metrics, out / "generator_metrics.tsv")
    lines = ["\t".join(LossBreakdown.TSV_HEADER)] + [parts.tsv_row(step) for step, parts in steps]
    (out / "generator_steps.tsv").write_text("\n".join(lines) + "\n")
    cfg.write_resolved(out)
    _write_run_info(
        out,
        {
            "command": "train-generator",
            "gen_lr": cfg["gen_lr"],
            "best_epoch": model.epoch,
            "val_gap_epoch0": metrics[0].extra["val_gap"],
            "val_gap_best": metrics[model.epoch].extra["val_gap"],
            "classifier_checksum_before": before,
            "classifier_checksum_after": classifier.checksum(),
            "wall_seconds": f"{time.perf_counter() - t0:.1f}",
        },
    )
    log.info("generator best epoch %d (lr %g)", model.epoch, cfg["gen_lr"])
    return 0


def cmd_relevance(args, cfg: RunConfig) -> int:
    case_path = _require(args.case, "case volume")
    gen_path = _require(args.generator, "generator file")
    generator = load_params(gen_path, expect=GENERATOR)
    volume = preprocess(read_volume(case_path), tuple(cfg["crop_dims"]) or None)
    out = _outdir(args)
    rcfg = cfg.relevance_config()
    mask = predict_masks(generator, volume.voxels[None])[0]
    rm = generate_relevance(volume, mask, rcfg)
    stem = case_path.stem
    write_volume(rm.combined_volume(), out / f"{stem}.combined.rvol")
    write_volume(rm.bins_volume(), out / f"{stem}.ranks.rvol")
    for c, sp in enumerate(rm.superpixels):
        write_volume(sp.to_volume(), out / f"{stem}.superpixels{c}.rvol")
    counts = ",".join(str(sp.count) for sp in rm.superpixels)
    (out / "relevance.tsv").write_text(
        "case\tbins\tscore_direction\tcombined\tranks\tcount\n"
        f"{stem}\t{rm.bin_count}\t{rm.score_direction}\t{stem}.combined.rvol\t{stem}.ranks.rvol\tcount={counts}\n"
    )
    if args.pgm:
        combined = rm.combined_volume()
        for axis in range(3):
            index = combined.dims[axis] // 2
            write_pgm(extract_slice(combined, 0, axis, index), out / f"{stem}.combined.axis{axis}.pgm")
    cfg.write_resolved(out)
    log.info("relevance for %s: rank-0 voxels %d", stem, int((rm.bins == 0).sum()))
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    methods = cfg["methods"]
    data = _require(args.data, "dataset directory")
    # Every input is checked before any work, so a failure leaves no partial report.
    gen_path = _require(args.generator, "generator file") if "ours" in methods else None
    clf_path = _require(args.classifier, "classifier file") if "blank" in methods else None
    generator = load_params(gen_path, expect=GENERATOR) if gen_path else None
    classifier = load_params(clf_path, expect=CLASSIFIER) if clf_path else None
    test = load_split(data, "test", cfg["crop_dims"])
    cases = [EvalCase(r.index, v, t) for r, v, t in zip(test.rows, test.volumes, test.truths)]
    report = evaluate_dataset(cases, generator, classifier, cfg.relevance_config(), methods, workers=args.workers)
    out = _outdir(args)
    report.write_tsv(out / "report.tsv")
    table = report.format_table()
    (out / "report.txt").write_text(table)
    cfg.write_resolved(out)
    print(table, end="")
    return 0


def cmd_export_slices(args, cfg: RunConfig) -> int:
    src = _require(args.input, "input volume")
    volume = read_volume(src)
    out = _outdir(args)
    axis = args.axis
    if not 0 <= axis <= 2:
        raise UsageError(f"axis must be 0, 1 or 2, got {axis}")
    index = volume.dims[axis] // 2 if args.index is None else args.index
    channels = range(volume.channels) if args.channel is None else [args.channel]
    for c in channels:
        write_pgm(extract_slice(volume, c, axis, index), out / f"{src.stem}.c{c}.axis{axis}.{index}.pgm")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic phantom dataset"),
    "train-classifier": (cmd_train_classifier, "train the volume classifier"),
    "train-generator": (cmd_train_generator, "train the mask generator against a frozen classifier"),
    "relevance": (cmd_relevance, "compute a ranked relevance map for one case"),
    "evaluate": (cmd_evaluate, "score relevance maps on the test split"),
    "export-slices": (cmd_export_slices, "write grayscale PGM slices of a volume"),
}


class _Parser(argparse.ArgumentParser):
    """Command-line mistakes exit 1, keeping 2 for config errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error[usage]: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="relevance-forge",
        description="Perturbation-mask relevance maps for 3D volume classifiers.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(
            name, help=help_text, description=help_text, epilog=_keys_epilog(name),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", help="key=value config file (defaults when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
        p.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
        if name in ("train-classifier", "train-generator", "evaluate"):
            p.add_argument("--data", help="dataset directory written by gen-data")
        if name in ("train-generator", "evaluate"):
            p.add_argument("--classifier", help="classifier .rnet file")
        if name in ("relevance", "evaluate"):
            p.add_argument("--generator", help="generator .rnet file")
        if name == "relevance":
            p.add_argument("--case", help="case .rvol file")
            p.add_argument("--pgm", action="store_true", help="also write mid-slice PGMs of the combined scores")
        if name == "export-slices":
            p.add_argument("--input", help=".rvol file to slice")
            p.add_argument("--axis", type=int, default=0, help="slice axis 0-2 (default 0)")
            p.add_argument("--index", type=int, default=None, help="slice index (default middle)")
            p.add_argument("--channel", type=int, default=None, help="channel (default all)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    handler, _ = COMMANDS[args.command]
    try:
        if args.workers < 1:
            raise UsageError(f"--workers must be >= 1, got {args.workers}")
        cfg = RunConfig.load(args.config)
        return handler(args, cfg)
    except ForgeError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

