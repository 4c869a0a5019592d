"""Command-line entry point: ``cloudfcn <command> --config pipeline.toml``.

Commands: correct-gt, prepare, train, predict, evaluate (plus ``synth`` to
write a small synthetic demo dataset). Exit status is 0 on success, 1 on a
configuration or usage error, and 2 when some scenes failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import gt_correction, metrics, patches, synthetic, training, unet
from .config import PipelineConfig, load_config
from .errors import CloudFCNError, ConfigError
from .raster_io import RGBN, Band, read_mask, read_raster, stack_bands, write_mask, write_raster

log = logging.getLogger("cloudfcn")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2
CSV_HEADER = ["scene_id", "tp", "tn", "fp", "fn", "jaccard", "precision", "recall", "accuracy"]


def band_path(cfg: PipelineConfig, scene_id: str, band: Band) -> Path:
    return cfg.scenes_dir / scene_id / f"{band.name}.csr"


def _out(cfg: PipelineConfig, *parts: str) -> Path:
    p = cfg.output_dir.joinpath(*parts)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_correct_gt(cfg: PipelineConfig, args) -> int:
    cfg.require_paths("scenes_dir", "output_dir")
    failures = []
    report = []
    for sid in cfg.scene_ids():
        try:
            band = read_raster(band_path(cfg, sid, cfg.gt.band), sid)
            qa = read_raster(band_path(cfg, sid, Band.QA), sid)
            c = gt_correction.correct_scene(
                band, qa, cfg.qa, cfg.gt.threshold, cfg.gt.percentile, cfg.gt.fallback_threshold
            )
        except (OSError, CloudFCNError, ValueError) as exc:
            failures.append(sid)
            report.append(f"scene {sid}\nerror {exc}\n")
            print(f"{sid}: error: {exc}", file=sys.stderr)
            continue
        write_mask(c.default_gt, _out(cfg, "gt", sid, "default_gt.pgm"))
        write_mask(c.snow, _out(cfg, "gt", sid, "snow.pgm"))
        write_mask(c.corrected_gt, _out(cfg, "gt", sid, "corrected_gt.pgm"))
        text = gt_correction.format_stats_report(sid, c)
        _out(cfg, "gt", sid, "stats.txt").write_text(text)
        report.append(text)
        print(f"{sid}: threshold {c.threshold:.6g}, removed {int((c.default_gt.bits & c.snow.bits).sum())} px")
    _out(cfg, "gt", "report.txt").write_text("\n".join(report))
    return EXIT_PARTIAL if failures else EXIT_OK


MANIFEST_HEADER = ["patch_id", "scene_id", "row", "col", "y", "x"]


def cmd_prepare(cfg: PipelineConfig, args) -> int:
    cfg.require_paths("scenes_dir", "output_dir")
    size = cfg.network.input_size
    rows = []
    failures = []
    for sid in cfg.scene_ids("train"):
        try:
            rasters = [read_raster(band_path(cfg, sid, b), sid) for b in RGBN]
            gt = read_mask(cfg.output_dir / "gt" / sid / f"{cfg.gt_source}_gt.pgm")
            scene = stack_bands(rasters)[0]
            if gt.shape != scene.shape[1:]:
                raise ConfigError(f"ground truth {gt.shape} does not match bands {scene.shape[1:]}")
        except (OSError, CloudFCNError, ValueError) as exc:
            failures.append(sid)
            print(f"{sid}: error: {exc}", file=sys.stderr)
            continue
        grid = patches.PatchGrid(scene.shape[1], scene.shape[2], cfg.patch.native, size)
        for i, (x, h) in enumerate(patches.training_pairs(scene, gt.bits, grid)):
            pid = f"{sid}_{i:04d}"
            np.savez(_out(cfg, "patches", f"{pid}.npz"), x=x, h=h)
            r, c = divmod(i, grid.cols)
            y0, x0 = grid.origin(i)
            rows.append([pid, sid, r, c, y0, x0])
    with open(_out(cfg, "patches", "manifest.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    print(f"wrote {len(rows)} patches")
    return EXIT_PARTIAL if failures else EXIT_OK


def load_patch_dataset(directory: Path) -> list[tuple[np.ndarray, np.ndarray]]:
    with open(directory / "manifest.csv", newline="") as f:
        entries = list(csv.DictReader(f))
    data = []
    for e in entries:
        with np.load(directory / f"{e['patch_id']}.npz") as z:
            data.append((z["x"], z["h"].astype(np.float32)))
    return data


def cmd_train(cfg: PipelineConfig, args) -> int:
    cfg.require_paths("output_dir")
    pdir = cfg.output_dir / "patches"
    if not (pdir / "manifest.csv").exists():
        raise ConfigError(f"no patch manifest at {pdir}; run prepare first")
    data = load_patch_dataset(pdir)
    ckpt = _out(cfg, "model", "checkpoint.csck")
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not resume.exists():
        raise ConfigError(f"resume checkpoint {resume} not found")

    def progress(epoch, loss):
        print(f"epoch {epoch}/{cfg.train.epochs} loss {loss:.6f}", flush=True)

    res = training.train(
        data,
        cfg.train,
        cfg.network,
        checkpoint_path=ckpt,
        log_path=_out(cfg, "model", "loss_log.csv"),
        resume=resume,
        stop_after=args.stop_after,
        on_epoch=progress,
    )
    print(f"checkpoint {ckpt} at epoch {res.epoch}")
    return EXIT_OK


def cmd_predict(cfg: PipelineConfig, args) -> int:
    cfg.require_paths("scenes_dir", "output_dir")
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "model" / "checkpoint.csck"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} not found")
    params = unet.load_params(ckpt, expected=cfg.network)
    failures = []
    for sid in cfg.scene_ids("test"):
        try:
            rasters = [read_raster(band_path(cfg, sid, b), sid) for b in RGBN]
            prob, mask = patches.predict_scene(params, rasters, cfg.patch.native, cfg.patch.threshold)
        except (OSError, CloudFCNError, ValueError) as exc:
            failures.append(sid)
            print(f"{sid}: error: {exc}", file=sys.stderr)
            continue
        write_raster(patches.prob_to_raster(prob, sid), _out(cfg, "pred", f"{sid}_prob.csr"))
        write_mask(mask, _out(cfg, "pred", f"{sid}_mask.pgm"))
        print(f"{sid}: {mask.width}x{mask.height}, cloud fraction {mask.bits.mean():.4f}")
    return EXIT_PARTIAL if failures else EXIT_OK


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    return f"{v:.6f}"


def evaluate_dirs(pred_dir: Path, truth_dir: Path, scene_ids=None) -> tuple[str, int]:
    """Build the evaluation CSV for ``scene_ids`` (default: every ``<scene>.pgm`` in ``truth_dir``).

    Returns the CSV text and the number of scenes that could not be scored.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    counts = []
    errors = 0
    if scene_ids is None:
        scene_ids = sorted(p.stem for p in truth_dir.glob("*.pgm"))
    for sid in scene_ids:
        try:
            truth = read_mask(truth_dir / f"{sid}.pgm")
            pred = read_mask(pred_dir / f"{sid}_mask.pgm")
            c = metrics.confusion(pred, truth)
        except (OSError, CloudFCNError) as exc:
            errors += 1
            buf.write(f"# error {sid}: {' '.join(str(exc).split())}\n")
            continue
        r = metrics.compute_metrics(c)
        counts.append(c)
        w.writerow([sid, c.tp, c.tn, c.fp, c.fn, *map(_fmt, (r.jaccard, r.precision, r.recall, r.overall_accuracy))])
    if counts:
        total = sum(counts, metrics.ConfusionCounts())
        for mode in ("pooled", "mean"):
            r = metrics.aggregate(counts, mode)
            cells = [total.tp, total.tn, total.fp, total.fn] if mode == "pooled" else ["", "", "", ""]
            w.writerow([f"# {mode}", *cells, *map(_fmt, (r.jaccard, r.precision, r.recall, r.overall_accuracy))])
    return buf.getvalue(), errors


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    pred_dir = Path(args.pred) if args.pred else (cfg.output_dir / "pred" if cfg.output_dir else None)
    truth_dir = Path(args.truth) if args.truth else cfg.truth_dir
    if pred_dir is None or not pred_dir.is_dir():
        raise ConfigError(f"prediction directory {pred_dir} not found")
    if truth_dir is None or not truth_dir.is_dir():
        raise ConfigError(f"truth directory {truth_dir} not found")
    text, errors = evaluate_dirs(pred_dir, truth_dir, cfg.test_scenes)
    if cfg.output_dir is not None:
        _out(cfg, "eval", "report.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_PARTIAL if errors else EXIT_OK


SYNTH_CONFIG = """\
seed = 0

[paths]
scenes = "scenes"
output = "out"
truth = "truth"

[scenes]
train = [{train}]
test = [{test}]

[qa]
cloud_bits = [[4, 1]]
snow_bits = [[10, 1]]

[gt]
band = "B2"
threshold = "auto"
percentile = 95.0
fallback_threshold = 0.5

[network]
input_size = 32
base_channels = 4
channel_cap = 64

[patch]
native = 64
threshold = 0.5

[train]
epochs = 20
batch_size = 4
lr = 1e-4
gt_source = "corrected"
"""


def cmd_synth(args) -> int:
    root = Path(args.directory)
    ids = [f"s{i}" for i in range(args.scenes)]
    for i, sid in enumerate(ids):
        # keep the snow small next to the cloud so the percentile threshold applies
        snow = (max(4, args.size * 7 // 64), max(5, args.size * 9 // 64))
        sc = synthetic.snow_scene(size=args.size, seed=args.seed + i, snow_size=snow, scene_id=sid)
        (root / "scenes" / sid).mkdir(parents=True, exist_ok=True)
        for band, r in sc.bands.items():
            write_raster(r, root / "scenes" / sid / f"{band.name}.csr")
        write_raster(sc.qa, root / "scenes" / sid / "QA.csr")
        (root / "truth").mkdir(parents=True, exist_ok=True)
        write_mask(sc.true_cloud, root / "truth" / f"{sid}.pgm")
    n_train = max(1, len(ids) - max(1, len(ids) // 4)) if len(ids) > 1 else 1
    quote = lambda xs: ", ".join(f'"{x}"' for x in xs)  # noqa: E731
    (root / "pipeline.toml").write_text(SYNTH_CONFIG.format(train=quote(ids[:n_train]), test=quote(ids[n_train:] or ids)))
    print(f"wrote {len(ids)} scenes and {root / 'pipeline.toml'}")
    return EXIT_OK


COMMANDS = {
    "correct-gt": cmd_correct_gt,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are validation errors; exit status 2 is reserved for partial scene failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cloudfcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline TOML file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threshold", type=float, help="override the gt (correct-gt) or mask (predict) threshold")
        if name == "train":
            p.add_argument("--resume", help="continue from this checkpoint")
            p.add_argument("--stop-after", type=int, help="train at most this many epochs in this run")
        if name == "predict":
            p.add_argument("--checkpoint", help="checkpoint file (default: <output>/model/checkpoint.csck)")
        if name == "evaluate":
            p.add_argument("--pred", help="directory of <scene>_mask.pgm predictions")
            p.add_argument("--truth", help="directory of <scene>.pgm reference masks")
    p = sub.add_parser("synth", help="write a synthetic demo dataset and config")
    p.add_argument("directory")
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "synth":
        return cmd_synth(args)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.threshold, args.command)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CloudFCNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
