"""Command-line interface: saliency maps, refinement, evaluation and toy training.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Settings come from (lowest to highest priority) built-in defaults, a
``key=value`` config file named by ``--config`` or ``$SALREFINE_CONFIG``,
and command-line flags of the same name.
"""

import argparse
import csv
import io
import logging
import math
import os
import re
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imagery
from .gradcam import DEFAULT_SCALES, N_CLASSES, cam, class_activation_map, multiscale_cam, neuron_weights
from .imagery import FormatError, atomic_write_bytes, load_graymap, load_image, save_graymap
from .metrics import batch_eval
from .refine import DegenerateSeedWarning, SuperpixelRefiner
from .sum import SumConfig, active_area, final_map, update_loop
from .toyscorer import Batch, ToyScorer, load_checkpoint, masked_inputs, save_checkpoint, train_step

log = logging.getLogger("salrefine")

LABEL_RE = re.compile(r"_count([0-4])\.png$")


class UsageError(Exception):
    pass


@dataclass
class PipelineConfig:
    omega: float = 50.0
    sigma: float = 0.5
    alpha: float = 1.0
    iterations: int = 10
    superpixels: int = 200
    seed_hi: float = 0.7
    seed_lo: float = 0.2
    theta1: float = 1.0
    theta2: float = 1e-6
    scales: tuple = DEFAULT_SCALES
    jobs: int = 1
    seed: int = 0
    lr: float = 0.05
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 5e-4
    channels: int = 8
    extras: dict = field(default_factory=dict)

    @property
    def sum(self):
        return SumConfig(self.omega, self.sigma, self.alpha, self.iterations)

    def validate(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise UsageError("scales must be a non-empty list of positive numbers")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")
        if self.superpixels < 1:
            raise UsageError("superpixels must be >= 1")
        try:
            self.sum
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


_KEYS = {name: f.type for name, f in PipelineConfig.__dataclass_fields__.items() if name != "extras"}


def _parse_value(key, text):
    kind = _KEYS[key]
    kind = {"float": float, "int": int, "tuple": tuple}.get(kind, kind)
    try:
        if kind is tuple:
            return tuple(float(v) for v in text.replace(",", " ").split())
        return kind(text)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {text!r}") from exc


def read_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _KEYS:
            raise UsageError(f"{path}:{lineno}: expected key=value with a known key")
        values[key] = _parse_value(key, value.strip())
    return values


def build_config(args):
    cfg = PipelineConfig()
    config_path = args.config or os.environ.get("SALREFINE_CONFIG")
    if config_path:
        for key, value in read_config_file(config_path).items():
            setattr(cfg, key, value)
    for key in _KEYS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, _parse_value(key, value) if isinstance(value, str) else value)
    cfg.validate()
    return cfg


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _require_parent(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")


def _check_class(value):
    if value is not None and not 0 <= value < N_CLASSES:
        raise UsageError(f"--class must be in 0..{N_CLASSES - 1}, got {value}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_cam(args, cfg):
    _require_file(args.image, "image")
    _check_class(args.class_index)
    _require_parent(args.out)
    if args.model:
        _require_file(args.model, "model checkpoint")
        _require_file(args.model + ".manifest", "checkpoint manifest")
    elif args.features and args.grads:
        _require_file(args.features, "feature tensor")
        _require_file(args.grads, "gradient tensor")
    else:
        raise UsageError("cam needs either --model or both --features and --grads")

    image = load_image(args.image)
    h, w = image.shape[:2]
    if args.model:
        model = load_checkpoint(args.model)
        gray, used = class_activation_map(model, image, args.class_index, cfg.scales)
        log.info("explained class %d", used)
    else:
        acts = imagery.load_tensor(args.features)
        grads = imagery.load_tensor(args.grads)
        if acts.shape != grads.shape:
            raise UsageError(f"feature shape {acts.shape} != gradient shape {grads.shape}")
        c = 0 if args.class_index is None else args.class_index
        gray = multiscale_cam([cam(acts, neuron_weights(grads, c))], w, h)
    save_graymap(gray, args.out)
    return 0


def cmd_refine(args, cfg):
    _require_file(args.image, "image")
    _require_file(args.coarse, "coarse map")
    _require_parent(args.out)
    image = load_image(args.image)
    coarse = load_graymap(args.coarse)
    if coarse.shape != image.shape[:2]:
        raise UsageError(f"coarse map size {coarse.shape} does not match image {image.shape[:2]}")
    refiner = SuperpixelRefiner(n_segments=min(cfg.superpixels, coarse.size), seed_hi=cfg.seed_hi,
                                seed_lo=cfg.seed_lo, theta1=cfg.theta1, theta2=cfg.theta2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateSeedWarning)
        refined = refiner.fit_transform(image, coarse)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    log.info("%d superpixels, %d seeds", refiner.labeling_.count, refiner.system_.n_seeds)
    if args.labels_pgm:
        imagery.save_labels_pgm(refiner.labeling_.labels, args.labels_pgm)
    save_graymap(refined, args.out)
    return 0


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def cmd_sumdemo(args, cfg):
    _require_file(args.image, "image")
    _require_file(args.model, "model checkpoint")
    _check_class(args.class_index)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = load_image(args.image)
    model = load_checkpoint(args.model)
    records = update_loop(image, model, cfg.sum, args.class_index, cfg.scales)
    rows = []
    for rec in records:
        save_graymap(rec.map, out / f"iter_{rec.iteration_index:03d}.png")
        rows.append((rec.iteration_index, repr(rec.class_score), repr(active_area(rec.accumulated))))
    save_graymap(final_map(records), out / "accumulated.png")
    _write_csv(out / "summary.csv", ("iteration", "class_score", "active_area_fraction"), rows)
    return 0


def cmd_eval(args, cfg):
    for d in (args.map_dir, args.gt_dir):
        if not Path(d).is_dir():
            raise UsageError(f"directory not found: {d}")
    _require_parent(args.out)
    try:
        report = batch_eval(args.map_dir, args.gt_dir, jobs=cfg.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if report.skipped:
        print(f"warning: skipped {len(report.skipped)} unmatched file(s): "
              + ", ".join(report.skipped), file=sys.stderr)
    atomic_write_bytes(args.out, report.to_csv().encode("utf-8"))
    if args.json:
        atomic_write_bytes(Path(args.out).with_suffix(".json"), report.to_json().encode("utf-8"))
    return 0


def read_counted_dataset(directory):
    """Images named ``*_count{k}.png`` with k in 0..4; other names are skipped."""
    images, labels, skipped = [], [], []
    for path in sorted(Path(directory).glob("*.png")):
        match = LABEL_RE.search(path.name)
        if not match:
            skipped.append(path.name)
            continue
        images.append(load_image(path))
        labels.append(int(match.group(1)))
    return images, np.array(labels, dtype=int), skipped


def cmd_traintoy(args, cfg):
    if not Path(args.dataset).is_dir():
        raise UsageError(f"dataset directory not found: {args.dataset}")
    if args.epochs < 0:
        raise UsageError("epochs must be >= 0")
    _require_parent(args.out_model)
    images, labels, skipped = read_counted_dataset(args.dataset)
    for name in skipped:
        print(f"warning: skipping {name}: no _count<k> label", file=sys.stderr)
    if not images:
        raise UsageError(f"no labelled images in {args.dataset}")

    model = ToyScorer(n_channels=cfg.channels, random_state=cfg.seed, alpha=cfg.alpha,
                      omega=cfg.omega, sigma=cfg.sigma).initialize()
    size = model.working_size
    images = [imagery.resize_image(im, size, size) for im in images]
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    log_rows = []
    for epoch in range(1, args.epochs + 1):
        order = rng.permutation(len(images))
        sums = np.zeros(3)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            batch = Batch([images[i] for i in idx], labels[idx])
            if cfg.alpha:
                batch.masked_images = masked_inputs(model, batch.images, batch.labels,
                                                    cfg.omega, cfg.sigma)
            model, loss = train_step(model, batch, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.alpha)
            if not math.isfinite(loss.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {s}")
            sums += loss
        mean = sums / steps_per_epoch
        log_rows.append((epoch,) + tuple(repr(float(v)) for v in mean))
        log.info("epoch %d: total loss %.4f", epoch, mean[2])
    save_checkpoint(model, args.out_model)
    _write_csv(str(args.out_model) + ".loss.csv", ("epoch", "l_cls", "l_mask", "total"), log_rows)
    return 0


def cmd_synth(args, cfg):
    from .synth import write_blob_dataset

    counts = tuple(int(c) for c in args.counts.split(","))
    if not counts or any(not 0 <= c < N_CLASSES for c in counts):
        raise UsageError("--counts must list values in 0..4")
    write_blob_dataset(args.out_dir, args.n, counts=counts, seed=cfg.seed)
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common_flags():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline settings (override the config file)")
    g.add_argument("--config", help="key=value config file (default: $SALREFINE_CONFIG)")
    g.add_argument("--omega", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--iterations", type=int)
    g.add_argument("--superpixels", type=int)
    g.add_argument("--seed-hi", dest="seed_hi", type=float)
    g.add_argument("--seed-lo", dest="seed_lo", type=float)
    g.add_argument("--theta1", type=float)
    g.add_argument("--theta2", type=float)
    g.add_argument("--scales", help="comma-separated input scales, e.g. 0.5,0.75,1.0")
    g.add_argument("--jobs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--channels", type=int)
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="salrefine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cam", parents=[common], help="multi-scale Grad-CAM map")
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--model", help="toy scorer checkpoint")
    p.add_argument("--features", help="SALT tensor of activations")
    p.add_argument("--grads", help="SALT tensor of class-score gradients")
    p.add_argument("--class", dest="class_index", type=int)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("refine", parents=[common], help="superpixel-graph refinement")
    p.add_argument("image")
    p.add_argument("coarse")
    p.add_argument("out")
    p.add_argument("--labels-pgm", help="also dump the superpixel labels as 16-bit PGM")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("sumdemo", parents=[common], help="iterated masking demo")
    p.add_argument("image")
    p.add_argument("model")
    p.add_argument("out_dir")
    p.add_argument("--class", dest="class_index", type=int)
    p.set_defaults(func=cmd_sumdemo)

    p = sub.add_parser("eval", parents=[common], help="evaluate maps against ground truth")
    p.add_argument("map_dir")
    p.add_argument("gt_dir")
    p.add_argument("out")
    p.add_argument("--json", action="store_true", help="also write a JSON report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("traintoy", parents=[common], help="train the toy subitizing scorer")
    p.add_argument("dataset")
    p.add_argument("epochs", type=int)
    p.add_argument("out_model")
    p.set_defaults(func=cmd_traintoy)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic counted-blob dataset")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--counts", default="0,1,2")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.func(args, cfg)
    except (UsageError, FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any stage failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
