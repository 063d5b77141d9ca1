"""Command-line front end: verification, spectrum studies, density tables, training.

Each subcommand reads a JSON config, validates it (unknown keys are
rejected), and writes its artifacts under --out.  Every output file embeds
the SHA-256 of the resolved config (after any --seed override) so artifacts
can be traced back to the exact run that produced them.

Exit codes: 0 success, 1 check or training failure, 2 usage/config error.
"""

import argparse
import hashlib
import json
import os
import re
import sys

import numpy as np

from .data import load_idx, synthetic_blobs, train_val_split
from .errors import (
    ConfigError,
    NearKinkError,
    NoValidProbeError,
    OrthojacError,
    TrainingDivergedError,
)
from .layers import LimitLayer, layer_from_json
from .linalg import svd_values
from .rng import SplitMix64, derive_seed
from .train import TrainConfig, make_network, save_snapshot, train
from .verify import (
    DEFAULT_MARGIN,
    PASS_TOL,
    check_dynamical_isometry,
    density_gap,
    spectrum_probe,
    stack_jacobian,
)

HISTOGRAM_BINS = 64
HISTOGRAM_RANGE = 2.0
# values this close to a bin edge count toward the upper bin, so spectra
# sitting exactly on an edge (orthogonal stacks at 1.0) pool into one bin
EDGE_SNAP = 1e-9
CRITERIA = ("orthogonal", "partial", "sv_interval", "isometry", "none")
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _config_hash(command: str, config: dict) -> str:
    return hashlib.sha256(
        _canonical({"command": command, **config}).encode()
    ).hexdigest()


def _check_keys(obj, context: str, required: tuple, optional: tuple = ()) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be a JSON object")
    unknown = sorted(set(obj) - set(required) - set(optional))
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise ConfigError(f"{context}: missing keys {missing}")


def _positive_int(value, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return value


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(config, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config


def _write_text(out_dir: str, filename: str, text: str) -> str:
    path = os.path.join(out_dir, filename)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

ENTRY_KEYS = ("criterion", "probes", "seed", "margin", "input_scale", "tol",
              "epsilon")


def cmd_verify(config: dict, out_dir: str, digest: str) -> int:
    _check_keys(config, "verify config", ("layers",), ("command",) + ENTRY_KEYS)
    entries = config["layers"]
    if not isinstance(entries, list) or not entries:
        raise ConfigError("verify config: 'layers' must be a non-empty list")

    defaults = {
        "criterion": config.get("criterion", "orthogonal"),
        "probes": config.get("probes", 1000),
        "seed": config.get("seed", 0),
        "margin": config.get("margin", DEFAULT_MARGIN),
        "input_scale": config.get("input_scale", 1.0),
        "tol": config.get("tol", PASS_TOL),
        "epsilon": config.get("epsilon"),
    }

    seen = set()
    all_passed = True
    for entry in entries:
        _check_keys(entry, "layer entry", ("name", "layer"), ENTRY_KEYS)
        name = entry["name"]
        if not isinstance(name, str) or not _NAME_RE.match(name):
            raise ConfigError(f"layer entry name {name!r} is not filename-safe")
        if name in seen:
            raise ConfigError(f"duplicate layer entry name {name!r}")
        seen.add(name)

        opts = {key: entry.get(key, defaults[key]) for key in ENTRY_KEYS}
        criterion = opts["criterion"]
        if criterion not in CRITERIA:
            raise ConfigError(
                f"layer entry {name!r}: criterion must be one of {CRITERIA}"
            )
        layer = layer_from_json(entry["layer"])
        probes = _positive_int(opts["probes"], f"{name}.probes")

        if criterion == "isometry":
            if not isinstance(layer, LimitLayer):
                raise ConfigError(
                    f"layer entry {name!r}: isometry criterion needs a limit layer"
                )
            report = check_dynamical_isometry(
                layer, probes, opts["seed"],
                input_scale=opts["input_scale"], margin=opts["margin"],
                tol=opts["tol"],
            )
        else:
            report = spectrum_probe(
                layer, probes, opts["seed"],
                input_scale=opts["input_scale"], margin=opts["margin"],
                criterion=criterion, tol=opts["tol"], epsilon=opts["epsilon"],
            )

        blob = dict(report.to_json(), name=name, config_sha256=digest)
        _write_text(out_dir, f"verify_{name}.json",
                    json.dumps(blob, sort_keys=True, indent=2) + "\n")
        verdict = "pass" if report.passed else "FAIL"
        print(f"{name}: {verdict} (max_orth_defect={report.max_orth_defect:.3e},"
              f" max_partial_defect={report.max_partial_defect:.3e})")
        all_passed = all_passed and bool(report.passed)

    return 0 if all_passed else 1


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------


def cmd_spectrum(config: dict, out_dir: str, digest: str) -> int:
    _check_keys(config, "spectrum config", ("layers",),
                ("command", "seed", "probes", "margin", "input_scale"))
    specs = config["layers"]
    if not isinstance(specs, list) or not specs:
        raise ConfigError("spectrum config: 'layers' must be a non-empty list")
    stack = [layer_from_json(spec) for spec in specs]
    width = stack[0].width
    probes = _positive_int(config.get("probes", 1000), "probes")
    seed = config.get("seed", 0)
    margin = config.get("margin", DEFAULT_MARGIN)
    input_scale = config.get("input_scale", 1.0)

    # same probe stream as spectrum_probe, so the two commands agree
    gen = SplitMix64(derive_seed(seed, 0x50))
    rows = []
    counts = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
    scale = HISTOGRAM_BINS / HISTOGRAM_RANGE
    skipped = 0
    for index in range(probes):
        x = input_scale * gen.gaussian(width)
        try:
            jac = stack_jacobian(stack, x, margin)
        except NearKinkError:
            skipped += 1
            continue
        values = svd_values(jac)
        rows.append((index, float(values.min()), float(values.max())))
        bins = np.clip(((values + EDGE_SNAP) * scale).astype(np.int64),
                       0, HISTOGRAM_BINS - 1)
        np.add.at(counts, bins, 1)

    if not rows:
        raise NoValidProbeError(
            f"all {probes} probes fell within the kink margin {margin}"
        )

    header = f"# config_sha256={digest}\n"
    probe_lines = [header, "probe,sv_min,sv_max\n"]
    probe_lines += [f"{i},{lo!r},{hi!r}\n" for i, lo, hi in rows]
    _write_text(out_dir, "spectrum_probes.csv", "".join(probe_lines))

    hist_lines = [header, "bin_low,bin_high,count\n"]
    for k in range(HISTOGRAM_BINS):
        low = k * HISTOGRAM_RANGE / HISTOGRAM_BINS
        high = (k + 1) * HISTOGRAM_RANGE / HISTOGRAM_BINS
        hist_lines.append(f"{low!r},{high!r},{counts[k]}\n")
    _write_text(out_dir, "spectrum_histogram.csv", "".join(hist_lines))

    print(f"spectrum: {len(rows)} probes ({skipped} skipped near kinks),"
          f" sv range [{min(r[1] for r in rows):.6f},"
          f" {max(r[2] for r in rows):.6f}]")
    return 0


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------


def cmd_density(config: dict, out_dir: str, digest: str) -> int:
    _check_keys(config, "density config", ("layer",),
                ("command", "seed", "probes", "radius", "resolutions"))
    layer = layer_from_json(config["layer"])
    if not isinstance(layer, LimitLayer):
        raise ConfigError("density config: 'layer' must be a limit layer spec")
    seed = config.get("seed", 0)
    probes = _positive_int(config.get("probes", 400), "probes")
    radius = float(config.get("radius", 1.5))
    resolutions = config.get("resolutions", [2, 4, 8, 16])
    if not isinstance(resolutions, list) or not resolutions:
        raise ConfigError("density config: 'resolutions' must be a non-empty list")
    resolutions = sorted(_positive_int(r, "resolution") for r in resolutions)

    reports = [density_gap(layer, res, radius, probes, seed)
               for res in resolutions]

    lines = [f"# config_sha256={digest}\n", "resolution,measured_gap,theoretical_bound\n"]
    for rep in reports:
        lines.append(f"{rep.resolution},{rep.measured_gap!r},{rep.theoretical_bound!r}\n")
    _write_text(out_dir, "density.csv", "".join(lines))

    bounded = all(rep.measured_gap <= rep.theoretical_bound for rep in reports)
    refines = reports[-1].measured_gap <= reports[0].measured_gap
    for rep in reports:
        print(f"resolution {rep.resolution}: measured={rep.measured_gap:.6e}"
              f" bound={rep.theoretical_bound:.6e}")
    if not bounded:
        print("density: measured gap exceeded the theoretical bound")
    if not refines:
        print("density: gap did not shrink from coarsest to finest grid")
    return 0 if bounded and refines else 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

FASHION_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def _load_train_data(section: dict, seed: int, data_root) -> tuple:
    _check_keys(section, "data section", ("kind",),
                ("classes", "dim", "per_class", "spread", "val_fraction",
                 "train_size", "val_size", "seed"))
    kind = section.get("kind")
    if kind == "blobs":
        dataset = synthetic_blobs(
            _positive_int(section.get("classes", 2), "data.classes"),
            _positive_int(section.get("dim", 8), "data.dim"),
            _positive_int(section.get("per_class", 100), "data.per_class"),
            float(section.get("spread", 0.1)),
            section.get("seed", derive_seed(seed, 0xDA)),
        )
        return train_val_split(dataset, section.get("val_fraction", 0.2),
                               derive_seed(seed, 0xDB))
    if kind == "fashion_mnist":
        if not data_root:
            raise ConfigError(
                "fashion_mnist data needs --data DIR or the ORTHOJAC_DATA"
                " environment variable"
            )
        images = os.path.join(data_root, FASHION_FILES[0])
        labels = os.path.join(data_root, FASHION_FILES[1])
        for path in (images, labels):
            if not os.path.exists(path):
                raise ConfigError(f"dataset file not found: {path}")
        full = load_idx(images, labels)
        train_size = _positive_int(section.get("train_size", 10000),
                                   "data.train_size")
        val_size = _positive_int(section.get("val_size", 2000), "data.val_size")
        if train_size + val_size > full.size:
            raise ConfigError(
                f"requested {train_size}+{val_size} examples but the dataset"
                f" has {full.size}"
            )
        perm = SplitMix64(derive_seed(seed, 0xDC)).permutation(full.size)
        train_set = full.subset(perm[:train_size], tag="train")
        val_set = full.subset(perm[train_size:train_size + val_size], tag="val")
        return train_set, val_set
    raise ConfigError(f"data section: unknown kind {kind!r}")


def cmd_train(config: dict, out_dir: str, digest: str, data_root) -> int:
    _check_keys(config, "train config", ("model", "width", "depth", "lr0",
                                         "epochs", "data"),
                ("command", "batch_size", "alpha", "patience", "seed"))
    seed = config.get("seed", 0)
    train_set, val_set = _load_train_data(config["data"], seed, data_root)

    width = _positive_int(config["width"], "width")
    depth = config["depth"]
    if not isinstance(depth, int) or isinstance(depth, bool) or depth < 0:
        raise ConfigError(f"depth must be a non-negative integer, got {depth!r}")
    network = make_network(config["model"], width, depth,
                           train_set.class_count, train_set.dim, seed)
    train_cfg = TrainConfig(
        depth=depth,
        lr0=float(config["lr0"]),
        total_epochs=_positive_int(config["epochs"], "epochs"),
        batch_size=_positive_int(config.get("batch_size", 512), "batch_size"),
        alpha=float(config.get("alpha", 0.0)),
        patience=_positive_int(config.get("patience", 10), "patience"),
        seed=seed,
    )

    try:
        metrics = train(network, train_cfg, train_set, val_set)
    except TrainingDivergedError as exc:
        print(f"training diverged at epoch {exc.epoch}, batch {exc.batch}",
              file=sys.stderr)
        return 1

    _write_text(out_dir, "metrics.csv",
                f"# config_sha256={digest}\n" + metrics.to_csv())
    summary = dict(metrics.summary(), model=config["model"],
                   config_sha256=digest)
    _write_text(out_dir, "summary.json",
                json.dumps(summary, sort_keys=True, indent=2) + "\n")
    save_snapshot(os.path.join(out_dir, "snapshot.bin"), network,
                  meta={"model": config["model"], "config_sha256": digest})
    print(f"best_val_acc={metrics.best_val_acc!r} best_epoch={metrics.best_epoch}"
          f" epochs_run={len(metrics.rows)} stopped_early={metrics.stopped_early}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orthojac",
        description="Orthogonal-Jacobian layer toolkit: verification,"
                    " spectrum studies, density tables, and training runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in (
        ("verify", "check layer specs against defect/spectrum criteria"),
        ("spectrum", "probe a layer stack and write singular-value tables"),
        ("density", "run the grid-refinement gap experiment"),
        ("train", "train a model and write metrics, summary, and snapshot"),
    ):
        cmd = sub.add_parser(name, help=blurb)
        cmd.add_argument("--config", required=True, help="path to a JSON config")
        cmd.add_argument("--out", default=".", help="output directory")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        if name == "train":
            cmd.add_argument("--data", default=None,
                             help="dataset root (default: $ORTHOJAC_DATA)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _load_config(args.config)
        declared = config.get("command")
        if declared is not None and declared != args.command:
            raise ConfigError(
                f"config declares command {declared!r} but {args.command!r}"
                " was requested"
            )
        if args.seed is not None:
            config["seed"] = args.seed
        digest = _config_hash(args.command, config)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "verify":
            return cmd_verify(config, args.out, digest)
        if args.command == "spectrum":
            return cmd_spectrum(config, args.out, digest)
        if args.command == "density":
            return cmd_density(config, args.out, digest)
        data_root = args.data or os.environ.get("ORTHOJAC_DATA")
        return cmd_train(config, args.out, digest, data_root)
    except (NoValidProbeError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OrthojacError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
