"""Command-line interface: ``gibly <command> [options]``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 input parse error.
"""

import argparse
import sys

import numpy as np

from . import _accel
from .bench import benchmark_config, benchmark_scene, compare_backends, run_benchmark
from .composite import RegularizerConfig
from .errors import (
    DegenerateLabels, EmptyCloud, InvalidSpec, IoError, ParseError, UnsupportedPly,
)
from .io import (
    read_cloud, write_cloud, write_features, write_layer_params, write_metrics,
)
from .kernels import PARAM_NAMES, GibKind, GibParams
from .layer import GiblyConfig, GiblyLayer
from .neighborhood import PointCloud, ScaleSchedule
from .training import (
    fit_shape, generate_scene, layer_gradcheck, scene_spec_from_dict, train_segmenter,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_PARSE = 0, 1, 2, 3


class ConfigError(Exception):
    pass


# key -> (type, default); every key is also a --flag with dashes for underscores
CONFIG_KEYS = {
    "base_radius": (float, 0.4),
    "scale_factor": (float, 2.0),
    "num_scales": (int, 3),
    "gibs_per_kind": (int, 2),
    "num_composites": (int, 16),
    "mc_samples": (int, 256),
    "projection_dim": (int, 32),
    "lambda_l1": (float, 1e-4),
    "lambda_l2": (float, 1e-4),
    "max_neighbors": (int, 0),
    "cell_size": (float, 0.0),
    "seed": (int, 0),
    "workers": (int, 1),
    "epochs": (int, 40),
    "lr": (float, 1e-2),
    "weight_decay": (float, 1e-4),
}


def load_config(path):
    """Read a flat TOML table of :data:`CONFIG_KEYS`; unknown keys are rejected."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    out = {}
    for key, value in data.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        typ = CONFIG_KEYS[key][0]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or \
                (typ is int and not isinstance(value, int)):
            raise ConfigError(f"config key {key!r} must be {typ.__name__}, got {value!r}")
        out[key] = typ(value)
    return out


def resolve_settings(args, defaults=None):
    """Defaults, then the config file, then explicit flags."""
    settings = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    settings.update(defaults or {})
    if getattr(args, "config", None):
        settings.update(load_config(args.config))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def layer_config(s):
    try:
        return GiblyConfig(
            schedule=ScaleSchedule(s["base_radius"], s["scale_factor"], s["num_scales"]),
            gibs_per_kind=s["gibs_per_kind"],
            num_composites=s["num_composites"],
            mc_samples=s["mc_samples"],
            projection_dim=s["projection_dim"],
            reg=RegularizerConfig(s["lambda_l1"], s["lambda_l2"]),
            global_seed=s["seed"],
            max_neighbors=s["max_neighbors"] or None,
            cell_size=s["cell_size"] or None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _add_settings(p, keys):
    for key in keys:
        typ = CONFIG_KEYS[key][0]
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None,
                       help=f"{key} (default {CONFIG_KEYS[key][1]})")


_LAYER_KEYS = ("base_radius", "scale_factor", "num_scales", "gibs_per_kind", "num_composites",
               "mc_samples", "projection_dim", "lambda_l1", "lambda_l2", "max_neighbors",
               "cell_size", "seed", "workers")


def _apply_workers(settings):
    if settings["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    _accel.set_workers(settings["workers"])


def _print(text):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args):
    try:
        with open(args.spec, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read spec {args.spec}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InvalidSpec(f"invalid TOML in {args.spec}: {exc}") from exc
    spec = scene_spec_from_dict(data)
    if args.seed is not None:
        spec.seed = args.seed
    cloud = generate_scene(spec)
    write_cloud(cloud, args.out, args.format)
    _print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_extract(args):
    s = resolve_settings(args)
    cfg = layer_config(s)
    _apply_workers(s)
    cloud = read_cloud(args.cloud, args.format)
    layer = GiblyLayer(cfg, cloud.num_features)
    res = layer.forward(cloud)
    write_features(res.output, args.out_features, len(cloud))
    if args.out_pre_projection:
        write_features(res.pre, args.out_pre_projection, len(cloud))
    _print(f"extracted {res.output.shape[1]} features for {len(cloud)} points")
    return EXIT_OK


def _parse_assignments(text):
    out = {}
    for item in filter(None, (t.strip() for t in (text or "").split(","))):
        if "=" not in item:
            raise ConfigError(f"expected name=value, got {item!r}")
        name, value = item.split("=", 1)
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"value for {name!r} is not a number") from None
    return out


def cmd_fit(args):
    try:
        kind = GibKind.parse(args.kind)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    init = _parse_assignments(args.init)
    row = GibParams(kind).to_row()
    for name, value in init.items():
        if name not in PARAM_NAMES:
            raise ConfigError(f"unknown parameter {name!r}; expected one of {PARAM_NAMES}")
        row[PARAM_NAMES.index(name)] = value
    params = GibParams.from_row(kind, row)
    trainable = [t.strip() for t in args.trainable.split(",") if t.strip()]
    cloud = read_cloud(args.cloud, args.format)
    try:
        result = fit_shape(cloud, params, trainable, args.steps, args.lr,
                           mc_samples=args.mc_samples, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.report:
        lines = ["step,objective"] + [f"{i},{v:.17g}" for i, v in enumerate(result.trajectory)]
        with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    out = result.params.to_row()
    _print(f"kind={kind.label}")
    for name, value in zip(PARAM_NAMES, out):
        _print(f"{name}={value:.17g}")
    _print(f"objective={result.trajectory[-1]:.17g}")
    return EXIT_OK


def _read_scene(path, fmt):
    if str(path).endswith(".toml"):
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise InvalidSpec(f"invalid TOML in {path}: {exc}") from exc
        return generate_scene(scene_spec_from_dict(data))
    return read_cloud(path, fmt)


def cmd_train(args):
    s = resolve_settings(args)
    cfg = layer_config(s)
    _apply_workers(s)
    scene = _read_scene(args.scene, args.format)
    report = train_segmenter(scene, cfg, epochs=s["epochs"], lr=s["lr"], seed=s["seed"],
                             weight_decay=s["weight_decay"])
    if args.report:
        write_metrics(report, args.report)
    if args.params_out:
        write_layer_params(report.layer, args.params_out)
    for model in ("gibly", "baseline"):
        f = report.final(model)
        _print(f"{model}: loss={f.loss:.6f} accuracy={f.accuracy:.6f} miou={f.miou:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    s = resolve_settings(args)
    cfg = layer_config(s)
    _apply_workers(s)
    rng = np.random.default_rng(s["seed"])
    n = args.points
    if n < 1:
        raise ConfigError("--points must be >= 1")
    # points fill a ball of the smallest radius so every scale sees several neighbours
    r0 = cfg.radii[0]
    direc = rng.normal(size=(n, 3))
    direc /= np.linalg.norm(direc, axis=1, keepdims=True)
    coords = direc * r0 * rng.uniform(size=(n, 1)) ** (1 / 3)
    cloud = PointCloud(coords, rng.normal(size=(n, args.features)) if args.features else None)
    layer = GiblyLayer(cfg, cloud.num_features)
    report = layer_gradcheck(layer, cloud, step=args.step, tolerance=args.tolerance,
                             seed=s["seed"])
    for line in report.lines():
        _print(line)
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_bench(args):
    # the benchmark caps neighbourhoods unless told otherwise (0 disables the cap)
    s = resolve_settings(args, {"max_neighbors": benchmark_config().max_neighbors})
    cfg = layer_config(s)
    _apply_workers(s)
    if args.repeats < 3:
        raise ConfigError("--repeats must be >= 3")
    scene = benchmark_scene(args.points, seed=s["seed"])
    timings = run_benchmark(scene, cfg, args.repeats)
    _print(f"{len(scene)} points, {args.repeats} repeats, workers={_accel.workers()}, "
           f"backend={_accel.backend()}")
    _print(timings.table())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(timings.csv())
    if args.compare_backends:
        res = compare_backends(scene, cfg, repeats=max(1, args.repeats - 1))
        for name in _accel.BACKENDS:
            if name in res:
                _print(f"{name}: {res[name]:.4f} s per forward")
        if "max_abs_diff" in res:
            _print(f"max |numba - numpy| = {res['max_abs_diff']:.3e}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="gibly", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a labelled scene from a TOML spec")
    p.add_argument("spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--format", choices=("auto", "xyz", "ply"), default="auto")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="run the layer forward and write feature CSVs")
    p.add_argument("cloud")
    p.add_argument("--config")
    p.add_argument("--out-features", required=True)
    p.add_argument("--out-pre-projection")
    p.add_argument("--format", choices=("auto", "xyz", "ply"), default="auto")
    _add_settings(p, _LAYER_KEYS)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit", help="fit one kernel to a cloud by gradient ascent")
    p.add_argument("cloud")
    p.add_argument("--kind", required=True)
    p.add_argument("--trainable", default="r",
                   help="comma list from angles,r,t,beta,w,ell_scales")
    p.add_argument("--init", help="initial values, e.g. r=0.2,t=0.1")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--mc-samples", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--format", choices=("auto", "xyz", "ply"), default="auto")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train layer + linear head against a coordinates baseline")
    p.add_argument("scene", help="labelled cloud file or TOML scene spec")
    p.add_argument("--config")
    p.add_argument("--report")
    p.add_argument("--params-out")
    p.add_argument("--format", choices=("auto", "xyz", "ply"), default="auto")
    _add_settings(p, _LAYER_KEYS + ("epochs", "lr", "weight_decay"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full layer")
    p.add_argument("--config")
    p.add_argument("--points", type=int, default=30)
    p.add_argument("--features", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    _add_settings(p, _LAYER_KEYS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="phase timing of the forward pass")
    p.add_argument("--config")
    p.add_argument("--points", type=int, default=100_000)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--csv")
    p.add_argument("--compare-backends", action="store_true")
    _add_settings(p, _LAYER_KEYS)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, EmptyCloud, UnsupportedPly) as exc:
        print(f"gibly: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, InvalidSpec, DegenerateLabels) as exc:
        print(f"gibly: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IoError, OSError) as exc:
        print(f"gibly: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
