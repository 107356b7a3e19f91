"""Command line entry point: ``hrseg <subcommand> ...``.

Subcommands: synth, encode, decode, eval, gradcheck, bench. Every run writes a
JSON manifest next to its outputs. Exit codes: 0 success, 1 validation
error, 2 I/O error. Options may also come from ``--config FILE`` holding
``key=value`` lines (keys are option names with ``-`` or ``_``); command-line
flags override the file, which overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as hio
from .core import CategorySchema, write_hrst
from .decoder import DecodeConfig, PartStats, decode
from .encoder import EncoderConfig, encode
from .evaluator import EvalConfig, ap_role, evaluate, gt_triplets, split_report
from .synthgen import SynthConfig, generate_scene, ideal_tensors

log = logging.getLogger("hrseg")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv(kind):
    def parse(text: str):
        try:
            return tuple(kind(v) for v in str(text).split(",") if v.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# -- manifest --------------------------------------------------------------------

class Run:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.timings: dict[str, float] = {}
        self.counters: dict[str, int] = {}
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.extra: dict = {}

    def stage(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = run.timings.get(name, 0.0) + time.perf_counter() - self.t0
        return _Timer()

    def count(self, counters: dict[str, int]):
        for k, v in counters.items():
            self.counters[k] = self.counters.get(k, 0) + int(v)

    def write(self, path: Path):
        config = {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in vars(self.args).items() if k not in ("func",)}
        manifest = {
            "tool": "hrseg", "version": __version__, "subcommand": self.command,
            "config": config, "inputs": self.inputs, "outputs": self.outputs,
            "timings": self.timings, "counters": self.counters, **self.extra,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=1, default=str))


def _schema(args) -> CategorySchema:
    return CategorySchema.load(args.schema) if args.schema else CategorySchema.default()


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# -- synth -----------------------------------------------------------------------

def cmd_synth(args, run: Run) -> Path:
    schema = _schema(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "render").mkdir(exist_ok=True)
    base = SynthConfig(seed=args.seed, width=args.width, height=args.height, stride=args.stride,
                       grid_size=args.grid_size, entity_count=args.entities,
                       human_count=args.humans, relation_count=args.relations,
                       part_skew=args.part_skew)
    (out / "schema.json").write_text(json.dumps(schema.to_dict(), indent=1))
    for i in range(args.count):
        seed = args.seed + i
        with run.stage("generate"):
            scene = generate_scene(replace(base, seed=seed), schema)
            scene.validate(schema)
        name = f"scene_{seed:05d}"
        with run.stage("write"):
            path = out / f"{name}{hio.SCENE_SUFFIX}"
            scene.save(path)
            write_hrst(out / "render" / f"{name}.labels.hrst", hio.render_labels(scene))
        run.outputs.append(str(path))
        run.count({"scenes": 1, "entities": len(scene.entities),
                   "relations": len(scene.relations)})
    return out / "manifest.json"


# -- encode ----------------------------------------------------------------------

def _encode_one(job):
    name, scene_path, out_dir, schema_dict, enc_cfg, ideal = job
    schema = CategorySchema.from_dict(schema_dict)
    scene = hio.SceneAnnotation.load(scene_path)
    try:
        scene.validate(schema)
    except ValueError as e:
        raise ValueError(f"scene {name}: {e}") from None
    bundle = encode(scene, schema, enc_cfg)
    target = Path(out_dir) / name
    hio.write_targets(target, bundle)
    if ideal:
        hio.write_prediction_bundle(target, ideal_tensors(bundle, schema))
    return name, bundle.report.counters()


def cmd_encode(args, run: Run) -> Path:
    schema = _schema(args)
    enc = EncoderConfig(stride=args.stride, grid_size=args.grid_size,
                        gaussian_min_overlap=args.min_overlap, sigma_floor=args.sigma_floor)
    scenes = hio.find_scenes(args.inp)
    if not scenes:
        raise ValueError(f"no *{hio.SCENE_SUFFIX} files in {args.inp}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(hio.scene_name(p), str(p), str(out), schema.to_dict(), enc, args.ideal)
            for p in scenes]
    run.inputs = [str(p) for p in scenes]
    with run.stage("encode"):
        results = _pool_map(_encode_one, jobs, args.jobs)
    for name, counters in results:
        run.outputs.append(str(out / name))
        run.count(counters)
    run.count({"scenes": len(results)})
    return out / "manifest.json"


# -- decode ----------------------------------------------------------------------

def _decode_cfg(args) -> DecodeConfig:
    return DecodeConfig(k_s=args.ks, k_o=args.ko, k_r=args.kr, peak_window=args.peak_window,
                        mask_threshold=args.mask_threshold, part_threshold=args.part_threshold,
                        subject_must_be_human=not args.any_subject,
                        displacement_mode="subject_only" if args.subject_only_offset else "both")


def _decode_one(job):
    directory, schema_dict, cfg, default_stride = job
    directory = Path(directory)
    schema = CategorySchema.from_dict(schema_dict)
    bundle = hio.read_prediction_bundle(directory)
    t0 = time.perf_counter()
    triplets, report = decode(bundle, cfg, schema)
    elapsed = time.perf_counter() - t0
    records = hio.read_records(directory)
    H, W = bundle.Y.shape[:2]
    if records:
        stride, width, height = records["stride"], records["image_width"], records["image_height"]
    else:
        stride, width, height = default_stride, W * default_stride, H * default_stride
    triplets = [hio.to_image_scale(t, stride, width, height) for t in triplets]
    return directory.name, width, height, triplets, report.counters(), elapsed


def cmd_decode(args, run: Run) -> Path:
    schema = _schema(args)
    cfg = _decode_cfg(args)
    dirs = hio.find_bundles(args.inp)
    if not dirs:
        raise FileNotFoundError(f"no tensor bundles under {args.inp}")
    run.inputs = [str(d) for d in dirs]
    jobs = [(str(d), schema.to_dict(), cfg, args.stride) for d in dirs]
    with run.stage("decode_total"):
        results = _pool_map(_decode_one, jobs, args.jobs)
    images = {}
    for name, w, h, triplets, counters, elapsed in results:
        images[name] = (w, h, triplets)
        run.count(counters)
        run.timings["decode_core"] = run.timings.get("decode_core", 0.0) + elapsed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with run.stage("write"):
        out.write_text(hio.predictions_to_json(images))
    run.outputs.append(str(out))
    run.count({"images": len(images), "triplets": sum(len(v[2]) for v in images.values())})
    return out.with_suffix(".manifest.json")


# -- eval ------------------------------------------------------------------------

def _relation_counts(scenes) -> dict[int, int]:
    counts: dict[int, int] = {}
    for s in scenes:
        for r in s.relations:
            counts[r.relation] = counts.get(r.relation, 0) + 1
    return counts


def cmd_eval(args, run: Run) -> Path:
    schema = _schema(args)
    cfg = EvalConfig(k_values=args.k, iou_thresholds=args.iou, mode=args.mode,
                     rare_threshold=args.rare_threshold)
    with run.stage("load"):
        gts = hio.load_scenes(args.gt)
        preds = hio.load_predictions(args.pred)
    if not gts:
        raise ValueError(f"no ground-truth scenes found in {args.gt}")
    unknown = sorted(set(preds) - set(gts))
    if unknown:
        raise ValueError(f"predictions for unknown scenes: {', '.join(unknown[:5])}")
    names = sorted(gts)
    pred_lists, gt_lists = [], []
    for name in names:
        scene = gts[name]
        try:
            scene.validate(schema)
        except ValueError as e:
            raise ValueError(f"scene {name}: {e}") from None
        w, h, triplets = preds.get(name, (scene.image_width, scene.image_height, []))
        if (w, h) != (scene.image_width, scene.image_height):
            raise ValueError(f"scene {name}: predictions are {w}x{h} but the image is "
                             f"{scene.image_width}x{scene.image_height}")
        pred_lists.append(triplets)
        gt_lists.append(gt_triplets(scene))
    with run.stage("evaluate"):
        report = evaluate(pred_lists, gt_lists, cfg)
    result = report.to_dict(schema)
    train_counts = None
    if args.train_stats:
        train_counts = _relation_counts(hio.load_scenes(args.train_stats).values())
    result["splits"] = split_report(report, schema, train_counts, cfg.rare_threshold)
    if args.ap_role:
        actions = [c for c in range(schema.n_relations) if schema.is_action(c)]
        try:
            result["AP_role"] = ap_role(pred_lists, gt_lists, 0.5, actions)
        except ValueError as e:
            log.warning("AP_role skipped: %s", e)
    out = Path(args.out) if args.out else Path(args.pred).with_suffix(".eval.json")
    out.write_text(json.dumps(result, indent=1))
    run.inputs = [str(args.gt), str(args.pred)]
    run.outputs.append(str(out))
    run.extra["mR"] = result["mR"]
    run.extra["AR"] = result["AR"]
    print(report.table(), file=sys.stderr)
    return out.with_suffix(".manifest.json")


# -- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args, run: Run) -> Path:
    from .gradcheck_suite import run_suite
    with run.stage("gradcheck"):
        errors = run_suite(points=args.points, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {"points": args.points, "seed": args.seed, "tolerance": args.tolerance,
              "max_relative_error": errors,
              "passed": all(v < args.tolerance for v in errors.values())}
    out.write_text(json.dumps(report, indent=1))
    run.outputs.append(str(out))
    for name, err in errors.items():
        print(f"{name:<14} max rel err {err:.3e}", file=sys.stderr)
    if not report["passed"]:
        raise ValueError("gradient check exceeded tolerance")
    return out.with_suffix(".manifest.json")


# -- bench -----------------------------------------------------------------------

def cmd_bench(args, run: Run) -> Path:
    schema = _schema(args)
    cfg = _decode_cfg(args)
    if args.inp:
        dirs = hio.find_bundles(args.inp)
        if not dirs:
            raise FileNotFoundError(f"no tensor bundles under {args.inp}")
        bundle = hio.read_prediction_bundle(dirs[0])
        run.inputs.append(str(dirs[0]))
        manifest = Path(args.inp) / "bench.manifest.json"
    else:
        from .synthgen import bench_bundle
        bundle = bench_bundle(args.feature_size, schema, seed=args.seed)
        manifest = Path("bench.manifest.json")
    decode(bundle, cfg, schema)  # warm-up
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        decode(bundle, cfg, schema)
        times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1000
    stats = {"iters": args.iters, "feature_shape": list(bundle.Y.shape),
             "mean_ms": float(ms.mean()), "p95_ms": float(np.percentile(ms, 95)),
             "min_ms": float(ms.min())}
    run.extra["latency"] = stats
    run.timings["decode_total"] = float(ms.sum() / 1000)
    print(f"decode latency: mean {stats['mean_ms']:.2f} ms, p95 {stats['p95_ms']:.2f} ms "
          f"over {args.iters} iters", file=sys.stderr)
    return Path(args.manifest) if args.manifest else manifest


# -- parser ----------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--schema", help="category schema JSON (default: built-in 141/23/25)")
    p.add_argument("--manifest", help="where to write the run manifest")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_decode_flags(p):
    d = DecodeConfig()
    p.add_argument("--ks", type=int, default=d.k_s)
    p.add_argument("--ko", type=int, default=d.k_o)
    p.add_argument("--kr", type=int, default=d.k_r)
    p.add_argument("--peak-window", type=int, default=d.peak_window)
    p.add_argument("--mask-threshold", type=float, default=d.mask_threshold)
    p.add_argument("--part-threshold", type=float, default=d.part_threshold)
    p.add_argument("--subject-only-offset", type=_bool, nargs="?", const=True, default=False,
                   help="use the negated subject offset for objects")
    p.add_argument("--any-subject", type=_bool, nargs="?", const=True, default=False,
                   help="do not restrict subjects to the human category")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hrseg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"hrseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    _add_common(s)
    sc = SynthConfig()
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=sc.width)
    s.add_argument("--height", type=int, default=sc.height)
    s.add_argument("--stride", type=int, default=sc.stride)
    s.add_argument("--grid-size", type=int, default=sc.grid_size)
    s.add_argument("--entities", type=_csv(int), default=sc.entity_count, help="lo,hi")
    s.add_argument("--humans", type=_csv(int), default=sc.human_count, help="lo,hi")
    s.add_argument("--relations", type=_csv(int), default=sc.relation_count, help="lo,hi")
    s.add_argument("--part-skew", type=float, default=sc.part_skew)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("encode", help="scenes -> target tensors (+ ideal outputs)")
    _add_common(e)
    ec = EncoderConfig()
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--stride", type=int, default=ec.stride)
    e.add_argument("--grid-size", type=int, default=ec.grid_size)
    e.add_argument("--min-overlap", type=float, default=ec.gaussian_min_overlap)
    e.add_argument("--sigma-floor", type=float, default=ec.sigma_floor)
    e.add_argument("--ideal", type=_bool, default=True,
                   help="also write saturated prediction tensors (default true)")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="prediction tensors -> triplets JSON")
    _add_common(d)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--stride", type=int, default=4,
                   help="used when a bundle has no records.json")
    d.add_argument("--jobs", type=int, default=1)
    _add_decode_flags(d)
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="mean recall@K / AR / AP_role")
    _add_common(v)
    ev = EvalConfig()
    v.add_argument("--gt", required=True)
    v.add_argument("--pred", required=True)
    v.add_argument("--mode", type=str.upper, choices=("RS", "HRS"), default=ev.mode)
    v.add_argument("--k", type=_csv(int), default=ev.k_values)
    v.add_argument("--iou", type=_csv(float), default=ev.iou_thresholds)
    v.add_argument("--rare-threshold", type=int, default=ev.rare_threshold)
    v.add_argument("--train-stats", help="training scenes for the rare/non-rare split")
    v.add_argument("--ap-role", type=_bool, nargs="?", const=True, default=False)
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    _add_common(g)
    g.add_argument("--points", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--out", default="gradcheck.json")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="decode latency")
    _add_common(b)
    b.add_argument("--in", dest="inp")
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--feature-size", type=int, default=128,
                   help="side of the synthetic bundle when --in is not given")
    b.add_argument("--seed", type=int, default=0)
    _add_decode_flags(b)
    b.set_defaults(func=cmd_bench)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Load ``--config`` into the chosen subparser's defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config_file(known.config)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices.get(command)
    if sub is None:
        return
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        dest = "inp" if key == "in" else key
        if dest not in actions:
            raise UsageError(f"{known.config}: unknown option {key!r} for {command}")
        action = actions[dest]
        try:
            defaults[dest] = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"{known.config}: bad value for {key}: {e}") from None
        if action.choices is not None and defaults[dest] not in action.choices:
            raise UsageError(f"{known.config}: {key} must be one of {list(action.choices)}")
        if action.required:
            action.required = False
    sub.set_defaults(**defaults)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    rec = Run(args.command, args)
    try:
        t0 = time.perf_counter()
        manifest = args.func(args, rec)
        rec.timings["wall"] = time.perf_counter() - t0
        rec.write(Path(args.manifest) if args.manifest else manifest)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
