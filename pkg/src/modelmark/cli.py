"""Command-line front end: ``modelmark <command> ...``.

Exit codes: 0 success, 2 usage error, 3 watermark goal not met, 4 package or
format error, 5 ownership not established. Failures print the error class
name on stderr; stage timings go to stderr as ``time <stage> <seconds>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import zipfile
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np

from .datasets import Batch, load_sds
from .engine import predict_labels
from .errors import EntryMissing, InsufficientData, InvalidWatermarkSpec, ModelMarkError
from .fixtures import Arch, FixtureSpec, gen_fixture
from .model_format import SerializedModel, model_signature, parse_model
from .package_io import (
    AppPackage,
    ModelLocator,
    extract_model,
    open_package,
    read_labels,
    repack_package,
    save_package,
    scan_models,
)
from .reweighting import BatchPool, Scenario, SdsDirectoryPool, SolveGoal, WatermarkSpec, embed_watermark
from .rooting import root_model, serialize_model
from .triggers import TriggerSpec
from .verification import DEFAULT_THRESHOLD, Bundle, evaluate, load_bundle, save_bundle, verify_ownership

EXIT_USAGE = 2
EXIT_NOT_OWNED = 5


@contextmanager
def _timed(stage: str):
    start = time.perf_counter()
    yield
    print(f"time {stage} {time.perf_counter() - start:.4f}", file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _select(pkg: AppPackage, entry: Optional[str]) -> ModelLocator:
    models = scan_models(pkg)
    if entry is not None:
        models = [m for m in models if m.entry_name == entry]
    if not models:
        raise EntryMissing(f"no model entry {entry!r}" if entry else "package contains no models")
    return models[0]


def _load_model(path, entry: Optional[str] = None) -> SerializedModel:
    """Parse a bare model file, or the selected model inside an app package."""
    path = Path(path)
    if zipfile.is_zipfile(path):
        pkg = open_package(path)
        return parse_model(extract_model(pkg, _select(pkg, entry)))
    return parse_model(path.read_bytes())


def _bundle_path(out: Path) -> Path:
    return out.with_name(out.stem + ".bundle.zip")


# -- commands ------------------------------------------------------------------

def cmd_inspect(args) -> int:
    m = _load_model(args.model, args.entry)
    h, g = m.header, m.graph
    shape, classes = model_signature(m)
    _emit({
        "header": {"version": h.version, "tensors": h.n_tensors, "operators": h.n_operators,
                   "buffers": h.n_buffers, "inputs": len(g.graph_inputs), "outputs": len(g.graph_outputs)},
        "tensors": [{"index": i, "name": t.name, "dtype": t.dtype.name, "shape": list(t.shape),
                     "buffer": t.buffer_index} for i, t in enumerate(g.tensors)],
        "operators": [{"index": i, "opcode": op.opcode.name, "inputs": list(op.inputs),
                       "outputs": list(op.outputs)} for i, op in enumerate(g.operators)],
        "signature": {"input_shape": shape, "num_labels": classes},
    })
    return 0


def cmd_extract(args) -> int:
    pkg = open_package(args.package)
    out = Path(args.out) if args.out else None
    report = []
    for loc in scan_models(pkg):
        with _timed(f"extract:{loc.entry_name}"):
            data = extract_model(pkg, loc)
            m = parse_model(data)
        labels = read_labels(pkg, loc)
        row = {"entry": loc.entry_name, "encrypted": loc.encrypted, "bytes": len(data),
               "signature": list(model_signature(m)), "labels": list(labels.labels) if labels else None}
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            target = out / Path(loc.entry_name).name
            target.write_bytes(data)
            row["written"] = str(target)
            if labels is not None:
                label_path = target.with_suffix(".labels.txt")
                label_path.write_text(labels.dump(), encoding="utf-8")
                row["labels_written"] = str(label_path)
        report.append(row)
    _emit(report)
    return 0


def cmd_root(args) -> int:
    data = Path(args.model).read_bytes()
    with _timed("root"):
        w = root_model(parse_model(data))
    with _timed("serialize"):
        again = serialize_model(w)
    if args.out:
        Path(args.out).write_bytes(again)
    if args.roundtrip:
        if again != data:
            diff = next((i for i, (a, b) in enumerate(zip(data, again)) if a != b), min(len(data), len(again)))
            print(f"RoundTripMismatch: first differing byte at offset {diff}", file=sys.stderr)
            return 1
        print("roundtrip ok")
    return 0


def _parse_goal(text: Optional[str], retries: int) -> SolveGoal:
    if text is None:
        return SolveGoal(max_retries=retries)
    try:
        wsr, drop = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise InvalidWatermarkSpec(f"bad goal {text!r}: expected wsr,accdrop") from exc
    return SolveGoal(wsr, drop, retries)


def cmd_watermark(args) -> int:
    scenario = Scenario(args.scenario)
    trigger = TriggerSpec.parse(args.trigger) if args.trigger else TriggerSpec()
    spec = WatermarkSpec(args.target_label, args.watermark_label, args.fraction, trigger, scenario)
    goal = _parse_goal(args.goal, args.retries)
    out = Path(args.out)

    pkg = open_package(args.package)
    loc = _select(pkg, args.entry)
    with _timed("extract"):
        model = parse_model(extract_model(pkg, loc))
    with _timed("root"):
        writable = root_model(model)

    labeled = load_sds(args.data) if args.data else None
    if labeled is not None and labeled.labels is None:
        raise InsufficientData(f"{args.data} carries no labels")
    pool = SdsDirectoryPool(args.pool) if args.pool else None
    if scenario is Scenario.DM and pool is None and labeled is not None:
        pool = BatchPool(Batch(labeled.data))  # labels are ignored in dm

    with _timed("reweight"):
        marked, metrics, split = embed_watermark(
            writable, spec, labeled, pool, goal, args.seed, args.watermark_rows_only)
    with _timed("repack"):
        new_pkg = repack_package(pkg, loc, serialize_model(marked))

    save_package(new_pkg, out)
    bundle = Bundle.from_watermark_set(split.test_watermark, trigger)
    bundle_path = Path(args.bundle) if args.bundle else _bundle_path(out)
    save_bundle(bundle_path, bundle)
    _emit({"package": str(out), "bundle": str(bundle_path), "model": loc.entry_name,
           "scenario": scenario.value, "metrics": metrics.to_json()})
    return 0


def cmd_verify(args) -> int:
    model = _load_model(args.suspect, args.entry)
    bundle = load_bundle(args.bundle)
    threshold = bundle.threshold if args.threshold is None else args.threshold
    verdict = verify_ownership(lambda x: predict_labels(model, x), bundle.watermark_set(), threshold)
    _emit(verdict.to_json())
    return 0 if verdict.owned else EXIT_NOT_OWNED


def cmd_eval(args) -> int:
    model = _load_model(args.model, args.entry)
    data = load_sds(args.data)
    if data.labels is None:
        raise InsufficientData(f"{args.data} carries no labels")
    query = lambda x: predict_labels(model, x)  # noqa: E731
    if args.bundle:
        bundle = load_bundle(args.bundle)
        metrics = evaluate(query, data, bundle.watermark_set(), bundle.nontarget_triggered(data))
        report = metrics.to_json()
    else:
        acc = float(np.mean(query(data.data) == data.labels))
        report = {"acc": acc, "n_clean": len(data)}
    _emit(report)
    return 0


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}: expected H,W,C") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}: expected H,W,C")
    return dims


def cmd_gen_fixture(args) -> int:
    try:
        spec = FixtureSpec(args.classes, args.input_shape, Arch(args.arch), args.samples_per_class,
                           args.separation, args.seed)
    except ValueError as exc:
        print(f"usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    with _timed("gen-fixture"):
        fixture = gen_fixture(spec, check_accuracy=not args.no_check)
    paths = fixture.write(args.out)
    _emit({"clean_accuracy": fixture.clean_accuracy, "files": {k: str(v) for k, v in paths.items()}})
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modelmark", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log pipeline progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print header, tensors, operators and signature")
    p.add_argument("model", help="model file or app package")
    p.add_argument("--entry", help="model entry inside a package")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("extract", help="extract every model and label file from a package")
    p.add_argument("package")
    p.add_argument("--out", help="directory to write models into")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("root", help="root a model and re-serialize it")
    p.add_argument("model")
    p.add_argument("--roundtrip", action="store_true", help="fail unless the bytes come back identical")
    p.add_argument("--out", help="write the re-serialized model here")
    p.set_defaults(func=cmd_root)

    p = sub.add_parser("watermark", help="embed a watermark and repack the package")
    p.add_argument("package")
    p.add_argument("--scenario", choices=[s.value for s in Scenario], required=True)
    p.add_argument("--target-label", type=int, required=True)
    p.add_argument("--watermark-label", type=int, required=True)
    p.add_argument("--data", help="labeled SDS1 dataset (da, ds)")
    p.add_argument("--pool", help="directory of unlabeled SDS1 shards (dm, ds backfill)")
    p.add_argument("--trigger", help="k,corner,value (default 3,BR,1.0)")
    p.add_argument("--fraction", type=float, default=0.4, help="share of target samples to stamp")
    p.add_argument("--goal", help="wsr,accdrop acceptance goal (default 0.8,0.10)")
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--watermark-rows-only", action="store_true", help="solve on stamped rows only")
    p.add_argument("--entry", help="model entry inside the package")
    p.add_argument("--bundle", help="verification bundle path (default <out>.bundle.zip)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_watermark)

    p = sub.add_parser("verify", help="black-box ownership check")
    p.add_argument("suspect", help="app package or model file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help=f"WSR threshold (default: the bundle's, normally {DEFAULT_THRESHOLD})")
    p.add_argument("--entry")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="report ACC, and WSR/FWSR with a bundle")
    p.add_argument("model", help="model file or app package")
    p.add_argument("--data", required=True, help="labeled SDS1 dataset")
    p.add_argument("--bundle")
    p.add_argument("--entry")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-fixture", help="generate a fixture model, datasets and package")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--input-shape", type=_shape, default=(12, 12, 1))
    p.add_argument("--arch", choices=[a.value for a in Arch], default=Arch.CONV_HEAD.value)
    p.add_argument("--samples-per-class", type=int, default=600)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-check", action="store_true", help="skip the clean-accuracy check")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ModelMarkError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
