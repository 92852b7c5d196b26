"""Command-line front end.

Subcommands: synth (render a scene spec to a sequence directory), graph
(build and summarize the temporal link structure), energy (evaluate the
labeling energy on a dataset), infer (run the full engine), eval (score
masks against reference annotations).

Exit codes: 0 success, 2 missing or invalid inputs, 3 refinement backend
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .dataio import (
    load_annotations,
    load_config,
    load_flows,
    load_frames,
    load_responses,
    write_masks,
    write_scene,
)
from .datamodel import Params, validate_sequence
from .errors import EngineError, RefinementError, ValidationError
from .flowgraph import build_temporal_graph
from .infer import AblationMode, run_inference
from .initialization import initialize_sequence
from .metrics import aggregate, score_sequence
from .refine import ExemplarRefiner, IdentityRefiner, OracleRefiner
from .synth import SceneSpec, generate_scene

log = logging.getLogger("stmrf")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_REFINER = 3


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_params(path: str | None) -> tuple[Params, dict]:
    if path is None:
        return Params(), {}
    return load_config(path)


def _load_dataset(seq_dir: str, require_two_step: bool = False):
    frames = load_frames(seq_dir)
    width, height, count = validate_sequence(frames)
    flows = load_flows(seq_dir, count, require_two_step=require_two_step)
    responses = load_responses(seq_dir, count)
    first = load_annotations(seq_dir, sorted(responses), first_only=True)
    first = {obj: series[0] for obj, series in first.items()}
    return frames, flows, responses, first, (width, height, count)


def _build_refiner(kind: str, endpoint: str | None, frames, first, seq_dir,
                   frame_count: int, exemplar_opts: dict):
    if kind == "identity":
        return IdentityRefiner()
    if kind == "exemplar":
        return ExemplarRefiner.from_first_frame(frames[0], first, **exemplar_opts)
    if kind == "oracle":
        gt = load_annotations(seq_dir, sorted(first), frame_count=frame_count,
                              first_only=False)
        return OracleRefiner.from_masks(gt)
    if kind == "external":
        if not endpoint:
            raise ValidationError("--refiner external requires --endpoint")
        from .refine import ExternalRefiner
        return ExternalRefiner(endpoint)
    raise ValidationError(f"unknown refiner kind {kind!r}")


def _cmd_synth(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = SceneSpec.from_json(fh.read())
    except OSError as exc:
        log.error("cannot read scene spec: %s", exc)
        return EXIT_INPUT
    if args.seed is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    scene = generate_scene(spec)
    os.makedirs(args.out, exist_ok=True)
    write_scene(args.out, scene)
    with open(os.path.join(args.out, "scene.json"), "w", encoding="utf-8") as fh:
        fh.write(spec.to_json())
    log.info("wrote %d frames, %d objects to %s", spec.frame_count,
             len(scene.truth), args.out)
    print(f"{args.out}: {spec.frame_count} frames, "
          f"{len(scene.truth)} objects, {len(scene.flows)} flow fields")
    return EXIT_OK


def _cmd_graph(args) -> int:
    params, _ = _load_params(args.config)
    frames = load_frames(args.data)
    width, height, count = validate_sequence(frames)
    flows = load_flows(args.data, count)
    graph = build_temporal_graph(flows, width, height, count,
                                 params.fb_tolerance)
    from .flowgraph import LINK_STEPS
    per_step = {k: 0 for k in LINK_STEPS if k > 0}
    for t in range(count):
        for k in per_step:
            arr = graph.target_array(t, k)
            if arr is not None:
                per_step[k] += int((arr >= 0).sum())
    summary = {
        "frames": count, "width": width, "height": height,
        "edges": graph.edge_count(),
        "links_per_step": {str(k): v for k, v in sorted(per_step.items())},
    }
    text = json.dumps(summary, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_energy(args) -> int:
    params, exemplar_opts = _load_params(args.config)
    frames, flows, responses, first, (width, height, count) = _load_dataset(args.data)
    graph = build_temporal_graph(flows, width, height, count,
                                 params.fb_tolerance)
    init, likes = initialize_sequence(responses, flows, first, params)
    refiner = _build_refiner(args.refiner, None, frames, first, args.data,
                             count, exemplar_opts)
    from .energy import full_energy
    from .infer import _stack_labels, _stack_probs
    report = {}
    total = 0.0
    for obj in sorted(init):
        x = _stack_labels(init[obj], graph)
        probs = _stack_probs(likes[obj], graph)
        breakdown = full_energy(x, graph, probs, frames, refiner, params,
                                object_id=obj)
        report[str(obj)] = breakdown.as_dict()
        total += breakdown.total
    report["total"] = total
    text = json.dumps(report, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_infer(args) -> int:
    params, exemplar_opts = _load_params(args.config)
    frames, flows, responses, first, (width, height, count) = _load_dataset(args.data)
    graph = build_temporal_graph(flows, width, height, count,
                                 params.fb_tolerance)
    init, likes = initialize_sequence(responses, flows, first, params)
    refiner = _build_refiner(args.refiner, args.endpoint, frames, first,
                             args.data, count, exemplar_opts)
    mode = AblationMode(args.mode)
    try:
        result = run_inference(init, frames, graph, likes, refiner, params, mode)
    finally:
        refiner.close()
    out_dir = args.out or args.data
    write_masks(out_dir, result.masks)
    trace = [step.as_dict() for step in result.energy_trace]
    with open(os.path.join(out_dir, "energy_trace.json"), "w",
              encoding="utf-8") as fh:
        json.dump(trace, fh, indent=2)
        fh.write("\n")
    for i, step in enumerate(result.energy_trace, start=1):
        log.info("iteration %d energy %.6f", i, step.total)
    print(f"wrote masks for {len(result.masks)} objects to {out_dir} "
          f"({len(result.energy_trace)} iterations)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    frames = load_frames(args.data)
    _, _, count = validate_sequence(frames)
    from .dataio import _object_dirs, read_mask
    masks_root = args.masks or os.path.join(args.data, "masks")
    objects = _object_dirs(masks_root)
    if not objects:
        log.error("no mask directories under %s", masks_root)
        return EXIT_INPUT
    predictions = {}
    for obj, obj_dir in objects:
        from .dataio import _numbered
        entries = _numbered(obj_dir)
        predictions[obj] = [read_mask(path, i, obj) for i, path in entries]
    truths = load_annotations(args.data, sorted(predictions),
                              frame_count=count, first_only=False)
    records = score_sequence(os.path.basename(os.path.normpath(args.data)) or "seq",
                             predictions, truths)
    report = aggregate(records)
    for rec in records:
        log.info("object %d: region %.4f contour %.4f", rec.object_id,
                 rec.region, rec.contour)
    print(f"{'metric':<10}{'mean':>8}{'recall':>8}")
    for name, mean, recall in report.rows():
        print(f"{name:<10}{mean:>8.4f}{recall:>8.4f}")
    print(f"{'global':<10}{report.global_mean:>8.4f}")
    if args.out:
        payload = {
            "records": [{"sequence": r.sequence, "object": r.object_id,
                         "region": r.region, "contour": r.contour}
                        for r in records],
            "region_mean": report.region_mean,
            "region_recall": report.region_recall,
            "contour_mean": report.contour_mean,
            "contour_recall": report.contour_recall,
            "global_mean": report.global_mean,
        }
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stmrf",
        description="Video object segmentation by temporal fusion and mask "
                    "refinement over an optical-flow link graph.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a scene spec into a dataset")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--out", required=True, help="output sequence directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the spec's random seed")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("graph", help="build and summarize the temporal graph")
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--config", default=None, help="engine config file")
    p.add_argument("--out", default=None, help="write the JSON summary here")
    p.set_defaults(func=_cmd_graph)

    p = sub.add_parser("energy", help="evaluate labeling energy on a dataset")
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--config", default=None, help="engine config file")
    p.add_argument("--refiner", default="identity",
                   choices=["identity", "exemplar", "oracle"],
                   help="refiner supplying the shape term")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=_cmd_energy)

    p = sub.add_parser("infer", help="run inference on a sequence")
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--config", default=None, help="engine config file")
    p.add_argument("--mode", default=AblationMode.TF_AND_MR.value,
                   choices=[m.value for m in AblationMode],
                   help="ablation mode")
    p.add_argument("--refiner", default="exemplar",
                   choices=["identity", "oracle", "exemplar", "external"],
                   help="mask refinement backend")
    p.add_argument("--endpoint", default=None,
                   help="external refiner endpoint (host:port or stdio:CMD)")
    p.add_argument("--out", default=None,
                   help="output directory (defaults to the dataset)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score masks against reference annotations")
    p.add_argument("--data", required=True, help="sequence directory with gt/")
    p.add_argument("--masks", default=None,
                   help="mask directory (defaults to DATA/masks)")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except RefinementError as exc:
        log.error("refinement backend failed: %s", exc)
        trace = getattr(exc, "energy_trace", None)
        if trace:
            log.info("completed %d iterations before the failure", len(trace))
        return EXIT_REFINER
    except EngineError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
