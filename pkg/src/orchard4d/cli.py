"""``orchard4d`` command-line interface.

Exit codes: 0 success, 2 bad input (including malformed files and invalid
specs), 3 algorithmic failure such as a registration that cannot converge.
All outputs are canonical JSON/CSV, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from . import io as dio
from .associate import METHODS, CostWeights, HistogramParams, run_method
from .config import PipelineConfig
from .errors import AlgorithmError, InputError, InvalidInputError
from .evaluate import (
    growth_csv,
    growth_series,
    landmark_truth,
    removal_sweep,
    score_association,
    score_counts,
    score_size,
    sweep_csv,
    truth_pairs,
)
from .pipeline import localize, register_sessions
from .simulator import spec_from_dict, write_dataset

log = logging.getLogger("orchard4d")

EXIT_OK, EXIT_INPUT, EXIT_ALGORITHM = 0, 2, 3


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    return cfg.override(getattr(args, "set", None) or [])


def _weights(cfg: PipelineConfig) -> CostWeights:
    return CostWeights(
        gate_distance=cfg.gate_distance,
        entropy_threshold=cfg.entropy_threshold,
        angle_threshold=cfg.angle_threshold,
        topology_weight=cfg.topology_weight,
        no_match_cost=cfg.no_match_cost,
        vote_no_match=cfg.vote_no_match,
    )


def _hist(cfg: PipelineConfig) -> HistogramParams:
    return HistogramParams(cfg.hist_azimuth_bins, cfg.hist_height_bins, cfg.hist_radius_bins, cfg.hist_radius, cfg.gate_distance)


def _out(text: str) -> None:
    sys.stdout.write(text)


# ----------------------------------------------------------------- commands


def cmd_simulate(args, cfg) -> int:
    spec_data = dio.read_json(args.spec)
    if not isinstance(spec_data, dict):
        raise InvalidInputError(f"{args.spec}: spec must be a JSON object")
    if args.seed is not None:
        spec_data["seed"] = args.seed
    spec = spec_from_dict(spec_data)
    summary = write_dataset(args.out, spec, write_scans=not args.no_scans)
    _out(dio.dump_json(summary))
    return EXIT_OK


def _localize_to_file(session_dir, out, cfg) -> int:
    session = dio.read_session(session_dir)
    res = localize(session, cfg)
    lms = res.session.landmarks
    extra = {"tracks": res.n_tracks, "merged": res.n_merged}
    if res.refine is not None:
        extra["refine"] = {
            "initial_cost": res.refine.initial_cost,
            "final_cost": res.refine.cost,
            "iterations": res.refine.iterations,
            "status": res.refine.status,
        }
    dio.write_json(out, dio.landmarks_to_json(session.session_id, lms, extra))
    return len(lms)


def cmd_track3d(args, cfg) -> int:
    out = Path(args.out) if args.out else Path(args.session) / "landmarks.json"
    n = _localize_to_file(args.session, out, cfg)
    _out(dio.dump_json({"landmarks": n, "output": str(out)}))
    return EXIT_OK


def _register_to_file(a_dir, b_dir, out, cfg):
    a = dio.read_session(a_dir, load_scans=False)
    b = dio.read_session(b_dir, load_scans=False)
    res = register_sessions(a, b, cfg)
    dio.write_json(
        out,
        dio.transform_to_json(
            res.transform,
            rms=res.rms,
            iterations=res.iterations,
            inlier_fraction=res.inlier_fraction,
            session_a=a.session_id,
            session_b=b.session_id,
        ),
    )
    return res


def cmd_register(args, cfg) -> int:
    res = _register_to_file(args.session_a, args.session_b, args.out, cfg)
    _out(dio.dump_json({"rms": res.rms, "iterations": res.iterations, "output": str(args.out)}))
    return EXIT_OK


def _session_with(session_dir, landmarks_path):
    session = dio.read_session(session_dir, load_scans=False, load_registration=False)
    _, lms = dio.read_landmarks(landmarks_path)
    session = session.with_landmarks(lms)
    session.validate()
    return session


def cmd_associate4d(args, cfg) -> int:
    a = _session_with(args.session_a, args.landmarks_a)
    b = _session_with(args.session_b, args.landmarks_b)
    T = dio.read_transform(args.transform)
    m = run_method(args.method, a, b, T, _weights(cfg), _hist(cfg))
    dio.write_json(args.out, dio.matches_to_json(m, args.method))
    _out(dio.dump_json({"matches": len(m.final_matches), "references": len(m.references), "status": m.status}))
    return EXIT_OK


def cmd_pipeline(args, cfg) -> int:
    """Run track3d, register and associate4d over every consecutive session pair."""
    data, run = Path(args.dataset), Path(args.out)
    tags = args.sessions or sorted(p.name for p in data.iterdir() if (p / "poses.jsonl").exists())
    if not tags:
        raise InvalidInputError(f"{data}: no session directories found")
    run.mkdir(parents=True, exist_ok=True)
    summary = {"sessions": {}, "pairs": {}}
    for tag in tags:
        (run / tag).mkdir(exist_ok=True)
        summary["sessions"][tag] = _localize_to_file(data / tag, run / tag / "landmarks.json", cfg)
    for ta, tb in zip(tags, tags[1:]):
        pdir = run / f"{ta}__{tb}"
        pdir.mkdir(exist_ok=True)
        _register_to_file(data / ta, data / tb, pdir / "transform.json", cfg)
        a = _session_with(data / ta, run / ta / "landmarks.json")
        b = _session_with(data / tb, run / tb / "landmarks.json")
        T = dio.read_transform(pdir / "transform.json")
        counts = {}
        for method in args.methods:
            m = run_method(method, a, b, T, _weights(cfg), _hist(cfg))
            dio.write_json(pdir / f"matches_{method}.json", dio.matches_to_json(m, method))
            counts[method] = len(m.final_matches)
        summary["pairs"][f"{ta}__{tb}"] = counts
    dio.write_json(run / "run.json", {"config": cfg.to_dict(), "sessions": tags, "methods": list(args.methods)})
    _out(dio.dump_json(summary))
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    """Score a pipeline run directory against the dataset's truth."""
    data, run, out = Path(args.dataset), Path(args.run), Path(args.out)
    truth = dio.Truth(data / "truth")
    meta = dio.read_json(run / "run.json")
    tags = meta["sessions"]
    out.mkdir(parents=True, exist_ok=True)
    report = {"counts": {}, "association": {}, "size": {}}
    batches = truth.batches()
    lm_sets, lm_maps = {}, {}
    for tag in tags:
        _, lms = dio.read_landmarks(run / tag / "landmarks.json")
        lm_sets[tag] = lms
        lm_maps[tag] = landmark_truth(lms, truth.det_fruit(tag))
        removed = set(truth.removed(tag))
        present = {f: b for f, b in batches.items() if f not in removed}
        tree_pos, tree_batch = truth.trees(tag)
        report["counts"][tag] = score_counts(lms, present, tree_pos, tree_batch).to_dict()
        dia = {int(r["fruit_id"]): float(r["diameter"]) for r in truth.fruits(tag)}
        pairs = _size_pairs(lms, lm_maps[tag])
        if pairs:
            mean, std = score_size(lms, dia, pairs)
            report["size"][tag] = {"mean_abs_error_m": mean, "std_abs_error_m": std, "fruits": len(pairs)}
    sweep_rows = []
    chain = []
    for ta, tb in zip(tags, tags[1:]):
        key = f"{ta}__{tb}"
        tp = truth_pairs(lm_sets[ta], lm_maps[ta], lm_sets[tb], lm_maps[tb])
        report["association"][key] = {}
        for method in meta["methods"]:
            m = dio.read_matches(run / key / f"matches_{method}.json")
            report["association"][key][method] = score_association(m, tp).to_dict()
            if method == "proposed":
                chain.append(m)
        if args.sweep:
            a = _session_with(data / ta, run / ta / "landmarks.json")
            b = _session_with(data / tb, run / tb / "landmarks.json")
            T = dio.read_transform(run / key / "transform.json")
            w, h = _weights(cfg), _hist(cfg)
            methods = {mm: (lambda x, y, mm=mm: run_method(mm, x, y, T, w, h)) for mm in meta["methods"]}
            for r in removal_sweep(a, b, tp, methods, seed=cfg.seed):
                sweep_rows.append(r)
    dio.write_json(out / "report.json", report)
    if sweep_rows:
        (out / "removal_sweep.csv").write_text(sweep_csv(sweep_rows), encoding="utf-8")
    if len(chain) == len(tags) - 1 and len(tags) > 1:
        rows = growth_series(tags, [lm_sets[t] for t in tags], chain)
        (out / "growth_series.csv").write_text(growth_csv(rows), encoding="utf-8")
    _out(dio.dump_json(_headline(report)))
    return EXIT_OK


def _size_pairs(lms, mapping):
    """One landmark per truth fruit (the first by id) for size scoring."""
    seen, pairs = set(), []
    for lm in sorted(lms, key=lambda l: l.fruit_id):
        f = mapping.get(lm.fruit_id)
        if f is not None and f not in seen:
            seen.add(f)
            pairs.append((lm.fruit_id, f))
    return pairs


def _headline(report: dict) -> dict:
    out = {}
    for tag, c in report["counts"].items():
        out[f"count/{tag}"] = {"estimated": c["estimated"], "truth": c["truth"], "pct_error": c["pct_error"]}
    for key, per in report["association"].items():
        for method, r in per.items():
            out[f"assoc/{key}/{method}"] = {"precision": r["precision"], "f1": r["f1"]}
    return out


def cmd_report(args, cfg) -> int:
    """Flatten an evaluation ``report.json`` into a CSV table (stdout and ``--out``)."""
    report = dio.read_json(Path(args.eval_dir) / "report.json")
    lines = ["section,key,metric,value"]

    def fmt(v):
        return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))

    try:
        for tag, c in sorted(report["counts"].items()):
            for metric in ("estimated", "truth", "abs_error", "pct_error", "batch_mean_abs_error", "batch_std_abs_error", "batch_mean_pct_error"):
                lines.append(f"counts,{tag},{metric},{fmt(c[metric])}")
        for key, per in sorted(report["association"].items()):
            for method, r in sorted(per.items()):
                for metric in ("tp", "fp", "fn", "precision", "f1"):
                    lines.append(f"association,{key}/{method},{metric},{fmt(r[metric])}")
        for tag, s in sorted(report.get("size", {}).items()):
            for metric in ("mean_abs_error_m", "std_abs_error_m", "fruits"):
                lines.append(f"size,{tag},{metric},{fmt(s[metric])}")
    except (KeyError, TypeError, AttributeError) as e:
        raise InvalidInputError(f"{args.eval_dir}/report.json: malformed report ({e!r})") from None
    text = "\n".join(lines) + "\n"
    out = Path(args.out) if args.out else Path(args.eval_dir) / "summary.csv"
    out.write_text(text, encoding="utf-8")
    _out(text)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orchard4d", description="Multi-session fruit counting, localization and association.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="JSON file with PipelineConfig fields")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field (repeatable)")
        sp.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
        sp.set_defaults(func=func)
        return sp

    sp = add("simulate", cmd_simulate, "Generate a synthetic multi-session dataset with ground truth.")
    sp.add_argument("spec", help="orchard spec JSON")
    sp.add_argument("--out", required=True, help="dataset directory to write")
    sp.add_argument("--seed", type=int, help="override the spec's seed")
    sp.add_argument("--no-scans", action="store_true", help="skip per-frame LiDAR files")

    sp = add("track3d", cmd_track3d, "Count and localize fruits in one session.")
    sp.add_argument("session", help="session directory")
    sp.add_argument("--out", help="landmarks JSON (default: <session>/landmarks.json)")

    sp = add("register", cmd_register, "Align session A's static structure onto session B's.")
    sp.add_argument("session_a")
    sp.add_argument("session_b")
    sp.add_argument("--out", required=True, help="transform JSON")

    sp = add("associate4d", cmd_associate4d, "Match landmarks of session A to session B.")
    sp.add_argument("--session-a", required=True)
    sp.add_argument("--session-b", required=True)
    sp.add_argument("--landmarks-a", required=True)
    sp.add_argument("--landmarks-b", required=True)
    sp.add_argument("--transform", required=True, help="A->B transform JSON from 'register'")
    sp.add_argument("--method", choices=METHODS, default="proposed")
    sp.add_argument("--out", required=True, help="matches JSON")

    sp = add("pipeline", cmd_pipeline, "track3d + register + associate4d over a whole dataset.")
    sp.add_argument("dataset", help="dataset directory (one subdirectory per session)")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--sessions", nargs="+", help="session tags in date order (default: sorted names)")
    sp.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))

    sp = add("evaluate", cmd_evaluate, "Score a run directory against the dataset's truth.")
    sp.add_argument("dataset")
    sp.add_argument("run")
    sp.add_argument("--out", required=True, help="evaluation directory")
    sp.add_argument("--sweep", action="store_true", help="also run the removal sweep")

    sp = add("report", cmd_report, "Summarize an evaluation directory as CSV.")
    sp.add_argument("eval_dir")
    sp.add_argument("--out", help="CSV path (default: <eval_dir>/summary.csv)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_INPUT
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.print_config:
            _out(dio.dump_json(cfg.to_dict()))
            return EXIT_OK
        return args.func(args, cfg)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except AlgorithmError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ALGORITHM
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
