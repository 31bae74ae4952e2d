"""Command-line entry point: build-bag, track, eval, demo and grad-check.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 acceptance threshold not met.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import init_adapter
from .bag import BagConfig, BagOfDescriptions, JsonLexicon, build_bag, load_bag, load_dictionary, save_bag
from .config import RunConfig, add_config_arguments, resolve
from .encoders import ImagePatch, StubBackend
from .errors import (BagConstructionError, BagFormatError, CLDTrackError, ConfigError, DegenerateInputError,
                     DimensionMismatchError, GenerationError, SequenceFormatError)
from .evaluation import (SequenceDataset, evaluate_many, evaluate_predictions, load_frame, load_sequence,
                         read_boxes, run_ope, write_report_csv, write_report_json, write_sequence)
from .generative import GenerativeClient, HttpTransport, MockTransport
from .geometry import BBox, iou
from .gradcheck import run_gradcheck
from .head import init_head
from .losses import LossConfig
from .model import ModelParams, load_params, save_params
from .persist import write_atomic
from .synthetic import moving_square_sequence, training_batch
from .tracker import TrackerConfig, TrackingSession
from .trainer import train_toy

log = logging.getLogger("cldtrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ACCEPT = 0, 2, 3, 4
DATA_ERRORS = (SequenceFormatError, BagFormatError, DegenerateInputError, DimensionMismatchError,
               BagConstructionError, GenerationError)


class UsageError(CLDTrackError):
    pass


# ---------------------------------------------------------------- builders

def make_backend(cfg: RunConfig) -> StubBackend:
    return StubBackend(cfg["encoder.dim"], cfg["encoder.seed"], cfg["encoder.buckets"])


def tracker_config(cfg: RunConfig) -> TrackerConfig:
    return TrackerConfig(
        search_size=cfg["search.size"], exemplar_size=cfg["exemplar.size"],
        search_area_factor=cfg["search.area_factor"], exemplar_area_factor=cfg["exemplar.area_factor"],
        grid=cfg["head.grid"], hanning_weight=cfg["inference.hanning_weight"],
        window_size=cfg["ttfum.window_size"], strategy=cfg["ttfum.strategy"],
        update_interval=cfg["ttfum.update_interval"], decay=cfg["ttfum.decay"],
    )


def loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(cfg["loss.lambda_iou"], cfg["loss.lambda_l1"], cfg["loss.focal_alpha"],
                      cfg["loss.focal_beta"], cfg["loss.sigma"])


def bag_config(cfg: RunConfig, tau_val: float | None = None) -> BagConfig:
    return BagConfig(
        tau_val=cfg["bag.tau_val"] if tau_val is None else tau_val, tau_syn=cfg["bag.tau_syn"],
        alpha=cfg["bag.alpha"], n_synonyms=cfg["bag.n_synonyms"], top_k_attributes=cfg["bag.top_k_attributes"],
        regen_rounds=cfg["bag.regen_rounds"], n_task_phrases=cfg["bag.n_task_phrases"],
        max_concept_words=cfg["bag.max_concept_words"], draw_bbox=cfg["bag.draw_bbox"], seed=cfg["run.seed"],
    )


def make_client(cfg: RunConfig) -> GenerativeClient:
    mode = cfg["client.mode"]
    if mode == "mock":
        transport = MockTransport(cfg["client.mock_dir"] or None)
    elif mode == "live":
        if not cfg["client.endpoint"]:
            raise UsageError("--client-endpoint is required when --client-mode is live")
        transport = HttpTransport(cfg["client.endpoint"])
    else:
        raise UsageError(f"--client-mode must be mock or live, got {mode!r}")
    return GenerativeClient(transport, timeout=cfg["client.timeout"], max_retries=cfg["client.max_retries"],
                            concurrency=cfg["client.concurrency"], backoff=cfg["client.backoff"],
                            draw_bbox=cfg["bag.draw_bbox"])


def init_params(cfg: RunConfig, seed: int) -> ModelParams:
    dim = cfg["encoder.dim"]
    head = init_head(dim, cfg["head.channels"], cfg["head.stages"], seed=seed)
    adapter = init_adapter(dim, cfg["adapter.context_length"], seed=seed, scale=cfg["adapter.init_scale"],
                           tau_temp=cfg["adapter.tau_temp"])
    return ModelParams(head, adapter)


def _data_file(name: str) -> Path:
    return Path(str(resources.files("cldtrack") / "data" / name))


def _existing(path: str | None, flag: str, default: str | None = None) -> Path:
    if path is None:
        if default is None:
            raise UsageError(f"{flag} is required")
        return _data_file(default)
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: no such file: {p}")
    return p


def _parse_bbox(text: str) -> BBox:
    try:
        x, y, w, h = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--bbox must be x,y,w,h, got {text!r}") from exc
    return BBox(x, y, w, h)


def construct_bag(cfg: RunConfig, backend, frame: np.ndarray, box: BBox, class_path: Path, attr_path: Path,
                  lexicon_path: Path, exclusions=(), tau_val: float | None = None) -> BagOfDescriptions:
    dicts = {"class": load_dictionary(class_path, backend, "class"),
             "attribute": load_dictionary(attr_path, backend, "attribute")}
    lex = JsonLexicon.load(lexicon_path)
    return build_bag(ImagePatch(frame, bbox=box), dicts, make_client(cfg), lex, backend,
                     bag_config(cfg, tau_val), exclusions)


def _print_bag(bag: BagOfDescriptions, out) -> None:
    counts = bag.counts()
    print("entries: " + ", ".join(f"{k}={v}" for k, v in counts.items()), file=out)
    print(f"discarded: {len(bag.discarded)}", file=out)
    for e in bag.discarded:
        print(f"  - [{e.kind}/{e.provenance}] sim={e.sim_to_image:.4f} {e.text}", file=out)


# ---------------------------------------------------------------- commands

def cmd_build_bag(args, cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    backend = make_backend(cfg)
    if args.sequence:
        ds = load_sequence(args.sequence)
        frame, box = ds.frame(0), ds.gt_boxes[0]
    else:
        if not args.frame or not args.bbox:
            raise UsageError("give --sequence, or both --frame and --bbox")
        frame, box = load_frame(_existing(args.frame, "--frame")), _parse_bbox(args.bbox)
    exclusions = []
    if args.exclusions:
        exclusions = [ln.strip() for ln in _existing(args.exclusions, "--exclusions").read_text(
            encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]
    bag = construct_bag(cfg, backend, frame, box, _existing(args.class_dict, "--class-dict", "classes.txt"),
                        _existing(args.attr_dict, "--attr-dict", "attributes.txt"),
                        _existing(args.lexicon, "--lexicon", "lexicon.json"), exclusions)
    save_bag(bag, args.out)
    _print_bag(bag, out)
    print(f"wrote {args.out}", file=out)
    return EXIT_OK


def _load_bag_and_params(args, cfg):
    bag = load_bag(_existing(args.bag, "--bag"))
    params = load_params(_existing(args.params, "--params"))
    if bag.embeddings.shape[1] != params.adapter.dim or params.adapter.dim != cfg["encoder.dim"]:
        raise DimensionMismatchError(
            f"bag dim {bag.embeddings.shape[1]}, params dim {params.adapter.dim} and "
            f"encoder.dim {cfg['encoder.dim']} must agree")
    return bag, params


def session_factory(cfg: RunConfig, backend, bag, params):
    tcfg = tracker_config(cfg)
    return lambda: TrackingSession(backend, bag, params, tcfg)


def cmd_track(args, cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    bag, params = _load_bag_and_params(args, cfg)
    ds = load_sequence(_existing(args.sequence, "--sequence"))
    report, preds = run_ope(session_factory(cfg, make_backend(cfg), bag, params), ds, args.out)
    if not report.valid:
        print(f"tracking failed at {report.error}; {len(preds)} frames written to {args.out}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {len(preds)} predictions to {args.out}", file=out)
    print(_metric_line(report), file=out)
    return EXIT_OK


def _metric_line(r) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in r.metrics().items())


def cmd_eval(args, cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    seqs, preds = args.sequence or [], args.predictions or []
    if not seqs or len(seqs) != len(preds):
        raise UsageError("give one --predictions file per --sequence directory")
    datasets = [load_sequence(_existing(s, "--sequence")) for s in seqs]
    pred_paths = [_existing(p, "--predictions") for p in preds]

    def job(ds: SequenceDataset, path: Path):
        return lambda: evaluate_predictions(read_boxes(path), ds)

    reports = evaluate_many([job(d, p) for d, p in zip(datasets, pred_paths)], cfg["run.workers"])
    if args.csv:
        write_report_csv(args.csv, reports)
    if args.json:
        write_report_json(args.json, reports)
    for r in reports:
        print(f"{r.name}: {_metric_line(r)}", file=out)
    return EXIT_OK


def cmd_demo(args, cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    t0 = time.perf_counter()
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    seed = cfg["run.seed"]
    backend = make_backend(cfg)
    tcfg = tracker_config(cfg)
    lcfg = loss_config(cfg)
    n, size, target = cfg["demo.frames"], cfg["demo.frame_size"], cfg["demo.target"]

    frames, boxes = moving_square_sequence(n, size, seed=seed, target=target)
    ds = write_sequence(root / "sequence", frames, boxes, language="a red square drifting over a textured background")
    train_seed = seed + 1 + cfg["train.seed"]
    train_frames, train_boxes = moving_square_sequence(n, size, seed=10_000 + train_seed, target=target)

    bag = construct_bag(cfg, backend, ds.frame(0), ds.gt_boxes[0], _data_file("classes.txt"),
                        _data_file("attributes.txt"), _data_file("lexicon.json"), tau_val=cfg["demo.tau_val"])
    save_bag(bag, root / "bag.json")

    batch = training_batch(train_frames, train_boxes, backend, bag.embeddings, tcfg, cfg["train.samples"],
                           seed=train_seed, shift=cfg["train.shift"], scale_jitter=cfg["train.scale_jitter"],
                           loss_cfg=lcfg)
    steps = cfg["train.steps"]
    result = train_toy(init_params(cfg, train_seed), batch, steps=steps, lr=cfg["train.lr"], loss_cfg=lcfg,
                       seed=train_seed, clip_norm=cfg["train.clip_norm"])
    result.write_csv(root / "loss_trace.csv")
    save_params(root / "params.json", result.params, {"steps": steps, "lr": cfg["train.lr"]})
    t_train = time.perf_counter()

    report, preds = run_ope(session_factory(cfg, backend, bag, result.params), ds, root / "predictions.txt")
    write_report_csv(root / "report.csv", [report])
    write_report_json(root / "report.json", [report])

    tracked = [iou(p, g) for p, g in zip(preds[1:], ds.gt_boxes[1:]) if g is not None]
    mean_iou = float(np.mean(tracked)) if tracked else 0.0
    ratio = result.final_loss / result.initial_loss
    enforce = steps > 0
    checks = {
        "mean_iou": (mean_iou >= cfg["demo.min_iou"], f"mean IoU over tracked frames {mean_iou:.4f} >= {cfg['demo.min_iou']}"),
        "loss_ratio": (ratio < cfg["demo.max_loss_ratio"], f"final/initial loss {ratio:.4f} < {cfg['demo.max_loss_ratio']}"),
        "steps": (steps <= 2000, f"training steps {steps} <= 2000"),
        "tracking": (report.valid, "every frame tracked" if report.valid else f"tracking failed: {report.error}"),
    }
    summary = {
        "seed": seed, "steps": steps, "initial_loss": result.initial_loss, "final_loss": result.final_loss,
        "loss_ratio": ratio, "mean_iou": mean_iou, "metrics": report.metrics(), "bag_counts": bag.counts(),
        "thresholds_enforced": enforce, "checks": {k: bool(v[0]) for k, v in checks.items()},
    }
    write_atomic(root / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")

    print(f"bag: {bag.counts()}", file=out)
    print(f"training: {steps} steps, loss {result.initial_loss:.4f} -> {result.final_loss:.4f}", file=out)
    print(_metric_line(report), file=out)
    for name, (ok, text) in checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {text}", file=out)
    elapsed = time.perf_counter() - t0
    print(f"elapsed {elapsed:.1f}s (training {t_train - t0:.1f}s)", file=out)
    if enforce and not all(ok for ok, _ in checks.values()):
        if not args.no_enforce:
            return EXIT_ACCEPT
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    results = run_gradcheck(
        points=cfg["gradcheck.points"], seed=cfg["run.seed"], epsilon=cfg["gradcheck.epsilon"],
        floor=cfg["gradcheck.floor"], corrupt=args.corrupt_gradient, loss_cfg=loss_config(cfg),
        dim=cfg["gradcheck.dim"], grid=cfg["gradcheck.grid"], batch=cfg["gradcheck.batch"],
        channels=cfg["gradcheck.channels"], stages=cfg["head.stages"],
    )
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"point seed={r.seed} params={r.n_params} max_rel_error={r.max_rel_error:.3e}", file=out)
    tol = cfg["gradcheck.tolerance"]
    ok = worst <= tol
    print(f"[{'PASS' if ok else 'FAIL'}] max relative error {worst:.3e} <= {tol:g}", file=out)
    if args.out:
        doc = {"tolerance": tol, "epsilon": cfg["gradcheck.epsilon"], "max_rel_error": worst,
               "points": [{"seed": r.seed, "max_rel_error": r.max_rel_error, "per_group": r.per_group}
                          for r in results]}
        write_atomic(args.out, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return EXIT_OK if ok else EXIT_ACCEPT


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cldtrack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-bag", help="build and validate a bag of descriptions from a first frame")
    b.add_argument("--sequence", help="sequence directory; uses frame 1 and its groundtruth box")
    b.add_argument("--frame", help="image file (.png/.jpg/.npy)")
    b.add_argument("--bbox", help="target box as x,y,w,h")
    b.add_argument("--class-dict", help="class dictionary (default: bundled toy list)")
    b.add_argument("--attr-dict", help="attribute dictionary (default: bundled toy list)")
    b.add_argument("--lexicon", help="synonym lexicon JSON (default: bundled toy lexicon)")
    b.add_argument("--exclusions", help="file of description texts to drop after validation")
    b.add_argument("--out", required=True, help="bag JSON to write")
    b.set_defaults(func=cmd_build_bag)

    t = sub.add_parser("track", help="run one-pass tracking over a sequence")
    t.add_argument("--sequence", required=True)
    t.add_argument("--bag", required=True)
    t.add_argument("--params", required=True)
    t.add_argument("--out", required=True, help="predictions file (x,y,w,h per line)")
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score prediction files against groundtruth")
    e.add_argument("--sequence", action="append", help="sequence directory (repeatable)")
    e.add_argument("--predictions", action="append", help="predictions file, one per --sequence")
    e.add_argument("--csv", help="report CSV path")
    e.add_argument("--json", help="report JSON path")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("demo", help="synthetic end-to-end run: data, bag, training, tracking, report")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--no-enforce", action="store_true", help="report threshold failures without failing")
    d.set_defaults(func=cmd_demo)

    g = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    g.add_argument("--out", help="JSON report path")
    g.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_grad_check)

    for sp in (b, t, e, d, g):
        add_config_arguments(sp)
    return p


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args, environ)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"cldtrack {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BagConstructionError as exc:
        print(f"cldtrack {args.command}: bag construction failed at stage '{exc.stage}': {exc}", file=sys.stderr)
        return EXIT_DATA
    except DATA_ERRORS as exc:
        print(f"cldtrack {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"cldtrack {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
