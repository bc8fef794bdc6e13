"""Command-line front end: ``dvnet <verb> [options]``.

Every failure exits with status 1 and a message of the form
``dvnet: [stage] what went wrong`` on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .arch import NetworkConfig, build_network, count_parameters, plan_architecture, preset
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import eval_cells, eval_vessels
from .ivote import IVoteParams, detect_cells
from .phantom import PhantomParams, gen_phantom
from .pipeline import PipelineError, PipelineParams, infer_tiles, normalise, run_pipeline
from .structures import CellList, VesselGraph
from .tracer import TracerParams, build_graph
from .training import Sample, label_metrics, train
from .volume_io import Volume, load_volume, save_volume, to_uint8


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key=value parameter file for this verb")
    p.add_argument("--checkpoint", help="network checkpoint file")
    p.add_argument("--tile", type=int, default=64, help="tile edge for tiled inference (default 64)")
    p.add_argument("--overlap", type=int, default=32, help="tile overlap in voxels (default 32)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="run training without the background batch thread; all reductions use a fixed order regardless",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _network_config(args) -> NetworkConfig:
    if args.config:
        return NetworkConfig.load(args.config)
    return preset(args.preset, spatial_rank=args.rank)


def _load_net(args):
    if not args.checkpoint:
        raise StageError("load", "--checkpoint is required")
    try:
        return load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("load", f"{args.checkpoint}: {exc}") from exc


def _load(path, stage="load"):
    try:
        return load_volume(path)
    except (OSError, ValueError) as exc:
        raise StageError(stage, str(exc)) from exc


def _mask(path) -> np.ndarray:
    return normalise(_load(path).data)


def cmd_plan(args) -> None:
    cfg = _network_config(args)
    print(plan_architecture(cfg).format())
    print(f"parameters: {count_parameters(build_network(cfg, args.seed))}")


def cmd_phantom(args) -> None:
    params = PhantomParams.load(args.config) if args.config else PhantomParams()
    if args.shape:
        params = params.with_(shape=tuple(args.shape))
    ph = gen_phantom(params, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(Volume(to_uint8(ph.volume)), out / "volume.raw")
    save_volume(Volume(ph.labels.astype(np.uint8)), out / "labels.raw")
    ph.cells.save(out / "cells.csv")
    ph.graph.save(out / "vessels.txt")
    (out / "phantom.txt").write_text(params.to_text() + f"seed={args.seed}\n")
    print(f"phantom {params.shape}: {len(ph.cells)} cells, {ph.graph.n_edges} vessel edges -> {out}")


def _samples(dirs: List[str]) -> List[Sample]:
    out = []
    for d in dirs:
        vol = _load(Path(d) / "volume.raw")
        lab = _load(Path(d) / "labels.raw")
        out.append(Sample(normalise(vol.data), lab.data.astype(np.int64)))
    return out


def cmd_train(args) -> None:
    cfg = _network_config(args)
    if args.data:
        data = _samples(args.data)
    else:
        pp = PhantomParams(shape=tuple(args.phantom_shape))
        data = [Sample(p.volume, p.labels) for p in (gen_phantom(pp, args.seed + 1000 + i) for i in range(args.phantoms))]
    val = _samples(args.validation) if args.validation else None
    res = train(
        cfg,
        data,
        args.iterations,
        loss_kind=args.loss,
        seed=args.seed,
        batch_size=args.batch_size,
        crop_shape=tuple(args.crop) if args.crop else None,
        validation=val,
        val_every=args.val_every,
        checkpoint_path=None,
        history_path=args.history,
        prefetch=not args.deterministic,
        log_every=args.log_every,
    )
    out = args.checkpoint or "dvnet.ckpt"
    save_checkpoint(res.network, out)
    last = res.history[-1]
    print(f"trained {args.iterations} iterations in {res.elapsed:.1f} s: loss {last.loss:.4f} accuracy {last.accuracy:.4f} -> {out}")


def cmd_predict(args) -> None:
    net = _load_net(args)
    vol = _load(args.input)
    try:
        probs = infer_tiles(net, normalise(vol.data), args.tile, args.overlap, args.threads)
    except Exception as exc:
        raise StageError("inference", str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in range(probs.shape[0]):
        save_volume(Volume(to_uint8(probs[c]), vol.voxel_size), out / f"prob_class{c}.raw")
    save_volume(Volume(probs.argmax(0).astype(np.uint8), vol.voxel_size), out / "labels.raw")
    print(f"wrote {probs.shape[0]} class masks and labels -> {out}")


def cmd_detect(args) -> None:
    mask = _mask(args.input)
    params = IVoteParams(threads=args.threads)
    cells = detect_cells(mask, args.rmax, params)
    cells.save(args.out)
    print(f"{len(cells)} cells -> {args.out}")


def cmd_trace(args) -> None:
    mask = _mask(args.input)
    graph = build_graph(mask, TracerParams(threshold=args.threshold))
    graph.save(args.out)
    Path(str(args.out) + ".summary.json").write_text(graph.summary_text())
    s = graph.summary()
    print(f"{s['vertices']} vertices, {s['edges']} edges, length {s['total_length']:.1f} -> {args.out}")


def cmd_pipeline(args) -> None:
    net = _load_net(args)
    vol = _load(args.input)
    params = PipelineParams(tile=args.tile, overlap=args.overlap, threads=args.threads, cell_rmax=args.rmax, ivote=IVoteParams(threads=args.threads))
    res = run_pipeline(vol, net, params, args.out)
    print(f"{len(res.cells)} cells, {res.graph.n_edges} vessel edges from {res.stats.tiles} tiles -> {args.out}")


def cmd_evaluate(args) -> None:
    rows = []
    if args.cells:
        if not args.truth_cells:
            raise StageError("evaluate", "--cells needs --truth-cells")
        r = eval_cells(CellList.load(args.cells), CellList.load(args.truth_cells), args.match_dist)
        rows.append(("cells", r))
    if args.vessels:
        if not args.truth_vessels:
            raise StageError("evaluate", "--vessels needs --truth-vessels")
        r = eval_vessels(VesselGraph.load(args.vessels), VesselGraph.load(args.truth_vessels), args.sigma)
        rows.append(("vessels", r))
    lines = ["target,tp,fp,fn,precision,recall,f_score"]
    for name, r in rows:
        lines.append(f"{name},{r.tp:g},{r.fp:g},{r.fn:g},{r.precision:.6f},{r.recall:.6f},{r.f_score:.6f}")
    if args.labels:
        if not args.truth_labels:
            raise StageError("evaluate", "--labels needs --truth-labels")
        pred = _load(args.labels).data
        truth = _load(args.truth_labels).data
        if pred.shape != truth.shape:
            raise StageError("evaluate", f"label volumes differ in shape: {pred.shape} vs {truth.shape}")
        m = label_metrics(pred, truth, args.classes)
        lines.append("")
        lines.append("class,iou")
        for c, v in enumerate(m.per_class_iou):
            lines.append(f"{c},{v:.6f}")
        lines.append(f"mean,{m.mean_iou:.6f}")
        lines.append(f"accuracy,{m.accuracy:.6f}")
    if len(lines) == 1 and not args.labels:
        raise StageError("evaluate", "nothing to evaluate: give --cells, --vessels or --labels")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = argparse.ArgumentParser(prog="dvnet", description="Volumetric segmentation, cell detection and vessel tracing.")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("plan", parents=[common], help="print the layer plan of a network configuration")
    s.add_argument("--preset", default="v3", choices=["v1", "v2", "v3"])
    s.add_argument("--rank", type=int, default=3, choices=[2, 3])
    s.set_defaults(fn=cmd_plan)

    s = sub.add_parser("phantom", parents=[common], help="generate a synthetic volume with ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--shape", type=int, nargs=3)
    s.set_defaults(fn=cmd_phantom)

    s = sub.add_parser("train", parents=[common], help="train a network")
    s.add_argument("--preset", default="v1", choices=["v1", "v2", "v3"])
    s.add_argument("--rank", type=int, default=3, choices=[2, 3])
    s.add_argument("--data", nargs="+", help="phantom directories (volume.raw + labels.raw)")
    s.add_argument("--phantoms", type=int, default=4, help="phantoms to generate when --data is absent")
    s.add_argument("--phantom-shape", type=int, nargs=3, default=[32, 32, 32])
    s.add_argument("--validation", nargs="+")
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--loss", choices=["dice", "xent"], default="dice")
    s.add_argument("--batch-size", type=int, default=2)
    s.add_argument("--crop", type=int, nargs=3)
    s.add_argument("--val-every", type=int, default=100)
    s.add_argument("--history", help="CSV file for the training history")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="tiled inference to per-class masks")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("detect-cells", parents=[common], help="cell centres from a cell-probability mask")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rmax", type=int, default=8)
    s.set_defaults(fn=cmd_detect)

    s = sub.add_parser("trace-vessels", parents=[common], help="vessel graph from a vessel-probability mask")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(fn=cmd_trace)

    s = sub.add_parser("pipeline", parents=[common], help="inference, cell detection and vessel tracing")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rmax", type=int, default=8)
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("evaluate", parents=[common], help="score results against ground truth (CSV report)")
    s.add_argument("--cells")
    s.add_argument("--truth-cells")
    s.add_argument("--match-dist", type=float)
    s.add_argument("--vessels")
    s.add_argument("--truth-vessels")
    s.add_argument("--sigma", type=float, default=2.0)
    s.add_argument("--labels")
    s.add_argument("--truth-labels")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (StageError, PipelineError) as exc:
        print(f"dvnet: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is tagged with the verb that failed
        print(f"dvnet: [{args.verb}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
