"""End-to-end processing of a grayscale volume: tiled inference, cell detection, vessel tracing."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .arch import Network
from .ivote import IVoteParams, detect_cells
from .phantom import CELL, VESSEL
from .structures import CellList, VesselGraph
from .tiling import TileLayout, split_tiles, write_core
from .tracer import TracerParams, build_graph
from .volume_io import Volume, save_volume, to_uint8

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A failure tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineParams:
    tile: int = 64
    overlap: int = 32
    threads: int = 1
    queue_size: int = 2
    cell_rmax: int = 8
    ivote: IVoteParams = IVoteParams()
    tracer: TracerParams = TracerParams()


@dataclass
class PipelineStats:
    tiles: int = 0
    max_in_flight: int = 0
    seconds: Dict[str, float] = field(default_factory=dict)


@dataclass
class PipelineResult:
    probabilities: np.ndarray  # (classes, X, Y, Z) float32
    labels: np.ndarray  # (X, Y, Z) uint8
    cells: CellList
    graph: VesselGraph
    stats: PipelineStats


def normalise(data: np.ndarray) -> np.ndarray:
    """Network input in [0, 1]: 8-bit data is divided by 255, floats pass through."""
    if data.dtype == np.uint8:
        return data.astype(np.float32) / 255.0
    return np.asarray(data, dtype=np.float32)


def _pad_to_multiple(block: np.ndarray, divisor: int):
    pad = [(0, (-n) % divisor) for n in block.shape]
    if not any(p for _, p in pad):
        return block
    return np.pad(block, pad, mode="symmetric")


def infer_tiles(
    net: Network,
    data: np.ndarray,
    tile: int,
    overlap: int,
    threads: int = 1,
    queue_size: int = 2,
    stats: Optional[PipelineStats] = None,
) -> np.ndarray:
    """Per-class probabilities for a whole volume from overlapped tiles.

    A reader thread feeds tiles through a bounded queue to ``threads``
    workers; results are written into the output as they arrive. At most a
    fixed number of tiles is alive at once regardless of the volume size.
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    layout: TileLayout = split_tiles(data.shape, tile, overlap)
    divisor = net.config.divisor
    out = np.empty((net.config.num_classes,) + data.shape, np.float32)
    stats = stats if stats is not None else PipelineStats()
    stats.tiles = len(layout)
    todo: queue.Queue = queue.Queue(maxsize=queue_size)
    done: queue.Queue = queue.Queue(maxsize=queue_size)
    lock = threading.Lock()
    alive = [0]
    stop = threading.Event()

    def enter():
        with lock:
            alive[0] += 1
            stats.max_in_flight = max(stats.max_in_flight, alive[0])

    def reader():
        for t in layout.tiles:
            if stop.is_set():
                break
            enter()
            todo.put((t, np.ascontiguousarray(data[t.region])))
        for _ in range(threads):
            todo.put(None)

    def worker():
        while True:
            item = todo.get()
            if item is None:
                done.put(None)
                return
            t, block = item
            try:
                probs = net.predict(_pad_to_multiple(block, divisor))
                probs = probs[(0, slice(None)) + tuple(slice(0, s) for s in t.size)]
                done.put((t, probs, None))
            except Exception as exc:  # surfaced on the main thread
                stop.set()
                done.put((t, None, exc))

    pool = [threading.Thread(target=reader, daemon=True)] + [threading.Thread(target=worker, daemon=True) for _ in range(threads)]
    for th in pool:
        th.start()
    finished = 0
    error = None
    while finished < threads:
        item = done.get()
        if item is None:
            finished += 1
            continue
        t, probs, exc = item
        if exc is not None:
            error = error or (t, exc)
        else:
            write_core(out, t, probs.astype(np.float32, copy=False))
        with lock:
            alive[0] -= 1
    for th in pool:
        th.join()
    if error is not None:
        t, exc = error
        raise RuntimeError(f"tile {t.index} at {t.origin}: {exc}") from exc
    return out


def run_pipeline(volume, net: Network, params: PipelineParams = PipelineParams(), out_dir=None) -> PipelineResult:
    """Segment, detect cells and trace vessels; optionally write every artifact to ``out_dir``."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    voxel = volume.voxel_size if isinstance(volume, Volume) else (1.0, 1.0, 1.0)
    stats = PipelineStats()
    if net.config.spatial_rank != data.ndim:
        raise PipelineError("inference", f"network is {net.config.spatial_rank}D but the volume is {data.ndim}D")
    if net.config.in_channels != 1:
        raise PipelineError("inference", f"network expects {net.config.in_channels} input channels; volumes have 1")

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            value = fn()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, str(exc)) from exc
        stats.seconds[name] = time.perf_counter() - t0
        log.info("%s done in %.2f s", name, stats.seconds[name])
        return value

    x = normalise(data)
    probs = stage("inference", lambda: infer_tiles(net, x, params.tile, params.overlap, params.threads, params.queue_size, stats))
    labels = probs.argmax(axis=0).astype(np.uint8)
    cells = stage("detect-cells", lambda: detect_cells(probs[CELL], params.cell_rmax, params.ivote))
    graph = stage("trace-vessels", lambda: build_graph(probs[VESSEL], params.tracer))
    result = PipelineResult(probs, labels, cells, graph, stats)
    if out_dir is not None:
        stage("write", lambda: write_outputs(result, out_dir, voxel))
    return result


def write_outputs(result: PipelineResult, out_dir, voxel_size=(1.0, 1.0, 1.0)) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for c in range(result.probabilities.shape[0]):
        save_volume(Volume(to_uint8(result.probabilities[c]), voxel_size), d / f"prob_class{c}.raw")
    save_volume(Volume(result.labels, voxel_size), d / "labels.raw")
    result.cells.save(d / "cells.csv")
    result.graph.save(d / "vessels.txt")
    (d / "vessels_summary.json").write_text(result.graph.summary_text())
    (d / "pipeline.json").write_text(json.dumps({"tiles": result.stats.tiles}, indent=2) + "\n")
