"""
Seeded Graph-Cut Foreground Segmenter
Builds a pixel flow network from an image, solves exact max-flow/min-cut with
Dinic's algorithm and turns the source side of the cut into a foreground mask.
"""

import logging
import shutil
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from datasetkit import DatasetManifest, ManifestRecord, read_image, read_manifest, write_mask, write_manifest

Coord = Tuple[int, int]


class FlowNetwork:
    """
    Directed network with integer capacities.

    Every add_edge call stores a forward edge at an even index and its residual
    twin at index ^ 1, so edge e and e ^ 1 always form a pair.
    """

    def __init__(self, n: int, source: int, sink: int):
        if n < 2 or not (0 <= source < n and 0 <= sink < n):
            raise ValueError(f"Invalid network: n={n}, source={source}, sink={sink}")
        if source == sink:
            raise ValueError("Source and sink must differ")
        self.n = n
        self.source = source
        self.sink = sink
        self.adj: List[List[int]] = [[] for _ in range(n)]
        self.head: List[int] = []
        self.to: List[int] = []
        self.cap: List[int] = []
        self.flow: List[int] = []

    def add_edge(self, u: int, v: int, capacity: int) -> int:
        if not (0 <= u < self.n and 0 <= v < self.n):
            raise ValueError(f"Edge ({u}, {v}) outside node range [0, {self.n})")
        capacity = int(capacity)
        if capacity < 0:
            raise ValueError(f"Negative capacity {capacity} on edge ({u}, {v})")
        e = len(self.to)
        for a, b, c in ((u, v, capacity), (v, u, 0)):
            self.head.append(a)
            self.to.append(b)
            self.cap.append(c)
            self.flow.append(0)
            self.adj[a].append(len(self.to) - 1)
        return e

    @property
    def edges(self) -> List[Tuple[int, int, int]]:
        """User-added edges as (from, to, capacity)"""
        return [(self.head[e], self.to[e], self.cap[e]) for e in range(0, len(self.to), 2)]

    def edge_flow(self, e: int) -> int:
        return self.flow[e]

    def residual(self, e: int) -> int:
        return self.cap[e] - self.flow[e]

    def reset(self) -> None:
        self.flow = [0] * len(self.flow)

    def _levels(self) -> List[int]:
        level = [-1] * self.n
        level[self.source] = 0
        queue = deque([self.source])
        while queue:
            u = queue.popleft()
            for e in self.adj[u]:
                v = self.to[e]
                if level[v] < 0 and self.cap[e] - self.flow[e] > 0:
                    level[v] = level[u] + 1
                    queue.append(v)
        return level

    def _blocking_flow(self, level: List[int]) -> int:
        s, t = self.source, self.sink
        it = [0] * self.n
        total = 0
        while True:
            path: List[int] = []
            u = s
            while u != t:
                adj = self.adj[u]
                while it[u] < len(adj):
                    e = adj[it[u]]
                    if self.cap[e] - self.flow[e] > 0 and level[self.to[e]] == level[u] + 1:
                        break
                    it[u] += 1
                if it[u] < len(adj):
                    e = adj[it[u]]
                    path.append(e)
                    u = self.to[e]
                    continue
                if u == s:
                    return total
                # dead end: drop u from the level graph and retreat
                level[u] = -1
                e = path.pop()
                u = self.head[e]
                it[u] += 1
            push = min(self.cap[e] - self.flow[e] for e in path)
            for e in path:
                self.flow[e] += push
                self.flow[e ^ 1] -= push
            total += push

    def source_side(self) -> Set[int]:
        seen = {self.source}
        queue = deque([self.source])
        while queue:
            u = queue.popleft()
            for e in self.adj[u]:
                v = self.to[e]
                if v not in seen and self.cap[e] - self.flow[e] > 0:
                    seen.add(v)
                    queue.append(v)
        return seen

    def sink_side(self) -> Set[int]:
        seen = {self.sink}
        queue = deque([self.sink])
        while queue:
            v = queue.popleft()
            for e in self.adj[v]:
                u = self.to[e]
                # e ^ 1 is the edge u -> v
                if u not in seen and self.cap[e ^ 1] - self.flow[e ^ 1] > 0:
                    seen.add(u)
                    queue.append(u)
        return seen

    def source_maximal_side(self) -> Set[int]:
        """Complement of the nodes that can still reach the sink in the residual graph."""
        return set(range(self.n)) - self.sink_side()

    def cut_capacity(self, source_side: Set[int]) -> int:
        return sum(c for u, v, c in self.edges if u in source_side and v not in source_side)


def max_flow(net: FlowNetwork) -> Tuple[int, Set[int]]:
    """
    Exact maximum flow with Dinic's algorithm.

    Returns the flow value and the nodes reachable from the source in the final
    residual graph (the source-minimal minimum cut).
    """
    net.reset()
    value = 0
    while True:
        level = net._levels()
        if level[net.sink] < 0:
            break
        value += net._blocking_flow(level)
    return value, net.source_side()


@dataclass
class SeedSet:
    foreground: List[Coord]
    background: List[Coord]

    def validate(self, h: int, w: int) -> None:
        if not self.foreground or not self.background:
            raise ValueError("Seed set needs at least one foreground and one background seed")
        for r, c in self.foreground + self.background:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"Seed ({r}, {c}) outside a {h}x{w} image")
        overlap = set(self.foreground) & set(self.background)
        if overlap:
            raise ValueError(f"Seeds marked both foreground and background: {sorted(overlap)[:5]}")


@dataclass
class SegmenterParams:
    sigma: float = 0.1
    connectivity: int = 4
    radius_fraction: float = 0.15
    seed_count: int = 25
    quantization: int = 10_000

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if not 0 < self.radius_fraction <= 0.5:
            raise ValueError(f"radius fraction must lie in (0, 0.5], got {self.radius_fraction}")
        if self.seed_count < 1:
            raise ValueError(f"seed count must be >= 1, got {self.seed_count}")
        if int(self.quantization) != self.quantization or self.quantization < 1:
            raise ValueError(f"quantization scale must be a positive integer, got {self.quantization}")


def border_pixels(h: int, w: int) -> List[Coord]:
    return [(r, c) for r in range(h) for c in range(w) if r in (0, h - 1) or c in (0, w - 1)]


def sample_center_seeds(h: int, w: int, params: SegmenterParams, rng_seed: int = 0) -> SeedSet:
    """Foreground seeds drawn without replacement from the central disk; background = 1-pixel frame"""
    if h < 3 or w < 3:
        raise ValueError(f"Center seeding needs an image of at least 3x3, got {h}x{w}")
    radius = params.radius_fraction * min(h, w)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    candidates = [
        (r, c) for r in range(1, h - 1) for c in range(1, w - 1)
        if (r - cy) ** 2 + (c - cx) ** 2 <= radius ** 2
    ]
    if len(candidates) < params.seed_count:
        raise ValueError(
            f"Center disk of radius {radius:.2f} holds {len(candidates)} interior pixels, "
            f"{params.seed_count} seeds required; raise the radius fraction or lower the seed count"
        )
    rng = np.random.default_rng(rng_seed)
    picked = rng.choice(len(candidates), size=params.seed_count, replace=False)
    foreground = sorted(candidates[i] for i in picked)
    return SeedSet(foreground, border_pixels(h, w))


def nlink_capacity(color_a: np.ndarray, color_b: np.ndarray, params: SegmenterParams) -> np.ndarray:
    """round(Q * exp(-|c_a - c_b|^2 / (2 sigma^2))), rounding half up"""
    dist2 = np.sum((np.asarray(color_a, np.float64) - np.asarray(color_b, np.float64)) ** 2, axis=-1)
    weight = params.quantization * np.exp(-dist2 / (2 * params.sigma ** 2))
    return np.floor(weight + 0.5).astype(np.int64)


def _neighbor_offsets(connectivity: int) -> List[Coord]:
    offsets = [(0, 1), (1, 0)]
    if connectivity == 8:
        offsets += [(1, 1), (1, -1)]
    return offsets


def build_graph(image: np.ndarray, seeds: SeedSet, params: SegmenterParams) -> FlowNetwork:
    """One node per pixel plus source and sink; n-links both ways, hard t-links for seeds"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w = image.shape[:2]
    seeds.validate(h, w)
    n_pixels = h * w
    net = FlowNetwork(n_pixels + 2, n_pixels, n_pixels + 1)

    pairs = []
    for dr, dc in _neighbor_offsets(params.connectivity):
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        if r1 <= r0 or c1 <= c0:
            continue
        caps = nlink_capacity(image[r0:r1, c0:c1], image[r0 + dr:r1 + dr, c0 + dc:c1 + dc], params)
        rows, cols = np.mgrid[r0:r1, c0:c1]
        src = (rows * w + cols).ravel()
        dst = ((rows + dr) * w + (cols + dc)).ravel()
        pairs.append((src, dst, caps.ravel()))

    total, largest = 0, 0
    for src, dst, caps in pairs:
        for p, q, c in zip(src.tolist(), dst.tolist(), caps.tolist()):
            net.add_edge(p, q, c)
            net.add_edge(q, p, c)
            total += 2 * c
            largest = max(largest, c)

    terminal = max(params.quantization * n_pixels * max(largest, 1), total + 1)
    for r, c in seeds.foreground:
        net.add_edge(net.source, r * w + c, terminal)
    for r, c in seeds.background:
        net.add_edge(r * w + c, net.sink, terminal)
    return net


def segment_with_seeds(image: np.ndarray, seeds: SeedSet, params: SegmenterParams) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    net = build_graph(image, seeds, params)
    flow_value, side = max_flow(net)
    mask = np.zeros(h * w, dtype=bool)
    mask[np.fromiter((v for v in side if v < h * w), dtype=np.int64)] = True
    mask = mask.reshape(h, w)
    if not all(mask[r, c] for r, c in seeds.foreground) or any(mask[r, c] for r, c in seeds.background):
        raise RuntimeError("Min cut separated a hard seed from its terminal")
    logging.debug(f"Segmented {h}x{w} image: flow={flow_value}, foreground={int(mask.sum())} px")
    return mask


def segment(image: np.ndarray, params: Optional[SegmenterParams] = None, rng_seed: int = 0) -> np.ndarray:
    """Foreground mask = pixels on the source side of the minimum cut"""
    params = params or SegmenterParams()
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    seeds = sample_center_seeds(h, w, params, rng_seed)
    return segment_with_seeds(image, seeds, params)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def segment_manifest(manifest_path, out_dir, params: Optional[SegmenterParams] = None,
                     rng_seed: int = 0, threads: int = 1) -> Dict:
    """
    Segment every image listed in a manifest and write a new manifest whose mask
    column points at the computed masks. Images are copied next to their masks so
    the new manifest only names files under out_dir. Unreadable or unsegmentable
    images are skipped and reported.
    """
    params = params or SegmenterParams()
    manifest = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    out_dir = Path(out_dir)
    for sub in ("images", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    def work(index_record):
        index, record = index_record
        try:
            image = read_image(root / record.image_path)
            return segment(image, params, rng_seed + index), None
        except Exception as e:
            return None, f"{record.image_path}: {e}"

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(work, enumerate(manifest.records)))

    records, failed, fractions = [], [], []
    for index, (record, (mask, error)) in enumerate(zip(manifest.records, results)):
        if mask is None:
            logging.warning(f"Skipping {error}")
            failed.append(record.image_path)
            continue
        mask_rel = f"masks/{index:06d}.pgm"
        write_mask(out_dir / mask_rel, mask)
        image_rel = f"images/{index:06d}{Path(record.image_path).suffix}"
        source, target = root / record.image_path, out_dir / image_rel
        if source.resolve() != target.resolve():
            shutil.copyfile(source, target)
        records.append(ManifestRecord(image_rel, mask_rel, record.label))
        fractions.append(float(mask.mean()))

    if not records:
        raise ValueError(f"No image in {manifest_path} could be segmented")
    write_manifest(out_dir / "manifest.txt", DatasetManifest(records, list(manifest.label_names)))
    logging.info(f"Segmented {len(records)} images, {len(failed)} skipped")
    return {
        "segmented": len(records),
        "skipped": len(failed),
        "failed_images": failed,
        "mean_foreground_fraction": float(np.mean(fractions)),
    }
