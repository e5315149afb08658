"""Map topology graph and anchor/neighbor batch organization.

A topology graph connects spatially adjacent frames, either from initial
pose distances (oracle mode) or from rotation-invariant range-histogram
scan descriptors (place-recognition stand-in). Each frame becomes the
anchor of exactly one batch holding its k closest graph neighbors and the
ICP transforms from the anchor's frame into each neighbor's frame.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, PointCloud, pose_from_row, relative
from .register import IcpConfig, icp_pairwise


@dataclass
class TopologyConfig:
    source: str = "oracle_radius"  # or "descriptor"
    radius: float = 2.0
    k: int = 8
    descriptor_bins: int = 32
    descriptor_threshold: float = 0.15

    def __post_init__(self) -> None:
        if self.source not in ("oracle_radius", "descriptor"):
            raise ValueError(f"unknown topology source {self.source!r}")
        if self.k < 1 or self.radius <= 0 or self.descriptor_bins < 4:
            raise ValueError("invalid topology parameters")


@dataclass
class TopologyGraph:
    """Symmetric adjacency over frames; smaller edge weight = closer."""

    num_frames: int
    adjacency: list  # adjacency[i] = dict neighbor -> weight

    def edge_weight(self, i: int, j: int):
        return self.adjacency[i].get(j)

    def isolated_nodes(self) -> list:
        return [i for i, adj in enumerate(self.adjacency) if not adj]

    def edges(self):
        """Unique (i, j, weight) triples with i < j."""
        out = []
        for i, adj in enumerate(self.adjacency):
            for j, w in adj.items():
                if i < j:
                    out.append((i, j, w))
        return out


@dataclass
class Batch:
    """An anchor frame, its neighbor frames, and anchor->neighbor transforms.

    pairwise[n] maps the anchor's local frame into neighbors[n]'s local
    frame; low_confidence flags ICP fallbacks.
    """

    anchor: int
    neighbors: list
    pairwise: list = field(default=None)
    low_confidence: list = field(default=None)

    def __post_init__(self) -> None:
        if self.anchor in self.neighbors:
            raise ValueError("anchor cannot be its own neighbor")
        if len(set(self.neighbors)) != len(self.neighbors):
            raise ValueError("duplicate neighbor indices")
        if self.pairwise is not None and len(self.pairwise) != len(self.neighbors):
            raise ValueError("pairwise list must align with neighbors")


def scan_descriptor(cloud: PointCloud, bins: int = 32) -> np.ndarray:
    """L2-normalized histogram of point ranges from the sensor origin.

    Ranges are invariant to rotations about the origin and to point order,
    so the descriptor is a cheap place-recognition signature.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud has no descriptor")
    ranges = np.linalg.norm(cloud.points - cloud.sensor_origin, axis=1)
    top = float(ranges.max())
    if top == 0.0:
        hist = np.zeros(bins)
        hist[0] = float(len(cloud))
    else:
        hist, _ = np.histogram(ranges, bins=bins, range=(0.0, top))
    hist = hist.astype(np.float64)
    return hist / np.linalg.norm(hist)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 1.0
    return max(0.0, float(1.0 - float(np.dot(a, b)) / denom))


def build_topology(dataset, init_poses, cfg: TopologyConfig) -> TopologyGraph:
    """Connect spatially adjacent frames.

    oracle_radius: edge (i, j) iff the initial-pose translations are within
    cfg.radius; weight is that distance. descriptor: edge iff the cosine
    distance between scan descriptors is at most cfg.descriptor_threshold;
    weight is the cosine distance.
    """
    k = len(dataset.clouds)
    adjacency = [dict() for _ in range(k)]
    if cfg.source == "oracle_radius":
        if init_poses is None or len(init_poses) != k:
            raise ValueError("oracle_radius topology requires init poses for every frame")
        pos = np.stack([p.translation for p in init_poses])
        for i in range(k):
            d = np.linalg.norm(pos[i + 1 :] - pos[i], axis=1)
            for off in np.nonzero(d <= cfg.radius)[0]:
                j = i + 1 + int(off)
                w = float(d[off])
                adjacency[i][j] = w
                adjacency[j][i] = w
    else:
        desc = np.stack(
            [scan_descriptor(c, cfg.descriptor_bins) for c in dataset.clouds]
        )
        sim = desc @ desc.T
        for i in range(k):
            for j in range(i + 1, k):
                w = max(0.0, float(1.0 - sim[i, j]))
                if w <= cfg.descriptor_threshold:
                    adjacency[i][j] = w
                    adjacency[j][i] = w
    return TopologyGraph(num_frames=k, adjacency=adjacency)


def _temporal_pad(anchor: int, num_frames: int, exclude: set) -> list:
    """Frame indices nearest in time to anchor: i-1, i+1, i-2, ..."""
    order = []
    for step in range(1, num_frames):
        for cand in (anchor - step, anchor + step):
            if 0 <= cand < num_frames and cand not in exclude:
                order.append(cand)
                exclude.add(cand)
    return order


def organize_batches(graph: TopologyGraph, cfg: TopologyConfig) -> list:
    """One batch per frame: the k closest graph neighbors of each anchor.

    Ties break toward the lower frame index. Anchors with fewer than k
    graph neighbors are padded with the temporally nearest frames, so every
    batch has exactly k members.
    """
    if graph.num_frames < cfg.k + 1:
        raise ValueError("need at least k+1 frames to build batches")
    batches = []
    for i in range(graph.num_frames):
        ranked = sorted(graph.adjacency[i].items(), key=lambda jw: (jw[1], jw[0]))
        chosen = [j for j, _ in ranked[: cfg.k]]
        if len(chosen) < cfg.k:
            exclude = set(chosen) | {i}
            pad = _temporal_pad(i, graph.num_frames, exclude)
            chosen.extend(pad[: cfg.k - len(chosen)])
        batches.append(Batch(anchor=i, neighbors=chosen))
    return batches


def temporal_batches(num_frames: int, k: int) -> list:
    """Sequential-window batches: each anchor with its k temporal neighbors."""
    if num_frames < k + 1:
        raise ValueError("need at least k+1 frames to build batches")
    return [
        Batch(anchor=i, neighbors=_temporal_pad(i, num_frames, {i})[:k])
        for i in range(num_frames)
    ]


def batch_pairwise_transforms(
    dataset,
    batches: list,
    init_poses: list,
    icp_cfg: IcpConfig | None = None,
    threads: int = 1,
) -> list:
    """Fill each batch with ICP anchor->neighbor transforms.

    The transform for neighbor j of anchor i maps i's local frame into j's:
    with perfectly consistent poses, compose(T_j, T_j_i) == T_i. ICP starts
    from the init-pose relative transform and falls back to it (flagged
    low-confidence) when registration does not converge.
    """
    icp_cfg = icp_cfg or IcpConfig()

    def fill(batch: Batch) -> Batch:
        pairwise = []
        lowconf = []
        for j in batch.neighbors:
            guess = relative(init_poses[j], init_poses[batch.anchor])
            res = icp_pairwise(dataset.clouds[batch.anchor], dataset.clouds[j], guess, icp_cfg)
            if res.converged:
                pairwise.append(res.relative_pose)
                lowconf.append(False)
            else:
                pairwise.append(guess)
                lowconf.append(True)
        return Batch(batch.anchor, list(batch.neighbors), pairwise, lowconf)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fill, batches))
    return [fill(b) for b in batches]


# ---------------------------------------------------------------------------
# CSV persistence: topology.csv "i,j,weight", batches.csv "anchor,n1,...,nk",
# pairwise.csv "anchor,neighbor,tx,ty,theta"


def save_topology(graph: TopologyGraph, path: str) -> None:
    with open(path, "w") as f:
        for i, j, w in graph.edges():
            f.write(f"{i},{j},{repr(float(w))}\n")


def save_batches(batches: list, path: str) -> None:
    with open(path, "w") as f:
        for b in batches:
            f.write(",".join(str(v) for v in [b.anchor, *b.neighbors]) + "\n")


def save_pairwise(batches: list, path: str) -> None:
    with open(path, "w") as f:
        for b in batches:
            for j, t in zip(b.neighbors, b.pairwise):
                f.write(
                    f"{b.anchor},{j},"
                    + ",".join(repr(float(v)) for v in t.params())
                    + "\n"
                )


def load_batches(batches_path: str, pairwise_path: str | None = None) -> list:
    batches = []
    with open(batches_path) as f:
        for line in f:
            vals = [int(v) for v in line.strip().split(",") if v != ""]
            if vals:
                batches.append(Batch(anchor=vals[0], neighbors=vals[1:]))
    if pairwise_path and os.path.exists(pairwise_path):
        table = {}
        with open(pairwise_path) as f:
            for line in f:
                parts = line.strip().split(",")
                if len(parts) < 5:
                    continue
                i, j = int(parts[0]), int(parts[1])
                table[(i, j)] = pose_from_row(",".join(parts[2:]))
        for b in batches:
            b.pairwise = [table[(b.anchor, j)] for j in b.neighbors]
            b.low_confidence = [False] * len(b.neighbors)
    return batches
