"""Deterministic SVG rendering of registered maps and trajectories.

Hand-written SVG so output bytes depend only on the inputs: fixed float
formatting, no timestamps, no library-generated ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RenderConfig:
    width: int = 900
    height: int = 600
    margin: float = 40.0
    max_points: int = 50000
    point_radius: float = 0.8


def fit_affine(bbox, cfg: RenderConfig):
    """(scale, offset) mapping world (x, y) -> pixel (x*s+ox, -y*s+oy).

    Aspect-preserving; the y axis flips so north is up.
    """
    xmin, ymin, xmax, ymax = bbox
    span_x = max(xmax - xmin, 1e-9)
    span_y = max(ymax - ymin, 1e-9)
    scale = min(
        (cfg.width - 2 * cfg.margin) / span_x, (cfg.height - 2 * cfg.margin) / span_y
    )
    ox = cfg.margin - xmin * scale + ((cfg.width - 2 * cfg.margin) - span_x * scale) / 2.0
    oy = cfg.height - cfg.margin + ymin * scale - ((cfg.height - 2 * cfg.margin) - span_y * scale) / 2.0
    return scale, (ox, oy)


def world_to_pixel(xy, scale, offset):
    return xy[0] * scale + offset[0], -xy[1] * scale + offset[1]


def _nice_length(target: float) -> float:
    if target <= 0:
        return 1.0
    mag = 10.0 ** np.floor(np.log10(target))
    for mult in (5.0, 2.0, 1.0):
        if mult * mag <= target:
            return float(mult * mag)
    return float(mag)


def _polyline(points_px, color: str, dash: str = "") -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points_px)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (
        f'<polyline points="{pts}" fill="none" stroke="{color}" '
        f'stroke-width="1.5"{dash_attr}/>'
    )


def render_map(
    clouds,
    poses,
    path: str,
    gt_poses=None,
    cfg: RenderConfig | None = None,
    include_points: bool = True,
) -> None:
    """Bird's-eye SVG: global map points, estimated trajectory, optional
    ground-truth trajectory, and a scale bar."""
    cfg = cfg or RenderConfig()
    from ..geometry import transform_points  # local import avoids cycle at module load

    world_pts = []
    if include_points and clouds:
        if len(clouds) != len(poses):
            raise ValueError("clouds and poses length mismatch")
        world_pts = [transform_points(p, c.points) for p, c in zip(poses, clouds)]
    traj = np.stack([p.translation for p in poses]) if poses else np.zeros((0, 2))
    gt_traj = (
        np.stack([p.translation for p in gt_poses]) if gt_poses else np.zeros((0, 2))
    )

    chunks = world_pts + [traj, gt_traj]
    nonempty = [c for c in chunks if c.shape[0] > 0]
    if nonempty:
        allpts = np.concatenate(nonempty, axis=0)
        bbox = (
            float(allpts[:, 0].min()),
            float(allpts[:, 1].min()),
            float(allpts[:, 0].max()),
            float(allpts[:, 1].max()),
        )
    else:
        bbox = (0.0, 0.0, 1.0, 1.0)
    scale, offset = fit_affine(bbox, cfg)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {cfg.width} {cfg.height}">',
        f'<rect width="{cfg.width}" height="{cfg.height}" fill="white"/>',
    ]
    # axes frame
    parts.append(
        f'<rect x="{cfg.margin:.1f}" y="{cfg.margin:.1f}" '
        f'width="{cfg.width - 2 * cfg.margin:.1f}" height="{cfg.height - 2 * cfg.margin:.1f}" '
        'fill="none" stroke="#888" stroke-width="1"/>'
    )
    if world_pts:
        total = sum(c.shape[0] for c in world_pts)
        stride = max(1, int(np.ceil(total / cfg.max_points)))
        dots = []
        for chunk in world_pts:
            if len(dots) >= cfg.max_points:
                break
            for p in chunk[::stride]:
                x, y = world_to_pixel(p, scale, offset)
                dots.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{cfg.point_radius}"/>')
        dots = dots[: cfg.max_points]
        parts.append('<g fill="#30506d" fill-opacity="0.5">' + "".join(dots) + "</g>")
    if gt_traj.shape[0] > 1:
        parts.append(
            _polyline(
                [world_to_pixel(p, scale, offset) for p in gt_traj], "#2e9e4f", dash="6,4"
            )
        )
    if traj.shape[0] > 1:
        parts.append(_polyline([world_to_pixel(p, scale, offset) for p in traj], "#d1495b"))
    # scale bar, bottom left
    bar_m = _nice_length((bbox[2] - bbox[0]) / 5.0)
    bar_px = bar_m * scale
    x0, y0 = cfg.margin + 10.0, cfg.height - cfg.margin / 2.0
    parts.append(
        f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x0 + bar_px:.2f}" y2="{y0:.1f}" '
        'stroke="black" stroke-width="2"/>'
    )
    label = f"{bar_m:g} m"
    parts.append(f'<text x="{x0:.1f}" y="{y0 - 5.0:.1f}" font-size="12">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


def render_trajectories(poses, path: str, gt_poses=None, cfg: RenderConfig | None = None) -> None:
    render_map([], poses, path, gt_poses=gt_poses, cfg=cfg, include_points=False)
