"""Part-membership maps, misalignment measures, and sweep reports.

Two map sources: nearest_part_map labels each spatial cell by the most
similar pooled part vector (cosine), which visualizes how often content
strays from its stripe; rpp_argmax_map reads the learned soft assignment
directly. Both render to a paletted PNG and to a plain integer grid file
for exact assertions.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .heads import uniform_pool

log = logging.getLogger(__name__)

# fixed rendering palette, one RGB per part index (cycles beyond 12)
MAP_PALETTE = [
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
    (145, 30, 180), (70, 240, 240), (245, 130, 48), (240, 50, 230),
    (210, 245, 60), (0, 128, 128), (170, 110, 40), (128, 128, 128),
]


@dataclass
class PartMap:
    labels: np.ndarray  # (M, N) int part indices
    p: int
    source: str  # "nearest" or "rpp"
    masses: np.ndarray | None = None  # (p,) soft mass per part, rpp only
    empty_parts: list[int] = field(default_factory=list)
    zero_norm_cells: int = 0


def nearest_part_map(T: np.ndarray, g: np.ndarray) -> PartMap:
    """Label every cell with the cosine-nearest part vector.

    T is a single (M, N, C) tensor, g the (p, C) pooled parts. Ties go to the
    lowest part index. A zero-norm fiber cannot be compared; it keeps its own
    uniform-stripe index and is counted in zero_norm_cells.
    """
    if T.ndim != 3 or g.ndim != 2 or T.shape[-1] != g.shape[-1]:
        raise ValueError(f"incompatible shapes T{T.shape} g{g.shape}")
    m, n, _ = T.shape
    p = len(g)
    if p > m or m % p:
        raise ConfigError(f"cannot relate {m} rows to p={p} stripes")
    g_norm = np.linalg.norm(g, axis=1)
    if np.any(g_norm == 0.0):
        raise DataError("a pooled part vector has zero norm")
    fibers = T.reshape(-1, T.shape[-1])
    f_norm = np.linalg.norm(fibers, axis=1)
    sims = (fibers @ g.T) / np.maximum(f_norm[:, None], 1e-300) / g_norm
    labels = np.argmax(sims, axis=1)  # argmax takes the lowest index on ties
    stripe = m // p
    uniform = np.repeat(np.arange(p), stripe)
    zero = f_norm == 0.0
    if zero.any():
        uniform_full = np.repeat(uniform, n)
        labels[zero] = uniform_full[zero]
    return PartMap(
        labels=labels.reshape(m, n), p=p, source="nearest",
        zero_norm_cells=int(zero.sum()),
    )


def rpp_argmax_map(A: np.ndarray, empty_eps: float = 1e-8) -> PartMap:
    """Hard read-out of a soft assignment map (M, N, p).

    Also records each part's soft mass; a part is flagged empty when its mass
    falls below empty_eps * M * N or no cell selects it.
    """
    if A.ndim != 3:
        raise ValueError(f"expected (M, N, p) assignment, got {A.shape}")
    m, n, p = A.shape
    labels = np.argmax(A, axis=-1)
    masses = A.sum(axis=(0, 1))
    counts = np.bincount(labels.ravel(), minlength=p)
    empty = [
        i for i in range(p) if masses[i] < empty_eps * m * n or counts[i] == 0
    ]
    return PartMap(labels=labels, p=p, source="rpp", masses=masses, empty_parts=empty)


def outlier_rate(T: np.ndarray, g: np.ndarray) -> float:
    """Fraction of cells whose nearest part differs from their uniform stripe."""
    pm = nearest_part_map(T, g)
    m, n = pm.labels.shape
    stripe = m // pm.p
    uniform = np.repeat(np.arange(pm.p), stripe)[:, None]
    return float((pm.labels != uniform).mean())


def model_outlier_rate(model, pixels_batch: np.ndarray) -> float:
    """Mean outlier rate of a model over a batch of normalized images."""
    fw = model.forward(pixels_batch, train=False)
    p = model.cfg.head.effective_p
    rates = []
    for i in range(len(pixels_batch)):
        g = uniform_pool(fw.T[i], p)
        rates.append(outlier_rate(fw.T[i], g))
    return float(np.mean(rates))


def part_collapse(A: np.ndarray, g: np.ndarray, empty_eps: float = 1e-8,
                  duplicate_cos: float = 0.995) -> dict:
    """Empty/duplicate-part diagnostic for one refined assignment.

    A part is empty when its soft mass or argmax count vanishes; two parts
    are duplicates when their pooled vectors are nearly parallel (cosine at
    or above duplicate_cos).
    """
    pm = rpp_argmax_map(A, empty_eps)
    norms = np.linalg.norm(g, axis=1)
    duplicates = []
    for i in range(len(g)):
        for j in range(i + 1, len(g)):
            if norms[i] == 0.0 or norms[j] == 0.0:
                continue
            cos = float(g[i] @ g[j] / (norms[i] * norms[j]))
            if cos >= duplicate_cos:
                duplicates.append((i, j))
    return {
        "empty": pm.empty_parts,
        "duplicates": duplicates,
        "fired": bool(pm.empty_parts or duplicates),
    }


# ---------------------------------------------------------------------------
# boundary geometry
# ---------------------------------------------------------------------------

def boundary_positions(labels: np.ndarray, p: int) -> np.ndarray:
    """Mean per-column position of each of the p-1 part boundaries.

    Boundary k is located by counting, per column, the cells labeled with a
    part below k; this stays well defined even when a column is not cleanly
    layered. Returns (p-1,) float row positions.
    """
    if p < 2:
        raise ConfigError("boundaries need p >= 2")
    positions = np.empty(p - 1)
    for k in range(1, p):
        below = (labels < k).sum(axis=0)  # per column
        positions[k - 1] = float(below.mean())
    return positions


def uniform_boundaries(m: int, p: int) -> np.ndarray:
    return np.array([m * k / p for k in range(1, p)])


def boundary_error(labels: np.ndarray, true_rows: np.ndarray) -> float:
    """Mean absolute distance between labeled and true boundary rows."""
    p = int(labels.max()) + 1 if labels.size else 1
    p = max(p, len(true_rows) + 1)
    pred = boundary_positions(labels, len(true_rows) + 1)
    return float(np.abs(pred - np.asarray(true_rows, dtype=float)).mean())


def band_boundaries_in_tensor(image_height: int, bands: int, shift: int,
                              m: int) -> np.ndarray:
    """True band boundaries of a shifted image, in tensor-row units."""
    scale = m / image_height
    base = np.array([image_height * k / bands for k in range(1, bands)], dtype=float)
    return np.clip((base + shift) * scale, 0.0, float(m))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_part_map(pm: PartMap, path, cell: int = 8) -> None:
    """Upscaled paletted PNG of the label grid."""
    m, n = pm.labels.shape
    rgb = np.empty((m, n, 3), dtype=np.uint8)
    for i in range(pm.p):
        rgb[pm.labels == i] = MAP_PALETTE[i % len(MAP_PALETTE)]
    big = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    Image.fromarray(big).save(path)


def write_grid(pm: PartMap, path) -> None:
    """Plain integer grid, one row per line, for exact assertions."""
    lines = [" ".join(str(v) for v in row) for row in pm.labels]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path) -> np.ndarray:
    rows = [
        [int(v) for v in line.split()]
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
    return np.array(rows, dtype=int)


# ---------------------------------------------------------------------------
# sweep reports
# ---------------------------------------------------------------------------

@dataclass
class SweepReport:
    axis: str
    rows: list[dict]


def sweep_report(axis: str, configs: list[dict], results: list) -> SweepReport:
    """Tabulate (config, EvalResult) pairs; lengths must agree."""
    if len(configs) != len(results):
        raise ConfigError(
            f"{len(configs)} configs but {len(results)} results in the sweep"
        )
    rows = []
    for cfg, res in zip(configs, results):
        row = dict(cfg)
        row["rank1"] = res.rank(1)
        row["mAP"] = res.mean_ap
        row["evaluated"] = res.num_evaluated
        row["skipped"] = res.num_skipped
        rows.append(row)
    return SweepReport(axis=axis, rows=rows)


def write_report(report: SweepReport, out_dir) -> dict[str, Path]:
    """Emit report.json, report.csv, and report.svg into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(
        json.dumps({"axis": report.axis, "rows": report.rows},
                   indent=2, sort_keys=True) + "\n"
    )
    csv_path = out_dir / "report.csv"
    if report.rows:
        keys = list(report.rows[0])
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            writer.writerows(report.rows)
    svg_path = out_dir / "report.svg"
    _plot_report(report, svg_path)
    return {"json": json_path, "csv": csv_path, "svg": svg_path}


def _plot_report(report: SweepReport, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = [row.get(report.axis) for row in report.rows]
    if all(isinstance(x, (int, float)) for x in xs):
        xvals = xs
    else:
        xvals = list(range(len(xs)))
        ax.set_xticks(xvals)
        ax.set_xticklabels([str(x) for x in xs], rotation=30, ha="right")
    ax.plot(xvals, [r["rank1"] for r in report.rows], "o-", label="rank-1")
    ax.plot(xvals, [r["mAP"] for r in report.rows], "s--", label="mAP")
    ax.set_xlabel(report.axis)
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def load_report(path) -> SweepReport:
    doc = json.loads(Path(path).read_text())
    return SweepReport(axis=doc["axis"], rows=doc["rows"])
