"""Distribution and fidelity metrics, plus CSV/SVG report emission.

MMD with an RBF kernel stands in for a distributional metric and a
condition-anchored MSE for a fidelity metric; both are cheap, deterministic,
and have closed-form sanity points.  Reports render to CSV (17 significant
digits, exact float round-trip) and self-contained SVG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EvalError",
    "MetricReport",
    "mmd_rbf",
    "median_bandwidth",
    "cond_mse",
    "mixture_target_fn",
    "paired_target_fn",
    "emit_report",
]

ALLOWED_KS = (1, 2, 4, 8)


class EvalError(ValueError):
    pass


def _samples(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0:
        raise EvalError(f"{name} must be a non-empty [n, d] array, got shape {a.shape}")
    return a


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def median_bandwidth(a, b) -> float:
    """Median pairwise distance over the pooled sample; the kernel scale."""
    pooled = np.vstack([_samples(a, "a"), _samples(b, "b")])
    sq = _sq_dists(pooled, pooled)
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(np.sqrt(sq[iu])))
    if med <= 0 or not np.isfinite(med):
        # degenerate cloud (all points identical); any positive scale works
        return 1.0
    return med


def mmd_rbf(a, b, bandwidth: float | None = None, biased: bool = False) -> float:
    """Squared maximum mean discrepancy under k(x,y) = exp(-|x-y|^2 / (2 h^2)).

    Unbiased by default (diagonal terms dropped; can be slightly negative);
    the biased variant is exactly 0 on identical sample sets.  h defaults to
    the median heuristic over the pooled points.
    """
    a = _samples(a, "a")
    b = _samples(b, "b")
    if a.shape[1] != b.shape[1]:
        raise EvalError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    if bandwidth <= 0:
        raise EvalError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    k_aa = np.exp(-gamma * _sq_dists(a, a))
    k_bb = np.exp(-gamma * _sq_dists(b, b))
    k_ab = np.exp(-gamma * _sq_dists(a, b))
    m, n = a.shape[0], b.shape[0]
    if biased:
        return float(k_aa.mean() + k_bb.mean() - 2.0 * k_ab.mean())
    if m < 2 or n < 2:
        raise EvalError("unbiased estimate needs at least 2 samples per side")
    aa = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    bb = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(aa + bb - 2.0 * k_ab.mean())


def cond_mse(samples, conditions, ground_truth_fn) -> float:
    """Mean over samples of the per-sample mean-over-dims squared error
    against the conditional target supplied by ground_truth_fn(c)."""
    samples = _samples(samples, "samples")
    conditions = _samples(conditions, "conditions")
    if samples.shape[0] != conditions.shape[0]:
        raise EvalError(
            f"row mismatch: {samples.shape[0]} samples vs {conditions.shape[0]} conditions"
        )
    total = 0.0
    for row, c in zip(samples, conditions):
        target = np.asarray(ground_truth_fn(c), dtype=np.float64)
        if target.shape != row.shape:
            raise EvalError(f"target shape {target.shape} != sample shape {row.shape}")
        total += float(np.mean((row - target) ** 2))
    return total / samples.shape[0]


def mixture_target_fn(means: np.ndarray):
    """Ground truth for one-hot mixture conditions: the selected center."""
    means = np.asarray(means, dtype=np.float64)

    def fn(c):
        c = np.asarray(c, dtype=np.float64)
        if c.shape != (means.shape[0],) or not np.all((c == 0.0) | (c == 1.0)) or c.sum() != 1.0:
            raise EvalError(f"unknown condition: expected one-hot of length {means.shape[0]}")
        return means[int(np.argmax(c))]

    return fn


def paired_target_fn(conditions: np.ndarray, targets: np.ndarray):
    """Ground truth by exact condition lookup in a paired evaluation set."""
    conditions = _samples(conditions, "conditions")
    targets = _samples(targets, "targets")
    if conditions.shape[0] != targets.shape[0]:
        raise EvalError("conditions and targets must pair up row by row")
    table = {c.tobytes(): t for c, t in zip(conditions, targets)}

    def fn(c):
        key = np.ascontiguousarray(np.asarray(c, dtype=np.float64)).tobytes()
        if key not in table:
            raise EvalError("unknown condition: not in the paired evaluation set")
        return table[key]

    return fn


@dataclass
class MetricReport:
    """Per-(K, seed) metric rows plus optional plot payloads."""

    rows: list = field(default_factory=list)
    seeds: tuple = ()
    config_hash: str = ""
    bandwidth: float = float("nan")
    # K -> (generated [n,2], reference [n,2]) for scatter pages
    scatter: dict = field(default_factory=dict)
    # (list of per-step x_hat arrays, clean reference or None) for 1-D tasks
    trajectory: tuple | None = None

    def metric_names(self) -> list:
        names = set()
        for row in self.rows:
            names.update(k for k in row if k not in ("k", "seed"))
        return sorted(names)

    def validate(self) -> None:
        if not self.rows:
            raise EvalError("empty metric set; nothing to report")
        for row in self.rows:
            if "k" not in row or "seed" not in row:
                raise EvalError(f"metric row missing k/seed: {row}")
            if row["k"] not in ALLOWED_KS:
                raise EvalError(f"step count {row['k']} outside the {ALLOWED_KS} convention")
            for key, value in row.items():
                if key in ("k", "seed"):
                    continue
                if not np.isfinite(value):
                    raise EvalError(f"non-finite metric {key}={value} at k={row['k']}")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def emit_report(report: MetricReport, out_dir) -> list:
    """Write metrics.csv, summary.csv, and SVG plots; nothing on invalid input."""
    from pathlib import Path

    report.validate()  # before any file is created
    out = Path(out_dir)
    names = report.metric_names()
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        lines = ["k,seed," + ",".join(names)]
        for row in sorted(report.rows, key=lambda r: (r["k"], r["seed"])):
            cells = [str(row["k"]), str(row["seed"])]
            cells += [_fmt(row[n]) if n in row else "nan" for n in names]
            lines.append(",".join(cells))
        written.append(_write(out / "metrics.csv", "\n".join(lines) + "\n"))

        header = "k," + ",".join(f"median_{n}" for n in names) + ",bandwidth,config_hash"
        slines = [header]
        for k in sorted({row["k"] for row in report.rows}):
            sub = [row for row in report.rows if row["k"] == k]
            meds = [_fmt(float(np.median([r[n] for r in sub if n in r]))) for n in names]
            slines.append(f"{k}," + ",".join(meds) + f",{_fmt(report.bandwidth)},{report.config_hash}")
        written.append(_write(out / "summary.csv", "\n".join(slines) + "\n"))

        for k, (gen, ref) in sorted(report.scatter.items()):
            written.append(_write(out / f"scatter_{k}.svg", _scatter_svg(gen, ref, k)))
        if report.trajectory is not None:
            steps, clean = report.trajectory
            written.append(_write(out / "trajectory.svg", _trajectory_svg(steps, clean)))
    except OSError as e:
        raise EvalError(f"cannot write report under {out}: {e}") from e
    return written


def _write(path, text: str):
    path.write_text(text)
    return path


def _svg_open(width: int, height: int) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    )


def _project(points: np.ndarray, lo, span, width, height, pad):
    xs = pad + (points[:, 0] - lo[0]) / span[0] * (width - 2 * pad)
    ys = height - pad - (points[:, 1] - lo[1]) / span[1] * (height - 2 * pad)
    return xs, ys


def _scatter_svg(gen: np.ndarray, ref: np.ndarray, k: int) -> str:
    gen = np.asarray(gen, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if gen.shape[1] != 2 or ref.shape[1] != 2:
        raise EvalError("scatter pages need 2-D samples")
    width = height = 420
    pad = 30.0
    allpts = np.vstack([gen, ref])
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    parts = [_svg_open(width, height)]
    parts.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    parts.append(
        f'<text x="{pad}" y="18" font-family="monospace" font-size="12">'
        f"samples at K={k} (dark: generated, light: data)</text>"
    )
    for pts, color, r in ((ref, "#9ecae1", 2.2), (gen, "#08306b", 1.8)):
        xs, ys = _project(pts, lo, span, width, height, pad)
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _trajectory_svg(steps, clean) -> str:
    steps = [np.asarray(s, dtype=np.float64).reshape(-1) for s in steps]
    if not steps:
        raise EvalError("trajectory page needs at least one step")
    width, height = 520, 300
    pad = 30.0
    stack = np.vstack(steps + ([np.asarray(clean).reshape(-1)] if clean is not None else []))
    lo, hi = float(stack.min()), float(stack.max())
    span = max(hi - lo, 1e-9)
    n = steps[0].size
    xs = pad + np.arange(n) / max(n - 1, 1) * (width - 2 * pad)

    def poly(y, color, w, dash=""):
        ys = height - pad - (y - lo) / span * (height - 2 * pad)
        pts = " ".join(f"{x:.2f},{yy:.2f}" for x, yy in zip(xs, ys))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline fill="none" stroke="{color}" stroke-width="{w}"{extra} points="{pts}"/>'

    parts = [_svg_open(width, height), f'<rect width="{width}" height="{height}" fill="white"/>']
    parts.append(
        f'<text x="{pad}" y="18" font-family="monospace" font-size="12">'
        "per-step clean estimates (dark: later steps, dashed: ground truth)</text>"
    )
    for i, step in enumerate(steps):
        shade = 0.25 + 0.75 * (i + 1) / len(steps)
        level = int(180 * (1 - shade))
        parts.append(poly(step, f"rgb({level},{level},{220 - level // 2})", 1.4))
    if clean is not None:
        parts.append(poly(np.asarray(clean).reshape(-1), "#d62728", 1.6, dash="5,4"))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
