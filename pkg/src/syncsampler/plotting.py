"""Report figures rendered off-screen with matplotlib.

Figures are saved without the ``Software`` PNG text chunk so repeated runs
produce identical files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_inpainting_curves(report, path, metric="measurement_error"):
    """Median and interquartile band of the measurement error per variant."""
    fig, ax = plt.subplots(figsize=(6, 4))
    variants = []
    for s in report.series:
        if s.name == metric and s.variant not in variants:
            variants.append(s.variant)
    for variant in variants:
        runs = [s for s in report.series if s.name == metric and s.variant == variant]
        steps = np.array([p[0] for p in runs[0].points])
        vals = np.array([s.values() for s in runs])
        q1, med, q3 = np.percentile(vals, [25, 50, 75], axis=0)
        ax.plot(steps, med, label=variant)
        ax.fill_between(steps, q1, q3, alpha=0.2)
    thr = report.config.get("threshold")
    if thr:
        ax.axhline(thr, color="k", lw=0.8, ls="--")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_ylim(bottom=0)
    ax.set_xlabel("outer step")
    ax.set_ylabel("measurement error")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_divergence(report, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    for s in report.series:
        counts = [p[1] for p in s.points]
        ax.plot(counts, s.values(), marker="o", label=f"sigma {s.variant}")
    ax.set_xscale("log")
    ax.set_xlabel("sampling steps")
    ax.set_ylabel("mean NLL of terminal samples")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(report, path):
    rows = report.table
    ids = [str(r["id"]) for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.5))
    a1.bar(ids, [r["median_seam_score"] for r in rows])
    a1.set_xlabel("row")
    a1.set_ylabel("median seam score")
    a2.bar(ids, [r["mean_nll"] for r in rows], color="tab:orange")
    a2.set_xlabel("row")
    a2.set_ylabel("mean patch NLL")
    fig.tight_layout()
    return _save(fig, path)


def plot_canonical(z, path, title=None):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim == 3 and z.shape[-1] == 1:
        z = z[..., 0]
    fig, ax = plt.subplots(figsize=(8, 8 * z.shape[0] / max(z.shape[1], 1) + 0.6))
    ax.imshow(z, cmap="gray", interpolation="nearest", aspect="auto")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
