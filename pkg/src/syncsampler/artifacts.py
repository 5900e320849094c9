"""On-disk artifacts: metric CSVs, PPM images with range sidecars, checksums.

Everything written here is a pure function of its inputs (no timestamps,
floats via ``repr``), so identical runs produce identical bytes.  The one
exception is the ``wall_time`` column of the optional trace log.
"""

import csv
import hashlib
import json
import os

import numpy as np

METRIC_HEADER = ("experiment", "variant", "seed", "step", "t", "metric", "value")
TRACE_HEADER = ("step", "t", "view_id", "residual", "measurement_error", "wall_time")
MANIFEST = "MANIFEST"
# files whose bytes legitimately differ between identical runs (wall-clock columns)
VOLATILE = frozenset({"trace.csv"})


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if v is None:
        return ""
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def write_metrics_csv(report, path):
    return write_csv(path, METRIC_HEADER, report.metric_rows())


def write_table_csv(table, path):
    """One row per dict; columns are the union of keys in first-seen order."""
    header = []
    for row in table:
        header.extend(k for k in row if k not in header)
    return write_csv(path, header, ([row.get(k) for k in header] for row in table))


def write_trace_csv(trace, path):
    rows = []
    for rec in trace:
        for vid, res in zip(rec.view_ids, rec.residuals):
            rows.append((rec.step, float(rec.t), vid, res, rec.measurement_error, rec.wall_time))
    return write_csv(path, TRACE_HEADER, rows)


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


def as_image(arr):
    """Lay out a canonical array as an ``(H, W, 3)`` float image.

    ``(H, W, C)`` panoramas keep their layout (one channel is greyscale,
    three are RGB, anything else shows channel 0); vectors become one row
    and batches of vectors one row each.
    """
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        a = a.reshape(-1, a.shape[-2], a.shape[-1])
    if a.shape[-1] == 3:
        return a
    return np.repeat(a[..., :1], 3, axis=-1)


def normalize(img):
    """Linear map of ``[min, max]`` onto ``0..255``; a flat image maps to 0."""
    lo, hi = float(np.min(img)), float(np.max(img))
    if hi > lo:
        scaled = (img - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(img)
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8), lo, hi


def write_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
    return path


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError(f"{path} is not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def write_image(stem, arr):
    """Write ``stem.ppm`` and ``stem.json`` (the normalization range); return both paths."""
    rgb, lo, hi = normalize(as_image(arr))
    ppm = write_ppm(stem + ".ppm", rgb)
    side = stem + ".json"
    with open(side, "w", encoding="utf-8") as fh:
        json.dump({"min": lo, "max": hi, "mapping": "linear", "shape": list(np.shape(arr))},
                  fh, sort_keys=True)
        fh.write("\n")
    return ppm, side


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir, complete=True, error=None):
    """Checksum every file under ``run_dir``; the status line flags partial runs.

    Volatile files are listed with ``volatile`` in place of a digest.
    """
    entries = []
    for root, _, files in os.walk(run_dir):
        for name in files:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, run_dir).replace(os.sep, "/")
            if rel != MANIFEST:
                digest = "volatile" if rel in VOLATILE else sha256_file(path)
                entries.append((rel, digest))
    entries.sort()
    lines = [f"status: {'complete' if complete else 'partial'}"]
    if error:
        lines.append(f"error: {error}")
    lines.extend(f"{digest}  {rel}" for rel, digest in entries)
    path = os.path.join(run_dir, MANIFEST)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_manifest(path):
    status, sums = None, {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("status: "):
                status = line[len("status: "):]
            elif line and not line.startswith("error: "):
                digest, rel = line.split("  ", 1)
                sums[rel] = digest
    return status, sums
