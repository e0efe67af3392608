"""Report emission: tables to stdout, CSV/JSON to the run directory, and
point-prompt overlay images."""

import csv
import json
import os

import numpy as np
from PIL import Image

from .errors import ShadowPeftError

RED = (255, 0, 0)
GREEN = (0, 255, 0)


def format_ber_table(rows, headers=("name", "ber", "ber_s", "ber_ns")):
    """Simple aligned text table from dict rows."""
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(h, "")) for h in headers] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for c in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(c, widths)))
    return "\n".join(lines)


def write_eval_report(reports, ids, aggregate, out_dir):
    """Per-image CSV (filename, Tp, Tn, Np, Nn, ber) plus JSON summary."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "eval.csv")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["filename", "Tp", "Tn", "Np", "Nn", "ber"])
            for sid, rep in zip(ids, reports):
                tp, tn, np_, nn = rep.counts
                writer.writerow([sid, tp, tn, np_, nn, repr(rep.ber)])
            tp, tn, np_, nn = aggregate.counts
            writer.writerow(["TOTAL", tp, tn, np_, nn, repr(aggregate.ber)])
        with open(os.path.join(out_dir, "eval.json"), "w") as fh:
            json.dump({
                "ber": aggregate.ber, "ber_s": aggregate.ber_s,
                "ber_ns": aggregate.ber_ns,
                "images": [{"id": sid, "ber": rep.ber} for sid, rep in zip(ids, reports)],
            }, fh, indent=2)
        return csv_path
    except OSError as exc:
        raise ShadowPeftError(f"cannot write report to {out_dir!r}: {exc}") from exc


def write_ablation_report(rows, out_dir):
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "ber", "ber_s", "ber_ns"])
            for r in rows:
                writer.writerow([r["name"], repr(r["ber"]), repr(r["ber_s"]),
                                 repr(r["ber_ns"])])
        with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
            json.dump(rows, fh, indent=2)
    except OSError as exc:
        raise ShadowPeftError(f"cannot write report to {out_dir!r}: {exc}") from exc


def points_to_json(points, path):
    payload = [{"x": p.x, "y": p.y, "label": p.label, "score": p.score}
               for p in points]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
    return payload


def render_point_overlay(image, points, mask_shape, path, radius=0):
    """Mark prompts on the image: red = positive, green = negative.

    ``points`` are in coarse-mask coordinates; they are mapped to image
    pixels with the same center-of-pixel rule used for the encoder.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    img = img.copy()
    h, w = img.shape[:2]
    mh, mw = mask_shape
    for p in points:
        px = min(int((p.x + 0.5) * w / mw), w - 1)
        py = min(int((p.y + 0.5) * h / mh), h - 1)
        color = RED if p.label == 1 else GREEN
        y0, y1 = max(py - radius, 0), min(py + radius + 1, h)
        x0, x1 = max(px - radius, 0), min(px + radius + 1, w)
        img[y0:y1, x0:x1] = color
    Image.fromarray(img).save(path)
    return img
