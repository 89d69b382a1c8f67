#!/usr/bin/env python3
"""Predict-per-class-mean-colour baseline for a layout/target corpus.

Standalone on purpose: it reads the manifests and images with Pillow and
numpy only and shares no code with the package, so its number can serve
as an external reference for the trained generator.

For every class id the mean RGB colour over all training pixels of that
class is computed; each held-out pixel is then predicted as the mean
colour of its class (the global mean for classes unseen in training).
Prints the mean absolute error with colours scaled to [-1, 1].
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image


def read_rows(manifest):
    manifest = Path(manifest)
    with open(manifest, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if rows and rows[0][0] == "layout_path":
        rows = rows[1:]
    return [(manifest.parent / r[0], manifest.parent / r[1]) for r in rows if r]


def load(layout, target):
    ids = np.asarray(Image.open(layout), dtype=np.int64)
    rgb = np.asarray(Image.open(target).convert("RGB"), dtype=np.float64) / 127.5 - 1.0
    return ids, rgb


def class_means(rows):
    sums, counts = {}, {}
    total, n = np.zeros(3), 0
    for layout, target in rows:
        ids, rgb = load(layout, target)
        for c in np.unique(ids):
            sel = rgb[ids == c]
            sums[c] = sums.get(c, 0) + sel.sum(axis=0)
            counts[c] = counts.get(c, 0) + len(sel)
        total += rgb.reshape(-1, 3).sum(axis=0)
        n += ids.size
    means = {int(c): sums[c] / counts[c] for c in sums}
    return means, total / max(n, 1)


def baseline_l1(train_manifest, heldout_manifest):
    means, fallback = class_means(read_rows(train_manifest))
    errs = []
    for layout, target in read_rows(heldout_manifest):
        ids, rgb = load(layout, target)
        pred = np.empty_like(rgb)
        for c in np.unique(ids):
            pred[ids == c] = means.get(int(c), fallback)
        errs.append(np.abs(pred - rgb).mean())
    if not errs:
        raise SystemExit("held-out manifest lists no images")
    return float(np.mean(errs)), means


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--train", required=True, help="training manifest (TSV)")
    ap.add_argument("--heldout", required=True, help="held-out manifest (TSV)")
    ap.add_argument("--json", action="store_true", help="print a JSON object instead of text")
    args = ap.parse_args(argv)
    l1, means = baseline_l1(args.train, args.heldout)
    if args.json:
        print(json.dumps({"heldout_l1": l1, "class_means": {str(k): list(v) for k, v in means.items()}}))
    else:
        for c, m in sorted(means.items()):
            print(f"class {c}: mean colour {np.round(m, 4).tolist()}")
        print(f"heldout_l1 {l1:.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
