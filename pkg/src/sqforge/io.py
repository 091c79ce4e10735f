"""Plain-text dataset and list files.

Dataset layout::

    #manifest {"alpha": 0.1, ...}
    x_1 ... x_d y            (one row per line, %.17g)
    #provenance iooi...      (optional; i = inlier, o = outlier)

List layout::

    #summary {...}
    b_1 ... b_d              (one hypothesis per line)
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError
from .instance import LabeledDataset

FLOAT_FMT = "%.17g"


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _row(values) -> str:
    return " ".join(FLOAT_FMT % v for v in values)


def format_dataset(ds: LabeledDataset) -> str:
    manifest = dict(ds.manifest)
    manifest["d"] = ds.d
    manifest["n"] = ds.n
    lines = ["#manifest " + dumps_json(manifest)]
    for xi, yi in zip(ds.x, ds.y):
        lines.append(_row([*xi, yi]))
    if ds.provenance is not None:
        lines.append("#provenance " + "".join("i" if p else "o" for p in ds.provenance))
    return "\n".join(lines) + "\n"


def write_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_text(format_dataset(ds))


def parse_dataset(text: str) -> LabeledDataset:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#manifest "):
        raise DatasetFormatError("missing '#manifest' header", 1)
    try:
        manifest = json.loads(lines[0][len("#manifest "):])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"bad manifest JSON: {exc.msg}", 1) from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("d"), int) or manifest["d"] < 1:
        raise DatasetFormatError("manifest must be an object with integer 'd' >= 1", 1)
    d = manifest["d"]
    rows, prov = [], None
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#provenance"):
            flags = line[len("#provenance"):].strip()
            if set(flags) - {"i", "o"}:
                raise DatasetFormatError("provenance must contain only 'i' and 'o'", ln)
            prov = np.array([c == "i" for c in flags], dtype=bool)
            continue
        if line.startswith("#"):
            raise DatasetFormatError(f"unexpected directive {line.split()[0]!r}", ln)
        if prov is not None:
            raise DatasetFormatError("data row after provenance line", ln)
        parts = line.split()
        if len(parts) != d + 1:
            raise DatasetFormatError(f"expected {d + 1} fields, found {len(parts)}", ln)
        try:
            vals = [float(s) for s in parts]
        except ValueError:
            raise DatasetFormatError("non-numeric field", ln) from None
        if not np.all(np.isfinite(vals)):
            raise DatasetFormatError("non-finite value", ln)
        rows.append(vals)
    if "n" in manifest and manifest["n"] != len(rows):
        raise DatasetFormatError(f"manifest declares n={manifest['n']} but file has {len(rows)} rows", len(lines))
    if prov is not None and prov.size != len(rows):
        raise DatasetFormatError("provenance length does not match row count", len(lines))
    arr = np.array(rows, dtype=float).reshape(-1, d + 1)
    return LabeledDataset(arr[:, :d], arr[:, d], prov, manifest)


def read_dataset(path) -> LabeledDataset:
    return parse_dataset(Path(path).read_text())


def format_list(betas, summary: dict) -> str:
    lines = ["#summary " + dumps_json(summary)]
    lines += [_row(b) for b in betas]
    return "\n".join(lines) + "\n"


def parse_list(text: str) -> tuple[list[np.ndarray], dict]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#summary "):
        raise DatasetFormatError("missing '#summary' header", 1)
    summary = json.loads(lines[0][len("#summary "):])
    out = []
    for ln, line in enumerate(lines[1:], start=2):
        try:
            out.append(np.array([float(s) for s in line.split()]))
        except ValueError:
            raise DatasetFormatError("non-numeric field", ln) from None
    return out, summary
