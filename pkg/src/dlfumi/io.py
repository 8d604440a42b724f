"""Model files, trace logs and PGM image export."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import zipfile
from pathlib import Path

import numpy as np

from .core import Dictionary, Hyperparams, TraceRow
from .inference import MulticlassModel

MODEL_FORMAT = "dlfumi-model"
MULTICLASS_FORMAT = "dlfumi-multiclass"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _header(kind):
    return np.array(json.dumps({"format": kind, "version": FORMAT_VERSION}))


def save_model(path, dictionary: Dictionary, hp: Hyperparams, trace=(), test_lam=None):
    """Write a single detector to an ``.npz`` container with a versioned header."""
    trace_arr = np.array([[r.iteration, r.expected_objective, r.max_atom_change]
                          for r in trace], dtype=float).reshape(-1, 3)
    with open(path, "wb") as fh:
        np.savez(fh, header=_header(MODEL_FORMAT),
                 target_atoms=dictionary.target, background_atoms=dictionary.background,
                 hyperparams=np.array(json.dumps(dataclasses.asdict(hp), sort_keys=True)),
                 test_lam=np.array(hp.lam if test_lam is None else test_lam, dtype=float),
                 trace=trace_arr)


def save_multiclass(path, model: MulticlassModel, hps=None):
    arrays = {"header": _header(MULTICLASS_FORMAT),
              "classes": np.asarray(model.classes),
              "lams": np.asarray(model.lams, dtype=float)}
    for i, D in enumerate(model.dictionaries):
        arrays[f"target_atoms_{i}"] = D.target
        arrays[f"background_atoms_{i}"] = D.background
    if hps is not None:
        arrays["hyperparams"] = np.array(json.dumps([dataclasses.asdict(h) for h in hps],
                                                    sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _open(path, expected):
    try:
        data = np.load(path, allow_pickle=False)
        header = json.loads(str(data["header"][()]))
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: not a model file ({exc})") from None
    if header.get("format") not in expected:
        raise ModelFormatError(f"{path}: unexpected format {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {header.get('version')!r}")
    return header["format"], data


def load_model(path):
    """Return ``(dictionary, hyperparams, trace_rows, test_lam)``."""
    _, data = _open(path, {MODEL_FORMAT})
    try:
        D = Dictionary(data["target_atoms"], data["background_atoms"])
        hp = Hyperparams(**json.loads(str(data["hyperparams"][()])))
        trace = [TraceRow(int(i), float(f), float(c)) for i, f, c in data["trace"]]
        test_lam = float(data["test_lam"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: corrupted model ({exc})") from None
    return D, hp, trace, test_lam


def load_multiclass(path) -> MulticlassModel:
    _, data = _open(path, {MULTICLASS_FORMAT})
    try:
        classes = data["classes"]
        dicts = [Dictionary(data[f"target_atoms_{i}"], data[f"background_atoms_{i}"])
                 for i in range(len(classes))]
        return MulticlassModel(classes, dicts, [float(v) for v in data["lams"]])
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"{path}: corrupted model ({exc})") from None


def load_any(path):
    """Load either kind of model file; single detectors come back as a
    ``(dictionary, hyperparams, trace, test_lam)`` tuple."""
    kind, _ = _open(path, {MODEL_FORMAT, MULTICLASS_FORMAT})
    return load_multiclass(path) if kind == MULTICLASS_FORMAT else load_model(path)


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "expected_objective", "max_atom_change"])
        for r in trace:
            w.writerow([r.iteration, repr(r.expected_objective), repr(r.max_atom_change)])


# --------------------------------------------------------------------------
# images


def image_shape(n_features):
    side = math.isqrt(n_features)
    return (side, side) if side * side == n_features else (1, n_features)


def write_pgm(path, image):
    """Binary (P5) 8-bit PGM; ``image`` is rescaled from its own min/max."""
    img = np.asarray(image, dtype=float)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (pix.shape[1], pix.shape[0]))
        fh.write(pix.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1  # single whitespace byte before the raster
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def atom_grid(atoms, shape=None, ncols=None, pad=1):
    """Tile the columns of ``atoms`` into one image, each rescaled to [0, 1]."""
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    d, n = atoms.shape
    h, w = shape or image_shape(d)
    ncols = ncols or max(1, math.ceil(math.sqrt(n)))
    nrows = math.ceil(n / ncols)
    grid = np.ones((nrows * (h + pad) + pad, ncols * (w + pad) + pad))
    for j in range(n):
        a = atoms[:, j]
        lo, hi = a.min(), a.max()
        tile = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
        r, c = divmod(j, ncols)
        y0, x0 = pad + r * (h + pad), pad + c * (w + pad)
        grid[y0:y0 + h, x0:x0 + w] = tile.reshape(h, w)
    return grid


def export_atoms(path, dictionary: Dictionary, shape=None):
    """Target atoms on the first row block, background atoms below."""
    shape = shape or image_shape(dictionary.n_features)
    ncols = max(dictionary.n_target, min(dictionary.n_background, 8))
    top = atom_grid(dictionary.target, shape, ncols)
    bottom = atom_grid(dictionary.background, shape, ncols)
    write_pgm(path, np.vstack([top, np.zeros((1, top.shape[1])), bottom]))


def save_matrix_csv(path, X):
    np.savetxt(path, np.atleast_2d(X), delimiter=",", fmt="%.17g")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
