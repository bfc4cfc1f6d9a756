"""On-disk formats: HOG feature caches, model envelopes + binary blobs,
and evaluation reports (CSV, JSON, SVG).

Feature cache (``.hogf``), all integers little-endian::

    b"HOGF" | u32 version | u64 rows | u64 cols | u8 label * rows
    | f64 value * rows*cols (row-major) | u32 CRC32 of everything before

Model = JSON envelope + sibling blob (``<envelope>.mdlb``)::

    b"MDLB" | u32 version | u16 len + model_type | u32 n_sections
    | per section: u16 len + name, u8 dtype (0 f64, 1 i64), u8 ndim, u64 * ndim
    | section payloads in table order | u32 CRC32 of everything before

Every writer goes through :func:`atomic_write` (temp file, fsync, rename),
so an interrupted write never leaves a file that passes its CRC.
"""
from __future__ import annotations

import json
import math
import os
import struct
import zlib
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ChecksumFailure, DimensionMismatch, ModelFileError, TruncatedFile, VersionMismatch
from .hog import FeatureMatrix

CACHE_MAGIC = b"HOGF"
CACHE_VERSION = 1
BLOB_MAGIC = b"MDLB"
BLOB_VERSION = 1
FORMAT_VERSION = 1
MODEL_TYPES = ("knn", "rf", "gbm", "svm", "resnet")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _crc(data) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


# -- feature cache --------------------------------------------------------

def encode_feature_cache(F: FeatureMatrix) -> bytes:
    if F.rows and (F.labels.min() < 0 or F.labels.max() > 255):
        raise ValueError("labels must fit in one byte")
    body = (CACHE_MAGIC + struct.pack("<IQQ", CACHE_VERSION, F.rows, F.cols)
            + F.labels.astype(np.uint8).tobytes()
            + np.ascontiguousarray(F.values, dtype="<f8").tobytes())
    return body + struct.pack("<I", _crc(body))


def decode_feature_cache(raw: bytes, expected_cols: int | None = None) -> FeatureMatrix:
    if len(raw) < 28 or raw[:4] != CACHE_MAGIC:
        raise ModelFileError("not a HOG feature cache (bad magic or header)")
    version, rows, cols = struct.unpack_from("<IQQ", raw, 4)
    if version > CACHE_VERSION:
        raise VersionMismatch(f"feature cache version {version} is newer than supported {CACHE_VERSION}")
    need = 24 + rows + 8 * rows * cols + 4
    if len(raw) < need:
        raise TruncatedFile(f"feature cache holds {len(raw)} bytes, header declares {need}")
    if len(raw) > need:
        raise ChecksumFailure("trailing bytes after feature cache payload")
    (crc,) = struct.unpack_from("<I", raw, need - 4)
    if _crc(raw[: need - 4]) != crc:
        raise ChecksumFailure("feature cache CRC mismatch")
    labels = np.frombuffer(raw, dtype=np.uint8, count=rows, offset=24).astype(np.int64)
    values = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=24 + rows)
    F = FeatureMatrix(values.astype(np.float64).reshape(rows, cols), labels)
    if expected_cols is not None and cols != expected_cols:
        raise DimensionMismatch(f"feature cache has {cols} columns, expected {expected_cols}")
    return F


def save_feature_cache(path, F: FeatureMatrix) -> None:
    atomic_write(path, encode_feature_cache(F))


def load_feature_cache(path, expected_cols: int | None = None) -> FeatureMatrix:
    return decode_feature_cache(Path(path).read_bytes(), expected_cols)


# -- blobs ----------------------------------------------------------------

def encode_blob(model_type: str, arrays: dict) -> bytes:
    mt = model_type.encode()
    head = bytearray(BLOB_MAGIC + struct.pack("<I", BLOB_VERSION) + struct.pack("<H", len(mt)) + mt)
    head += struct.pack("<I", len(arrays))
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "biu":
            code, data = 1, np.ascontiguousarray(arr, dtype="<i8")
        else:
            code, data = 0, np.ascontiguousarray(arr, dtype="<f8")
        nm = name.encode()
        head += struct.pack("<H", len(nm)) + nm + struct.pack("<BB", code, arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += data.tobytes()
    body = bytes(head + payload)
    return body + struct.pack("<I", _crc(body))


def decode_blob(raw: bytes):
    if len(raw) < 18 or raw[:4] != BLOB_MAGIC:
        raise ModelFileError("not a model blob (bad magic)")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version > BLOB_VERSION:
        raise VersionMismatch(f"blob version {version} is newer than supported {BLOB_VERSION}")
    if _crc(raw[:-4]) != crc:
        raise ChecksumFailure("model blob CRC mismatch")
    try:
        pos = 8
        (n,) = struct.unpack_from("<H", raw, pos)
        model_type = raw[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        table = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            table.append((name, code, shape))
        arrays = {}
        for name, code, shape in table:
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(raw) - 4:
                raise TruncatedFile(f"blob section {name!r} runs past the end of file")
            dt = "<i8" if code == 1 else "<f8"
            arr = np.frombuffer(raw, dtype=dt, count=size, offset=pos).reshape(shape)
            arrays[name] = arr.astype(np.int64 if code == 1 else np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise TruncatedFile(f"model blob section table truncated: {exc}") from None
    return model_type, arrays


# -- model families <-> arrays --------------------------------------------

def _pack_trees(trees, prefix=""):
    sizes = [t.n_nodes for t in trees]
    return {
        f"{prefix}tree_offsets": np.r_[0, np.cumsum(sizes)].astype(np.int64),
        f"{prefix}feature": np.concatenate([t.feature for t in trees]),
        f"{prefix}threshold": np.concatenate([t.threshold for t in trees]),
        f"{prefix}left": np.concatenate([t.left for t in trees]),
        f"{prefix}right": np.concatenate([t.right for t in trees]),
        f"{prefix}value": np.concatenate([t.value for t in trees]),
    }


def _unpack_trees(a, prefix=""):
    from .trees import Tree

    off = a[f"{prefix}tree_offsets"]
    return [
        Tree(*(a[f"{prefix}{k}"][off[i]:off[i + 1]].copy()
               for k in ("feature", "threshold", "left", "right", "value")))
        for i in range(len(off) - 1)
    ]


def model_type_of(model) -> str:
    from .knn import KnnModel
    from .resnet import ResidualNetwork
    from .svm import MultiSvm
    from .trees import BoostedEnsemble, Forest

    for cls, name in ((KnnModel, "knn"), (Forest, "rf"), (BoostedEnsemble, "gbm"),
                      (MultiSvm, "svm"), (ResidualNetwork, "resnet")):
        if isinstance(model, cls):
            return name
    raise TypeError(f"cannot persist {type(model).__name__}")


def model_to_arrays(model) -> tuple:
    """``(model_type, model_config, arrays)`` for any model family."""
    kind = model_type_of(model)
    if kind == "knn":
        return kind, {"k": model.k, "weighting": model.weighting, "n_classes": model.n_classes}, {
            "train_values": model.train.values, "train_labels": model.train.labels}
    if kind == "rf":
        cfg = model.cfg
        conf = {"n_trees": cfg.n_trees, "max_features": cfg.max_features, "min_leaf": cfg.min_leaf,
                "max_depth": cfg.max_depth, "bootstrap": cfg.bootstrap,
                "n_features": model.n_features, "n_classes": model.n_classes}
        arrays = _pack_trees(model.trees)
        arrays["in_bag"] = model.in_bag.astype(np.int64)
        return kind, conf, arrays
    if kind == "gbm":
        cfg = model.cfg
        conf = {"n_rounds": cfg.n_rounds, "max_depth": cfg.max_depth, "min_leaf": cfg.min_leaf,
                "n_features": model.n_features, "n_classes": len(model.base_scores)}
        trees = [t for r in model.rounds for t in r]
        arrays = {"base_scores": model.base_scores, "learning_rate": np.array([model.learning_rate])}
        if trees:
            arrays.update(_pack_trees(trees))
        return kind, conf, arrays
    if kind == "svm":
        arrays = {}
        for c, m in enumerate(model.machines):
            arrays[f"m{c}.support_vectors"] = m.support_vectors.reshape(len(m.alphas), -1)
            arrays[f"m{c}.alphas"] = m.alphas
            arrays[f"m{c}.labels"] = m.labels
            arrays[f"m{c}.scalars"] = np.array([m.bias, m.gamma, m.C, m.max_kkt_violation])
        conf = {"kernel": model.machines[0].kernel, "n_classes": len(model.machines),
                "converged": [bool(m.converged) for m in model.machines]}
        return kind, conf, arrays
    cfg = model.cfg
    conf = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}
    arrays = {f"param.{k}": v for k, v in model.params.items()}
    for bn, st in model.running.items():
        arrays[f"running.{bn}.mean"] = st["mean"]
        arrays[f"running.{bn}.var"] = st["var"]
    arrays["normalization"] = np.array([model.normalization.mean, model.normalization.std])
    return kind, conf, arrays


def model_from_arrays(kind: str, conf: dict, a: dict):
    if kind == "knn":
        from .knn import KnnModel

        return KnnModel(FeatureMatrix(a["train_values"], a["train_labels"]), conf["k"],
                        conf["weighting"], conf["n_classes"])
    if kind == "rf":
        from .trees import Forest, ForestConfig

        cfg = ForestConfig(conf["n_trees"], conf["max_features"], conf["min_leaf"],
                           conf["max_depth"], conf["bootstrap"])
        return Forest(_unpack_trees(a), a["in_bag"].astype(bool), cfg, conf["n_features"], conf["n_classes"])
    if kind == "gbm":
        from .trees import BoostConfig, BoostedEnsemble

        lr = float(a["learning_rate"][0])
        k = conf["n_classes"]
        trees = _unpack_trees(a) if "tree_offsets" in a else []
        rounds = [trees[i:i + k] for i in range(0, len(trees), k)]
        cfg = BoostConfig(conf["n_rounds"], conf["max_depth"], lr, conf["min_leaf"])
        return BoostedEnsemble(a["base_scores"], rounds, lr, cfg, conf["n_features"])
    if kind == "svm":
        from .svm import BinarySvm, MultiSvm

        machines = []
        for c in range(conf["n_classes"]):
            bias, gamma, C, viol = a[f"m{c}.scalars"].tolist()
            machines.append(BinarySvm(a[f"m{c}.support_vectors"], a[f"m{c}.alphas"], a[f"m{c}.labels"],
                                      bias, conf["kernel"], gamma, C, conf["converged"][c], viol))
        return MultiSvm(machines)
    if kind == "resnet":
        from .dataset import Normalization
        from .resnet import NetConfig, ResidualNetwork

        cfg = NetConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in conf.items()})
        params = {k[len("param."):]: v.astype(cfg.dtype) for k, v in a.items() if k.startswith("param.")}
        running = {}
        for k, v in a.items():
            if k.startswith("running."):
                bn, stat = k[len("running."):].rsplit(".", 1)
                running.setdefault(bn, {})[stat] = v.astype(cfg.dtype)
        mean, std = a["normalization"].tolist()
        return ResidualNetwork(cfg, params, running, Normalization(mean, std))
    raise ModelFileError(f"unknown model type {kind!r}")


def save_model(path, model, pipeline: dict | None = None, seed: int | None = None) -> None:
    """Write ``path`` (JSON envelope) and ``path.mdlb`` (array blob)."""
    path = Path(path)
    kind, conf, arrays = model_to_arrays(model)
    blob = encode_blob(kind, arrays)
    blob_path = path.with_name(path.name + ".mdlb")
    envelope = {
        "format_version": FORMAT_VERSION,
        "model_type": kind,
        "config": {"model": conf, "pipeline": pipeline or {}},
        "created_with": {"seed": seed},
        "blob": blob_path.name,
        "blob_crc32": _crc(blob),
    }
    atomic_write(blob_path, blob)
    atomic_write(path, (json.dumps(envelope, indent=2) + "\n").encode())


def load_model(path):
    """Return ``(model, envelope)``."""
    path = Path(path)
    try:
        envelope = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: model envelope is not valid JSON ({exc})") from None
    if not isinstance(envelope, dict) or "format_version" not in envelope:
        raise ModelFileError(f"{path}: missing format_version")
    if envelope["format_version"] > FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format_version {envelope['format_version']} "
                              f"is newer than supported {FORMAT_VERSION}")
    kind = envelope.get("model_type")
    if kind not in MODEL_TYPES:
        raise ModelFileError(f"{path}: unknown model_type {kind!r}")
    blob_path = path.with_name(envelope["blob"])
    if not blob_path.is_file():
        raise ModelFileError(f"{path}: blob {blob_path} is missing")
    raw = blob_path.read_bytes()
    if _crc(raw) != envelope.get("blob_crc32"):
        raise ChecksumFailure(f"{blob_path}: blob does not match the envelope checksum")
    blob_kind, arrays = decode_blob(raw)
    if blob_kind != kind:
        raise ModelFileError(f"{path}: envelope says {kind!r} but blob holds {blob_kind!r}")
    model = model_from_arrays(kind, envelope["config"]["model"], arrays)
    return model, envelope


# -- reports --------------------------------------------------------------

def _num(x) -> str:
    return repr(float(x))


def _csv(rows) -> bytes:
    return "".join(",".join(str(c) for c in r) + "\n" for r in rows).encode()


def metrics_dict(report) -> dict:
    def clean(v):
        return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

    curves = report.roc_curves()
    return {
        "accuracy": report.accuracy,
        "n_examples": int(len(report.y_true)),
        "class_names": list(report.class_names),
        "per_class_recall": [clean(float(r)) for r in report.recall],
        "per_class_auc": [clean(curves[c].auc) if c in curves else None for c in range(report.n_classes)],
        "confusion": report.confusion.tolist(),
    }


def write_report(report, out_dir) -> list:
    """Write CSV/JSON/SVG outputs for an evaluation; returns written paths."""
    from .metrics import row_normalized

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(report.class_names)
    cm = report.confusion
    written = []

    def put(name, data):
        atomic_write(out / name, data)
        written.append(out / name)

    put("confusion.csv", _csv([["true\\pred", *names]] + [[n, *row] for n, row in zip(names, cm.tolist())]))
    norm = row_normalized(cm)
    put("confusion_normalized.csv",
        _csv([["true\\pred", *names]] + [[n, *map(_num, row)] for n, row in zip(names, norm)]))
    curves = report.roc_curves()
    for c, curve in curves.items():
        put(f"roc_class{c}.csv", _csv([["fpr", "tpr"]] + [[_num(f), _num(t)] for f, t in curve.points]))
    put("metrics.json", (json.dumps(metrics_dict(report), indent=2) + "\n").encode())
    put("confusion.svg", confusion_svg(cm, names).encode())
    put("roc.svg", roc_svg(curves, names).encode())
    return written


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")


def confusion_svg(cm, names) -> str:
    cm = np.asarray(cm)
    k = len(cm)
    cell, left, top = 60, 170, 40
    norm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    w, h = left + cell * k + 20, top + cell * k + 150
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">',
             f'<text x="{left}" y="20">Confusion matrix (rows: true, columns: predicted)</text>']
    for i in range(k):
        parts.append(f'<text x="{left - 6}" y="{top + cell * i + cell / 2 + 4}" text-anchor="end">{escape(names[i])}</text>')
        for j in range(k):
            shade = int(round(255 * (1 - norm[i, j])))
            fg = "#ffffff" if norm[i, j] > 0.5 else "#000000"
            x, y = left + cell * j, top + cell * i
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="rgb({shade},{shade},255)" stroke="#888888"/>')
            parts.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" fill="{fg}">{cm[i, j]}</text>')
    for j in range(k):
        x, y = left + cell * j + cell / 2, top + cell * k + 10
        parts.append(f'<text x="{x}" y="{y}" transform="rotate(45 {x} {y})">{escape(names[j])}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


def roc_svg(curves: dict, names) -> str:
    size, pad = 360, 50
    w, h = size + pad + 230, size + 2 * pad

    def xy(f, t):
        return f"{pad + f * size:.3f},{pad + (1 - t) * size:.3f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">',
             f'<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="#000000"/>',
             f'<line x1="{pad}" y1="{pad + size}" x2="{pad + size}" y2="{pad}" stroke="#999999" stroke-dasharray="4 4"/>',
             f'<text x="{pad + size / 2}" y="{h - 12}" text-anchor="middle">False positive rate</text>',
             f'<text x="14" y="{pad + size / 2}" transform="rotate(-90 14 {pad + size / 2})" text-anchor="middle">True positive rate</text>']
    for row, (c, curve) in enumerate(sorted(curves.items())):
        color = _PALETTE[c % len(_PALETTE)]
        d = "M" + " L".join(xy(f, t) for f, t in curve.points)
        parts.append(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = pad + 16 * row + 10
        parts.append(f'<text x="{pad + size + 12}" y="{ly}" fill="{color}">'
                     f'Class {c}: {escape(names[c])} (AUC {curve.auc:.3f})</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)
