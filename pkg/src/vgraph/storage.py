"""Checkpoints and exported files.

A checkpoint is an uncompressed zip with fixed timestamps and a fixed entry
order, so identical runs give byte-identical files. Floats in text exports
use ``repr``, which round-trips exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .model import ModelParams
from .training import LossRecord, TrainConfig

FORMAT_VERSION = 1
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)
_MATRICES = ("phi", "varphi", "psi")


class CheckpointError(ValueError):
    pass


def id_map_hash(labels: Sequence[str]) -> str:
    h = hashlib.sha256()
    for lab in labels:
        h.update(lab.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Checkpoint:
    config: TrainConfig
    labels: tuple[str, ...]
    best: ModelParams
    final: ModelParams
    best_iteration: int = 0
    mode: str = "nonoverlapping"
    tree: str | None = None

    @property
    def id_map_sha256(self) -> str:
        return id_map_hash(self.labels)

    def check_labels(self, labels: Sequence[str]) -> None:
        if id_map_hash(labels) != self.id_map_sha256:
            raise CheckpointError("checkpoint node ids do not match the edge file")


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _add(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "config": ck.config.to_dict(),
        "mode": ck.mode,
        "tree": ck.tree,
        "best_iteration": ck.best_iteration,
        "tau": ck.best.tau,
        "node_count": len(ck.labels),
        "id_map_sha256": ck.id_map_sha256,
    }
    with zipfile.ZipFile(path, "w") as zf:
        _add(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        _add(zf, "id_map.txt", "".join(f"{lab}\n" for lab in ck.labels).encode())
        for tag, params in (("best", ck.best), ("final", ck.final)):
            for name in _MATRICES:
                _add(zf, f"{tag}/{name}.npy", _npy_bytes(getattr(params, name)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            labels = tuple(zf.read("id_map.txt").decode().splitlines())
            mats = {
                tag: {n: np.load(io.BytesIO(zf.read(f"{tag}/{n}.npy"))) for n in _MATRICES}
                for tag in ("best", "final")
            }
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
    if meta["id_map_sha256"] != id_map_hash(labels):
        raise CheckpointError("checkpoint id map is corrupted")
    tau = float(meta["tau"])
    return Checkpoint(
        config=TrainConfig.from_dict(meta["config"]),
        labels=labels,
        best=ModelParams(**mats["best"], tau=tau),
        final=ModelParams(**mats["final"], tau=tau),
        best_iteration=int(meta["best_iteration"]),
        mode=meta["mode"],
        tree=meta["tree"],
    )


# ---------------------------------------------------------------------------
# text exports
# ---------------------------------------------------------------------------

LOSS_COLUMNS = ("iteration", "recon", "kl", "reg", "total", "lr")


def write_loss_csv(history: Sequence[LossRecord], stream: TextIO) -> None:
    out = csv.writer(stream, lineterminator="\n")
    out.writerow(LOSS_COLUMNS)
    for r in history:
        out.writerow([r.iteration, repr(r.recon), repr(r.kl), repr(r.reg), repr(r.total), repr(r.lr)])


def read_loss_csv(stream: TextIO) -> list[LossRecord]:
    rows = list(csv.DictReader(stream))
    return [
        LossRecord(int(r["iteration"]), *(float(r[c]) for c in LOSS_COLUMNS[1:]))
        for r in rows
    ]


def write_matrix_tsv(labels: Sequence[str], matrix: np.ndarray, stream: TextIO, header: Sequence[str] | None = None) -> None:
    """One row per node: label, then the row's values."""
    if header is not None:
        stream.write("\t".join(["node", *header]) + "\n")
    for lab, row in zip(labels, np.asarray(matrix, dtype=np.float64).tolist()):
        stream.write(lab + "\t" + "\t".join(repr(x) for x in row) + "\n")


def write_embeddings(labels: Sequence[str], matrix: np.ndarray, stream: TextIO) -> None:
    write_matrix_tsv(labels, matrix, stream)


def write_memberships(labels: Sequence[str], memberships: np.ndarray, stream: TextIO) -> None:
    k = memberships.shape[1]
    write_matrix_tsv(labels, memberships, stream, header=[f"c{j}" for j in range(k)])


def read_matrix_tsv(stream: TextIO, header: bool = False) -> tuple[list[str], np.ndarray]:
    lines = [ln.rstrip("\n") for ln in stream if ln.strip()]
    if header:
        lines = lines[1:]
    labels, rows = [], []
    for ln in lines:
        parts = ln.split("\t")
        labels.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    return labels, np.array(rows)


def level_path(path: str | Path, level: int) -> Path:
    """``out/communities.cmty`` -> ``out/communities.level1.cmty``."""
    path = Path(path)
    return path.with_name(f"{path.stem}.level{level}{path.suffix}")


def write_json(obj: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
