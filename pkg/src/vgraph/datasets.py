"""Where real datasets live and how to get them.

Nothing here runs at import or build time. ``VGRAPH_DATA_DIR`` sets the
cache directory (default ``~/.cache/vgraph``); ``scripts/fetch_datasets.py``
downloads into it.
"""

from __future__ import annotations

import gzip
import os
import shutil
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

ENV_VAR = "VGRAPH_DATA_DIR"

SNAP = "https://snap.stanford.edu/data"
SOURCES = {
    "facebook": [f"{SNAP}/facebook.tar.gz"],
    "youtube": [
        f"{SNAP}/bigdata/communities/com-youtube.ungraph.txt.gz",
        f"{SNAP}/bigdata/communities/com-youtube.all.cmty.txt.gz",
    ],
    "amazon": [
        f"{SNAP}/bigdata/communities/com-amazon.ungraph.txt.gz",
        f"{SNAP}/bigdata/communities/com-amazon.all.dedup.cmty.txt.gz",
    ],
    "dblp": [
        f"{SNAP}/bigdata/communities/com-dblp.ungraph.txt.gz",
        f"{SNAP}/bigdata/communities/com-dblp.all.cmty.txt.gz",
    ],
}


def data_dir() -> Path:
    env = os.environ.get(ENV_VAR)
    return Path(env) if env else Path.home() / ".cache" / "vgraph"


@dataclass(frozen=True)
class DatasetFiles:
    edges: Path
    communities: Path
    named_communities: bool

    def exists(self) -> bool:
        return self.edges.is_file() and self.communities.is_file()


def resolve(name: str, root: Path | None = None) -> DatasetFiles:
    """Paths for ``facebook<ego>`` (e.g. ``facebook414``), ``youtube``, ``amazon`` or ``dblp``."""
    root = data_dir() if root is None else Path(root)
    if name.startswith("facebook") and name[len("facebook"):].isdigit():
        ego = name[len("facebook"):]
        base = root / "facebook"
        return DatasetFiles(base / f"{ego}.edges", base / f"{ego}.circles", True)
    if name in ("youtube", "amazon", "dblp"):
        edges_url, cmty_url = SOURCES[name]
        return DatasetFiles(
            root / name / _unzipped(edges_url), root / name / _unzipped(cmty_url), False
        )
    raise ValueError(f"unknown dataset {name!r}")


def _unzipped(url: str) -> str:
    return url.rsplit("/", 1)[1].removesuffix(".gz")


def fetch(name: str, root: Path | None = None) -> Path:
    """Download and unpack one source group into the data directory."""
    root = data_dir() if root is None else Path(root)
    if name not in SOURCES:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(SOURCES)}")
    for url in SOURCES[name]:
        fname = url.rsplit("/", 1)[1]
        if name == "facebook":
            archive = root / fname
            root.mkdir(parents=True, exist_ok=True)
            _download(url, archive)
            with tarfile.open(archive) as tf:
                tf.extractall(root, filter="data")
        else:
            target = root / name / _unzipped(url)
            target.parent.mkdir(parents=True, exist_ok=True)
            tmp = target.with_suffix(target.suffix + ".gz")
            _download(url, tmp)
            with gzip.open(tmp, "rb") as src, open(target, "wb") as dst:
                shutil.copyfileobj(src, dst)
            tmp.unlink()
    return root


def _download(url: str, dest: Path) -> None:
    with urllib.request.urlopen(url) as resp, open(dest, "wb") as out:
        shutil.copyfileobj(resp, out)
