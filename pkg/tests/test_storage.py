import io
import json
import zipfile

import numpy as np
import pytest

from vgraph import datasets
from vgraph.model import init_params
from vgraph.storage import (
    Checkpoint,
    CheckpointError,
    level_path,
    load_checkpoint,
    read_loss_csv,
    read_matrix_tsv,
    save_checkpoint,
    write_loss_csv,
    write_memberships,
)
from vgraph.training import LossRecord, TrainConfig


def make_ck(**kw):
    best = init_params(4, 3, 2, 0, tau=0.8)
    final = init_params(4, 3, 2, 1, tau=0.8)
    return Checkpoint(TrainConfig(k=3, d=2, lam=100.0), ("a", "b", "c", "d"), best, final, 7, **kw)


def test_checkpoint_round_trip(tmp_path):
    ck = make_ck(mode="overlapping")
    save_checkpoint(ck, tmp_path / "c.vgz")
    back = load_checkpoint(tmp_path / "c.vgz")
    assert back.config == ck.config and back.labels == ck.labels
    assert (back.best_iteration, back.mode, back.tree, back.best.tau) == (7, "overlapping", None, 0.8)
    for name in ("phi", "varphi", "psi"):
        assert np.array_equal(getattr(back.best, name), getattr(ck.best, name))
        assert np.array_equal(getattr(back.final, name), getattr(ck.final, name))


def test_checkpoint_bytes_are_stable(tmp_path):
    save_checkpoint(make_ck(), tmp_path / "a.vgz")
    save_checkpoint(make_ck(), tmp_path / "b.vgz")
    assert (tmp_path / "a.vgz").read_bytes() == (tmp_path / "b.vgz").read_bytes()


def test_checkpoint_label_check():
    ck = make_ck()
    ck.check_labels(["a", "b", "c", "d"])
    with pytest.raises(CheckpointError):
        ck.check_labels(["a", "b", "d", "c"])


def test_corrupt_checkpoints(tmp_path):
    bad = tmp_path / "bad.vgz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    save_checkpoint(make_ck(), tmp_path / "c.vgz")
    with zipfile.ZipFile(tmp_path / "c.vgz") as src, zipfile.ZipFile(tmp_path / "v.vgz", "w") as dst:
        for item in src.infolist():
            data = src.read(item)
            if item.filename == "meta.json":
                meta = json.loads(data)
                meta["format_version"] = 99
                data = json.dumps(meta).encode()
            dst.writestr(item, data)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.vgz")


def test_loss_csv_round_trip():
    hist = [LossRecord(0, -3.2, 0.1, 0.0, 3.3, 0.05), LossRecord(100, -1 / 3, 1e-17, 2.5, 2.8333333333333335, 0.0495)]
    buf = io.StringIO()
    write_loss_csv(hist, buf)
    assert buf.getvalue().splitlines()[0] == "iteration,recon,kl,reg,total,lr"
    assert read_loss_csv(io.StringIO(buf.getvalue())) == hist


def test_membership_tsv_round_trip():
    m = np.random.default_rng(0).dirichlet(np.ones(3), size=4)
    buf = io.StringIO()
    write_memberships(["w", "x", "y", "z"], m, buf)
    assert buf.getvalue().startswith("node\tc0\tc1\tc2\n")
    labels, back = read_matrix_tsv(io.StringIO(buf.getvalue()), header=True)
    assert labels == ["w", "x", "y", "z"] and np.array_equal(back, m)


def test_level_path():
    assert str(level_path("out/communities.cmty", 2)) == "out/communities.level2.cmty"


def test_dataset_paths(tmp_path, monkeypatch):
    monkeypatch.setenv(datasets.ENV_VAR, str(tmp_path))
    fb = datasets.resolve("facebook414")
    assert fb.edges == tmp_path / "facebook" / "414.edges" and fb.named_communities
    assert not fb.exists()
    yt = datasets.resolve("youtube")
    assert yt.edges.name == "com-youtube.ungraph.txt" and not yt.named_communities
    with pytest.raises(ValueError):
        datasets.resolve("cora")
