from dataclasses import replace

import numpy as np
import pytest

from flowimpute.checkpoint import ChainFormatError, load_chain, read_manifest, save_chain
from flowimpute.dataset import DataTable, RngStream, generate_mcar_mask
from flowimpute.imputer import impute_chain
from flowimpute.trainer import TrainConfig, train
from helpers import correlated_gaussian


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    x, _ = correlated_gaussian(40, 3, 0.7, 0)
    table = DataTable(x, generate_mcar_mask(x.shape, 0.3, RngStream(0), guard=True))
    chain, _ = train(table, TrainConfig(epochs=5, batch_size=16, seed=2))
    return table, chain


def test_roundtrip_is_exact(setup, tmp_path):
    table, chain = setup
    save_chain(chain, tmp_path)
    back = load_chain(tmp_path)
    assert back.epochs == [1, 2, 4]
    assert all(a.theta == b.theta and a.phi == b.phi for a, b in zip(chain.snapshots, back.snapshots))
    assert all(np.array_equal(a, b) for a, b in zip(chain.partitions, back.partitions))
    assert np.array_equal(back.scale.minimum, chain.scale.minimum)
    assert back.config == chain.config
    assert np.array_equal(impute_chain(table, back).completed, impute_chain(table, chain).completed)


def test_save_is_byte_deterministic(setup, tmp_path):
    _, chain = setup
    save_chain(chain, tmp_path / "a")
    save_chain(chain, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_manifest_lists_files_and_digests(setup, tmp_path):
    _, chain = setup
    save_chain(chain, tmp_path)
    meta = read_manifest(tmp_path / "manifest.txt")
    assert meta["format"] == "flowimpute-chain" and meta["snapshot_epochs"] == "1,2,4"
    assert meta["file.flow.4"] == "flow_000004.f64"
    assert len(meta["sha256.flow_000004.f64"]) == 64


def test_tampered_array_names_file(setup, tmp_path):
    _, chain = setup
    save_chain(chain, tmp_path)
    target = tmp_path / "latent_000002.f64"
    raw = bytearray(target.read_bytes())
    raw[0] ^= 1
    target.write_bytes(bytes(raw))
    with pytest.raises(ChainFormatError, match="latent_000002.f64"):
        load_chain(tmp_path)


def test_missing_pieces(setup, tmp_path):
    _, chain = setup
    with pytest.raises(ChainFormatError, match="manifest"):
        load_chain(tmp_path)
    save_chain(chain, tmp_path)
    (tmp_path / "flow_000001.f64").unlink()
    with pytest.raises(ChainFormatError, match="flow_000001.f64"):
        load_chain(tmp_path)


def test_wrong_format_and_missing_key(setup, tmp_path):
    _, chain = setup
    save_chain(chain, tmp_path)
    path = tmp_path / "manifest.txt"
    text = path.read_text()
    path.write_text(text.replace("format = flowimpute-chain", "format = other"))
    with pytest.raises(ChainFormatError, match="not a checkpoint chain"):
        load_chain(tmp_path)
    path.write_text("\n".join(line for line in text.splitlines() if not line.startswith("hidden")))
    with pytest.raises(ChainFormatError, match="hidden"):
        load_chain(tmp_path)


def test_empty_chain_refused(setup, tmp_path):
    _, chain = setup
    with pytest.raises(ValueError):
        save_chain(replace(chain, snapshots=[]), tmp_path)
