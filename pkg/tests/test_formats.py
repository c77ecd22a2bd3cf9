import json

import numpy as np
import pytest

from vcnn.errors import FormatError, ShapeMismatch
from vcnn.formats import (
    load_network,
    load_partition,
    network_from_json,
    parse_domain,
    read_tensor,
    save_partition,
    tensor_bytes,
    write_tensor,
)
from vcnn.geometry import Box
from vcnn.voronoi import grid_partition, voronoi_partition


class TestTensorBlob:
    @pytest.mark.parametrize("shape", [(3,), (4, 2), (2, 3, 5), ()])
    def test_roundtrip(self, tmp_path, shape):
        a = np.random.default_rng(0).standard_normal(shape)
        write_tensor(tmp_path / "t.vcnt", a)
        np.testing.assert_array_equal(read_tensor(tmp_path / "t.vcnt"), a)

    def test_layout(self):
        data = tensor_bytes(np.array([[1.0, 2.0]]))
        assert data[:4] == b"VCNT"
        assert data[4:8] == (2).to_bytes(4, "little")
        assert data[8:16] == (1).to_bytes(8, "little")
        assert np.frombuffer(data[24:], "<f8").tolist() == [1.0, 2.0]

    def test_bad_blob(self, tmp_path):
        (tmp_path / "x.vcnt").write_bytes(b"VCNT" + (1).to_bytes(4, "little") + (3).to_bytes(8, "little") + bytes(8))
        with pytest.raises(FormatError):
            read_tensor(tmp_path / "x.vcnt")


class TestDomain:
    def test_parse(self):
        b = parse_domain("0,-1,2,1")
        np.testing.assert_array_equal(b.lo, [0, -1])
        np.testing.assert_array_equal(b.hi, [2, 1])

    def test_odd_count(self):
        with pytest.raises(FormatError):
            parse_domain("0,1,2")


class TestPartitionJson:
    def test_voronoi_roundtrip(self, tmp_path):
        p = voronoi_partition(np.random.default_rng(0).random((7, 2)))
        save_partition(tmp_path / "p.json", p)
        q = load_partition(tmp_path / "p.json")
        assert q.kind == p.kind
        np.testing.assert_allclose(q.volumes, p.volumes, rtol=1e-12)
        np.testing.assert_array_equal(q.sites, p.sites)
        doc = json.loads((tmp_path / "p.json").read_text())
        assert doc["total_volume"] == pytest.approx(1.0)
        assert len(doc["cells"]) == 7

    def test_grid_roundtrip(self, tmp_path):
        g = grid_partition([3, 2], Box([0, 0], [3, 1]))
        save_partition(tmp_path / "g.json", g)
        q = load_partition(tmp_path / "g.json")
        assert q.counts == g.counts
        np.testing.assert_allclose(q.volumes, 0.5)

    def test_parse_error_location(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"dim": 2,\n  "cells": [}')
        with pytest.raises(FormatError, match="line 2"):
            load_partition(tmp_path / "bad.json")


def net_doc(**extra):
    doc = {
        "domain": "0,0,1,1",
        "input_grid": [3, 3],
        "channels": 2,
        "layers": [
            {"kind": "conv", "kernel": {"grid": [2, 2], "lo": [-0.2, -0.2], "hi": [0.2, 0.2]}, "out_channels": 3},
            {"kind": "activation", "name": "relu"},
            {"kind": "pool", "output_grid": [2, 2]},
            {"kind": "mixup", "matrix": [[1.0], [0.0], [2.0]]},
        ],
    }
    doc.update(extra)
    return doc


class TestNetworkJson:
    def test_builds(self):
        net = network_from_json(net_doc())
        assert [l.kind for l in net.layers] == ["conv", "activation", "pool", "mixup"]
        assert net.channels(2) == [2, 3, 3, 3, 1]
        assert net.partitions()[-1].cell_count == 4

    def test_seeded_weights(self):
        a = network_from_json(net_doc(), seed=5).layers[0].kernel.weights
        b = network_from_json(net_doc(), seed=5).layers[0].kernel.weights
        c = network_from_json(net_doc(), seed=6).layers[0].kernel.weights
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_weights_file(self, tmp_path):
        write_tensor(tmp_path / "w.vcnt", np.ones((4, 2, 3)))
        doc = net_doc()
        doc["layers"][0]["weights_file"] = "w.vcnt"
        (tmp_path / "net.json").write_text(json.dumps(doc))
        net = load_network(tmp_path / "net.json")
        np.testing.assert_array_equal(net.layers[0].kernel.weights, 1.0)

    def test_shape_error_names_layer(self):
        doc = net_doc()
        doc["layers"][3]["matrix"] = [[1.0], [2.0]]
        with pytest.raises(ShapeMismatch, match="layer 3"):
            network_from_json(doc)

    def test_concat_partner(self):
        doc = net_doc()
        doc["layers"] = [{"kind": "mixup", "out_channels": 4}, {"kind": "concat", "partner": 0}]
        net = network_from_json(doc)
        assert net.channels(2) == [2, 4, 6]

    def test_concat_bad_partner(self):
        doc = net_doc()
        doc["layers"] = [{"kind": "concat", "partner": 3}]
        with pytest.raises(ShapeMismatch, match="layer 0"):
            network_from_json(doc)

    def test_unknown_kind(self):
        doc = net_doc()
        doc["layers"] = [{"kind": "maxpool"}]
        with pytest.raises(FormatError, match="layer 0"):
            network_from_json(doc)

    def test_missing_input(self):
        with pytest.raises(FormatError):
            network_from_json({"domain": "0,0,1,1", "layers": []})
