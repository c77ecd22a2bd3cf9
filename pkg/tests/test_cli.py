import json
import struct

import numpy as np
import pytest

from vcnn.cli import main
from vcnn.coupling import read_coupling
from vcnn.formats import load_partition, read_tensor, save_partition, write_tensor
from vcnn.geometry import Box
from vcnn.raster import GridImage, discretize, load_png, save_png
from vcnn.voronoi import grid_partition

from oracles import golden_1d


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def one_d_files(work, n=10):
    save_partition(work / "in.json", grid_partition([n], Box([0.0], [float(n)])))
    save_partition(work / "k.json", grid_partition([3], Box([0.0], [3.0])))
    return "in.json", "k.json"


class TestPartition:
    def test_two_sites(self, work, capsys):
        (work / "s.json").write_text("[[0.25, 0.5], [0.75, 0.5]]")
        code, out, _ = run(capsys, "partition", "--sites", "s.json", "--out", "p.json")
        assert code == 0
        doc = json.loads((work / "p.json").read_text())
        assert len(doc["cells"]) == 2
        assert sum(c["volume"] for c in doc["cells"]) == pytest.approx(1.0)
        assert doc["sites"] == [[0.25, 0.5], [0.75, 0.5]]

    def test_one_site(self, work, capsys):
        (work / "s.json").write_text('{"sites": [[1.0, 0.5]]}')
        code, _, _ = run(capsys, "partition", "--sites", "s.json", "--domain", "0,0,2,1", "--out", "p.json")
        assert code == 0
        assert load_partition(work / "p.json").volumes.tolist() == pytest.approx([2.0])

    def test_duplicate_sites(self, work, capsys):
        (work / "s.json").write_text("[[0.1, 0.1], [0.3, 0.3], [0.3, 0.3]]")
        code, _, err = run(capsys, "partition", "--sites", "s.json", "--out", "p.json")
        assert code == 2
        assert "site 2" in err

    def test_site_outside(self, work, capsys):
        (work / "s.json").write_text("[[0.1, 0.1], [3.0, 0.3]]")
        code, _, err = run(capsys, "partition", "--sites", "s.json", "--out", "p.json")
        assert code == 2
        assert "1" in err

    def test_grid_and_figure(self, work, capsys):
        code, _, _ = run(capsys, "partition", "--grid", "4,3", "--out", "g.json", "--figure", "g.png")
        assert code == 0
        assert load_partition(work / "g.json").cell_count == 12
        assert (work / "g.png").read_bytes()[:4] == b"\x89PNG"

    def test_needs_one_source(self, work, capsys):
        assert run(capsys, "partition", "--out", "p.json")[0] == 1

    def test_bad_flag_is_usage_error(self, work, capsys):
        with pytest.raises(SystemExit) as info:
            main(["partition", "--bogus"])
        assert info.value.code == 1


class TestKtensor:
    def test_one_d_entries(self, work, capsys):
        inp, ker = one_d_files(work)
        code, out, _ = run(capsys, "ktensor", "--input", inp, "--kernel", ker, "--output", inp)
        assert code == 0
        assert "entries: 51" in out
        path = next((work / ".vcnn-cache").glob("*.vcnk"))
        K = read_coupling(path)
        interior = K.w >= 3
        assert interior.sum() == 2 * 3 * 7
        np.testing.assert_allclose(K.values, 0.5, atol=1e-12)

    def test_cache_hit(self, work, capsys):
        inp, ker = one_d_files(work)
        run(capsys, "ktensor", "--input", inp, "--kernel", ker, "--output", inp)
        code, out, _ = run(capsys, "ktensor", "--input", inp, "--kernel", ker, "--output", inp)
        assert code == 0
        assert "cache hit" in out

    def test_far_kernel(self, work, capsys):
        inp, _ = one_d_files(work)
        save_partition(work / "far.json", grid_partition([3], Box([100.0], [103.0])))
        code, out, err = run(capsys, "ktensor", "--input", inp, "--kernel", "far.json", "--output", inp)
        assert code == 0
        assert "entries: 0" in out
        assert "warning" in err

    def test_geometry_error(self, work, capsys):
        save_partition(work / "c.json", grid_partition([2, 2, 2]))
        code, _, err = run(capsys, "ktensor", "--input", "c.json", "--kernel", "c.json", "--output", "c.json")
        assert code == 3
        assert "geometry" in err


def one_d_network(work, M):
    doc = {
        "domain": "0,20",
        "input_grid": [20],
        "layers": [
            {"kind": "conv", "kernel": {"grid": [3], "lo": [0], "hi": [3]}, "normalize": False, "weights": M.tolist()},
        ],
    }
    (work / "net1d.json").write_text(json.dumps(doc))
    return "net1d.json"


class TestInfer:
    def test_golden_1d(self, work, capsys):
        rng = np.random.default_rng(0)
        M = rng.standard_normal((3, 3, 2))
        f = rng.standard_normal((20, 3))
        write_tensor(work / "f.vcnt", f)
        net = one_d_network(work, M)
        code, out, _ = run(capsys, "infer", "--network", net, "--cellfn", "f.vcnt", "--out-prefix", "o/run")
        assert code == 0
        g = read_tensor(work / "o/run.vcnt")
        np.testing.assert_allclose(g[3:], golden_1d(f, M)[3:], atol=1e-9)

    def test_identity_network(self, work, capsys):
        img = GridImage(np.random.default_rng(1).random((16, 16)), Box.unit(2))
        save_png(img, work / "img.png")
        (work / "net.json").write_text(json.dumps({"domain": "0,0,1,1", "input_grid": [4, 4], "layers": []}))
        code, _, _ = run(capsys, "infer", "--network", "net.json", "--image", "img.png", "--out-prefix", "o")
        assert code == 0
        expected = discretize(load_png(work / "img.png"), grid_partition([4, 4])).values
        np.testing.assert_allclose(read_tensor(work / "o.vcnt"), expected, rtol=1e-13)
        assert (work / "o.png").exists() and (work / "o.png.json").exists()

    def test_channel_mismatch(self, work, capsys):
        write_tensor(work / "f.vcnt", np.ones((20, 2)))
        net = one_d_network(work, np.ones((3, 3, 1)))
        code, _, err = run(capsys, "infer", "--network", net, "--cellfn", "f.vcnt", "--out-prefix", "o")
        assert code == 4
        assert "layer 0" in err

    def test_report_and_intermediates(self, work, capsys):
        save_png(GridImage(np.random.default_rng(2).random((8, 8)), Box.unit(2)), work / "img.png")
        doc = {
            "domain": "0,0,1,1",
            "input_grid": [4, 4],
            "layers": [{"kind": "pool", "output_grid": [2, 2]}, {"kind": "mixup", "out_channels": 2}],
        }
        (work / "net.json").write_text(json.dumps(doc))
        code, out, _ = run(
            capsys, "infer", "--network", "net.json", "--image", "img.png", "--out-prefix", "r/x",
            "--dump-intermediates", "--report", "--resolution", "32x16",
        )
        assert code == 0
        for k in range(3):
            assert (work / f"r/x.stage{k}.vcnt").exists()
            assert (work / f"r/x.stage{k}.fig.png").exists()
        rows = (work / "r/x.layers.csv").read_text().splitlines()
        assert rows[0].startswith("stage,kind,cells,channels")
        assert len(rows) == 4
        assert json.loads((work / "r/x.png.json").read_text())["width"] == 32
        assert "layer 1 (mixup)" in out

    def test_normalize_override(self, work, capsys):
        rng = np.random.default_rng(3)
        M = rng.standard_normal((3, 1, 1))
        write_tensor(work / "f.vcnt", np.ones((20, 1)))
        net = one_d_network(work, M)
        run(capsys, "infer", "--network", net, "--cellfn", "f.vcnt", "--out-prefix", "a")
        run(capsys, "infer", "--network", net, "--cellfn", "f.vcnt", "--out-prefix", "b", "--normalize")
        # unit cells: averaging divides by 1
        np.testing.assert_allclose(read_tensor(work / "a.vcnt"), read_tensor(work / "b.vcnt"))


class TestRasterize:
    def test_png_and_blob(self, work, capsys):
        save_partition(work / "p.json", grid_partition([2, 1]))
        write_tensor(work / "f.vcnt", np.array([[0.0], [1.0]]))
        code, _, _ = run(capsys, "rasterize", "--partition", "p.json", "--cellfn", "f.vcnt", "--resolution", "4x2", "--out", "r.vcnt")
        assert code == 0
        img = read_tensor(work / "r.vcnt")
        assert img.shape == (2, 4, 1)
        np.testing.assert_array_equal(img[:, :, 0], [[0, 0, 1, 1], [0, 0, 1, 1]])
        assert run(capsys, "rasterize", "--partition", "p.json", "--cellfn", "f.vcnt", "--out", "r.png")[0] == 0

    def test_bad_resolution(self, work, capsys):
        with pytest.raises(SystemExit) as info:
            main(["rasterize", "--partition", "p", "--cellfn", "f", "--out", "o", "--resolution", "big"])
        assert info.value.code == 1


class TestVerify:
    def test_one_d_passes(self, work, capsys):
        inp, ker = one_d_files(work)
        run(capsys, "ktensor", "--input", inp, "--kernel", ker, "--output", inp)
        code, out, _ = run(
            capsys, "verify", "--input", inp, "--kernel", ker, "--output", inp,
            "--samples", "1000000", "--subset", "12", "--report", "rep",
        )
        assert code == 0
        assert "PASS" in out
        assert (work / "rep.csv").read_text().startswith("u,v,w,exact,estimate,stderr,z")
        assert (work / "rep.png").exists()

    def test_corrupted_cache_fails(self, work, capsys):
        inp, ker = one_d_files(work)
        run(capsys, "ktensor", "--input", inp, "--kernel", ker, "--output", inp)
        path = next((work / ".vcnn-cache").glob("*.vcnk"))
        data = bytearray(path.read_bytes())
        head = struct.calcsize("<4sIIIIIQ32s32s32s")
        # first record's value: 3 u32 indices then one f64
        struct.pack_into("<d", data, head + 12, 0.75)
        path.write_bytes(bytes(data))
        code, out, _ = run(capsys, "verify", "--input", inp, "--kernel", ker, "--output", inp, "--samples", "100000", "--all")
        assert code == 5
        assert "FAIL" in out

    def test_foreign_cache_fails(self, work, capsys):
        inp, ker = one_d_files(work)
        run(capsys, "ktensor", "--input", inp, "--kernel", ker, "--output", inp)
        path = next((work / ".vcnn-cache").glob("*.vcnk"))
        save_partition(work / "other.json", grid_partition([10], Box([0.0], [11.0])))
        code, _, _ = run(capsys, "verify", "--input", "other.json", "--kernel", ker, "--output", "other.json", "--cache", str(path))
        assert code == 5

    def test_zero_samples(self, work, capsys):
        inp, ker = one_d_files(work)
        code, _, err = run(capsys, "verify", "--input", inp, "--kernel", ker, "--output", inp, "--samples", "0")
        assert code == 1
        assert "samples" in err

    def test_missing_cache(self, work, capsys):
        inp, ker = one_d_files(work)
        code, _, err = run(capsys, "verify", "--input", inp, "--kernel", ker, "--output", inp)
        assert code == 1
        assert "ktensor" in err


class TestGradCheck:
    def test_single_mixup(self, work, capsys):
        doc = {"domain": "0,0,1,1", "input_grid": [3, 3], "channels": 2, "layers": [{"kind": "mixup", "out_channels": 3}]}
        (work / "n.json").write_text(json.dumps(doc))
        code, out, _ = run(capsys, "grad-check", "--network", "n.json", "--seed", "4")
        assert code == 0
        worst = float(out.strip().splitlines()[-1].split()[3])
        assert worst < 1e-8

    def test_conv_relu_pool(self, work, capsys):
        doc = {
            "domain": "0,0,1,1",
            "input_sites": np.random.default_rng(0).random((10, 2)).tolist(),
            "layers": [
                {"kind": "conv", "kernel": {"grid": [2, 2], "lo": [-0.2, -0.2], "hi": [0.2, 0.2]}, "out_channels": 2},
                {"kind": "activation", "name": "relu"},
                {"kind": "pool", "output_grid": [2, 2]},
            ],
        }
        (work / "n.json").write_text(json.dumps(doc))
        code, out, _ = run(capsys, "grad-check", "--network", "n.json")
        assert code == 0
        assert "PASS" in out

    def test_mismatch_exit(self, work, capsys):
        # a step this large breaks the tolerance on the nonlinear layer
        doc = {"domain": "0,0,1,1", "input_grid": [2, 2], "channels": 1, "layers": [
            {"kind": "mixup", "out_channels": 2}, {"kind": "activation", "name": "tanh"},
        ]}
        (work / "n.json").write_text(json.dumps(doc))
        code, out, _ = run(capsys, "grad-check", "--network", "n.json", "--h", "0.5")
        assert code == 6
        assert "FAIL" in out

    def test_malformed(self, work, capsys):
        (work / "n.json").write_text('{"domain": "0,0,1,1",\n "layers": [,]}')
        code, _, err = run(capsys, "grad-check", "--network", "n.json")
        assert code == 1
        assert "line 2 column" in err
