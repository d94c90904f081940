import numpy as np
import pytest
from PIL import Image

from dilie import data_io as D
from dilie.core import DatasetError, LoadError


def write_png(path, h, w, seed=0):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)
    return arr


def test_load_resize_aspect(tmp_path):
    write_png(tmp_path / "big.png", 1024, 2048)
    img = D.load_image(tmp_path / "big.png", 512)
    assert img.shape == (256, 512, 3)
    assert img.min() >= 0 and img.max() <= 1
    small = D.load_image(tmp_path / "big.png", 4096)
    assert small.shape == (1024, 2048, 3)


def test_load_errors(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(LoadError, match="junk.png"):
        D.load_image(tmp_path / "junk.png")
    with pytest.raises(LoadError):
        D.load_image(tmp_path / "missing.png")


def test_save_load_roundtrip(tmp_path, rng):
    img = rng.random((20, 30, 3))
    D.save_image(tmp_path / "x.png", img)
    back = D.load_image(tmp_path / "x.png")
    assert np.abs(back - img).max() <= 1 / 255 + 1e-12
    q = np.round(img * 255) / 255
    D.save_image(tmp_path / "q.png", q)
    assert np.abs(D.load_image(tmp_path / "q.png") - q).max() <= 1e-12


def test_save_single_channel(tmp_path, rng):
    D.save_image(tmp_path / "m.png", rng.random((10, 12, 1)))
    assert Image.open(tmp_path / "m.png").mode == "L"


def test_scan_generic_suffix(tmp_path):
    for stem in ("b", "a", "c"):
        write_png(tmp_path / f"{stem}_hazy.png", 8, 8)
        write_png(tmp_path / f"{stem}_gt.png", 8, 8)
    write_png(tmp_path / "d_hazy.png", 8, 8)
    ds = D.scan_paired(tmp_path)
    assert len(ds) == 3
    assert [p[0].name for p in ds.pairs] == ["a_hazy.png", "b_hazy.png", "c_hazy.png"]
    assert [p.name for p in ds.unpaired] == ["d_hazy.png"]
    assert D.scan_paired(tmp_path).pairs == ds.pairs
    hazy, gt = ds.load(0)
    assert hazy.shape == gt.shape == (8, 8, 3)


def test_scan_ihaze_layout(tmp_path):
    for i in (1, 2):
        write_png(tmp_path / "hazy" / f"{i:02d}_indoor_hazy.jpg", 8, 8)
        write_png(tmp_path / "GT" / f"{i:02d}_indoor_GT.jpg", 8, 8)
    ds = D.scan_paired(tmp_path, "ihaze")
    assert len(ds) == 2
    assert ds.pairs[0][0].name.startswith("01") and ds.pairs[0][1].name == "01_indoor_GT.jpg"


def test_scan_errors(tmp_path):
    with pytest.raises(DatasetError):
        D.scan_paired(tmp_path / "nope")
    with pytest.raises(DatasetError):
        D.scan_paired(tmp_path)
    with pytest.raises(ValueError):
        D.scan_paired(tmp_path, "unknown")


def test_match_by_stem(tmp_path):
    write_png(tmp_path / "o" / "a.png", 4, 4)
    write_png(tmp_path / "o" / "b.png", 4, 4)
    write_png(tmp_path / "r" / "a.png", 4, 4)
    pairs, unmatched = D.match_by_stem(tmp_path / "o", tmp_path / "r")
    assert [(p.name, q.name) for p, q in pairs] == [("a.png", "a.png")]
    assert [p.name for p in unmatched] == ["b.png"]


def test_json_and_rows(tmp_path):
    D.write_json(tmp_path / "m.json", {"a": np.float32(1.5), "b": np.arange(3), "c": tmp_path})
    back = D.read_json(tmp_path / "m.json")
    assert back["a"] == 1.5 and back["b"] == [0, 1, 2]
    D.write_rows(tmp_path / "r.csv", [{"x": 0.1, "y": "a"}, {"x": 2.0, "z": 3}])
    rows = D.read_rows(tmp_path / "r.csv")
    assert list(rows[0]) == ["x", "y", "z"]
    assert float(rows[0]["x"]) == 0.1 and rows[1]["z"] == "3"
    assert not list(tmp_path.glob(".*.tmp"))
