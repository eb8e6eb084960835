import pathlib
import tempfile

import numpy as np
import pytest
from deepdiff import DeepDiff

from qdavpr.data import DatasetManifest, ManifestRow, Split, load_manifest, save_manifest
from qdavpr.data.manifest import save_image
from qdavpr.error import ParsingError, PathError, ProtocolError

ROWS = [
    ManifestRow("a.png", 0, lat=45.5, lon=9.25, frame_id=None, split=Split.DB),
    ManifestRow("b.png", 0, lat=None, lon=None, frame_id=12, split=Split.QUERY),
    ManifestRow("c.png", 1),
    ManifestRow("d.png", 1, lat=1.0, lon=2.0, frame_id=3, split=Split.TRAIN),
]


def test_csv_round_trip():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = pathlib.Path(tmpdir) / "manifest.csv"
        save_manifest(DatasetManifest(rows=ROWS), path)

        manifest = load_manifest(path)

        assert "domain" not in path.read_text().splitlines()[0]
        assert manifest.root == pathlib.Path(tmpdir)
    assert DeepDiff(manifest.rows, ROWS) == {}


def test_domain_column():
    rows = [ManifestRow("fog/a.png", 0, split=Split.TRAIN, domain=0), ManifestRow("b.png", 1)]
    with tempfile.TemporaryDirectory() as tmpdir:
        path = pathlib.Path(tmpdir) / "manifest.csv"
        save_manifest(DatasetManifest(rows=rows), path)

        header = path.read_text().splitlines()[0]
        manifest = load_manifest(path)

    assert header.endswith(",domain")
    assert [row.domain for row in manifest.rows] == [0, None]


def test_missing_manifest():
    with pytest.raises(PathError):
        load_manifest("/nonexistent/manifest.csv")


@pytest.mark.parametrize(
    "content",
    [
        "image_path,place_id,lat,lon,split\na.png,0,,,train\n",
        "image_path,place_id,lat,lon,frame_id,split\na.png,zero,,,,train\n",
        "image_path,place_id,lat,lon,frame_id,split\na.png,0,,,,validation\n",
        "image_path,place_id,lat,lon,frame_id,split\na.png,-1,,,,train\n",
    ],
)
def test_malformed_manifest(content):
    with tempfile.TemporaryDirectory() as tmpdir:
        path = pathlib.Path(tmpdir) / "manifest.csv"
        path.write_text(content)

        with pytest.raises(ParsingError):
            load_manifest(path)


def test_evaluation_rows_need_tags():
    with pytest.raises(ProtocolError):
        DatasetManifest(rows=[ManifestRow("a.png", 0, split=Split.QUERY)])


def test_split_and_places():
    manifest = DatasetManifest(rows=ROWS)

    assert [row.image_path for row in manifest.split("db").rows] == ["a.png"]
    assert [row.image_path for row in manifest.split(Split.TRAIN).rows] == ["c.png", "d.png"]
    assert manifest.places() == {0: [0, 1], 1: [2, 3]}
    assert len(manifest) == 4


def test_load_image_from_disk():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(20, 20, 3)).astype(np.float32) / 255.0
    with tempfile.TemporaryDirectory() as tmpdir:
        root = pathlib.Path(tmpdir)
        save_image(image, root / "images" / "a.png")
        manifest = DatasetManifest(rows=[ManifestRow("images/a.png", 0)], root=root)

        loaded = manifest.load_image(0)
        resized = manifest.load_image(0, size=10)

    assert loaded.dtype == np.float32
    assert np.allclose(loaded, image, atol=1e-6)
    assert resized.shape == (10, 10, 3)
    assert "images/a.png" in manifest.cache


def test_load_missing_image():
    with tempfile.TemporaryDirectory() as tmpdir:
        manifest = DatasetManifest(rows=[ManifestRow("a.png", 0)], root=pathlib.Path(tmpdir))

        with pytest.raises(PathError):
            manifest.load_image(0)
