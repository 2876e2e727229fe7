import json
import logging

import numpy as np
import pytest
import torch
from PIL import Image

from clippatch.core import PatchSpec
from clippatch.errors import IncompatibleVersionError, IngestError, IntegrityError
from clippatch.evaluation import EvalRecord
from clippatch.io import (MAGIC, class_name, load_image_dataset, load_patch, load_video_dir,
                          read_artifact, read_records, save_patch, write_records)
from clippatch.synthetic import make_image_dataset, make_video_dataset


def write_tree(root, counts, size=4):
    for name, n in counts.items():
        d = root / name
        d.mkdir(parents=True)
        for k in range(n):
            Image.fromarray(np.full((size, size, 3), k % 256, dtype=np.uint8)).save(d / f"{k}.png")


def test_stratified_split(tmp_path):
    write_tree(tmp_path, {f"{i:03d}.class{i}": 100 for i in range(10)})
    m = load_image_dataset(tmp_path, 0.3, seed=1)
    assert m.classes == [f"class{i}" for i in range(10)]
    for c in m.classes:
        assert sum(m.split[r] == "val" for r in m.class_images[c]) == 30
    assert set(m.split) == {r for rs in m.class_images.values() for r in rs}


def test_split_deterministic_and_seed_sensitive(tmp_path):
    write_tree(tmp_path, {"a": 7, "b": 9})
    assert load_image_dataset(tmp_path, 0.3, 5).split == load_image_dataset(tmp_path, 0.3, 5).split
    assert load_image_dataset(tmp_path, 0.3, 5).split != load_image_dataset(tmp_path, 0.3, 6).split


@pytest.mark.parametrize("n", [2, 3, 5, 7, 11])
def test_split_counts_round(tmp_path, n):
    write_tree(tmp_path, {"a": n, "b": 3})
    m = load_image_dataset(tmp_path, 0.3, 0)
    n_val = sum(m.split[r] == "val" for r in m.class_images["a"])
    assert abs(n_val - 0.3 * n) <= 1


def test_tiny_class_warns_and_stays_in_train(tmp_path, caplog):
    write_tree(tmp_path, {"a": 1, "b": 4})
    with caplog.at_level(logging.WARNING):
        m = load_image_dataset(tmp_path, 0.5, 0)
    assert "keeping it in train" in caplog.text
    assert m.split["a/0.png"] == "train"


def test_empty_root(tmp_path):
    with pytest.raises(IngestError):
        load_image_dataset(tmp_path)


def test_class_name():
    assert class_name("092.homer-simpson") == "homer-simpson"
    assert class_name("cake") == "cake"


def test_load_split_images(tmp_path):
    make_image_dataset(tmp_path, ("cake", "dog"), per_class=4, size=12)
    m = load_image_dataset(tmp_path, 0.5, 0)
    val = m.load_split("val")
    assert len(val) == 4 and val[0].image.shape == (12, 12, 3)
    assert val[0].image.dtype == torch.float32 and 0 <= val[0].image.min() <= val[0].image.max() <= 1
    assert m.vocabulary().labels == ("cake", "dog")


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_patch_roundtrip(tmp_path, dtype):
    patch = PatchSpec.square(64, seed=4, dtype=dtype, target_label_id=3,
                             metadata={"model_id": "toy", "nested": {"a": [1, 2]}})
    save_patch(patch, tmp_path / "p.pa")
    back = load_patch(tmp_path / "p.pa")
    assert back.params.dtype == dtype
    assert torch.equal(back.params, patch.params)
    assert back.metadata == patch.metadata and back.target_label_id == 3


def test_text_patch_roundtrip(tmp_path):
    patch = PatchSpec.text_overlay("cake", 0.25, target_label_id=1)
    save_patch(patch, tmp_path / "t.pa")
    back = load_patch(tmp_path / "t.pa")
    assert (back.kind, back.text, back.area_fraction) == ("text", "cake", 0.25)


def test_truncated_artifact(tmp_path):
    save_patch(PatchSpec.square(8), tmp_path / "p.pa")
    data = (tmp_path / "p.pa").read_bytes()
    (tmp_path / "p.pa").write_bytes(data[:-10])
    with pytest.raises(IntegrityError):
        load_patch(tmp_path / "p.pa")


def test_corrupt_payload(tmp_path):
    save_patch(PatchSpec.square(8), tmp_path / "p.pa")
    data = bytearray((tmp_path / "p.pa").read_bytes())
    data[-1] ^= 0xFF
    (tmp_path / "p.pa").write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_patch(tmp_path / "p.pa")


def test_not_an_artifact(tmp_path):
    (tmp_path / "x.pa").write_bytes(b"hello world, definitely not a patch")
    with pytest.raises(IntegrityError):
        load_patch(tmp_path / "x.pa")


def test_future_version(tmp_path):
    save_patch(PatchSpec.square(2), tmp_path / "p.pa")
    raw = (tmp_path / "p.pa").read_bytes()
    hlen = int.from_bytes(raw[len(MAGIC):len(MAGIC) + 4], "little")
    head = json.loads(raw[len(MAGIC) + 4:len(MAGIC) + 4 + hlen])
    head["format_version"] = 99
    new = json.dumps(head, sort_keys=True).encode()
    out = MAGIC + len(new).to_bytes(4, "little") + new + raw[len(MAGIC) + 4 + hlen:]
    (tmp_path / "p.pa").write_bytes(out)
    with pytest.raises(IncompatibleVersionError):
        load_patch(tmp_path / "p.pa")


def test_artifact_layout_is_little_endian(tmp_path):
    patch = PatchSpec("square", torch.tensor([[[0.0, 0.5, 1.0]]]))
    save_patch(patch, tmp_path / "p.pa")
    header, payload = read_artifact(tmp_path / "p.pa")
    assert header["dtype"] == "<f4" and header["shape"] == [1, 1, 3]
    assert np.frombuffer(payload, "<f4").tolist() == [0.0, 0.5, 1.0]


def test_records_roundtrip(tmp_path):
    recs = [EvalRecord("a", 1, 0, (0, 2), 0), EvalRecord("b", 0, 0, (3,), 4, "clean")]
    write_records(tmp_path / "r.jsonl", recs)
    assert read_records(tmp_path / "r.jsonl") == recs


def test_video_dir(tmp_path):
    videos, captions = make_video_dataset(tmp_path, ("cake", "dog"), n_videos=3, n_frames=5, size=8)
    vids = load_video_dir(videos, captions)
    assert [v.id for v in vids] == ["video_000", "video_001", "video_002"]
    assert [v.caption for v in vids] == ["cake", "dog", "cake"]
    assert len(vids[0].frames) == 5


def test_video_dir_missing_caption(tmp_path):
    videos, captions = make_video_dataset(tmp_path, ("cake",), n_videos=2, n_frames=2, size=8)
    captions.write_text(json.dumps({"video_000": "cake"}))
    with pytest.raises(IngestError):
        load_video_dir(videos, captions)
