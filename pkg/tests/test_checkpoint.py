import hashlib
import json

import numpy as np
import pytest

from shpeft.checkpoint import (
    MAGIC,
    CheckpointError,
    ConsistencyError,
    CorruptionError,
    LengthError,
    VersionError,
    encode,
    load_bundle,
    load_mask,
    load_scores,
    save_bundle,
    save_mask,
    save_scores,
    verify,
)
from shpeft.importance import ScoreMap
from shpeft.masking import select_topk
from shpeft.models import ModelSpec, build_model, replace_head

VIT = ModelSpec(image_side=8, patch=4, depth=1, width=8, heads=2, mlp_ratio=2, classes=3)


@pytest.fixture
def model():
    return replace_head(build_model(VIT), 3)


def test_bundle_round_trip(tmp_path, model):
    save_bundle(model.bundle, tmp_path / "w.stw")
    back = load_bundle(tmp_path / "w.stw")
    assert back.flat.tobytes() == model.bundle.flat.tobytes()
    assert back.flat.dtype == model.bundle.flat.dtype
    assert back.registry == model.registry
    assert back.signature == model.bundle.signature


def test_float64_bundle_round_trip(tmp_path):
    m = build_model(VIT, dtype=np.float64)
    save_bundle(m.bundle, tmp_path / "w.stw")
    assert load_bundle(tmp_path / "w.stw").flat.tobytes() == m.bundle.flat.tobytes()


def test_flipped_payload_byte(tmp_path, model):
    p = tmp_path / "w.stw"
    save_bundle(model.bundle, p)
    blob = bytearray(p.read_bytes())
    blob[-10] ^= 0x01
    p.write_bytes(bytes(blob))
    with pytest.raises(CorruptionError):
        load_bundle(p)


def test_truncated_file(tmp_path, model):
    p = tmp_path / "w.stw"
    save_bundle(model.bundle, p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(LengthError):
        load_bundle(p)


def test_unknown_version(tmp_path):
    blob = encode("scores", {"n": 0, "score_kind": "delta"}, b"").replace(b'"format_version":1', b'"format_version":9')
    # re-sign the header so only the version is wrong
    lines = blob.split(b"\n")
    lines[2] = hashlib.sha256(lines[1]).hexdigest().encode()
    (tmp_path / "s.sts").write_bytes(b"\n".join(lines))
    with pytest.raises(VersionError):
        load_scores(tmp_path / "s.sts")


def test_wrong_kind(tmp_path, model):
    save_bundle(model.bundle, tmp_path / "w.stw")
    with pytest.raises(CheckpointError, match="mask"):
        load_mask(tmp_path / "w.stw")


def test_mask_round_trip(tmp_path, model):
    mask = select_topk(np.random.default_rng(0).random(model.n_params), 0.1)
    save_mask(mask, tmp_path / "m.stm")
    back = load_mask(tmp_path / "m.stm")
    assert np.array_equal(back.bits, mask.bits) and np.array_equal(back.scope, mask.scope)
    assert back.selected == mask.selected and back.tau == mask.tau


def test_mask_popcount_mismatch(tmp_path):
    mask = select_topk(np.arange(20.0), 0.25)
    p = tmp_path / "m.stm"
    save_mask(mask, p)
    blob = p.read_bytes()
    header_line = blob.split(b"\n")[1]
    h = json.loads(header_line)
    h["selected"] = 6
    line = json.dumps(h, sort_keys=True, separators=(",", ":")).encode()
    payload = blob[len(MAGIC) + len(header_line) + 66:]
    p.write_bytes(MAGIC + line + b"\n" + hashlib.sha256(line).hexdigest().encode() + b"\n" + payload)
    with pytest.raises(ConsistencyError):
        load_mask(p)


def test_scores_round_trip_exact(tmp_path):
    vals = np.random.default_rng(0).random(37) * 1e-30
    s = ScoreMap(vals, "hybrid", {"strategy": "L2", "lambda": 1.0, "beta": 3.5e-5})
    save_scores(s, tmp_path / "s.sts")
    back = load_scores(tmp_path / "s.sts")
    assert back.values.tobytes() == vals.tobytes()
    assert back.kind == "hybrid" and back.meta["beta"] == 3.5e-5


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACHECKPOINT\n")
    with pytest.raises(CorruptionError):
        verify(tmp_path / "x")


def test_atomic_write_leaves_no_temp(tmp_path, model):
    save_bundle(model.bundle, tmp_path / "w.stw")
    save_bundle(model.bundle, tmp_path / "w.stw")
    assert [p.name for p in tmp_path.iterdir()] == ["w.stw"]


def test_header_is_human_readable(tmp_path, model):
    save_bundle(model.bundle, tmp_path / "w.stw")
    lines = (tmp_path / "w.stw").read_bytes().split(b"\n", 3)
    assert lines[0] == b"SHPEFT-CKPT"
    assert b'"kind":"weights"' in lines[1] and b"pos_embed" in lines[1]
    assert len(lines[2]) == 64
