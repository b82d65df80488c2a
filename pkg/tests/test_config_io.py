import hashlib
import json
import os
import tempfile
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bovw_distill import io
from bovw_distill.config import ConfigError, config_hash, default_config, load_config, parse_config
from bovw_distill.rng import rng_for

MINIMAL = "[run]\nseed = 1\n[bovw]\nK = 32\nD = 32\n"


# -- config ---------------------------------------------------------------------------


def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.seed == 1 and cfg.bovw.K == 32 and cfg.detector.S == 4


def test_missing_key_is_named():
    with pytest.raises(ConfigError, match="bovw.K"):
        parse_config("[run]\nseed = 1\n[bovw]\nD = 32\n")


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"<config>:6: unknown config key 'bovw.KK'"):
        parse_config(MINIMAL + "KK = 3\n")


def test_unknown_section_reports_line():
    with pytest.raises(ConfigError, match=r":7: unknown section \[teacher\]"):
        parse_config(MINIMAL + "\n[teacher]\nx = 1\n")


def test_bad_value_reports_line():
    with pytest.raises(ConfigError, match=r":4: bovw.K: cannot parse"):
        parse_config(MINIMAL.replace("K = 32", "K = many"))


def test_bad_choice():
    with pytest.raises(ConfigError, match="distill.target"):
        parse_config(MINIMAL + "[distill]\ntarget = pixels\n")


def test_inconsistent_roi_grid():
    with pytest.raises(ConfigError, match="detector.S"):
        parse_config(MINIMAL + "[detector]\nS = 3\n")


def test_override_changes_only_that_key():
    base = parse_config(MINIMAL)
    over = parse_config(MINIMAL, ["distill.eta=0.25"])
    assert over.distill.eta == 0.25
    a, b = base.to_dict(), over.to_dict()
    b["distill"]["eta"] = a["distill"]["eta"]
    assert a == b


def test_override_beats_file():
    assert parse_config(MINIMAL, ["bovw.K=8"]).bovw.K == 8


def test_override_malformed():
    with pytest.raises(ConfigError):
        parse_config(MINIMAL, ["bovw.K"])


def test_resolved_text_round_trips_and_hash_matches(tmp_path):
    cfg = parse_config(MINIMAL, ["distill.eta=0.3", "detector.channels=8,16,32"])
    p = tmp_path / "resolved.ini"
    p.write_text(cfg.to_text())
    again = load_config(p)
    assert again.to_dict() == cfg.to_dict()
    assert config_hash(again) == cfg.hash()


def test_hash_is_sha256_of_canonical_json():
    cfg = default_config(4)
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    assert cfg.hash() == hashlib.sha256(blob).hexdigest()


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.ini")


# -- rng -----------------------------------------------------------------------------------


def test_streams_depend_only_on_seed_and_path():
    assert rng_for(3, "a", 1).random(4).tolist() == rng_for(3, "a", 1).random(4).tolist()
    assert rng_for(3, "a", 1).random() != rng_for(3, "a", 2).random()
    assert rng_for(3, "a").random() != rng_for(4, "a").random()


def test_drawing_from_one_stream_leaves_others_alone():
    expected = rng_for(0, "detector", "init").random(3)
    rng_for(0, "teacher", "init").random(1000)
    assert np.array_equal(rng_for(0, "detector", "init").random(3), expected)


# -- binary formats --------------------------------------------------------------------------


def test_vocabulary_bytes_layout(tmp_path):
    words = np.arange(6.0).reshape(2, 3)
    p = tmp_path / "v.pbvw"
    io.save_vocabulary(p, words)
    raw = p.read_bytes()
    assert raw[:4] == b"PBVW" and len(raw) == 4 + 12 + 6 * 8
    assert np.frombuffer(raw[16:], "<f8").tolist() == words.ravel().tolist()


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(0, 3))
def test_checkpoint_round_trip_bit_exact(seed, n, rank):
    r = np.random.default_rng(seed)
    state = OrderedDict((f"p{i}.w", r.standard_normal(tuple(r.integers(1, 4, rank)))) for i in range(n))
    blob = io.checkpoint_bytes(state)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "c.ckpt")
        digest = io.save_checkpoint(path, state)
        back = io.load_checkpoint(path)
        assert digest == hashlib.sha256(blob).hexdigest() == io.file_hash(path)
    assert list(back) == list(state)
    for k in state:
        assert back[k].shape == np.shape(state[k]) and back[k].tobytes() == np.asarray(state[k]).tobytes()


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "c.ckpt"
    io.save_checkpoint(p, OrderedDict(w=np.ones((2, 2))))
    raw = p.read_bytes()
    p.write_bytes(b"PBVW" + raw[4:])
    with pytest.raises(io.BadMagicError):
        io.load_checkpoint(p)
    p.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(io.UnsupportedVersionError):
        io.load_checkpoint(p)
    p.write_bytes(raw[:-1])
    with pytest.raises(io.TruncatedFileError):
        io.load_checkpoint(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(io.FormatError, match="trailing"):
        io.load_checkpoint(p)
