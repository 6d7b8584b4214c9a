import numpy as np
import pytest

from neighborwise.params import CheckpointError, ParamStore


def make_store(rng):
    s = ParamStore()
    s.add("a.weight", rng.normal(size=(3, 4)))
    s.add("a.bias", rng.normal(size=4))
    s.add_running("bn", 4)
    s.running["bn"]["mean"][:] = rng.normal(size=4)
    return s


def test_checkpoint_round_trip(tmp_path, rng):
    s = make_store(rng)
    s.save(tmp_path / "m.nwck")
    assert ParamStore.load(tmp_path / "m.nwck").equals(s)


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path, rng):
    s = make_store(rng)
    p = tmp_path / "m.nwck"
    s.save(p)
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        ParamStore.load(p)
    p.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError):
        ParamStore.load(p)


def test_duplicate_name_rejected():
    s = ParamStore()
    s.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        s.add("w", np.zeros(2))


def test_frozen_view_gives_constants(rng):
    s = make_store(rng)
    f = s.frozen()
    assert not f["a.weight"].requires_grad
    np.testing.assert_array_equal(f["a.weight"].data, s["a.weight"].data)


def test_copy_is_deep(rng):
    s = make_store(rng)
    c = s.copy()
    c["a.bias"].data[0] += 1
    assert not c.equals(s)
