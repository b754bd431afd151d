import numpy as np
import pytest

from critflow.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from critflow.flow import dome, initial_state, step_yamabe
from critflow.geometry import Domain, build_grid


@pytest.fixture(scope="module")
def state():
    g = build_grid(Domain.annulus(0.5, 1.0, 3), "radial", n_nodes=96, grading=1.0)
    st = initial_state(dome(g), dt=1e-3)
    return step_yamabe(step_yamabe(st, 1e-3), 2e-3)


def test_roundtrip_is_exact(tmp_path, state):
    path = tmp_path / "ck.bin"
    write_checkpoint(path, state)
    back = read_checkpoint(path)
    assert np.array_equal(back.u.values, state.u.values)
    assert back.u.grid.spec == state.u.grid.spec
    assert np.array_equal(back.u.grid.r, state.u.grid.r)
    for name in ("s_time", "t_time", "r", "step_index", "dt", "vol_drift"):
        assert getattr(back, name) == getattr(state, name)
    assert np.isnan(back.clock)
    assert not (tmp_path / "ck.bin.tmp").exists()


def test_resume_continues_identically(tmp_path, state):
    path = tmp_path / "ck.bin"
    write_checkpoint(path, state)
    a = step_yamabe(state, 1e-3)
    b = step_yamabe(read_checkpoint(path), 1e-3)
    assert np.array_equal(a.u.values, b.u.values)
    assert a.r == b.r


def test_cartesian_roundtrip(tmp_path):
    g = build_grid(Domain.box((1.0, 1.0, 1.0)), "cartesian", h=0.25)
    st = initial_state(dome(g))
    write_checkpoint(tmp_path / "c.bin", st)
    back = read_checkpoint(tmp_path / "c.bin")
    assert back.u.grid.shape == g.shape
    assert np.array_equal(back.u.values, st.u.values)


def test_corrupt_files(tmp_path, state):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nope" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    good = tmp_path / "good.bin"
    write_checkpoint(good, state)
    raw = good.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short.bin")
    other = build_grid(Domain.annulus(0.5, 1.0, 3), "radial", n_nodes=32)
    with pytest.raises(CheckpointError):
        read_checkpoint(good, grid=other)
