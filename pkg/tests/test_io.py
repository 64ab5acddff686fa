import numpy as np
import pytest

from mmdit_edit import io
from mmdit_edit.flow import FlowState


def test_matrix_roundtrip(tmp_path, rng):
    m = rng.standard_normal((5, 3))
    io.write_matrix(tmp_path / "m.bin", m)
    back = io.read_matrix(tmp_path / "m.bin")
    assert np.array_equal(back, m)


def test_matrix_bytes_layout():
    buf = io.matrix_to_bytes(np.array([[1.0, 2.0]]))
    assert buf[:8] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert len(buf) == 8 + 16


def test_matrix_truncated_buffer_raises():
    buf = io.matrix_to_bytes(np.ones((3, 3)))
    with pytest.raises(ValueError):
        io.matrix_from_bytes(buf[:-4])


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    io.write_pgm(tmp_path / "a.pgm", img, 1.0)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n65535\n")
    np.testing.assert_allclose(io.read_pgm(tmp_path / "a.pgm"), img, atol=1 / 65535)


def test_json_is_deterministic():
    assert io.dump_json({"b": 1, "a": [1.5]}) == io.dump_json({"a": [1.5], "b": 1})
    assert io.dump_json({}).endswith("\n")


def test_trajectory_roundtrip(tmp_path, rng):
    states = [FlowState(rng.standard_normal((2, 2)), t) for t in (1.0, 0.5, 0.0)]
    io.write_trajectory(tmp_path / "tr", states, {"seed": 3})
    knots, latents, manifest = io.read_trajectory(tmp_path / "tr")
    assert manifest["seed"] == 3
    assert knots == [1.0, 0.5, 0.0]
    assert all(np.array_equal(a.latent, b) for a, b in zip(states, latents))
