import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fusesplat.exceptions import InvalidParameterError, SceneFormatError, ShapeError, ValidationError
from fusesplat.scene import (
    GaussianPrimitive,
    GaussianSet,
    Modality,
    MultimodalScene,
    concat_modalities,
    gaussian_count_ratio,
    iter_concat,
    load_scene,
    save_scene,
    scene_from_ply_bytes,
    scene_to_ply_bytes,
    sigmoid,
    split_modalities,
)

from _helpers import random_gset, random_scene


def counts_scene(n, m, seed=0):
    rng = np.random.default_rng(seed)
    return MultimodalScene(random_gset(rng, n, modality=Modality.VISIBLE),
                           random_gset(rng, m, modality=Modality.INFRARED))


def test_concat_with_empty_visible():
    s = counts_scene(0, 5)
    tags = [int(p.modality) for p, _ in iter_concat(s)]
    assert tags == [Modality.INFRARED] * 5
    assert [i for _, i in iter_concat(s)] == list(range(5))


def test_concat_order_visible_then_infrared():
    s = counts_scene(3, 2)
    g = concat_modalities(s)
    assert list(g.modality) == [0, 0, 0, 1, 1]
    np.testing.assert_array_equal(g.means[:3], s.visible.means)
    np.testing.assert_array_equal(g.means[3:], s.infrared.means)


@given(st.integers(0, 6), st.integers(0, 6))
def test_split_inverts_concat(n, m):
    s = counts_scene(n, m, seed=n * 7 + m)
    assert split_modalities(concat_modalities(s)).equals(s)


def test_scene_rejects_mistagged_primitives():
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        MultimodalScene(random_gset(rng, 2, modality=Modality.INFRARED), random_gset(rng, 2, modality=Modality.INFRARED))


@pytest.mark.parametrize("n,m,gamma", [(300, 100, 0.25), (40, 40, 0.5), (0, 7, 1.0)])
def test_count_ratio(n, m, gamma):
    assert gaussian_count_ratio(counts_scene(n, m)) == gamma


def test_count_ratio_empty_scene():
    with pytest.raises(InvalidParameterError):
        gaussian_count_ratio(counts_scene(0, 0))


@given(st.floats(-700, 700))
def test_activated_opacity_in_unit_interval(x):
    a = sigmoid(np.array([x]))[0]
    assert 0.0 <= a <= 1.0


def test_primitive_round_trip_through_set():
    s = counts_scene(2, 1)
    prims = list(s.visible)
    assert all(isinstance(p, GaussianPrimitive) for p in prims)
    assert GaussianSet.from_primitives(prims).equals(s.visible)


# --- PLY --------------------------------------------------------------------


def test_save_load_round_trip_is_exact(tmp_path):
    s = random_scene(np.random.default_rng(5), 60, 40)
    path = tmp_path / "s.ply"
    save_scene(s, path)
    loaded = load_scene(path)
    assert loaded.equals(s)
    for a, b in ((s.visible, loaded.visible), (s.infrared, loaded.infrared)):
        for name in ("means", "quats", "log_scales", "opacity_logits", "sh"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


@given(st.integers(0, 4), st.integers(0, 4), st.sampled_from([0, 1, 2, 3]))
def test_round_trip_any_counts_and_degree(n, m, degree):
    rng = np.random.default_rng(n + 10 * m + 100 * degree)
    s = MultimodalScene(random_gset(rng, n, sh_degree=degree, modality=Modality.VISIBLE),
                        random_gset(rng, m, sh_degree=degree, modality=Modality.INFRARED))
    assert scene_from_ply_bytes(scene_to_ply_bytes(s)).equals(s)


def _independent_read(data):
    """Minimal PLY reader written against the documented layout only."""
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode().splitlines()
    n = int(next(line.split()[2] for line in header if line.startswith("element vertex")))
    props = [line.split() for line in header if line.startswith("property")]
    fmt = "<" + "".join("d" if p[1] == "double" else "B" for p in props)
    size = struct.calcsize(fmt)
    names = [p[2] for p in props]
    rows = [dict(zip(names, struct.unpack_from(fmt, data, end + i * size))) for i in range(n)]
    return rows


def test_ply_layout_matches_common_viewer_convention():
    s = counts_scene(2, 1, seed=3)
    rows = _independent_read(scene_to_ply_bytes(s))
    g = concat_modalities(s)
    K = g.sh.shape[1]
    for i, row in enumerate(rows):
        assert (row["x"], row["y"], row["z"]) == tuple(g.means[i])
        assert row["opacity"] == g.opacity_logits[i]
        assert [row[f"rot_{j}"] for j in range(4)] == list(g.quats[i])
        assert [row[f"scale_{j}"] for j in range(3)] == list(g.log_scales[i])
        assert [row[f"f_dc_{c}"] for c in range(3)] == list(g.sh[i, 0])
        # f_rest is grouped by channel: all red coefficients, then green, then blue.
        rest = [row[f"f_rest_{j}"] for j in range(3 * (K - 1))]
        assert rest == list(g.sh[i, 1:, :].T.reshape(-1))
        assert row["modality"] == g.modality[i]


def test_truncated_file_reports_offset():
    data = scene_to_ply_bytes(counts_scene(3, 3))
    with pytest.raises(SceneFormatError) as exc:
        scene_from_ply_bytes(data[:-10])
    assert exc.value.offset is not None and exc.value.offset < len(data)


def test_truncated_file_on_disk_returns_nothing(tmp_path):
    p = tmp_path / "t.ply"
    p.write_bytes(scene_to_ply_bytes(counts_scene(3, 3))[:-1])
    with pytest.raises(SceneFormatError):
        load_scene(p)


def test_unknown_modality_value_rejected():
    data = bytearray(scene_to_ply_bytes(counts_scene(1, 1)))
    data[-1] = 7  # modality byte of the final vertex
    with pytest.raises(ValidationError):
        scene_from_ply_bytes(bytes(data))


def test_bad_coefficient_count_is_shape_error():
    data = scene_to_ply_bytes(counts_scene(1, 0))
    # Drop one f_rest property from the header: 8 rest coefficients is not 3 * (K - 1).
    data = data.replace(b"property double f_rest_8\n", b"")
    with pytest.raises(ShapeError):
        scene_from_ply_bytes(data)


def test_garbage_is_rejected():
    with pytest.raises(SceneFormatError):
        scene_from_ply_bytes(b"not a ply file")


def test_save_is_atomic_on_failure(tmp_path, monkeypatch):
    p = tmp_path / "s.ply"
    save_scene(counts_scene(1, 1), p)
    before = p.read_bytes()
    import fusesplat._io as io_mod

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(io_mod.os, "replace", boom)
    with pytest.raises(OSError):
        save_scene(counts_scene(4, 4), p)
    assert p.read_bytes() == before
    assert sorted(x.name for x in tmp_path.iterdir()) == ["s.ply"]
