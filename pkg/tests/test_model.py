import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_model
from sirface.model import (GimbalLockWarning, Mesh, MorphableModel, OrthonormalityWarning, Pose,
                           euler_to_matrix, euler_to_quaternion, extract_euler, load_model,
                           project, project_landmarks, quaternion_matrix_jacobian,
                           quaternion_to_matrix, save_model, synthesize, synthesize_vector,
                           transform_to_camera)
from sirface.objio import format_obj, read_obj, write_obj

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def random_unit_quaternion(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def rotation_oracle(q):
    # rotate by q v q* with explicit Hamilton products
    def mul(a, b):
        aw, ax, ay, az = a
        bw, bx, by, bz = b
        return np.array([aw * bw - ax * bx - ay * by - az * bz,
                         aw * bx + ax * bw + ay * bz - az * by,
                         aw * by - ax * bz + ay * bw + az * bx,
                         aw * bz + ax * by - ay * bx + az * bw])
    conj = q * np.array([1, -1, -1, -1])
    cols = [mul(mul(q, np.r_[0.0, e]), conj)[1:] for e in np.eye(3)]
    return np.column_stack(cols)


# ---------------------------------------------------------------- model type

def test_model_is_read_only(small_model):
    with pytest.raises(ValueError):
        small_model.mean_shape[0] = 1.0
    assert small_model.is_orthonormal
    assert (small_model.n_vertices, small_model.m_id, small_model.m_exp) == (100, 16, 4)


def test_non_orthonormal_basis_strict_and_lenient():
    m = random_model(n=20, m_id=3)
    A = m.shape_basis.copy()
    A[:, 0] *= 2
    kwargs = dict(mean_shape=m.mean_shape, shape_basis=A, expr_basis=m.expr_basis,
                  shape_eigenvalues=m.shape_eigenvalues, expr_eigenvalues=m.expr_eigenvalues,
                  topology=m.topology, landmark_indices=m.landmark_indices)
    with pytest.raises(ValueError, match="orthonormal"):
        MorphableModel(**kwargs)
    with pytest.warns(OrthonormalityWarning):
        lenient = MorphableModel(**kwargs, strict=False)
    assert not lenient.is_orthonormal
    assert lenient.orthonormality_error == pytest.approx(3.0)


@pytest.mark.parametrize("change, match", [
    (dict(shape_eigenvalues=[1.0, 0.0, 1.0]), "positive"),
    (dict(landmark_indices=[0, 20]), "landmark"),
    (dict(topology=[[0, 0, 1]]), "degenerate"),
    (dict(topology=[[0, 1, 20]]), "range"),
])
def test_model_invariants(change, match):
    m = random_model(n=20, m_id=3)
    kwargs = dict(mean_shape=m.mean_shape, shape_basis=m.shape_basis, expr_basis=m.expr_basis,
                  shape_eigenvalues=m.shape_eigenvalues, expr_eigenvalues=m.expr_eigenvalues,
                  topology=m.topology, landmark_indices=m.landmark_indices)
    kwargs.update(change)
    with pytest.raises(ValueError, match=match):
        MorphableModel(**kwargs)


def test_pose_invariants():
    with pytest.raises(ValueError, match="unit"):
        Pose(rotation=(1.0, 1e-4, 0.0, 0.0))  # |q| - 1 = 5e-9
    Pose(rotation=(1.0 + 1e-11, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="focal"):
        Pose(focal=0.0)


# ---------------------------------------------------------------- synthesize

def test_zero_codes_give_mean(small_model):
    mesh = synthesize(small_model, small_model.zero_shape(), small_model.zero_expr())
    assert np.array_equal(mesh.vertices.ravel(), small_model.mean_shape)
    assert np.array_equal(mesh.faces, small_model.topology)


def test_unit_code_extracts_basis_column(small_model):
    for k in (0, 7, 15):
        e = np.zeros(16)
        e[k] = 1.0
        v = synthesize_vector(small_model, e)
        assert np.allclose(v - small_model.mean_shape, small_model.shape_basis[:, k], atol=1e-15)


@pytest.mark.filterwarnings("ignore::sirface.model.OrthonormalityWarning")
def test_three_vertex_loop_oracle(rng):
    mean = rng.standard_normal(9)
    A = rng.standard_normal((9, 2))
    B = rng.standard_normal((9, 1))
    model = MorphableModel(mean, A, B, [1.0, 1.0], [1.0], [[0, 1, 2]], [0], strict=False)
    a, b = rng.standard_normal(2), rng.standard_normal(1)
    expected = np.zeros((3, 3))
    for i in range(3):
        for c in range(3):
            r = 3 * i + c
            expected[i, c] = mean[r] + sum(A[r, k] * a[k] for k in range(2)) + B[r, 0] * b[0]
    assert np.allclose(synthesize(model, a, b).vertices, expected, atol=1e-12, rtol=0)


def test_code_length_mismatch(small_model):
    with pytest.raises(ValueError, match="length"):
        synthesize(small_model, np.zeros(3))
    with pytest.raises(ValueError, match="length"):
        synthesize(small_model, np.zeros(16), np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(arrays(float, 16, elements=finite), arrays(float, 16, elements=finite), finite, finite)
def test_synthesis_is_affine(x1, x2, a, b):
    m = random_model()
    lhs = synthesize_vector(m, a * x1 + b * x2) - m.mean_shape
    rhs = a * (synthesize_vector(m, x1) - m.mean_shape) + b * (synthesize_vector(m, x2) - m.mean_shape)
    assert np.allclose(lhs, rhs, atol=1e-9, rtol=0)


# ---------------------------------------------------------------- rotation

def test_quaternion_matrix_matches_hamilton_product(rng):
    for _ in range(20):
        q = random_unit_quaternion(rng)
        assert np.allclose(quaternion_to_matrix(q), rotation_oracle(q), atol=1e-12)


def test_quaternion_jacobian_finite_differences(rng):
    q = rng.standard_normal(4)
    J = quaternion_matrix_jacobian(q)
    h = 1e-6
    for k in range(4):
        d = np.zeros(4)
        d[k] = h
        num = (quaternion_to_matrix(q + d) - quaternion_to_matrix(q - d)) / (2 * h)
        assert np.allclose(J[k], num, atol=1e-8)


def test_transform_identity_returns_input(small_model):
    mesh = synthesize(small_model, small_model.zero_shape())
    out = transform_to_camera(mesh, Pose())
    assert np.array_equal(out.vertices, mesh.vertices)


def test_transform_axis_permutation():
    q = euler_to_quaternion(math.pi / 2, 0, 0)
    out = transform_to_camera(np.array([[1.0, 0.0, 0.0]]), Pose(rotation=q, translation3d=(0, 0, 1)))
    assert np.allclose(out, [[0.0, 1.0, 1.0]], atol=1e-15)


def test_transform_matches_oracle_and_is_rigid(rng):
    V = rng.standard_normal((30, 3))
    q = random_unit_quaternion(rng)
    t = rng.standard_normal(3)
    out = transform_to_camera(V, Pose(rotation=q, translation3d=t))
    R = rotation_oracle(q)
    assert np.allclose(out, np.array([R @ v + t for v in V]), atol=1e-12)
    d0 = np.linalg.norm(V[:, None] - V[None], axis=2)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=2)
    assert np.allclose(d0, d1, atol=1e-9)


# ---------------------------------------------------------------- projection

def test_identity_projection_keeps_xy(rng):
    V = rng.standard_normal((12, 3))
    assert np.array_equal(project(V, Pose()), V[:, :2])


def test_projection_linear_in_focal(rng):
    V = rng.standard_normal((12, 3))
    kw = dict(rotation=random_unit_quaternion(rng), translation2d=(3.0, -2.0))
    p1 = project(V, Pose(focal=1.5, **kw))
    p2 = project(V, Pose(focal=3.0, **kw))
    t = np.array([3.0, -2.0])
    assert np.allclose(p2 - t, 2 * (p1 - t), atol=1e-12)


def test_projection_compositional_oracle(rng, small_model):
    shape = small_model.shape_eigenvalues * rng.standard_normal(16)
    expr = small_model.expr_eigenvalues * rng.standard_normal(4)
    pose = Pose(rotation=random_unit_quaternion(rng), translation3d=rng.standard_normal(3),
                translation2d=rng.standard_normal(2), focal=1.7)
    mesh = synthesize(small_model, shape, expr)
    cam = transform_to_camera(mesh, Pose(rotation=pose.rotation))
    oracle = pose.focal * cam.vertices[:, :2] + np.array(pose.translation2d)
    assert np.allclose(project(mesh, pose), oracle, atol=1e-12)
    lms = project_landmarks(small_model, shape, expr, pose)
    assert np.allclose(lms, oracle[small_model.landmark_indices], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(float, 3, elements=finite))
def test_projection_ignores_t3d(t3):
    rng = np.random.default_rng(1)
    V = rng.standard_normal((8, 3))
    q = random_unit_quaternion(rng)
    a = project(V, Pose(rotation=q, translation2d=(1.0, 2.0), focal=2.0))
    b = project(V, Pose(rotation=q, translation3d=t3, translation2d=(1.0, 2.0), focal=2.0))
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- euler

def test_euler_simple_cases():
    assert extract_euler(Pose()) == (0.0, 0.0, 0.0)
    yaw, pitch, roll = extract_euler(Pose.from_euler(math.pi / 6, 0, 0))
    assert yaw == pytest.approx(math.pi / 6, abs=1e-12)
    assert abs(pitch) < 1e-12 and abs(roll) < 1e-12


def test_euler_round_trip(rng):
    for _ in range(100):
        pose = Pose(rotation=random_unit_quaternion(rng))
        R = euler_to_matrix(*extract_euler(pose))
        assert np.allclose(R, pose.matrix, atol=1e-9)


def test_euler_to_quaternion_matches_matrix(rng):
    for _ in range(20):
        a = rng.uniform(-3, 3, 3) * [1, 0.5, 1]
        assert np.allclose(quaternion_to_matrix(euler_to_quaternion(*a)), euler_to_matrix(*a), atol=1e-12)


def test_gimbal_lock_flagged():
    pose = Pose.from_euler(0.4, math.pi / 2, 0.3)
    with pytest.warns(GimbalLockWarning):
        angles = extract_euler(pose)
    assert angles[2] == 0.0
    assert np.allclose(euler_to_matrix(*angles), pose.matrix, atol=1e-6)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        extract_euler(Pose.from_euler(0.4, 1.5, 0.3))


# ---------------------------------------------------------------- files

def test_model_file_round_trip_is_bit_exact(tmp_path, small_model):
    path = tmp_path / "m.json"
    save_model(small_model, path)
    doc = json.loads(path.read_text())
    assert (doc["n"], doc["m_id"], doc["m_exp"], doc["n_landmarks"]) == (100, 16, 4, 10)
    back = load_model(path)
    for name in ("mean_shape", "shape_basis", "expr_basis", "shape_eigenvalues",
                 "expr_eigenvalues", "topology", "landmark_indices"):
        assert getattr(back, name).tobytes() == getattr(small_model, name).tobytes()


def test_obj_round_trip(tmp_path, small_model, rng):
    mesh = synthesize(small_model, small_model.shape_eigenvalues * rng.standard_normal(16))
    write_obj(mesh, tmp_path / "a.obj")
    back = read_obj(tmp_path / "a.obj")
    assert back.vertices.tobytes() == mesh.vertices.tobytes()
    assert np.array_equal(back.faces, mesh.faces)
    assert format_obj(back) == (tmp_path / "a.obj").read_text()


def test_obj_reader_variants(tmp_path):
    text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n"
    (tmp_path / "q.obj").write_text(text)
    mesh = read_obj(tmp_path / "q.obj")
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    (tmp_path / "bad.obj").write_text("v 0 0\n")
    with pytest.raises(ValueError):
        read_obj(tmp_path / "bad.obj")


def test_mesh_rejects_bad_faces():
    with pytest.raises(ValueError):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(ValueError):
        Mesh(np.zeros((3, 3)), [[0, 1, 1]])
