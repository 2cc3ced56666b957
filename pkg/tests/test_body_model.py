import numpy as np
import pytest
from scipy.spatial import Delaunay

from conftest import central_diff, random_rotations
from partfit.body_model import (MIRROR_JOINTS, N_BETAS, N_JOINTS, N_POSE_FEATURES, REFLECTION,
                                SMPL_PARENTS, BodyModel, ModelValidationError, as_rotations,
                                generate_desk_model, mirror_points, mirror_pose, mirror_rotations,
                                pose_feature, posed_joints, posed_joints_vjp, regress_joints,
                                shaped_tpose, skin, skin_rotations, skin_rotations_vjp)
from partfit.kinematics import rodrigues, rodrigues_vjp


def test_shaped_tpose_basics(small_model, rng):
    m = small_model
    assert np.array_equal(shaped_tpose(m, np.zeros(10), np.zeros(207)), m.template)
    e1 = np.eye(10)[0]
    assert np.allclose(shaped_tpose(m, e1, np.zeros(207)), m.template + m.shape_basis[:, :, 0])
    beta, feat = rng.normal(size=10), rng.normal(size=207)
    V = m.n_vertices
    dense = (m.template.ravel() + m.shape_basis.reshape(3 * V, 10) @ beta
             + m.pose_basis.reshape(3 * V, 207) @ feat).reshape(V, 3)
    assert np.abs(shaped_tpose(m, beta, feat) - dense).max() < 1e-12


def test_pose_feature():
    R = np.tile(np.eye(3), (24, 1, 1))
    assert np.array_equal(pose_feature(R), np.zeros(207))
    R[0] = rodrigues([0.3, 1.0, -0.2])
    assert np.array_equal(pose_feature(R), np.zeros(207))
    R = np.tile(np.eye(3), (24, 1, 1))
    R[5] = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])   # 90 deg about z
    f = pose_feature(R)
    block = f[4 * 9:5 * 9]
    assert np.count_nonzero(f) == 4 and np.count_nonzero(block) == 4
    assert np.array_equal(block.reshape(3, 3), [[-1, -1, 0], [1, -1, 0], [0, 0, 0]])


def test_regress_joints(small_model, rng):
    m = small_model
    assert np.allclose(regress_joints(m, np.zeros(10)), m.joint_regressor @ m.template)
    for _ in range(5):
        beta = rng.normal(size=10)
        J = regress_joints(m, beta)
        verts = shaped_tpose(m, beta, np.zeros(207))
        hull = Delaunay(verts)
        assert np.all(hull.find_simplex(J) >= 0)


def test_leg_length_direction_lengthens_leg(model):
    def bones(beta):
        J = regress_joints(model, beta)
        return np.array([np.linalg.norm(J[c] - J[p]) for p, c in ((1, 4), (4, 7), (2, 5), (5, 8))])
    lengths = [bones(np.eye(10)[1] * s) for s in (0.0, 1.0, 2.0)]
    assert np.all(np.diff(lengths, axis=0) > 0)


def test_skin_rest_pose(model):
    verts, joints = skin(model, np.zeros(72), np.zeros(10))
    assert np.array_equal(verts, model.template)
    assert np.allclose(joints, model.joint_regressor @ model.template, atol=1e-12)


def test_root_rotation_is_rigid(model, rng):
    Q = rodrigues([0.4, -1.1, 0.7])
    v0, j0 = skin(model, np.zeros(72), np.zeros(10))
    pose = np.zeros(72)
    pose[:3] = [0.4, -1.1, 0.7]
    v1, j1 = skin(model, pose, np.zeros(10))
    root = j0[0]
    assert np.abs(v1 - ((v0 - root) @ Q.T + root)).max() < 1e-9
    assert np.abs(j1 - ((j0 - root) @ Q.T + root)).max() < 1e-9


def test_global_rotation_equivariance_any_pose(model, rng):
    for _ in range(5):
        R = random_rotations(rng, 24) @ np.eye(3)
        beta = rng.normal(size=10)
        R0 = R.copy()
        R0[0] = np.eye(3)
        v0, j0 = skin_rotations(model, R0, beta)
        v1, j1 = skin_rotations(model, R, beta)
        root = j0[0]
        assert np.abs(v1 - ((v0 - root) @ R[0].T + root)).max() < 1e-9
        assert np.abs(j1 - ((j0 - root) @ R[0].T + root)).max() < 1e-9


def _two_part_model():
    """24-part container where only the left elbow (18) and its parent carry mass.

    Every other part owns one vertex near the origin with unit weight. Shape
    and pose bases are zero, so skinning reduces to rigid part motion.
    """
    V = 24 + 6
    template = np.zeros((V, 3))
    template[:24] = np.arange(24)[:, None] * [1.0, 0, 0]
    labels = np.r_[np.arange(24), [16, 16, 16, 18, 18, 18]]
    template[24:27] = [[100, 0, 0], [200, 10, 0], [300, -10, 0]]   # upper arm
    template[27:30] = [[400, 0, 5], [500, 10, 0], [600, -10, -5]]  # forearm
    W = np.eye(24)[labels]
    reg = np.zeros((24, V))
    for k in range(24):
        own = np.flatnonzero(labels == k)
        reg[k, own] = 1.0 / len(own)
    m = BodyModel(template=template, shape_basis=np.zeros((V, 3, 10)),
                  pose_basis=np.zeros((V, 3, 207)), skinning_weights=W,
                  joint_regressor=reg, parents=SMPL_PARENTS, part_labels=labels)
    return m


def test_minimal_two_part_elbow():
    m = _two_part_model()
    pose = np.zeros((24, 3))
    pose[18] = [0, 0, np.pi / 2]
    verts, joints = skin(m, pose, np.zeros(10))
    elbow = m.template[labels_of(m, 18)].mean(axis=0)  # rest joint of part 18
    Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    for v in labels_of(m, 18):
        expect = Rz @ (m.template[v] - elbow) + elbow
        assert np.allclose(verts[v], expect, atol=1e-12)
    for v in labels_of(m, 16):
        assert np.allclose(verts[v], m.template[v], atol=1e-12)
    assert np.allclose(joints[18], elbow)


def labels_of(m, k):
    return np.flatnonzero(m.part_labels == k)


def test_generate_determinism_and_validity():
    a, b = generate_desk_model(3, 300), generate_desk_model(3, 300)
    for name in ('template', 'shape_basis', 'pose_basis', 'skinning_weights', 'joint_regressor'):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.hash == b.hash
    assert a.hash != generate_desk_model(4, 300).hash
    for seed in range(3):
        generate_desk_model(seed).validate()
    with pytest.raises(ValueError):
        generate_desk_model(0, 199)


def test_model_height(model):
    h = np.ptp(model.template[:, 1])
    assert 1600 <= h <= 1800


def test_generated_structure(model):
    m = model
    assert tuple(m.parents) == SMPL_PARENTS
    # regressor rows supported on the owning part
    for k in range(24):
        assert np.all(m.part_labels[m.joint_regressor[k] != 0] == k)
    # at most two parts influence a vertex before mirror symmetrisation
    assert np.all(np.sum(m.skinning_weights > 1e-12, axis=1) <= 4)


def test_pose_basis_bound(model, rng):
    for _ in range(50):
        aa = rng.normal(size=(24, 3))
        aa *= rng.uniform(0, np.pi / 2, size=(24, 1)) / np.linalg.norm(aa, axis=1, keepdims=True)
        off = np.einsum('vcf,f->vc', model.pose_basis, pose_feature(rodrigues(aa)))
        assert np.abs(off).max() < 5.0


def test_template_translation(small_model, rng):
    m = small_model
    shift = np.array([10.0, -20.0, 30.0])
    moved = BodyModel(template=m.template + shift, shape_basis=m.shape_basis,
                      pose_basis=m.pose_basis, skinning_weights=m.skinning_weights,
                      joint_regressor=m.joint_regressor, parents=m.parents,
                      part_labels=m.part_labels)
    pose, beta = rng.normal(size=72) * 0.3, rng.normal(size=10)
    v0, j0 = skin(m, pose, beta)
    v1, j1 = skin(moved, pose, beta)
    # the world moves rigidly: root joint follows the shift, so does everything
    assert np.abs(v1 - v0 - shift).max() < 1e-9
    assert np.abs(j1 - j0 - shift).max() < 1e-9


def test_skin_gradient_all_82_parameters(small_model):
    m = small_model
    rng = np.random.default_rng(99)
    for _ in range(20):
        pose = rng.normal(size=(24, 3)) * 0.5
        beta = rng.normal(size=10)
        Gv = rng.normal(size=(m.n_vertices, 3))
        Gj = rng.normal(size=(24, 3))

        def f(x):
            v, j = skin(m, x[:72], x[72:])
            return np.sum(Gv * v) + np.sum(Gj * j)

        x = np.r_[pose.ravel(), beta]
        num = central_diff(f, x, 1e-5).ravel()
        gR, gb = skin_rotations_vjp(m, rodrigues(pose), beta, Gv, Gj)
        an = np.r_[rodrigues_vjp(pose, gR).ravel(), gb]
        assert np.abs(an - num).max() / np.abs(num).max() < 1e-5


def test_posed_joints_matches_skin_and_vjp(small_model, rng):
    R, beta = random_rotations(rng, 24), rng.normal(size=10)
    assert np.allclose(posed_joints(small_model, R, beta), skin_rotations(small_model, R, beta)[1])
    G = rng.normal(size=(24, 3))
    a = posed_joints_vjp(small_model, R, beta, G)
    b = skin_rotations_vjp(small_model, R, beta, None, G)
    assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])


def test_batched_forward_matches_loop(small_model, rng):
    R = random_rotations(rng, 3 * 24).reshape(3, 24, 3, 3)
    B = rng.normal(size=(3, 10))
    v, j = skin_rotations(small_model, R, B)
    for i in range(3):
        vi, ji = skin_rotations(small_model, R[i], B[i])
        assert np.allclose(v[i], vi) and np.allclose(j[i], ji)


def test_mirror_consistency(model, rng):
    pose = rng.normal(size=72) * 0.4
    beta = np.zeros(10)
    v, j = skin(model, pose, beta)
    vm, jm = skin(model, mirror_pose(pose), beta)
    assert np.abs(jm - mirror_points(j)).max() < 1e-6
    mv = model.mirror_vertices
    assert np.abs(vm[mv] - v @ REFLECTION).max() < 1e-6
    R = as_rotations(pose)
    assert np.allclose(mirror_rotations(R), as_rotations(mirror_pose(pose)), atol=1e-12)
    assert np.allclose(mirror_pose(mirror_pose(pose)), pose)
    assert np.array_equal(MIRROR_JOINTS[MIRROR_JOINTS], np.arange(24))


def test_serialization_round_trip(small_model, tmp_path):
    p = tmp_path / 'model.json'
    small_model.save(p)
    m2 = BodyModel.load(p)
    assert m2.hash == small_model.hash
    assert np.array_equal(m2.pose_basis, small_model.pose_basis)


@pytest.mark.parametrize('mutate', [
    lambda d: d.update(units='m'),
    lambda d: d.update(version=99),
    lambda d: d.pop('template'),
    lambda d: d['skinning_weights'][0].__setitem__(0, d['skinning_weights'][0][0] + 0.5),
    lambda d: d['joint_regressor'][0].__setitem__(0, 7.0),
    lambda d: d['parents'].__setitem__(1, 5),
    lambda d: d.update(part_labels=[0] * len(d['part_labels'])),
    lambda d: d.update(template=d['template'][:-1]),
])
def test_loader_rejects_invalid(small_model, mutate):
    d = small_model.to_dict()
    mutate(d)
    with pytest.raises(ModelValidationError):
        BodyModel.from_dict(d)


def test_constants():
    assert N_POSE_FEATURES == 207 and N_BETAS == 10 and N_JOINTS == 24
