import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfl import model
from qfl.chip import chip_apply, doubled_state
from qfl.model import (
    AnsatzSpec,
    DegenerateShiftError,
    IndexRegisterOverflow,
    LabeledExample,
    ShiftStateSpec,
    build_operator,
    exact_gradient,
    loss,
    prepare_indexed_shift_state,
    prepare_multi_shift_state,
    prepare_shift_state,
    recover_partials,
)
from qfl.statevec import PureState

ZERO = PureState.basis(1, 0)


def random_example(dim, rng):
    x = PureState(rng.normal(size=dim), normalize=True)
    y = PureState(rng.normal(size=dim), normalize=True)
    return LabeledExample(x, y)


def finite_difference(spec, theta, ex, h=1e-5):
    out = np.empty(spec.num_params)
    for i in range(spec.num_params):
        out[i] = (loss(spec, model.shifted(theta, i, h), ex) - loss(spec, model.shifted(theta, i, -h), ex)) / (2 * h)
    return out


def pipeline_raw(state, meta, ex):
    """Exact signed overlap of the chip output with the doubled label, per branch."""
    out = chip_apply(state, ex.x, meta.index_qubits)
    y2 = doubled_state(ex.y).amplitudes
    ext = np.atleast_2d(out.joint_state.amplitudes.reshape(1 << meta.index_qubits, -1))
    raw = (ext @ y2).real * math.sqrt(out.success_prob)
    return raw if meta.mode == "indexed" else raw[0]


specs = st.builds(AnsatzSpec, st.integers(1, 3), st.integers(1, 3))


# -- ansatz -------------------------------------------------------------------


def test_identity_at_zero():
    np.testing.assert_allclose(build_operator(AnsatzSpec(1, 1), [0.0]), np.eye(2))


def test_single_rotation():
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    np.testing.assert_allclose(build_operator(AnsatzSpec(1, 1), [math.pi / 2]), [[c, -s], [s, c]], atol=1e-15)


def test_two_qubit_layer_layout():
    theta = [0.3, -1.1]
    cz = np.diag([1, 1, 1, -1])
    expected = cz @ np.kron(model.ry(0.3), model.ry(-1.1))
    np.testing.assert_allclose(build_operator(AnsatzSpec(2, 1), theta), expected, atol=1e-15)


def test_three_qubit_ring():
    spec = AnsatzSpec(3, 1)
    assert spec.ring_pairs() == [(0, 1), (1, 2), (2, 0)]
    diag = build_operator(spec, np.zeros(3)).diagonal()
    # parity of the pairs (0,1),(1,2),(2,0) on each basis state
    expected = [(-1) ** ((b >> 2 & b >> 1 & 1) + (b >> 1 & b & 1) + (b & b >> 2 & 1)) for b in range(8)]
    np.testing.assert_allclose(diag, expected)


def test_parameter_count_and_mismatch():
    spec = AnsatzSpec(2, 3)
    assert spec.num_params == 6
    with pytest.raises(ValueError):
        build_operator(spec, np.zeros(5))
    with pytest.raises(ValueError):
        build_operator(spec, [np.nan] * 6)


@settings(max_examples=500, deadline=None)
@given(specs, st.integers(0, 2**32 - 1))
def test_orthogonality(spec, seed):
    theta = np.random.default_rng(seed).uniform(-2 * np.pi, 2 * np.pi, spec.num_params)
    op = build_operator(spec, theta)
    assert np.max(np.abs(op.T @ op - np.eye(spec.dim))) < 1e-12
    assert op.dtype == float


def test_two_pi_shift_negates():
    spec = AnsatzSpec(2, 2)
    theta = np.random.default_rng(0).uniform(0, 2 * np.pi, 4)
    np.testing.assert_allclose(build_operator(spec, model.shifted(theta, 0, 2 * np.pi)), -build_operator(spec, theta), atol=1e-12)


# -- loss and gradient ----------------------------------------------------------


@pytest.mark.parametrize("t", [0.0, 0.4, math.pi / 2, 2.5, -1.0])
def test_loss_closed_form(t):
    assert loss(AnsatzSpec(1, 1), [t], LabeledExample(ZERO, ZERO)) == pytest.approx(math.cos(t / 2), abs=1e-15)


def test_loss_identity_cases():
    spec = AnsatzSpec(2, 2)
    x = PureState([0.5, 0.5, 0.5, 0.5])
    y = PureState([0.5, -0.5, 0.5, -0.5])
    assert loss(spec, np.zeros(4), LabeledExample(x, x)) == pytest.approx(1.0)
    assert loss(spec, np.zeros(4), LabeledExample(x, y)) == pytest.approx(0.0, abs=1e-15)


def test_loss_dimension_mismatch():
    ex = LabeledExample(PureState.basis(2, 0), PureState.basis(2, 0))
    with pytest.raises(ValueError):
        loss(AnsatzSpec(1, 1), [0.0], ex)
    with pytest.raises(ValueError):
        LabeledExample(ZERO, PureState.basis(2, 0))


@settings(max_examples=100, deadline=None)
@given(specs, st.integers(0, 2**32 - 1))
def test_loss_bounded(spec, seed):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi, spec.num_params)
    assert abs(loss(spec, theta, random_example(spec.dim, rng))) <= 1 + 1e-12


def test_gradient_at_symmetric_point():
    g = exact_gradient(AnsatzSpec(1, 1), [0.0], LabeledExample(ZERO, ZERO))
    np.testing.assert_allclose(g, [0.0], atol=1e-15)


def test_gradient_closed_form():
    g = exact_gradient(AnsatzSpec(1, 1), [math.pi / 2], LabeledExample(ZERO, ZERO))
    assert g[0] == pytest.approx(-math.sqrt(2) / 4, abs=1e-12)


def test_gradient_random_two_qubit_instance():
    rng = np.random.default_rng(2024)
    spec = AnsatzSpec(2, 2)
    theta = rng.uniform(0, 2 * np.pi, spec.num_params)
    ex = random_example(4, rng)
    np.testing.assert_allclose(exact_gradient(spec, theta, ex), finite_difference(spec, theta, ex), atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(specs, st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(spec, seed):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi, spec.num_params)
    ex = random_example(spec.dim, rng)
    assert np.max(np.abs(exact_gradient(spec, theta, ex) - finite_difference(spec, theta, ex))) < 1e-6


@pytest.mark.parametrize("s", [math.pi / 4, math.pi / 2, 2.0, math.pi])
def test_gradient_shift_size_independent(s):
    rng = np.random.default_rng(17)
    spec = AnsatzSpec(2, 2)
    theta = rng.uniform(0, 2 * np.pi, 4)
    ex = random_example(4, rng)
    np.testing.assert_allclose(exact_gradient(spec, theta, ex, s), exact_gradient(spec, theta, ex), atol=1e-12)


# -- shift states ---------------------------------------------------------------


def test_single_shift_state_descale():
    state, meta = prepare_shift_state(AnsatzSpec(1, 1), [0.0], 0, math.pi)
    diff = model.ry(math.pi) - model.ry(-math.pi)
    np.testing.assert_allclose(state.amplitudes, diff.flatten(order="F") / np.linalg.norm(diff), atol=1e-15)
    assert meta.descale == pytest.approx(2 * math.sqrt(2), abs=1e-12)
    assert meta.mode == "single" and meta.indices == (0,) and meta.qubits == 2


def test_degenerate_shift():
    with pytest.raises(DegenerateShiftError):
        prepare_shift_state(AnsatzSpec(1, 1), [0.3], 0, 2 * math.pi)


def test_single_pipeline_recovers_difference():
    rng = np.random.default_rng(5)
    spec = AnsatzSpec(2, 2)
    theta = rng.uniform(0, 2 * np.pi, 4)
    ex = random_example(4, rng)
    for i in range(spec.num_params):
        state, meta = prepare_shift_state(spec, theta, i)
        r = pipeline_raw(state, meta, ex)
        direct = loss(spec, model.shifted(theta, i, math.pi), ex) - loss(spec, model.shifted(theta, i, -math.pi), ex)
        assert r * meta.descale * 2 == pytest.approx(direct, abs=1e-9)


def test_recover_single_closed_form():
    ex = LabeledExample(ZERO, ZERO)
    state, meta = prepare_shift_state(AnsatzSpec(1, 1), [math.pi / 2], 0)
    assert recover_partials(pipeline_raw(state, meta, ex), meta, 2) == pytest.approx(-math.sqrt(2) / 4, abs=1e-9)
    assert recover_partials(0.0, meta, 2) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_identity_every_parameter(seed):
    rng = np.random.default_rng(seed)
    spec = AnsatzSpec(1 + seed % 3, 1 + seed % 2)
    theta = rng.uniform(0, 2 * np.pi, spec.num_params)
    ex = random_example(spec.dim, rng)
    exact = exact_gradient(spec, theta, ex)
    for i in range(spec.num_params):
        state, meta = prepare_shift_state(spec, theta, i)
        assert recover_partials(pipeline_raw(state, meta, ex), meta, spec.dim) == pytest.approx(exact[i], abs=1e-8)


@pytest.mark.parametrize("s", [math.pi / 4, math.pi / 2, math.pi])
def test_recovered_partials_shift_independent(s):
    rng = np.random.default_rng(99)
    spec = AnsatzSpec(2, 2)
    theta = rng.uniform(0, 2 * np.pi, 4)
    ex = random_example(4, rng)
    exact = exact_gradient(spec, theta, ex)
    for i in range(4):
        state, meta = prepare_shift_state(spec, theta, i, s)
        assert recover_partials(pipeline_raw(state, meta, ex), meta, 4) == pytest.approx(exact[i], abs=1e-8)


def test_multi_singleton_reduces_to_single():
    rng = np.random.default_rng(1)
    spec = AnsatzSpec(2, 2)
    theta = rng.uniform(0, 2 * np.pi, 4)
    a, ma = prepare_multi_shift_state(spec, theta, [2])
    b, mb = prepare_shift_state(spec, theta, 2)
    np.testing.assert_allclose(a.amplitudes, b.amplitudes)
    assert ma.descale == mb.descale


def test_multi_symmetric_point():
    spec = AnsatzSpec(1, 2)
    ex = LabeledExample(ZERO, ZERO)
    state, meta = prepare_multi_shift_state(spec, [0.0, 0.0], [0, 1])
    assert recover_partials(pipeline_raw(state, meta, ex), meta, 2) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(specs, st.integers(0, 2**32 - 1))
def test_multi_recovers_sum(spec, seed):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi, spec.num_params)
    ex = random_example(spec.dim, rng)
    try:
        state, meta = prepare_multi_shift_state(spec, theta, range(spec.num_params))
    except DegenerateShiftError:
        return
    exact = exact_gradient(spec, theta, ex).sum()
    assert abs(recover_partials(pipeline_raw(state, meta, ex), meta, spec.dim) - exact) < 1e-8


def test_indexed_branch_zero_matches_single():
    rng = np.random.default_rng(3)
    spec = AnsatzSpec(2, 2)
    theta = rng.uniform(0, 2 * np.pi, 4)
    state, meta = prepare_indexed_shift_state(spec, theta, [0, 3])
    single, _ = prepare_shift_state(spec, theta, 0)
    branch = state.amplitudes[:16]
    np.testing.assert_allclose(branch / np.linalg.norm(branch), single.amplitudes, atol=1e-12)
    assert meta.index_qubits == 1 and meta.qubits == 5


def test_indexed_recovers_each_partial():
    rng = np.random.default_rng(4)
    spec = AnsatzSpec(2, 2)
    theta = rng.uniform(0, 2 * np.pi, 4)
    ex = random_example(4, rng)
    state, meta = prepare_indexed_shift_state(spec, theta, range(4))
    assert meta.index_qubits == 2
    got = recover_partials(pipeline_raw(state, meta, ex), meta, 4)
    np.testing.assert_allclose(got, exact_gradient(spec, theta, ex), atol=1e-8)


def test_indexed_three_indices_leaves_spare_branch_empty():
    rng = np.random.default_rng(6)
    spec = AnsatzSpec(2, 2)
    theta = rng.uniform(0, 2 * np.pi, 4)
    ex = random_example(4, rng)
    state, meta = prepare_indexed_shift_state(spec, theta, [0, 1, 3])
    assert np.all(state.amplitudes[3 * 16 :] == 0)
    got = recover_partials(pipeline_raw(state, meta, ex)[:3], meta, 4)
    np.testing.assert_allclose(got, exact_gradient(spec, theta, ex)[[0, 1, 3]], atol=1e-8)


def test_indexed_symmetric_point_all_zero():
    # one qubit, x = y = |0>, every partial vanishes at theta = 0
    spec = AnsatzSpec(1, 2)
    ex = LabeledExample(ZERO, ZERO)
    state, meta = prepare_indexed_shift_state(spec, [0.0, 0.0], [0, 1])
    np.testing.assert_allclose(pipeline_raw(state, meta, ex), [0.0, 0.0], atol=1e-12)


def test_indexed_overflow_and_size():
    spec = AnsatzSpec(2, 3)
    with pytest.raises(IndexRegisterOverflow):
        prepare_indexed_shift_state(spec, np.zeros(6), range(6), max_index_qubits=2)
    with pytest.raises(ValueError):
        prepare_indexed_shift_state(spec, np.zeros(6), [1])
    assert [model.index_register_size(k) for k in (1, 2, 3, 4, 5, 8, 9)] == [1, 1, 2, 2, 3, 3, 4]


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mode="single", indices=(), shift=1.0, descale=1.0, operator_qubits=1),
        dict(mode="single", indices=(0, 1), shift=1.0, descale=1.0, operator_qubits=1),
        dict(mode="single", indices=(0,), shift=0.0, descale=1.0, operator_qubits=1),
        dict(mode="single", indices=(0,), shift=2 * math.pi, descale=1.0, operator_qubits=1),
        dict(mode="single", indices=(0,), shift=1.0, descale=0.0, operator_qubits=1),
        dict(mode="other", indices=(0,), shift=1.0, descale=1.0, operator_qubits=1),
    ],
)
def test_shift_spec_validation(kwargs):
    with pytest.raises(ValueError):
        ShiftStateSpec(**kwargs)


def test_shift_spec_index_overflow():
    with pytest.raises(IndexRegisterOverflow):
        ShiftStateSpec("indexed", (0, 1, 2), 1.0, 1.0, 1, index_qubits=1)


def test_recover_partials_shape_checks():
    single = ShiftStateSpec("single", (0,), math.pi, 2.0, 1)
    indexed = ShiftStateSpec("indexed", (0, 1), math.pi, 2.0, 1, index_qubits=1)
    with pytest.raises(ValueError):
        recover_partials(np.zeros(2), single, 2)
    with pytest.raises(ValueError):
        recover_partials(0.5, indexed, 2)
    assert recover_partials(1.0, single, 4) == pytest.approx(2.0 * 2 / 4)


def test_index_validation():
    spec = AnsatzSpec(1, 2)
    with pytest.raises(IndexError):
        prepare_shift_state(spec, [0.0, 0.0], 2)
    with pytest.raises(ValueError):
        prepare_multi_shift_state(spec, [0.0, 0.0], [0, 0])
    with pytest.raises(ValueError):
        prepare_multi_shift_state(spec, [0.0, 0.0], [])
