"""Input-driven quantum chip.

The chip has a fixed design. Which operator it applies to the data register
is decided entirely by the state on its control register: an ``N x N`` real
operator ``O`` is shipped as ``|o> = vec(O) / ||O||_F`` (column-major, so the
amplitude at ``c * N + r`` is ``O[r, c]``), the control register is split into
a column half ``|c>`` and a row half ``|r>``, and the matrix unit ``|r><c|`` is
applied to the data conditioned on ``|c>|r>``. Rotating the column half with
Hadamards and post-selecting it on ``|0...0>`` leaves

    (1 / (sqrt(N) ||O||_F)) * sum_r (O psi)_r |r>|r>

on the row and data registers. The row register stays entangled with the
data as a copy of the basis index; :func:`uncompute_row_copy` shows the CNOT
ladder that removes it.

Also here: the ``{I, X, Z, XZ}`` linear-combination-of-unitaries route for
2x2 matrix units and the permuted block-diagonal decomposition
``O = sum_i O_i P_i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .statevec import (
    I2,
    MIN_BRANCH_PROB,
    X,
    Z,
    PureState,
    RegisterSpan,
    ZeroNormError,
    apply_matrix,
    controlled_apply,
    hadamard_register,
    multiplexed_apply,
    post_select,
    tensor,
)

XZ = X @ Z


def _log2_exact(dim: int) -> int:
    n = int(dim).bit_length() - 1
    if dim < 1 or 1 << n != dim:
        raise ValueError(f"dimension {dim} is not a power of two")
    return n


@dataclass(frozen=True, eq=False)
class RealOperator:
    """A nonzero real ``N x N`` matrix with ``N`` a power of two."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.array(self.entries)
        if np.iscomplexobj(m):
            if np.any(m.imag != 0):
                raise ValueError("operator has complex entries")
            m = m.real
        m = m.astype(float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"operator must be square, got shape {m.shape}")
        _log2_exact(m.shape[0])
        if not np.all(np.isfinite(m)):
            raise ValueError("operator has non-finite entries")
        if np.linalg.norm(m) == 0.0:
            raise ValueError("operator is the zero matrix")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def num_qubits(self) -> int:
        return _log2_exact(self.dim)

    @property
    def frob_norm(self) -> float:
        return float(np.linalg.norm(self.entries))


@dataclass(frozen=True, eq=False)
class VecEncodedOperator:
    """``vec(O)`` as a state on ``2n`` qubits: column register first, row register second."""

    state: PureState
    frob_norm: float

    def __post_init__(self):
        if self.state.num_qubits % 2:
            raise ValueError("vec-encoded state needs an even number of qubits")
        if not self.frob_norm > 0:
            raise ValueError("frob_norm must be positive")

    @property
    def dim(self) -> int:
        return 1 << (self.state.num_qubits // 2)


def vec_encode(o: RealOperator) -> VecEncodedOperator:
    norm = o.frob_norm
    amps = o.entries.flatten(order="F") / norm
    return VecEncodedOperator(PureState(amps), norm)


def vec_decode(e: VecEncodedOperator) -> RealOperator:
    amps = e.state.amplitudes
    if np.max(np.abs(amps.imag)) > 1e-9:
        raise ValueError("vec-encoded state has non-real amplitudes")
    n = e.dim
    return RealOperator(e.frob_norm * amps.real.reshape(n, n, order="F"))


def matrix_unit(r: int, c: int, dim: int) -> np.ndarray:
    e = np.zeros((dim, dim), dtype=complex)
    e[r, c] = 1.0
    return e


@lru_cache(maxsize=None)
def matrix_unit_bank(dim: int) -> np.ndarray:
    """The chip's gate set: entry ``c * dim + r`` is ``|r><c|``."""
    bank = np.zeros((dim * dim, dim, dim), dtype=complex)
    for c in range(dim):
        for r in range(dim):
            bank[c * dim + r, r, c] = 1.0
    bank.setflags(write=False)
    return bank


@dataclass(frozen=True, eq=False)
class ChipOutput:
    """Result of one chip run.

    ``joint_state`` lives on (passenger, row, data) after the column register
    was post-selected. ``extracted`` holds the diagonal ``|r>|r>`` amplitudes
    of the unnormalized selected branch, i.e. ``scale * O psi`` (one row per
    passenger basis state when a passenger register is present).
    ``full_state`` is the pre-measurement state on (passenger, column, row,
    data), renormalized after the non-unitary gate cascade whose squared norm
    is ``cascade_weight``.
    """

    joint_state: PureState
    success_prob: float
    extracted: np.ndarray
    scale: float
    full_state: PureState
    cascade_weight: float
    passenger_qubits: int = 0

    def dilated_state(self) -> PureState:
        """``full_state`` with the cascade's weight restored behind a flag qubit.

        Flag ``|0>`` carries ``sqrt(cascade_weight) * full_state``; flag ``|1>``
        stands for the part a unitary dilation of the cascade discards. Its
        content is a placeholder and never overlaps a flag-``|0>`` target.
        """
        w = min(self.cascade_weight, 1.0)
        rest = np.zeros(self.full_state.dim, dtype=complex)
        rest[0] = np.sqrt(1.0 - w)
        return PureState(np.concatenate([np.sqrt(w) * self.full_state.amplitudes, rest]))


def chip_apply(o, psi: PureState, passenger_qubits: int = 0) -> ChipOutput:
    """Run the chip with control state ``o`` on data state ``psi``.

    Args:
        o: a :class:`VecEncodedOperator`, or a bare :class:`PureState` whose
            trailing ``2n`` qubits are a vec-encoded operator. A bare state is
            read as an operator of unit Frobenius norm.
        psi: data state on ``n`` qubits.
        passenger_qubits: leading qubits of ``o`` that ride along untouched
            (e.g. the parameter index register of an indexed shift state).

    Raises:
        ZeroNormError: the operator annihilates ``psi`` so the column register
            can never read ``|0...0>``.
    """
    if isinstance(o, VecEncodedOperator):
        ostate, frob = o.state, o.frob_norm
    else:
        ostate, frob = o, 1.0
    n = psi.num_qubits
    p = passenger_qubits
    if ostate.num_qubits != p + 2 * n:
        raise ValueError(
            f"control state has {ostate.num_qubits} qubits, expected {p} + 2*{n}"
        )
    dim = 1 << n
    ctrl = RegisterSpan(p, 2 * n)
    col = RegisterSpan(p, n)
    data = RegisterSpan(p + 2 * n, n)

    try:
        state, weight = multiplexed_apply(tensor(ostate, psi), ctrl, matrix_unit_bank(dim), data)
    except ZeroNormError as exc:
        raise ZeroNormError("operator annihilates the data state") from exc
    if weight < MIN_BRANCH_PROB:
        raise ZeroNormError("operator annihilates the data state")
    full = hadamard_register(state, col)
    joint, p_sel = post_select(full, col, 0)
    success = weight * p_sel
    if success < MIN_BRANCH_PROB:
        raise ZeroNormError(f"post-selection probability {success:.3g} is too small")

    branch = joint.amplitudes.reshape(1 << p, dim, dim) * np.sqrt(success)
    extracted = np.einsum("prr->pr", branch)
    if p == 0:
        extracted = extracted[0]
    return ChipOutput(
        joint_state=joint,
        success_prob=success,
        extracted=extracted,
        scale=1.0 / (np.sqrt(dim) * frob),
        full_state=full,
        cascade_weight=weight,
        passenger_qubits=p,
    )


def success_probability(o: RealOperator, psi: PureState) -> float:
    """Closed form of the chip's post-selection probability, ``||O psi||^2 / (N ||O||_F^2)``."""
    if psi.dim != o.dim:
        raise ValueError(f"dimension mismatch: operator {o.dim}, state {psi.dim}")
    out = o.entries @ psi.amplitudes
    return float(np.vdot(out, out).real / (o.dim * o.frob_norm**2))


def doubled_state(y: PureState) -> PureState:
    """``sum_r y_r |r>|r>``, the target that matches the chip's row/data copy."""
    dim = y.dim
    amps = np.zeros(dim * dim, dtype=complex)
    amps[np.arange(dim) * (dim + 1)] = y.amplitudes
    return PureState(amps)


def uncompute_row_copy(joint: PureState, n: int) -> PureState:
    """Clear the row register of a chip output with a CNOT ladder.

    ``joint`` must be supported on ``|r>|r>`` (row then data, ``n`` qubits
    each). Each data qubit flips its row partner back to ``|0>``; the row
    register is then dropped with probability 1.
    """
    if joint.num_qubits != 2 * n:
        raise ValueError(f"expected {2 * n} qubits, got {joint.num_qubits}")
    for k in range(n):
        joint, _ = controlled_apply(joint, RegisterSpan(n + k, 1), 1, X, RegisterSpan(k, 1))
    data, _ = post_select(joint, RegisterSpan(0, n), 0)
    return data


# -- linear combination of unitaries ------------------------------------------

LCU_BASIS = (I2.real, X.real, Z.real, XZ.real)


@dataclass(frozen=True)
class LCUCoefficients:
    c_I: float
    c_X: float
    c_Z: float
    c_XZ: float

    def as_array(self) -> np.ndarray:
        return np.array([self.c_I, self.c_X, self.c_Z, self.c_XZ])

    def matrix(self) -> np.ndarray:
        return sum(c * b for c, b in zip(self.as_array(), LCU_BASIS))


def lcu_2x2(m) -> LCUCoefficients:
    """Coefficients of a real 2x2 matrix over ``{I, X, Z, XZ}``."""
    m = np.asarray(m, dtype=float)
    if m.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got {m.shape}")
    basis = np.column_stack([b.reshape(-1) for b in LCU_BASIS])
    return LCUCoefficients(*np.linalg.solve(basis, m.reshape(-1)))


def _prepare_unitary(amps: np.ndarray) -> np.ndarray:
    # Householder reflection taking |0> to `amps` (real, unit norm).
    e0 = np.zeros_like(amps)
    e0[0] = 1.0
    u = amps - e0
    if np.linalg.norm(u) < 1e-15:
        return np.eye(len(amps))
    return np.eye(len(amps)) - 2.0 * np.outer(u, u) / np.dot(u, u)


def lcu_apply(state: PureState, m, span: RegisterSpan) -> tuple[PureState, float]:
    """Apply a real 2x2 matrix to one qubit using only unitaries and post-selection.

    Two ancilla qubits are prepended, PREPARE loads ``sqrt(|c_k| / alpha)``,
    SELECT applies ``sign(c_k) U_k`` controlled on ancilla value ``k``,
    PREPARE is undone and the ancillas are post-selected on ``|00>``. The
    returned weight is ``alpha^2`` times the selection probability, so it
    matches :func:`apply_matrix` on ``m`` directly.
    """
    if span.length != 1:
        raise ValueError("lcu_apply acts on a single qubit")
    span.check(state.num_qubits)
    coeffs = lcu_2x2(np.real(m)).as_array()
    alpha = float(np.sum(np.abs(coeffs)))
    if alpha == 0.0:
        raise ZeroNormError("zero matrix has no LCU block encoding")
    prep = _prepare_unitary(np.sqrt(np.abs(coeffs) / alpha))
    anc = RegisterSpan(0, 2)
    target = RegisterSpan(span.start + 2, 1)

    joint = tensor(PureState.basis(2, 0), state)
    joint, _ = apply_matrix(joint, prep, anc)
    for k, (c, u) in enumerate(zip(coeffs, LCU_BASIS)):
        joint, _ = controlled_apply(joint, anc, k, np.sign(c) * u if c else u, target)
    joint, _ = apply_matrix(joint, prep.T, anc)
    out, prob = post_select(joint, anc, 0)
    return out, prob * alpha**2


# -- permuted block-diagonal decomposition ------------------------------------


def permutation_matrix(bits: tuple[int, ...]) -> np.ndarray:
    """``(X^b_0 ⊗ ... ⊗ X^b_{k-1}) ⊗ I``."""
    out = np.ones((1, 1))
    for b in bits:
        out = np.kron(out, X.real if b else I2.real)
    return np.kron(out, I2.real)


def _bits(i: int, width: int) -> tuple[int, ...]:
    return tuple((i >> (width - 1 - j)) & 1 for j in range(width))


@dataclass(frozen=True, eq=False)
class PermutedBlockTerm:
    blocks: np.ndarray  # (N/2, 2, 2); block j sits on the diagonal at block-row j
    permutation_bits: tuple[int, ...]

    def block_diagonal(self) -> np.ndarray:
        nb = self.blocks.shape[0]
        out = np.zeros((2 * nb, 2 * nb))
        for j, b in enumerate(self.blocks):
            out[2 * j : 2 * j + 2, 2 * j : 2 * j + 2] = b
        return out

    def permutation(self) -> np.ndarray:
        return permutation_matrix(self.permutation_bits)

    def matrix(self) -> np.ndarray:
        return self.block_diagonal() @ self.permutation()


@dataclass(frozen=True, eq=False)
class PermutedBlockDecomposition:
    dim: int
    terms: tuple[PermutedBlockTerm, ...] = field(default_factory=tuple)


def permuted_block_decompose(o: RealOperator) -> PermutedBlockDecomposition:
    """Split ``O`` into ``N/2`` terms ``O_i P_i``.

    Term ``i`` carries, at block-row ``j``, the 2x2 block of ``O`` at block
    position ``(j, j XOR i)``; ``P_i`` is the XOR-shift by ``i`` on the block
    index, i.e. ``X`` on each block-index qubit where ``i`` has a 1 bit.
    """
    dim = o.dim
    if dim < 2:
        raise ValueError("decomposition needs N >= 2")
    nb = dim // 2
    width = _log2_exact(nb)
    grid = o.entries.reshape(nb, 2, nb, 2).transpose(0, 2, 1, 3)
    rows = np.arange(nb)
    terms = tuple(
        PermutedBlockTerm(blocks=grid[rows, rows ^ i].copy(), permutation_bits=_bits(i, width))
        for i in range(nb)
    )
    return PermutedBlockDecomposition(dim=dim, terms=terms)


def reconstruct(d: PermutedBlockDecomposition) -> RealOperator:
    """``sum_i O_i P_i``."""
    nb = d.dim // 2
    width = _log2_exact(nb) if nb else 0
    out = np.zeros((d.dim, d.dim))
    for t in d.terms:
        if t.blocks.shape != (nb, 2, 2) or len(t.permutation_bits) != width:
            raise ValueError("term dimensions do not match the decomposition")
        out += t.matrix()
    return RealOperator(out)
