"""Dense state-vector simulation core.

Qubit ordering is big-endian everywhere in this package: the ket
``|q0 q1 ... q_{n-1}>`` lives at index ``q0 * 2**(n-1) + ... + q_{n-1}``,
so qubit 0 is the most significant bit. This is the only place that
convention is defined and it is not configurable.

Every operation takes and returns normalized :class:`PureState` values.
Non-unitary matrices are allowed; the squared norm left after applying
one is reported as a ``weight`` and the returned state is renormalized.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

NORM_TOL = 1e-9
# Below this squared norm an application is treated as annihilating the state.
ZERO_WEIGHT = 1e-24
# Below this probability a post-selected branch is treated as impossible.
MIN_BRANCH_PROB = 1e-15

H = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex) / np.sqrt(2.0)
X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
I2 = np.eye(2, dtype=complex)


class ZeroNormError(ValueError):
    """Raised when an operator application or post-selection leaves nothing."""


@dataclass(frozen=True)
class RegisterSpan:
    """A contiguous block of qubits ``start, ..., start + length - 1``."""

    start: int
    length: int

    def __post_init__(self):
        if self.start < 0 or self.length < 0:
            raise ValueError(f"invalid span {self}")

    @property
    def qubits(self) -> tuple[int, ...]:
        return tuple(range(self.start, self.start + self.length))

    @property
    def stop(self) -> int:
        return self.start + self.length

    def check(self, num_qubits: int) -> None:
        if self.stop > num_qubits:
            raise ValueError(
                f"span {self.start}..{self.stop - 1} out of range for {num_qubits} qubits"
            )


@dataclass(frozen=True)
class MeasurementSample:
    outcome: str
    count: int


class PureState:
    """Normalized complex amplitude vector over ``num_qubits`` qubits.

    Instances are immutable: the amplitude buffer is copied on construction
    and marked read-only.
    """

    __slots__ = ("_amps", "_n")

    def __init__(self, amplitudes, normalize: bool = False):
        amps = np.array(amplitudes, dtype=complex).reshape(-1)
        dim = amps.shape[0]
        n = dim.bit_length() - 1
        if dim == 0 or 1 << n != dim:
            raise ValueError(f"amplitude count {dim} is not a power of two")
        norm = np.linalg.norm(amps)
        if normalize:
            if norm**2 < ZERO_WEIGHT:
                raise ZeroNormError("cannot normalize a zero vector")
            amps = amps / norm
        elif abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"state is not normalized (norm={norm!r})")
        amps.setflags(write=False)
        self._amps = amps
        self._n = n

    @classmethod
    def basis(cls, num_qubits: int, index: int) -> "PureState":
        amps = np.zeros(1 << num_qubits, dtype=complex)
        amps[index] = 1.0
        return cls(amps)

    @classmethod
    def from_bits(cls, bits: str) -> "PureState":
        return cls.basis(len(bits), int(bits, 2) if bits else 0)

    @property
    def amplitudes(self) -> np.ndarray:
        return self._amps

    @property
    def num_qubits(self) -> int:
        return self._n

    @property
    def dim(self) -> int:
        return self._amps.shape[0]

    def probabilities(self) -> np.ndarray:
        return np.abs(self._amps) ** 2

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self._amps, dtype=dtype)

    def __repr__(self):
        return f"PureState(num_qubits={self._n})"


def _pattern_index(pattern, length: int) -> int:
    if isinstance(pattern, str):
        if len(pattern) != length or set(pattern) - {"0", "1"}:
            raise ValueError(f"pattern {pattern!r} does not fit {length} qubits")
        return int(pattern, 2) if pattern else 0
    idx = int(pattern)
    if not 0 <= idx < (1 << length):
        raise ValueError(f"pattern {pattern} does not fit {length} qubits")
    return idx


def _check_square(m: np.ndarray, k: int) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.shape != (1 << k, 1 << k):
        raise ValueError(f"matrix shape {m.shape} does not match a {k}-qubit span")
    return m


def _finish(amps: np.ndarray) -> tuple[PureState, float]:
    weight = float(np.vdot(amps, amps).real)
    if weight < ZERO_WEIGHT:
        raise ZeroNormError("operator annihilates the state")
    return PureState(amps / np.sqrt(weight)), weight


def tensor(a: PureState, b: PureState) -> PureState:
    """Product state ``a ⊗ b`` with ``a`` on the leading qubits."""
    return PureState(np.kron(a.amplitudes, b.amplitudes))


def apply_matrix(state: PureState, m, span: RegisterSpan) -> tuple[PureState, float]:
    """Apply ``m`` to the qubits in ``span`` (identity elsewhere).

    Returns the renormalized state and the squared norm it had right after
    the application. For a unitary ``m`` the weight is 1.
    """
    span.check(state.num_qubits)
    m = _check_square(m, span.length)
    rest = state.num_qubits - span.stop
    psi = state.amplitudes.reshape(1 << span.start, 1 << span.length, 1 << rest)
    out = np.einsum("ij,ajb->aib", m, psi).reshape(-1)
    return _finish(out)


def _axes_front(n: int, front: Sequence[int]) -> list[int]:
    front = list(front)
    return front + [q for q in range(n) if q not in front]


def controlled_apply(
    state: PureState,
    control_span: RegisterSpan,
    pattern,
    m,
    target_span: RegisterSpan,
) -> tuple[PureState, float]:
    """Apply ``m`` on ``target_span`` only where ``control_span`` reads ``pattern``.

    ``pattern`` is a bitstring (big-endian over the control qubits) or the
    equivalent integer.
    """
    n = state.num_qubits
    control_span.check(n)
    target_span.check(n)
    if set(control_span.qubits) & set(target_span.qubits):
        raise ValueError("control and target spans overlap")
    idx = _pattern_index(pattern, control_span.length)
    m = _check_square(m, target_span.length)

    perm = _axes_front(n, control_span.qubits + target_span.qubits)
    inv = np.argsort(perm)
    t = np.transpose(state.amplitudes.reshape([2] * n), perm)
    t = np.array(t).reshape(1 << control_span.length, 1 << target_span.length, -1)
    t[idx] = m @ t[idx]
    out = np.transpose(t.reshape([2] * n), inv).reshape(-1)
    return _finish(out)


def multiplexed_apply(
    state: PureState,
    control_span: RegisterSpan,
    matrices,
    target_span: RegisterSpan,
) -> tuple[PureState, float]:
    """Apply ``matrices[k]`` on ``target_span`` wherever ``control_span`` reads ``k``.

    Equivalent to one :func:`controlled_apply` per control value, i.e. the
    block-diagonal operator ``⊕_k matrices[k]``, in a single pass.
    """
    n = state.num_qubits
    control_span.check(n)
    target_span.check(n)
    if set(control_span.qubits) & set(target_span.qubits):
        raise ValueError("control and target spans overlap")
    mats = np.asarray(matrices, dtype=complex)
    t_dim = 1 << target_span.length
    if mats.shape != (1 << control_span.length, t_dim, t_dim):
        raise ValueError(f"expected {1 << control_span.length} matrices of size {t_dim}, got {mats.shape}")

    perm = _axes_front(n, control_span.qubits + target_span.qubits)
    inv = np.argsort(perm)
    t = np.transpose(state.amplitudes.reshape([2] * n), perm)
    t = t.reshape(mats.shape[0], t_dim, -1)
    t = np.einsum("kij,kjr->kir", mats, t)
    out = np.transpose(t.reshape([2] * n), inv).reshape(-1)
    return _finish(out)


def hadamard_matrix(k: int) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for _ in range(k):
        out = np.kron(out, H)
    return out


def hadamard_register(state: PureState, span: RegisterSpan) -> PureState:
    """Apply ``H`` to every qubit of ``span``."""
    out, _ = apply_matrix(state, hadamard_matrix(span.length), span)
    return out


def post_select(state: PureState, span: RegisterSpan, value) -> tuple[PureState, float]:
    """Condition ``span`` on ``value`` and drop it from the state.

    Returns the renormalized state over the remaining qubits together with
    the probability of the selected outcome.
    """
    span.check(state.num_qubits)
    idx = _pattern_index(value, span.length)
    rest = state.num_qubits - span.stop
    psi = state.amplitudes.reshape(1 << span.start, 1 << span.length, 1 << rest)
    branch = psi[:, idx, :].reshape(-1)
    prob = float(np.vdot(branch, branch).real)
    if prob < MIN_BRANCH_PROB:
        raise ZeroNormError(f"post-selection on {value!r} has probability {prob:.3g}")
    return PureState(branch / np.sqrt(prob)), prob


def inner_product(a: PureState, b: PureState) -> complex:
    """``<a|b>``."""
    if a.num_qubits != b.num_qubits:
        raise ValueError(f"dimension mismatch: {a.num_qubits} vs {b.num_qubits} qubits")
    return complex(np.vdot(a.amplitudes, b.amplitudes))


def marginal_probabilities(state: PureState, span: RegisterSpan) -> np.ndarray:
    span.check(state.num_qubits)
    rest = state.num_qubits - span.stop
    probs = state.probabilities().reshape(1 << span.start, 1 << span.length, 1 << rest)
    return probs.sum(axis=(0, 2))


def sample(state: PureState, span: RegisterSpan, shots: int, seed=None) -> list[MeasurementSample]:
    """Draw ``shots`` measurement outcomes of ``span``.

    Outcomes with zero counts are omitted; the result is sorted by outcome.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    probs = marginal_probabilities(state, span)
    probs = np.clip(probs, 0.0, None)
    probs /= probs.sum()
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(shots, probs)
    return [
        MeasurementSample(format(i, f"0{span.length}b") if span.length else "", int(c))
        for i, c in enumerate(counts)
        if c
    ]


def hadamard_test_probability(a: PureState, b: PureState) -> float:
    """Probability of reading 0 on the ancilla of a Hadamard test of ``a`` and ``b``.

    The ancilla-controlled preparation is assumed; starting from
    ``(|0>|a> + |1>|b>)/sqrt(2)`` the ancilla is rotated by ``H`` and
    measured. The result is ``(1 + Re<a|b>) / 2``.
    """
    if a.num_qubits != b.num_qubits:
        raise ValueError(f"dimension mismatch: {a.num_qubits} vs {b.num_qubits} qubits")
    joint = PureState(np.concatenate([a.amplitudes, b.amplitudes]) / np.sqrt(2.0))
    joint = hadamard_register(joint, RegisterSpan(0, 1))
    return float(marginal_probabilities(joint, RegisterSpan(0, 1))[0])


def overlap_real_estimate(a: PureState, b: PureState, shots: int | None = None, seed=None) -> float:
    """Estimate ``Re<a|b>``.

    With ``shots=None`` the exact value is returned. Otherwise the ancilla
    of a Hadamard test is sampled ``shots`` times and ``2 * k / shots - 1``
    is returned, which is unbiased with standard error at most
    ``1 / sqrt(shots)``.
    """
    if shots is None:
        return inner_product(a, b).real
    if shots < 1:
        raise ValueError("shots must be >= 1")
    p0 = min(max(hadamard_test_probability(a, b), 0.0), 1.0)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = rng.binomial(shots, p0)
    return 2.0 * k / shots - 1.0


def bernoulli_overlap_stderr(value: float, shots: int) -> float:
    """Standard error of the shot-mode overlap estimator at true value ``value``."""
    return float(np.sqrt(max(1.0 - value * value, 0.0) / shots))
