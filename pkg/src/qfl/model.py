"""Server-side parameterized operator, inner-product loss and shift states.

The ansatz is a real orthogonal circuit: every layer applies ``R_y`` to each
qubit and then a ring of ``CZ`` gates. Parameter ``l * n + q`` drives the
rotation on qubit ``q`` of layer ``l``.

The loss ``<y|O(theta)|x>`` is linear in ``O``, and each parameter enters a
single ``R_y``, so along any one coordinate the loss is
``A cos(theta_i / 2) + B sin(theta_i / 2)``. The exact amplitude shift rule
follows:

    dL/dtheta_i = [L(theta + s e_i) - L(theta - s e_i)] / (4 sin(s / 2))

A shift state is ``vec(O(theta + s e_i)) - vec(O(theta - s e_i))``
normalized, and ``descale`` records the norm that normalization removed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .statevec import PureState

SHIFT_MODES = ("single", "multi", "indexed")
SIGN_CONVENTION = "plus-minus"


class DegenerateShiftError(ValueError):
    """The plus and minus shifted operators coincide."""


class IndexRegisterOverflow(ValueError):
    pass


def ry(angle: float) -> np.ndarray:
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class AnsatzSpec:
    num_qubits: int
    num_layers: int

    def __post_init__(self):
        if self.num_qubits < 1 or self.num_layers < 1:
            raise ValueError("ansatz needs at least one qubit and one layer")

    @property
    def num_params(self) -> int:
        return self.num_qubits * self.num_layers

    @property
    def dim(self) -> int:
        return 1 << self.num_qubits

    def ring_pairs(self) -> list[tuple[int, int]]:
        n = self.num_qubits
        if n == 1:
            return []
        if n == 2:
            return [(0, 1)]
        return [(q, (q + 1) % n) for q in range(n)]

    def entangler_diagonal(self) -> np.ndarray:
        n = self.num_qubits
        idx = np.arange(self.dim)
        bits = [(idx >> (n - 1 - q)) & 1 for q in range(n)]
        parity = np.zeros(self.dim, dtype=int)
        for a, b in self.ring_pairs():
            parity ^= bits[a] & bits[b]
        return 1.0 - 2.0 * parity


def _check_theta(spec: AnsatzSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.num_params,):
        raise ValueError(f"expected {spec.num_params} parameters, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameters must be finite")
    return theta


def build_operator(spec: AnsatzSpec, theta) -> np.ndarray:
    """``O(theta)`` as a dense real orthogonal matrix."""
    theta = _check_theta(spec, theta)
    n = spec.num_qubits
    ent = spec.entangler_diagonal()
    op = np.eye(spec.dim)
    for layer in range(spec.num_layers):
        rot = np.ones((1, 1))
        for q in range(n):
            rot = np.kron(rot, ry(theta[layer * n + q]))
        op = ent[:, None] * (rot @ op)
    return op


@dataclass(frozen=True)
class LabeledExample:
    x: PureState
    y: PureState

    def __post_init__(self):
        if self.x.num_qubits != self.y.num_qubits:
            raise ValueError("x and y must have the same dimension")


def _loss_with_operator(op: np.ndarray, ex: LabeledExample) -> float:
    if op.shape[0] != ex.x.dim:
        raise ValueError(f"dimension mismatch: operator {op.shape[0]}, data {ex.x.dim}")
    return float(np.vdot(ex.y.amplitudes, op @ ex.x.amplitudes).real)


def loss(spec: AnsatzSpec, theta, ex: LabeledExample) -> float:
    """``<y|O(theta)|x>``."""
    return _loss_with_operator(build_operator(spec, theta), ex)


def shifted(theta, i: int, s: float) -> np.ndarray:
    out = np.array(theta, dtype=float)
    out[i] += s
    return out


def exact_gradient(spec: AnsatzSpec, theta, ex: LabeledExample, shift: float = math.pi) -> np.ndarray:
    theta = _check_theta(spec, theta)
    denom = 4.0 * math.sin(shift / 2)
    grad = np.empty(spec.num_params)
    for i in range(spec.num_params):
        plus = loss(spec, shifted(theta, i, shift), ex)
        minus = loss(spec, shifted(theta, i, -shift), ex)
        grad[i] = (plus - minus) / denom
    return grad


@dataclass(frozen=True)
class ShiftStateSpec:
    """What accompanies a shift state: which parameters, shift size and descale.

    ``index_qubits`` is nonzero only in indexed mode, where branch ``k`` of
    the leading index register carries ``indices[k]``.
    """

    mode: str
    indices: tuple[int, ...]
    shift: float
    descale: float
    operator_qubits: int
    index_qubits: int = 0
    sign_convention: str = SIGN_CONVENTION

    def __post_init__(self):
        if self.mode not in SHIFT_MODES:
            raise ValueError(f"unknown shift mode {self.mode!r}")
        if not self.indices:
            raise ValueError("indices must be nonempty")
        if not 0.0 < self.shift < 2 * math.pi:
            raise ValueError(f"shift {self.shift} outside (0, 2*pi)")
        if not self.descale > 0:
            raise ValueError("descale must be positive")
        if self.mode == "single" and len(self.indices) != 1:
            raise ValueError("single mode carries exactly one index")
        if self.mode == "indexed" and (1 << self.index_qubits) < len(self.indices):
            raise IndexRegisterOverflow("index register too small")

    @property
    def qubits(self) -> int:
        """Qubits in one transmitted copy of the state."""
        return 2 * self.operator_qubits + self.index_qubits


def _vec_difference(spec: AnsatzSpec, theta, i: int, s: float) -> np.ndarray:
    plus = build_operator(spec, shifted(theta, i, s))
    minus = build_operator(spec, shifted(theta, i, -s))
    return (plus - minus).flatten(order="F")


def _check_indices(spec: AnsatzSpec, indices: Sequence[int]) -> tuple[int, ...]:
    out = tuple(int(i) for i in indices)
    if not out:
        raise ValueError("indices must be nonempty")
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate indices in {out}")
    for i in out:
        if not 0 <= i < spec.num_params:
            raise IndexError(f"parameter index {i} out of range for {spec.num_params}")
    return out


def _normalized(diff: np.ndarray) -> tuple[PureState, float]:
    norm = float(np.linalg.norm(diff))
    if norm < 1e-12:
        raise DegenerateShiftError("plus and minus shifted operators coincide")
    return PureState(diff / norm), norm


def prepare_shift_state(spec: AnsatzSpec, theta, i: int, s: float = math.pi):
    theta = _check_theta(spec, theta)
    (i,) = _check_indices(spec, [i])
    state, norm = _normalized(_vec_difference(spec, theta, i, s))
    meta = ShiftStateSpec("single", (i,), s, norm, spec.num_qubits)
    return state, meta


def prepare_multi_shift_state(spec: AnsatzSpec, theta, indices: Sequence[int], s: float = math.pi):
    theta = _check_theta(spec, theta)
    indices = _check_indices(spec, indices)
    diff = sum(_vec_difference(spec, theta, i, s) for i in indices)
    state, norm = _normalized(diff)
    meta = ShiftStateSpec("multi", indices, s, norm, spec.num_qubits)
    return state, meta


def index_register_size(count: int) -> int:
    return max(1, math.ceil(math.log2(count)))


def prepare_indexed_shift_state(
    spec: AnsatzSpec,
    theta,
    indices: Sequence[int],
    s: float = math.pi,
    max_index_qubits: int | None = None,
):
    """``sum_k |k> ⊗ (vec(O_+^{i_k}) - vec(O_-^{i_k}))``, normalized.

    The index register has ``ceil(log2 len(indices))`` qubits; unused
    branches (when the count is not a power of two) are left empty.
    """
    theta = _check_theta(spec, theta)
    indices = _check_indices(spec, indices)
    if len(indices) < 2:
        raise ValueError("indexed mode needs at least two indices")
    q = index_register_size(len(indices))
    if max_index_qubits is not None and q > max_index_qubits:
        raise IndexRegisterOverflow(f"{len(indices)} indices need {q} > {max_index_qubits} qubits")
    block = spec.dim**2
    amps = np.zeros((1 << q) * block)
    for k, i in enumerate(indices):
        amps[k * block : (k + 1) * block] = _vec_difference(spec, theta, i, s)
    state, norm = _normalized(amps)
    meta = ShiftStateSpec("indexed", indices, s, norm, spec.num_qubits, q)
    return state, meta


def recover_partials(raw, spec: ShiftStateSpec, dim: int):
    """Turn a client's raw overlap into derivative units.

    ``raw`` is a scalar for single and multi mode (giving one partial or the
    sum of partials) and a vector with one entry per index for indexed mode.
    """
    factor = spec.descale * math.sqrt(dim) / (4.0 * math.sin(spec.shift / 2))
    if spec.mode == "indexed":
        raw = np.asarray(raw, dtype=float)
        if raw.shape != (len(spec.indices),):
            raise ValueError(f"indexed mode expects {len(spec.indices)} raw values, got {raw.shape}")
        return raw * factor
    if np.ndim(raw) != 0:
        raise ValueError(f"{spec.mode} mode expects a scalar raw value")
    return float(raw) * factor
