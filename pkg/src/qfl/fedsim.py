"""Federated training loop around the input-driven chip.

Each round the server turns its parameters into shift states, every client
feeds them through its chip together with its local data, estimates signed
overlaps against the doubled labels and returns partial derivatives. The
server aggregates with FedSGD or FedAvg. Rounds are synchronous: the ledger
and the parameters change only at the aggregation barrier.

Clients never see ``theta``. FedAvg's local step is therefore replayed on the
server from each client's returned gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model
from .chip import chip_apply, doubled_state
from .config import ExperimentConfig
from .model import AnsatzSpec, LabeledExample, ShiftStateSpec
from .statevec import PureState, bernoulli_overlap_stderr, overlap_real_estimate

log = logging.getLogger(__name__)

CLASSICAL_REAL_BITS = 64
DEFAULT_RETRANSMISSION_CAP = 64

# Trailing stream tags keep seed keys distinct: SeedSequence ignores trailing zeros.
_INIT_STREAM, _ROUND_STREAM, _CLIENT_SEED_STREAM, _CLIENT_ROUND_STREAM = 0x11, 0x22, 0x33, 0x44


def _stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng(list(keys))


class ClientDropped(RuntimeError):
    def __init__(self, client_id, retransmissions: int, trials: int):
        super().__init__(f"client {client_id} exceeded the retransmission cap")
        self.client_id = client_id
        self.retransmissions = retransmissions
        self.trials = trials


class TrainingAborted(RuntimeError):
    def __init__(self, round_index: int, message: str):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


@dataclass
class ClientNode:
    id: int
    dataset: list[LabeledExample]
    shots: int | None = None  # None means exact expectation values
    rng_seed: int = 0

    def __post_init__(self):
        if not self.dataset:
            raise ValueError(f"client {self.id} has no data")
        dims = {ex.x.dim for ex in self.dataset}
        if len(dims) != 1:
            raise ValueError(f"client {self.id} mixes data dimensions {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.dataset[0].x.dim


@dataclass
class ServerNode:
    spec: AnsatzSpec
    theta: np.ndarray
    learning_rate: float = 0.05
    strategy: str = "fedsgd"
    shift_mode: str = "single"
    partial_fraction: float = 1.0
    shift: float = math.pi

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        if self.theta.shape != (self.spec.num_params,):
            raise ValueError("theta does not match the ansatz")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning rate must be positive and finite")
        if self.strategy not in ("fedsgd", "fedavg"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.shift_mode not in model.SHIFT_MODES:
            raise ValueError(f"unknown shift mode {self.shift_mode!r}")
        if not 0 < self.partial_fraction <= 1 or self.selection_size < 1:
            raise ValueError("partial_fraction must select at least one parameter")
        if self.shift_mode == "indexed" and self.selection_size < 2:
            raise ValueError("indexed mode needs at least two parameters per round")

    @property
    def selection_size(self) -> int:
        return min(self.spec.num_params, math.floor(self.partial_fraction * self.spec.num_params + 1e-9))


@dataclass
class GradientMessage:
    """A client's reply. ``values[k]`` is the estimate for parameter ``indices[k]``.

    In multi mode every entry holds the same number, the sum of the partials
    over the group, so the server steps along the group direction.
    """

    client_id: int
    indices: tuple[int, ...]
    values: np.ndarray
    sample_count: int
    shots: int | None
    retransmissions: int = 0
    stderr: np.ndarray | None = None
    trials: int = 0


@dataclass
class LedgerRecord:
    round: int
    qubits_sent_downlink: int = 0
    qubits_sent_uplink: int = 0
    classical_bits: int = 0
    retransmissions: int = 0
    classical_equivalent_bits: int = 0
    states_sent: int = 0


_COUNTERS = (
    "qubits_sent_downlink",
    "qubits_sent_uplink",
    "classical_bits",
    "retransmissions",
    "classical_equivalent_bits",
    "states_sent",
)


class CommLedger:
    """Per-round communication counters.

    A round is opened with :meth:`open_round`, debited while the round is
    assembled and sealed with :meth:`close_round` at the barrier.
    """

    def __init__(self):
        self.records: list[LedgerRecord] = []
        self._open: LedgerRecord | None = None

    def open_round(self, k: int) -> None:
        if self._open is not None:
            raise RuntimeError("previous round still open")
        self._open = LedgerRecord(round=k)

    def _current(self) -> LedgerRecord:
        if self._open is None:
            self.open_round(len(self.records))
        return self._open

    def debit_states(self, qubits_per_state: int, copies: int, equivalent_bits_per_state: int) -> None:
        rec = self._current()
        rec.qubits_sent_downlink += qubits_per_state * copies
        rec.states_sent += copies
        rec.classical_equivalent_bits += equivalent_bits_per_state * copies

    def debit_retransmissions(self, qubits_per_state: int, count: int, equivalent_bits_per_state: int) -> None:
        self.debit_states(qubits_per_state, count, equivalent_bits_per_state)
        self._current().retransmissions += count

    def debit_uplink(self, qubits: int, classical_bits: int) -> None:
        rec = self._current()
        rec.qubits_sent_uplink += qubits
        rec.classical_bits += classical_bits

    def debit_classical(self, bits: int) -> None:
        self._current().classical_bits += bits

    def close_round(self) -> LedgerRecord:
        rec = self._current()
        self.records.append(rec)
        self._open = None
        return rec

    def totals(self) -> dict:
        return {name: sum(getattr(r, name) for r in self.records) for name in _COUNTERS}


def state_equivalent_bits(meta: ShiftStateSpec) -> int:
    """Classical cost of shipping the same amplitude vector as 64-bit reals."""
    return (1 << meta.qubits) * CLASSICAL_REAL_BITS


# -- server -------------------------------------------------------------------


def select_parameters(server: ServerNode, rng: np.random.Generator) -> tuple[int, ...]:
    m = server.spec.num_params
    k = server.selection_size
    if k >= m:
        return tuple(range(m))
    return tuple(sorted(int(i) for i in rng.choice(m, size=k, replace=False)))


def server_prepare_round(
    server: ServerNode,
    rng: np.random.Generator | None = None,
    ledger: CommLedger | None = None,
    num_clients: int = 1,
) -> list[tuple[ShiftStateSpec, PureState]]:
    """Build this round's shift states and debit one copy per state per client."""
    rng = rng if rng is not None else np.random.default_rng(0)
    indices = select_parameters(server, rng)
    spec, theta, s = server.spec, server.theta, server.shift
    if server.shift_mode == "single":
        prepared = [model.prepare_shift_state(spec, theta, i, s) for i in indices]
    elif server.shift_mode == "multi":
        prepared = [model.prepare_multi_shift_state(spec, theta, indices, s)]
    else:
        prepared = [model.prepare_indexed_shift_state(spec, theta, indices, s)]
    out = [(meta, state) for state, meta in prepared]
    if ledger is not None:
        for meta, _ in out:
            ledger.debit_states(meta.qubits, num_clients, state_equivalent_bits(meta))
            # descale travels as one classical real
            ledger.debit_classical(CLASSICAL_REAL_BITS * num_clients)
    return out


# -- client -------------------------------------------------------------------


def _branch_targets(meta: ShiftStateSpec, y: PureState) -> list[PureState]:
    """Flag ``|0>``, index ``|k>``, column ``|0...0>``, then ``sum_r y_r |r>|r>``."""
    n = meta.operator_qubits
    col_zero = np.zeros(1 << n)
    col_zero[0] = 1.0
    tail = np.kron(col_zero, doubled_state(y).amplitudes)
    flag_zero = np.array([1.0, 0.0])
    if meta.mode != "indexed":
        return [PureState(np.kron(flag_zero, tail))]
    targets = []
    for k in range(len(meta.indices)):
        e = np.zeros(1 << meta.index_qubits)
        e[k] = 1.0
        targets.append(PureState(np.kron(flag_zero, np.kron(e, tail))))
    return targets


def estimate_raw(chip_out, meta: ShiftStateSpec, ex: LabeledExample, shots=None, rng=None):
    """Signed overlap(s) between the chip output and the doubled label.

    The Hadamard test runs on the dilated pre-measurement state against
    ``|0>|k>|0...0>|y>|y>``. That amplitude is exactly the post-selected
    branch amplitude, ``Re<yy|joint> * sqrt(success_prob)``, so no separate
    estimate of the success probability is needed. Returns ``(raw, stderr)``
    arrays with one entry per branch.
    """
    targets = _branch_targets(meta, ex.y)
    dilated = chip_out.dilated_state()
    raw = np.empty(len(targets))
    err = np.zeros(len(targets))
    for k, target in enumerate(targets):
        raw[k] = overlap_real_estimate(target, dilated, shots, rng)
        if shots is not None:
            err[k] = bernoulli_overlap_stderr(raw[k], shots)
    return raw, err


def simulate_retransmission(p: float, rng: np.random.Generator, cap: int = DEFAULT_RETRANSMISSION_CAP):
    """Send copies of the control state until post-selection succeeds.

    Returns ``(succeeded, copies_used)``. Each copy succeeds independently
    with probability ``p``; after ``cap`` failures the client gives up.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    if p == 0.0:
        return False, cap
    copies = int(rng.geometric(p))
    if copies > cap:
        return False, cap
    return True, copies


def client_process(
    client: ClientNode,
    prepared: Sequence[tuple[ShiftStateSpec, PureState]],
    round_index: int = 0,
    retransmission_cap: int = DEFAULT_RETRANSMISSION_CAP,
) -> GradientMessage:
    """Estimate the local batch-mean partials from the received shift states.

    In shot mode each state must first survive post-selection; the copies
    needed are drawn from the batch-average success probability, and a
    client that exceeds ``retransmission_cap`` raises :class:`ClientDropped`.
    """
    rng = _stream(client.rng_seed, round_index, _CLIENT_ROUND_STREAM)
    indices: list[int] = []
    values: list[float] = []
    errors: list[float] = []
    retransmissions = trials = 0
    nb = len(client.dataset)
    for meta, state in prepared:
        if state.num_qubits != meta.index_qubits + 2 * int(math.log2(client.dim)):
            raise ValueError("shift state does not match the client's data dimension")
        outs = [chip_apply(state, ex.x, meta.index_qubits) for ex in client.dataset]
        if client.shots is not None:
            p = float(np.mean([o.success_prob for o in outs]))
            ok, copies = simulate_retransmission(p, rng, retransmission_cap)
            trials += copies
            retransmissions += copies - 1
            if not ok:
                raise ClientDropped(client.id, retransmissions, trials)

        width = len(meta.indices) if meta.mode == "indexed" else 1
        total = np.zeros(width)
        var = np.zeros(width)
        for out, ex in zip(outs, client.dataset):
            raw, err = estimate_raw(out, meta, ex, client.shots, rng)
            raw_arg = raw if meta.mode == "indexed" else raw[0]
            err_arg = err if meta.mode == "indexed" else err[0]
            total += model.recover_partials(raw_arg, meta, client.dim)
            var += np.abs(model.recover_partials(err_arg, meta, client.dim)) ** 2
        mean = total / nb
        se = np.sqrt(var) / nb
        if meta.mode == "indexed":
            indices.extend(meta.indices)
            values.extend(mean)
            errors.extend(se)
        else:
            for i in meta.indices:
                indices.append(i)
                values.append(mean[0])
                errors.append(se[0])
    return GradientMessage(
        client_id=client.id,
        indices=tuple(indices),
        values=np.array(values),
        sample_count=nb,
        shots=client.shots,
        retransmissions=retransmissions,
        stderr=np.array(errors) if client.shots is not None else None,
        trials=trials,
    )


# -- aggregation --------------------------------------------------------------


def _scatter(message: GradientMessage, m: int) -> np.ndarray:
    g = np.zeros(m)
    g[list(message.indices)] = message.values
    return g


def aggregate_fedsgd(server: ServerNode, messages: Sequence[GradientMessage]) -> np.ndarray:
    """``theta - eta * sum over clients and their examples of the gradient``."""
    if not messages:
        raise ValueError("no gradient messages to aggregate")
    m = server.spec.num_params
    total = np.zeros(m)
    for msg in messages:
        total += msg.sample_count * _scatter(msg, m)
    return server.theta - server.learning_rate * total


def aggregate_fedavg(server: ServerNode, messages: Sequence[GradientMessage]) -> np.ndarray:
    """Sample-weighted average of per-client virtual local steps."""
    if not messages:
        raise ValueError("no gradient messages to aggregate")
    m = server.spec.num_params
    n = sum(msg.sample_count for msg in messages)
    if n <= 0:
        raise ValueError("total sample count must be positive")
    out = np.zeros(m)
    for msg in messages:
        local = server.theta - server.learning_rate * _scatter(msg, m)
        out += (msg.sample_count / n) * local
    return out


def aggregate(server: ServerNode, messages: Sequence[GradientMessage]) -> np.ndarray:
    if server.strategy == "fedsgd":
        return aggregate_fedsgd(server, messages)
    return aggregate_fedavg(server, messages)


# -- experiment ---------------------------------------------------------------


@dataclass
class Experiment:
    server: ServerNode
    clients: list[ClientNode]
    target_theta: np.ndarray
    retransmission_cap: int = DEFAULT_RETRANSMISSION_CAP
    master_seed: int = 0


def random_real_state(dim: int, rng: np.random.Generator) -> PureState:
    return PureState(rng.normal(size=dim), normalize=True)


def make_realizable_dataset(spec: AnsatzSpec, target_theta, count: int, rng) -> list[LabeledExample]:
    """Examples ``(x, O(target) x)`` with random real unit ``x``."""
    op = model.build_operator(spec, target_theta)
    out = []
    for _ in range(count):
        x = random_real_state(spec.dim, rng)
        out.append(LabeledExample(x, PureState(op @ x.amplitudes, normalize=True)))
    return out


def build_experiment(config: ExperimentConfig) -> Experiment:
    """Materialize clients, data and initial parameters from a config.

    ``clients.data_seed`` fixes the hidden target and the data;
    ``estimation.seed`` (the master seed) fixes the initial parameters and
    every per-round random stream.
    """
    spec = AnsatzSpec(config.ansatz.num_qubits, config.ansatz.num_layers)
    data_rng = np.random.default_rng(config.clients.data_seed)
    target = data_rng.uniform(0.0, 2 * np.pi, spec.num_params)
    master = config.estimation.seed
    init_rng = _stream(master, _INIT_STREAM)
    theta0 = init_rng.uniform(0.0, 2 * np.pi, spec.num_params)
    shots = config.estimation.shots if config.estimation.mode == "shots" else None
    clients = [
        ClientNode(
            id=c,
            dataset=make_realizable_dataset(spec, target, config.clients.examples_per_client, data_rng),
            shots=shots,
            rng_seed=int(np.random.SeedSequence([master, c, _CLIENT_SEED_STREAM]).generate_state(1)[0]),
        )
        for c in range(config.clients.count)
    ]
    t = config.training
    server = ServerNode(
        spec=spec,
        theta=theta0,
        learning_rate=t.learning_rate,
        strategy=t.strategy,
        shift_mode=t.shift_mode,
        partial_fraction=t.partial_fraction,
        shift=t.shift_size,
    )
    return Experiment(server, clients, target, config.estimation.retransmission_cap, master)


def client_losses(spec: AnsatzSpec, theta, clients: Sequence[ClientNode]) -> list[float]:
    """Mean ``<y|O|x>`` per client (monitoring only; clients never compute it)."""
    op = model.build_operator(spec, theta)
    return [float(np.mean([model._loss_with_operator(op, ex) for ex in c.dataset])) for c in clients]


@dataclass
class RoundRecord:
    round: int
    theta_before: np.ndarray
    theta_after: np.ndarray
    mean_loss: float
    per_client_loss: list[float]
    mean_loss_after: float
    selected: tuple[int, ...]
    ledger: dict
    dropped_clients: list[int] = field(default_factory=list)


def run_round(exp: Experiment, k: int, ledger: CommLedger) -> RoundRecord:
    server, clients = exp.server, exp.clients
    theta_before = server.theta.copy()
    losses = client_losses(server.spec, theta_before, clients)

    ledger.open_round(k)
    round_rng = _stream(exp.master_seed, k, _ROUND_STREAM)
    prepared = server_prepare_round(server, round_rng, ledger, len(clients))
    qubits_per_state = prepared[0][0].qubits
    equiv = state_equivalent_bits(prepared[0][0])

    messages, dropped = [], []
    for client in clients:
        try:
            msg = client_process(client, prepared, k, exp.retransmission_cap)
        except ClientDropped as exc:
            log.info("round %d: %s", k, exc)
            dropped.append(client.id)
            ledger.debit_retransmissions(qubits_per_state, exc.retransmissions, equiv)
            ledger.debit_classical(exc.trials)
            continue
        messages.append(msg)
        ledger.debit_retransmissions(qubits_per_state, msg.retransmissions, equiv)
        # one success/failure flag per post-selection attempt
        ledger.debit_classical(msg.trials)
        k_vals = len(msg.values)
        ledger.debit_uplink(model.index_register_size(k_vals), CLASSICAL_REAL_BITS * (k_vals + 1))

    if not messages:
        ledger.close_round()
        raise TrainingAborted(k, "every client was dropped")
    server.theta = aggregate(server, messages)
    ledger.close_round()

    after = client_losses(server.spec, server.theta, clients)
    cumulative = ledger.totals()
    return RoundRecord(
        round=k,
        theta_before=theta_before,
        theta_after=server.theta.copy(),
        mean_loss=float(np.mean(losses)),
        per_client_loss=losses,
        mean_loss_after=float(np.mean(after)),
        selected=tuple(sorted({i for meta, _ in prepared for i in meta.indices})),
        ledger=cumulative,
        dropped_clients=dropped,
    )


def run_training(config: ExperimentConfig, ledger: CommLedger | None = None) -> list[RoundRecord]:
    """Run ``config.training.rounds`` rounds; a pure function of the config."""
    exp = build_experiment(config)
    ledger = ledger if ledger is not None else CommLedger()
    return [run_round(exp, k, ledger) for k in range(config.training.rounds)]


def ledger_report(ledger: CommLedger, dim: int, num_params: int, index_qubits: int = 0) -> dict:
    """Totals plus the classical cost of shipping the same model.

    ``matrix_bits_per_state`` is what sending ``O(theta)`` as ``N^2`` 64-bit
    reals costs; ``theta_bits`` is what sending the parameters costs.
    """
    n = int(math.log2(dim))
    qubits_per_state = 2 * n + index_qubits
    matrix_bits = dim * dim * CLASSICAL_REAL_BITS
    theta_bits = num_params * CLASSICAL_REAL_BITS
    totals = ledger.totals()
    return {
        "rounds": len(ledger.records),
        "total_qubits_downlink": totals["qubits_sent_downlink"],
        "total_qubits_uplink": totals["qubits_sent_uplink"],
        "total_classical_bits": totals["classical_bits"],
        "total_retransmissions": totals["retransmissions"],
        "total_states_sent": totals["states_sent"],
        "total_classical_equivalent_bits": totals["classical_equivalent_bits"],
        "qubits_per_state": qubits_per_state,
        "matrix_bits_per_state": matrix_bits,
        "theta_bits": theta_bits,
        "matrix_bits_per_qubit": matrix_bits / qubits_per_state,
        "theta_bits_per_qubit": theta_bits / qubits_per_state,
    }
