"""Command-line front end.

    qfl emulate MATRIX STATE     run the chip on a matrix/state file pair
    qfl decompose MATRIX         permuted block-diagonal decomposition
    qfl gradcheck                shift-state gradients vs exact vs finite differences
    qfl train                    federated training, metrics written per round

Exit codes: 0 success, 1 usage/config/input error, 2 tolerance violation,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import fedsim, model
from .chip import (
    RealOperator,
    chip_apply,
    permuted_block_decompose,
    reconstruct,
    success_probability,
    vec_encode,
)
from .config import FORMATS, ConfigError, ExperimentConfig, reference_config
from .statevec import NORM_TOL, PureState, ZeroNormError

EXIT_OK, EXIT_USAGE, EXIT_TOLERANCE, EXIT_RUNTIME = 0, 1, 2, 3

FIDELITY_TOL = 1e-9
RECONSTRUCTION_TOL = 1e-12
GRADCHECK_TOL = 1e-6
GRADCHECK_SIGMAS = 4.0
FD_STEP = 1e-5

METRICS_SCHEMA = "qfl.metrics"
METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = (
    "schema_version",
    "round",
    "mean_loss",
    "per_client_loss",
    "theta_norm",
    "qubits_downlink_cum",
    "retransmissions_cum",
    "wall_time_ms",
)


class InputFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")


class ToleranceViolation(RuntimeError):
    pass


# -- plain-text matrix / state files -----------------------------------------


def _numbered_lines(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputFormatError(path, 0, f"cannot read file ({exc.strerror})") from exc
    return [(i, ln.split()) for i, ln in enumerate(text.splitlines(), start=1) if ln.strip()]


def _parse_header(path, lines) -> int:
    if not lines:
        raise InputFormatError(path, 1, "empty file, expected header 'dim N'")
    lineno, tokens = lines[0]
    if len(tokens) != 2 or tokens[0] != "dim":
        raise InputFormatError(path, lineno, "expected header 'dim N'")
    try:
        dim = int(tokens[1])
    except ValueError:
        raise InputFormatError(path, lineno, f"dimension {tokens[1]!r} is not an integer") from None
    if dim < 1 or dim & (dim - 1):
        raise InputFormatError(path, lineno, f"dimension {dim} is not a power of two")
    return dim


def _floats(path, lineno, tokens):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise InputFormatError(path, lineno, str(exc)) from None


def read_matrix(path) -> np.ndarray:
    """Header ``dim N`` followed by ``N`` rows of ``N`` whitespace-separated floats."""
    lines = _numbered_lines(path)
    dim = _parse_header(path, lines)
    rows = lines[1:]
    for lineno, tokens in rows:
        if len(tokens) != dim:
            raise InputFormatError(path, lineno, f"expected {dim} columns, got {len(tokens)} (matrix must be square)")
    if len(rows) != dim:
        last = rows[-1][0] if rows else lines[0][0]
        raise InputFormatError(path, last, f"expected {dim} rows, got {len(rows)} (matrix must be square)")
    m = np.array([_floats(path, ln, t) for ln, t in rows])
    if not np.all(np.isfinite(m)):
        raise InputFormatError(path, rows[0][0], "matrix has non-finite entries")
    return m


def read_state(path) -> np.ndarray:
    """Header ``dim N`` followed by ``N`` floats (any line layout)."""
    lines = _numbered_lines(path)
    dim = _parse_header(path, lines)
    values = []
    for lineno, tokens in lines[1:]:
        values.extend(_floats(path, lineno, tokens))
    last = lines[-1][0]
    if len(values) != dim:
        raise InputFormatError(path, last, f"expected {dim} amplitudes, got {len(values)}")
    v = np.array(values)
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > NORM_TOL:
        raise InputFormatError(path, last, f"state is not a unit vector (norm {norm:.12g})")
    return v


def write_matrix(path, m) -> None:
    m = np.asarray(m, dtype=float)
    rows = [" ".join(repr(float(v)) for v in row) for row in m]
    Path(path).write_text(f"dim {m.shape[0]}\n" + "\n".join(rows) + "\n")


def write_state(path, v) -> None:
    v = np.asarray(v, dtype=float)
    Path(path).write_text(f"dim {v.shape[0]}\n" + "\n".join(repr(float(x)) for x in v) + "\n")


# -- subcommands --------------------------------------------------------------


def _emit(report: dict, out_dir, name: str) -> None:
    text = json.dumps(report, indent=2)
    print(text)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


def cmd_emulate(matrix_file, state_file, out_dir=None) -> int:
    m = read_matrix(matrix_file)
    v = read_state(state_file)
    if m.shape[0] != v.shape[0]:
        raise InputFormatError(state_file, 1, f"state dimension {v.shape[0]} does not match matrix dimension {m.shape[0]}")
    try:
        op = RealOperator(m)
    except ValueError as exc:
        raise InputFormatError(matrix_file, 1, str(exc)) from None
    psi = PureState(v)
    out = chip_apply(vec_encode(op), psi)
    recovered = (out.extracted / out.scale).real
    oracle = m @ v
    fidelity = float(
        abs(np.dot(recovered, oracle)) ** 2 / (np.dot(recovered, recovered) * np.dot(oracle, oracle))
    )
    report = {
        "dim": int(m.shape[0]),
        "extracted": recovered.tolist(),
        "oracle": oracle.tolist(),
        "fidelity": fidelity,
        "success_prob": out.success_prob,
        "success_prob_formula": success_probability(op, psi),
        "scale": out.scale,
    }
    _emit(report, out_dir, "emulate.json")
    if fidelity < 1.0 - FIDELITY_TOL:
        raise ToleranceViolation(f"fidelity {fidelity!r} below 1 - {FIDELITY_TOL}")
    return EXIT_OK


def cmd_decompose(matrix_file, out_dir=None) -> int:
    m = read_matrix(matrix_file)
    if m.shape[0] < 2:
        raise InputFormatError(matrix_file, 1, "decomposition needs N >= 2")
    try:
        op = RealOperator(m)
    except ValueError as exc:
        raise InputFormatError(matrix_file, 1, str(exc)) from None
    dec = permuted_block_decompose(op)
    error = float(np.max(np.abs(reconstruct(dec).entries - m)))
    report = {
        "dim": dec.dim,
        "terms": [
            {"index": i, "permutation_bits": list(t.permutation_bits), "blocks": t.blocks.tolist()}
            for i, t in enumerate(dec.terms)
        ],
        "nonzero_terms": [i for i, t in enumerate(dec.terms) if np.any(t.blocks)],
        "reconstruction_error": error,
    }
    _emit(report, out_dir, "decomposition.json")
    if not error < RECONSTRUCTION_TOL:
        raise ToleranceViolation(f"reconstruction error {error!r} >= {RECONSTRUCTION_TOL}")
    return EXIT_OK


def gradcheck(config: ExperimentConfig) -> dict:
    """Compare exact, shift-state and finite-difference gradients at the initial point.

    All clients' data is pooled; values are batch means.
    """
    exp = fedsim.build_experiment(config)
    spec, theta = exp.server.spec, exp.server.theta
    data = [ex for c in exp.clients for ex in c.dataset]
    m = spec.num_params

    exact = np.mean([model.exact_gradient(spec, theta, ex) for ex in data], axis=0)

    def mean_loss(t):
        return float(np.mean([model.loss(spec, t, ex) for ex in data]))

    fd = np.array(
        [(mean_loss(model.shifted(theta, i, FD_STEP)) - mean_loss(model.shifted(theta, i, -FD_STEP))) / (2 * FD_STEP) for i in range(m)]
    )

    pooled = fedsim.ClientNode(id=0, dataset=data, shots=exp.clients[0].shots, rng_seed=exp.clients[0].rng_seed)
    server = fedsim.ServerNode(spec, theta, shift_mode=exp.server.shift_mode, shift=exp.server.shift)
    prepared = fedsim.server_prepare_round(server)
    msg = fedsim.client_process(pooled, prepared, 0, exp.retransmission_cap)
    shots = pooled.shots

    rows, failures = [], []
    if server.shift_mode == "multi":
        recovered_sum = float(msg.values[0])
        sigma = float(msg.stderr[0]) if shots else 0.0
        bound = GRADCHECK_SIGMAS * sigma if shots else GRADCHECK_TOL
        disc = abs(recovered_sum - exact.sum())
        if disc > bound:
            failures.append(f"sum of partials: |{recovered_sum} - {exact.sum()}| > {bound}")
        summary = {"recovered_sum": recovered_sum, "exact_sum": float(exact.sum()), "discrepancy": disc, "bound": bound}
    else:
        summary = None
    for i in range(m):
        row = {"param": i, "exact": float(exact[i]), "finite_difference": float(fd[i])}
        fd_disc = abs(exact[i] - fd[i])
        row["fd_discrepancy"] = float(fd_disc)
        if fd_disc > GRADCHECK_TOL:
            failures.append(f"param {i}: finite difference off by {fd_disc:.3g}")
        if summary is None:
            k = msg.indices.index(i)
            rec = float(msg.values[k])
            bound = GRADCHECK_SIGMAS * float(msg.stderr[k]) if shots else GRADCHECK_TOL
            row.update(recovered=rec, recovered_discrepancy=abs(rec - exact[i]), bound=bound)
            if abs(rec - exact[i]) > bound:
                failures.append(f"param {i}: recovered {rec} vs exact {exact[i]} exceeds {bound:.3g}")
        rows.append(row)
    return {
        "mode": "shots" if shots else "exact",
        "shots": shots,
        "shift_mode": server.shift_mode,
        "rows": rows,
        "multi": summary,
        "max_discrepancy": max(
            [r["fd_discrepancy"] for r in rows] + [r.get("recovered_discrepancy", 0.0) for r in rows]
        ),
        "failures": failures,
    }


def _format_gradcheck(report: dict) -> str:
    lines = [f"{'param':>5} {'exact':>14} {'recovered':>14} {'finite diff':>14} {'|rec-exact|':>12}"]
    for r in report["rows"]:
        rec = r.get("recovered")
        rec_s = f"{rec:14.9f}" if rec is not None else f"{'-':>14}"
        disc_s = f"{r['recovered_discrepancy']:12.3e}" if rec is not None else f"{'-':>12}"
        lines.append(f"{r['param']:>5} {r['exact']:14.9f} {rec_s} {r['finite_difference']:14.9f} {disc_s}")
    if report["multi"]:
        mu = report["multi"]
        lines.append(f"sum of partials: exact {mu['exact_sum']:.9f} recovered {mu['recovered_sum']:.9f}")
    lines.append("OK" if not report["failures"] else "FAIL: " + "; ".join(report["failures"]))
    return "\n".join(lines)


def cmd_gradcheck(config: ExperimentConfig, out_dir=None) -> int:
    report = gradcheck(config)
    print(_format_gradcheck(report))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
    if report["failures"]:
        raise ToleranceViolation(f"{len(report['failures'])} gradient discrepancies")
    return EXIT_OK


def metrics_record(rec: fedsim.RoundRecord, wall_time_ms) -> dict:
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "round": rec.round,
        "mean_loss": rec.mean_loss,
        "per_client_loss": list(rec.per_client_loss),
        "theta_norm": float(np.linalg.norm(rec.theta_before)),
        "qubits_downlink_cum": rec.ledger["qubits_sent_downlink"],
        "retransmissions_cum": rec.ledger["retransmissions"],
        "wall_time_ms": wall_time_ms,
    }


class MetricsWriter:
    """Writes the JSONL and/or CSV metrics streams with identical columns."""

    def __init__(self, out_dir: Path, formats):
        self._files = {}
        for fmt in formats:
            fh = open(out_dir / f"metrics.{fmt}", "w", newline="")
            self._files[fmt] = fh
            if fmt == "jsonl":
                header = {"schema": METRICS_SCHEMA, "schema_version": METRICS_SCHEMA_VERSION, "columns": list(METRICS_COLUMNS)}
                fh.write(json.dumps(header) + "\n")
            else:
                csv.writer(fh).writerow(METRICS_COLUMNS)

    def write(self, record: dict) -> None:
        for fmt, fh in self._files.items():
            if fmt == "jsonl":
                fh.write(json.dumps(record) + "\n")
            else:
                row = [json.dumps(record[c]) if c == "per_client_loss" else record[c] for c in METRICS_COLUMNS]
                csv.writer(fh).writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()


def _check_round(rec: fedsim.RoundRecord) -> None:
    if not np.all(np.isfinite(rec.theta_after)):
        raise ToleranceViolation(f"round {rec.round}: parameters became non-finite")
    for v in rec.per_client_loss:
        if abs(v) > 1.0 + 1e-9:
            raise ToleranceViolation(f"round {rec.round}: loss {v} outside [-1, 1]")


def cmd_train(config: ExperimentConfig, out_dir=None, timing: bool = False) -> int:
    out = Path(out_dir if out_dir is not None else config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    exp = fedsim.build_experiment(config)
    ledger = fedsim.CommLedger()
    writer = MetricsWriter(out, config.output.formats)
    final_loss = None
    try:
        for k in range(config.training.rounds):
            t0 = time.perf_counter()
            try:
                rec = fedsim.run_round(exp, k, ledger)
            except ZeroNormError as exc:
                raise fedsim.TrainingAborted(k, str(exc)) from exc
            wall = round((time.perf_counter() - t0) * 1000.0, 3) if timing else None
            _check_round(rec)
            writer.write(metrics_record(rec, wall))
            final_loss = rec.mean_loss_after
    finally:
        writer.close()
    spec = exp.server.spec
    index_qubits = model.index_register_size(exp.server.selection_size) if exp.server.shift_mode == "indexed" else 0
    summary = {
        "schema": "qfl.ledger",
        "schema_version": METRICS_SCHEMA_VERSION,
        "final_mean_loss": final_loss,
        "final_theta": exp.server.theta.tolist(),
        "ledger": fedsim.ledger_report(ledger, spec.dim, spec.num_params, index_qubits),
        "per_round": [vars(r) for r in ledger.records],
    }
    (out / "ledger.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: summary[k] for k in ("final_mean_loss", "ledger")}, indent=2))
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=default, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, metavar="U64", default=default, help="override the master seed")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory")
    p.add_argument("--format", choices=FORMATS, default=default, help="metrics format (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qfl", description="Input-driven quantum chip federated learning simulator")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("emulate", help="run the chip on a matrix and a state")
    p.add_argument("matrix_file")
    p.add_argument("state_file")
    _add_globals(p, suppress=True)

    p = sub.add_parser("decompose", help="permuted block-diagonal decomposition of a matrix")
    p.add_argument("matrix_file")
    _add_globals(p, suppress=True)

    p = sub.add_parser("gradcheck", help="check shift-state gradients against exact values")
    _add_globals(p, suppress=True)

    p = sub.add_parser("train", help="run federated training")
    p.add_argument("--timing", action="store_true", help="record wall time per round (breaks byte-identical reruns)")
    _add_globals(p, suppress=True)
    return parser


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else reference_config()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        config.estimation.seed = args.seed
    if args.format is not None:
        config.output.formats = [args.format]
    return config.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "emulate":
            return cmd_emulate(args.matrix_file, args.state_file, args.out)
        if args.command == "decompose":
            return cmd_decompose(args.matrix_file, args.out)
        config = load_config(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(config, args.out)
        return cmd_train(config, args.out, timing=args.timing)
    except (ConfigError, InputFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ToleranceViolation as exc:
        print(f"tolerance violation: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except (ZeroNormError, fedsim.TrainingAborted, fedsim.ClientDropped) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
