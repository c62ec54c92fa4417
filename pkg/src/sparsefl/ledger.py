"""Communication-cost accounting.

A dense update costs 64 bits per parameter. A sparse update costs 96 bits per
transmitted entry (32-bit position + 64-bit value); the per-layer count
headers of the wire format are reported separately as framing. Downloads are
always dense. The total cost of training to a target accuracy is
``n_target * clients_per_round * (c_up + c_down)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError
from .sparsify import ENTRY_BITS, VALUE_BITS, SparseUpdate

MIB_BITS = 8 * 2**20
CONVERGENCE_WINDOW = 10


def sparse_bits(m: int, s: float) -> float:
    if m <= 0:
        raise ConfigError(f"parameter count must be positive, got {m}")
    if not 0 < s <= 1:
        raise ConfigError(f"sparsity rate must lie in (0, 1], got {s}")
    return m * s * ENTRY_BITS


def dense_bits(m: int) -> int:
    if m <= 0:
        raise ConfigError(f"parameter count must be positive, got {m}")
    return m * VALUE_BITS


@dataclass(frozen=True)
class UpdateSize:
    payload_bits: int
    framing_bits: int

    @property
    def total_bits(self) -> int:
        return self.payload_bits + self.framing_bits


def measure_update(update: SparseUpdate) -> UpdateSize:
    return UpdateSize(update.payload_bits, update.framing_bits)


def mib(bits: float) -> float:
    return bits / MIB_BITS


def converged_accuracy(accuracies: Sequence[float], window: int = CONVERGENCE_WINDOW) -> float:
    tail = list(accuracies)[-window:]
    return sum(tail) / len(tail)


@dataclass(frozen=True)
class CostReport:
    """Rounds-to-target cost summary of one run.

    ``n_target`` is ``None`` when the target accuracy was never reached; the
    cost fields are then ``None`` too.
    """

    target_fraction: float
    final_accuracy: float
    target_accuracy: float
    n_target: int | None
    clients_per_round: int
    c_up: float | None
    c_down: float | None
    rounds: int

    @property
    def reached(self) -> bool:
        return self.n_target is not None

    @property
    def upload_total(self) -> float | None:
        if self.n_target is None:
            return None
        return self.n_target * self.clients_per_round * self.c_up

    @property
    def c_total(self) -> float | None:
        if self.n_target is None:
            return None
        return self.n_target * self.clients_per_round * (self.c_up + self.c_down)


def cost_report(records: Sequence, target_fraction: float = 0.95,
                window: int = CONVERGENCE_WINDOW) -> CostReport:
    """Cost to first reach ``target_fraction`` of the converged accuracy.

    Converged accuracy is the mean over the last ``window`` rounds. ``c_up`` is
    the mean per-client upload over rounds ``1..n_target`` (constant for
    dense and fixed-rate pipelines).
    """
    if not records:
        raise ConfigError("cost_report needs at least one round record")
    if not 0 < target_fraction <= 1:
        raise ConfigError(f"target_fraction must lie in (0, 1], got {target_fraction}")
    accs = [r.accuracy for r in records]
    final = converged_accuracy(accs, window)
    target = target_fraction * final
    n_target = next((r.round for r in records if r.accuracy >= target), None)
    cpr = len(records[0].upload_bits)
    if n_target is None:
        return CostReport(target_fraction, final, target, None, cpr, None, None, len(records))
    head = [r for r in records if r.round <= n_target]
    ups = [b for r in head for b in r.upload_bits]
    c_up = sum(ups) / len(ups)
    c_down = sum(r.download_bits for r in head) / len(head)
    return CostReport(target_fraction, final, target, n_target, cpr, c_up, c_down, len(records))


@dataclass(frozen=True)
class Comparison:
    """One run measured against a baseline run.

    ``payload_ratio`` compares per-client per-round upload, ``round_ratio``
    the rounds needed to reach the target; their product is the total upload
    ratio. Multipliers are the inverses (baseline / this run).
    """

    name: str
    n_target: int | None
    upload_total: float | None
    payload_ratio: float
    round_ratio: float | None

    @property
    def upload_ratio(self) -> float | None:
        if self.round_ratio is None:
            return None
        return self.payload_ratio * self.round_ratio

    @property
    def payload_multiplier(self) -> float:
        return 1.0 / self.payload_ratio

    @property
    def multiplier(self) -> float | None:
        r = self.upload_ratio
        return None if r is None else 1.0 / r


def mean_upload(records: Sequence) -> float:
    ups = [b for r in records for b in r.upload_bits]
    return sum(ups) / len(ups)


def compare(name: str, report: CostReport, records: Sequence,
            base_report: CostReport, base_records: Sequence) -> Comparison:
    payload_ratio = mean_upload(records) / mean_upload(base_records)
    if report.reached and base_report.reached:
        round_ratio = report.n_target / base_report.n_target
    else:
        round_ratio = None
    return Comparison(name, report.n_target, report.upload_total, payload_ratio, round_ratio)


def format_table(rows: Sequence[Comparison]) -> str:
    header = (
        f"{'run':<24}{'n_target':>10}{'upload (MiB)':>16}{'payload ratio':>15}"
        f"{'payload x':>11}{'round ratio':>13}{'upload ratio':>14}{'multiplier':>12}"
    )
    lines = [header, "-" * len(header)]
    for c in rows:
        n = "not reached" if c.n_target is None else str(c.n_target)
        up = "-" if c.upload_total is None else f"{mib(c.upload_total):.3f}"
        rr = "-" if c.round_ratio is None else f"{c.round_ratio:.3f}"
        ur = "-" if c.upload_ratio is None else f"{100 * c.upload_ratio:.2f}%"
        mult = "-" if c.multiplier is None else f"x{c.multiplier:.2f}"
        lines.append(
            f"{c.name:<24}{n:>10}{up:>16}{100 * c.payload_ratio:>14.2f}%"
            f"{'x' + format(c.payload_multiplier, '.2f'):>11}{rr:>13}{ur:>14}{mult:>12}"
        )
    return "\n".join(lines)


def format_report(report: CostReport, m: int) -> str:
    lines = [
        f"parameters m            {m}",
        f"dense update            {mib(dense_bits(m)):.3f} MiB",
        f"rounds run              {report.rounds}",
        f"converged accuracy      {report.final_accuracy:.4f}",
        f"target ({report.target_fraction:.0%})           {report.target_accuracy:.4f}",
    ]
    if not report.reached:
        lines.append("n_target                not reached")
    else:
        lines += [
            f"n_target                {report.n_target}",
            f"clients per round       {report.clients_per_round}",
            f"c_up per client         {report.c_up:.1f} bits",
            f"c_down per client       {report.c_down:.1f} bits",
            f"total upload            {mib(report.upload_total):.3f} MiB",
            f"total (up + down)       {mib(report.c_total):.3f} MiB",
        ]
    return "\n".join(lines)
