"""Convergence analysis across finished runs: rounds-to-target, speedup
ratios, and the comparison report (text table, CSV, and a convergence figure
rendered alongside the delimited output).
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass
from pathlib import Path

from .federation import RoundMetrics

METRICS = ("val_acc", "val_loss")


def rounds_to_target(history, metric: str, target: float) -> int | None:
    """First round whose metric meets the target; None if never reached.

    Accuracy-style metrics must rise to >= target, loss-style must fall to
    <= target.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")
    for m in history:
        value = m.val_acc if metric == "val_acc" else m.val_loss
        if (metric == "val_acc" and value >= target) or (
            metric == "val_loss" and value <= target
        ):
            return m.round
    return None


def load_history(run_dir: str | Path) -> list[RoundMetrics]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: no metrics.jsonl (incomplete run?)")
    history = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        history.append(
            RoundMetrics(
                round=obj["round"],
                clients=obj["clients"],
                weights=obj["weights"],
                client_losses=obj["client_losses"],
                val_loss=obj["val_loss"],
                val_acc=obj["val_acc"],
                weight_entropy=obj["weight_entropy"],
                wall_ms=obj["wall_ms"],
                failed=obj.get("failed", []),
            )
        )
    return history


def _load_label_seed(run_dir: Path) -> tuple[str, int | None]:
    summary = run_dir / "summary.json"
    if summary.exists():
        obj = json.loads(summary.read_text())
        return str(obj.get("label", run_dir.name)), obj.get("seed")
    return run_dir.name, None


@dataclass
class RunRow:
    directory: str
    label: str
    seed: int | None
    rounds_to_target: int | None
    rounds_completed: int
    final_val_acc: float
    final_val_loss: float
    best_val_acc: float


@dataclass
class Comparison:
    metric: str
    target: float
    rows: list[RunRow]
    label_medians: dict[str, float | None]
    ratios: list[tuple[str, str, float | None]]

    def render_text(self) -> str:
        lines = [f"target: {self.metric} {'>=' if self.metric == 'val_acc' else '<='} {self.target}"]
        lines.append("")
        header = f"{'run':<28} {'label':<16} {'seed':>6} {'to-target':>10} {'final':>9} {'best':>9}"
        lines.append(header)
        lines.append("-" * len(header))
        for r in self.rows:
            hit = str(r.rounds_to_target) if r.rounds_to_target is not None else "never"
            final = r.final_val_acc if self.metric == "val_acc" else r.final_val_loss
            lines.append(
                f"{r.directory:<28} {r.label:<16} {str(r.seed):>6} {hit:>10} "
                f"{final:>9.4f} {r.best_val_acc:>9.4f}"
            )
        lines.append("")
        lines.append("median rounds-to-target per label:")
        for label, med in self.label_medians.items():
            lines.append(f"  {label:<16} {med if med is not None else 'never'}")
        if self.ratios:
            lines.append("")
            lines.append("pairwise speedup (rounds of first / rounds of second):")
            for a, b, ratio in self.ratios:
                shown = f"{ratio:.3f}" if ratio is not None else "n/a"
                lines.append(f"  {a} vs {b}: {shown}")
        return "\n".join(lines)


def compare(run_dirs, metric: str, target: float) -> Comparison:
    """Pure function over the metrics files of two or more completed runs."""
    dirs = [Path(d) for d in run_dirs]
    if len(dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    rows: list[RunRow] = []
    for d in dirs:
        history = load_history(d)
        if not history:
            raise ValueError(f"{d}: empty metrics stream")
        label, seed = _load_label_seed(d)
        rows.append(
            RunRow(
                directory=str(d),
                label=label,
                seed=seed,
                rounds_to_target=rounds_to_target(history, metric, target),
                rounds_completed=len(history),
                final_val_acc=history[-1].val_acc,
                final_val_loss=history[-1].val_loss,
                best_val_acc=max(m.val_acc for m in history),
            )
        )

    by_label: dict[str, list[RunRow]] = {}
    for r in rows:
        by_label.setdefault(r.label, []).append(r)
    medians: dict[str, float | None] = {}
    for label, group in by_label.items():
        hits = [r.rounds_to_target for r in group]
        medians[label] = None if any(h is None for h in hits) else float(statistics.median(hits))

    labels = list(medians)
    ratios = []
    for i, a in enumerate(labels):
        for b in labels[i + 1 :]:
            if medians[a] is not None and medians[b] not in (None, 0):
                ratios.append((a, b, medians[a] / medians[b]))
            else:
                ratios.append((a, b, None))
    return Comparison(metric=metric, target=target, rows=rows, label_medians=medians, ratios=ratios)


def write_comparison_csv(cmp: Comparison, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "run",
                "label",
                "seed",
                "rounds_to_target",
                "rounds_completed",
                "final_val_acc",
                "final_val_loss",
                "best_val_acc",
            ]
        )
        for r in cmp.rows:
            writer.writerow(
                [
                    r.directory,
                    r.label,
                    r.seed,
                    r.rounds_to_target,
                    r.rounds_completed,
                    r.final_val_acc,
                    r.final_val_loss,
                    r.best_val_acc,
                ]
            )


def write_speedups_csv(cmp: Comparison, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label_a", "label_b", "median_rounds_a", "median_rounds_b", "ratio_a_over_b"])
        for a, b, ratio in cmp.ratios:
            writer.writerow([a, b, cmp.label_medians[a], cmp.label_medians[b], ratio])


def write_curves_csv(run_dirs, metric: str, path: str | Path) -> None:
    """Plot-ready long-format table: one (run, label, round, value) row per point."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "label", "round", metric])
        for d in run_dirs:
            label, _ = _load_label_seed(Path(d))
            for m in load_history(d):
                value = m.val_acc if metric == "val_acc" else m.val_loss
                writer.writerow([str(d), label, m.round, value])


def plot_convergence(run_dirs, metric: str, path: str | Path, target: float | None = None) -> None:
    """Render the per-run convergence curves to an image file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for d in run_dirs:
        history = load_history(Path(d))
        label, seed = _load_label_seed(Path(d))
        name = label if seed is None else f"{label} (seed {seed})"
        ax.plot(
            [m.round for m in history],
            [m.val_acc if metric == "val_acc" else m.val_loss for m in history],
            label=name,
            linewidth=1.4,
        )
    if target is not None:
        ax.axhline(target, color="gray", linestyle="--", linewidth=1, label="target")
    ax.set_xlabel("round")
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
