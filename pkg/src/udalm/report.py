"""Plain-text and TSV rendering of results.

Accuracies are shown in percent with two decimals as mean ± std, where std
is the population standard deviation (ddof=0) over the configured seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import C_NOTE, HELD_OUT_NOTE, SweepRow
from .trainers import REGIMES, parse_criterion, TrainConfig, FixedEpochs, MinMixedLoss, MinSourceLoss

STD_NOTE = "std is the population standard deviation (ddof=0) over seeds"


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not len(values):
        raise ValueError("no values")
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def pm(mean: float, std: float, scale: float = 100.0) -> str:
    return f"{mean * scale:.2f} ± {std * scale:.2f}"


@dataclass
class ResultsTable:
    """Rows of (domain pair, regime, mean accuracy, std) with a macro-average footer."""

    rows: list[tuple[str, str, float, float]]
    seeds: tuple[int, ...]

    @classmethod
    def from_accuracies(cls, per_pair: dict[str, dict[str, list[float]]], seeds) -> "ResultsTable":
        rows = []
        for pair in sorted(per_pair):
            for regime in _ordered(per_pair[pair]):
                accs = per_pair[pair][regime]
                if len(accs) != len(seeds):
                    raise ValueError(f"{pair}/{regime}: {len(accs)} results for {len(seeds)} seeds")
                rows.append((pair, regime, *mean_std(accs)))
        return cls(rows, tuple(seeds))

    @property
    def pairs(self) -> list[str]:
        return sorted({r[0] for r in self.rows})

    @property
    def regimes(self) -> list[str]:
        return _ordered({r[1] for r in self.rows})

    def macro(self) -> dict[str, tuple[float, float]]:
        """Unweighted mean over pairs of the per-pair means and of the per-pair stds."""
        out = {}
        for regime in self.regimes:
            sel = [r for r in self.rows if r[1] == regime]
            out[regime] = (float(np.mean([r[2] for r in sel])), float(np.mean([r[3] for r in sel])))
        return out

    def tsv(self) -> str:
        lines = [f"# target accuracy in percent; {STD_NOTE}; seeds {_seeds(self.seeds)}",
                 "pair\tregime\tmean\tstd"]
        lines += [f"{p}\t{r}\t{m * 100:.2f}\t{s * 100:.2f}" for p, r, m, s in self.rows]
        lines += [f"macro-average\t{r}\t{m * 100:.2f}\t{s * 100:.2f}" for r, (m, s) in self.macro().items()]
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        regimes = self.regimes
        cells = {(p, r): pm(m, s) for p, r, m, s in self.rows}
        width = max(len("macro-average"), *(len(p) for p in self.pairs))
        head = "pair".ljust(width) + "".join(f"  {r:>15}" for r in regimes)
        lines = [head, "-" * len(head)]
        for p in self.pairs:
            lines.append(p.ljust(width) + "".join(f"  {cells.get((p, r), '-'):>15}" for r in regimes))
        lines.append("-" * len(head))
        macro = self.macro()
        lines.append("macro-average".ljust(width) + "".join(f"  {pm(*macro[r]):>15}" for r in regimes))
        return "\n".join(lines) + "\n"


def _ordered(regimes) -> list[str]:
    known = [r for r in REGIMES if r in regimes]
    return known + sorted(set(regimes) - set(known))


def _seeds(seeds) -> str:
    return ",".join(str(s) for s in seeds)


def criterion_label(text: str) -> str:
    c = parse_criterion(text, TrainConfig())
    if isinstance(c, FixedEpochs):
        return f"Fixed epochs ({c.epochs})"
    if isinstance(c, MinSourceLoss):
        return f"Min source loss (patience {c.patience})"
    if isinstance(c, MinMixedLoss):
        return f"Min mixed loss (patience {c.patience})"
    return text


def stopping_table(stopping: dict[str, list[float]]) -> tuple[str, str]:
    """(tsv, text) of UDALM accuracy under each stopping criterion."""
    tsv = [f"# UDALM target accuracy in percent per stopping criterion; {STD_NOTE}",
           "criterion\tmean\tstd"]
    rows = []
    for crit, accs in stopping.items():
        m, s = mean_std(accs)
        tsv.append(f"{crit}\t{m * 100:.2f}\t{s * 100:.2f}")
        rows.append((criterion_label(crit), pm(m, s)))
    width = max([len("validation setting")] + [len(r[0]) for r in rows])
    text = ["validation setting".ljust(width) + "  accuracy", "-" * (width + 17)]
    text += [f"{label.ljust(width)}  {val}" for label, val in rows]
    return "\n".join(tsv) + "\n", "\n".join(text) + "\n"


def bound_table(bounds) -> tuple[str, str]:
    """Per-run and per-regime-average source error, proxy A-distance and target error."""
    tsv = [f"# {C_NOTE}", f"# {HELD_OUT_NOTE}",
           "regime\tseed\tepsilon_S\td_A\tepsilon_D\tbound_value\tepsilon_T"]
    by_regime: dict[str, list] = {}
    for regime, seed, b in bounds:
        tsv.append(f"{regime}\t{seed}\t{b.epsilon_s:.4f}\t{b.d_a:.4f}\t{b.eps_d:.4f}\t"
                   f"{b.bound_value:.4f}\t{b.epsilon_t:.4f}")
        by_regime.setdefault(regime, []).append(b)
    text = [f"{'regime':<8}  {'epsilon_S':>9}  {'d_A':>7}  {'bound':>7}  {'epsilon_T':>9}",
            "-" * 48]
    for regime in _ordered(by_regime):
        bs = by_regime[regime]
        avg = [float(np.mean([getattr(b, k) for b in bs]))
               for k in ("epsilon_s", "d_a", "eps_d", "bound_value", "epsilon_t")]
        tsv.append(f"{regime}\tmean\t" + "\t".join(f"{v:.4f}" for v in avg))
        text.append(f"{regime:<8}  {avg[0]:>9.4f}  {avg[1]:>7.4f}  {avg[3]:>7.4f}  {avg[4]:>9.4f}")
    text += ["", f"note: {C_NOTE}", f"note: {HELD_OUT_NOTE}"]
    return "\n".join(tsv) + "\n", "\n".join(text) + "\n"


def sweep_plot_data(rows: Sequence[SweepRow]) -> str:
    """One ``series`` block per regime with x (target examples), y and sigma columns."""
    lines = [f"# target accuracy (percent) vs number of unlabeled target examples; sigma: {STD_NOTE}"]
    for regime in _ordered({r.regime for r in rows}):
        lines += ["", f"series {regime}", "x\ty\tsigma"]
        for r in sorted((r for r in rows if r.regime == regime), key=lambda r: r.size):
            lines.append(f"{r.size}\t{r.mean * 100:.2f}\t{r.std * 100:.2f}")
        lines.append("end")
    return "\n".join(lines) + "\n"


def parse_plot_data(text: str) -> dict[str, list[tuple[int, float, float]]]:
    series: dict[str, list[tuple[int, float, float]]] = {}
    current = None
    for line in text.splitlines():
        if not line or line.startswith("#") or line.startswith("x\t"):
            continue
        if line.startswith("series "):
            current = series.setdefault(line.split(None, 1)[1], [])
        elif line == "end":
            current = None
        elif current is not None:
            x, y, s = line.split("\t")
            current.append((int(x), float(y), float(s)))
    return series


def write_report(results, out_dir: Path) -> dict[str, Path]:
    """Render every table into ``out_dir``; returns the written paths by name."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = ResultsTable.from_accuracies({results.pair: results.accuracy}, results.seeds)
    files = {"results.tsv": table.tsv()}
    sections = ["Target-domain accuracy (%), mean ± std over seeds " + _seeds(results.seeds),
                f"({STD_NOTE})", "", table.text()]
    if results.stopping:
        s_tsv, s_text = stopping_table(results.stopping)
        files["stopping.tsv"] = s_tsv
        sections += ["UDALM accuracy (%) by stopping criterion", "", s_text]
    if results.bounds:
        b_tsv, b_text = bound_table(results.bounds)
        files["bound.tsv"] = b_tsv
        sections += ["Error-bound terms, averaged over seeds", "", b_text]
    if results.sweep:
        files["sweep.dat"] = sweep_plot_data(results.sweep)
        sections += ["Sample efficiency: see sweep.dat", ""]
    files["report.txt"] = "\n".join(sections)
    paths = {}
    for name, text in files.items():
        path = out_dir / name
        tmp = path.with_name(name + ".tmp")
        tmp.write_text(text, encoding="utf-8", newline="\n")
        tmp.replace(path)
        paths[name] = path
    return paths
