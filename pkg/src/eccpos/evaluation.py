"""Localization metrics, trade-off tables, trajectory tracking and report files."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .channel import ScenarioConfig
from .fronthaul import payload_ratio
from .training import (EccModel, Samples, localization_errors, nearest_rank)


@dataclass
class EvalReport:
    errors: np.ndarray
    positions: np.ndarray
    estimates: np.ndarray
    n_bits: int | None
    latent_len: int
    dims: tuple[int, int, int]         # (T, N_r, N_sc)
    cdf_bins: int = 100
    config_text: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def e90(self) -> float:
        return nearest_rank(self.errors, 90.0)

    @property
    def eta(self) -> float:
        if self.n_bits is None:
            return 1.0
        return payload_ratio(self.latent_len, self.n_bits, *self.dims)

    @property
    def eta_total(self) -> float:
        if self.n_bits is None:
            return 1.0
        return payload_ratio(self.latent_len, self.n_bits, *self.dims, include_gain=True)

    def cdf(self) -> tuple[np.ndarray, np.ndarray]:
        return error_cdf(self.errors, self.cdf_bins)


def error_cdf(errors, bins: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF on a uniform grid from 0 to the largest error."""
    e = np.sort(np.asarray(errors, float))
    grid = np.linspace(0.0, e[-1], bins + 1)
    frac = np.searchsorted(e, grid, side="right") / e.size
    return grid, frac


def evaluate(model: EccModel, samples: Samples, scenario: ScenarioConfig,
             cdf_bins: int = 100, config_text: str = "", batch: int = 256) -> EvalReport:
    """Evaluate on an independent test set through the bit-exact fronthaul path."""
    if len(samples) == 0:
        raise ValueError("empty test set")
    est = []
    for lo in range(0, len(samples), batch):
        b = Samples(samples.positions[lo:lo + batch], samples.inputs[lo:lo + batch],
                    samples.gains[lo:lo + batch])
        if model.n_bits is None:
            est.append(model.predict(b.inputs, b.gains))
        else:
            est.append(model.infer_messages(model.messages(b.inputs, b.gains, lo)))
    est = np.concatenate(est)
    latent_len = model.cu.params["cu/proj.w"].shape[-2]
    return EvalReport(localization_errors(samples.positions, est), samples.positions, est,
                      model.n_bits, latent_len,
                      (scenario.n_slots, scenario.n_antennas, scenario.n_subcarriers),
                      cdf_bins, config_text)


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------

def spiral_trajectory(points: int, radius: float, turns: float, height: tuple[float, float],
                      centre=(0.0, 0.0)) -> np.ndarray:
    """Helix starting at (cx + radius, cy, h_min), rising linearly to h_max."""
    ang = np.linspace(0.0, 2 * np.pi * turns, points)
    frac = ang / ang[-1] if points > 1 else np.zeros(1)
    return np.stack([centre[0] + radius * np.cos(ang), centre[1] + radius * np.sin(ang),
                     height[0] + (height[1] - height[0]) * frac], axis=1)


@dataclass
class TrajectoryResult:
    points: np.ndarray
    estimates: np.ndarray
    errors: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))


def check_inside(scenario: ScenarioConfig, pts: np.ndarray):
    for i, p in enumerate(pts):
        if not scenario.in_region(p):
            raise ValueError(f"trajectory point {i} at {np.round(p, 3).tolist()} "
                             f"lies outside the region")


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _pct(x: float) -> str:
    return f"{100 * x:.2f}%"


def write_errors_csv(path, report: EvalReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("index", "x_m", "y_m", "z_m", "x_hat_m", "y_hat_m", "z_hat_m", "error_m"))
        for i, (p, q, e) in enumerate(zip(report.positions, report.estimates, report.errors)):
            w.writerow((i, *(repr(float(v)) for v in p), *(repr(float(v)) for v in q),
                        repr(float(e))))


def read_errors_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 1:4], rows[:, 4:7], rows[:, 7]


def write_cdf_csv(path, report: EvalReport):
    grid, frac = report.cdf()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("error_m", "cdf"))
        for g, f in zip(grid, frac):
            w.writerow((f"{g:.6f}", f"{f:.6f}"))


def summary_text(report: EvalReport, label: str = "") -> str:
    q = "lossless" if report.n_bits is None else f"Q={report.n_bits}"
    lines = [
        f"setting: {label or q}",
        f"samples: {report.errors.size}",
        f"mean_error_m: {report.mean:.2f}",
        f"e90_m: {report.e90:.2f}",
        f"eta: {_pct(report.eta)}",
        f"eta_total: {_pct(report.eta_total)}",
    ]
    if report.n_bits is not None:
        T, nr, nsc = report.dims
        lines += [f"B_csi_bits: {64 * T * nr * nsc}",
                  f"B_emb_bits: {report.latent_len * report.n_bits}",
                  f"B_tot_bits: {report.latent_len * report.n_bits + 32}"]
    return "\n".join(lines) + "\n"


def emit_reports(report: EvalReport, out_dir, label: str = "") -> dict[str, str]:
    """Write errors.csv, cdf.csv and summary.txt; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f) for k, f in
             (("errors", "errors.csv"), ("cdf", "cdf.csv"), ("summary", "summary.txt"))}
    write_errors_csv(paths["errors"], report)
    write_cdf_csv(paths["cdf"], report)
    with open(paths["summary"], "w") as fh:
        fh.write(summary_text(report, label))
    return paths


@dataclass
class TradeoffRow:
    label: str
    n_bits: int | None
    eta: float
    mean: float
    e90: float


def tradeoff_rows(reports: list[EvalReport]) -> list[TradeoffRow]:
    """Lossless reference first, then descending Q (table layout)."""
    rows = [TradeoffRow("lossless" if r.n_bits is None else f"Q={r.n_bits}", r.n_bits,
                        r.eta, r.mean, r.e90) for r in reports]
    return sorted(rows, key=lambda r: -(r.n_bits if r.n_bits is not None else 1 << 30))


def write_tradeoff_csv(path, rows: list[TradeoffRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("setting", "q_bits", "eta_percent", "mean_error_m", "e90_m"))
        for r in rows:
            w.writerow((r.label, "" if r.n_bits is None else r.n_bits,
                        f"{100 * r.eta:.2f}", f"{r.mean:.4f}", f"{r.e90:.4f}"))


def write_trajectory_csv(path, result: TrajectoryResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("index", "x_m", "y_m", "z_m", "x_hat_m", "y_hat_m", "z_hat_m", "error_m"))
        for i, (p, q, e) in enumerate(zip(result.points, result.estimates, result.errors)):
            w.writerow((i, *(f"{v:.6f}" for v in p), *(f"{v:.6f}" for v in q), f"{e:.6f}"))
