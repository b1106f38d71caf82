"""Command-line entry point.

Every subcommand reads the same INI config and works inside one run
directory (``--out``). Later stages load what earlier stages wrote; ``report``
runs the whole pipeline in order.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import training as tr
from .channel import build_environment, read_dataset, write_dataset
from .config import RunConfig, load_config, parse_config, render_config
from .estimation import CovarianceBank

log = logging.getLogger("eccpos")

FILES_HELP = """\
run directory layout and CSV columns:
  config.ini               config text as given (defaults rendered when no --config)
  config_resolved.ini      effective config after --seed; later runs must match it
  covariance.ecccov        LMMSE covariance bank (calibrate-cov)
  test.eccdata             independent test set (gen-data)
  stage1/metrics.csv       epoch, loss, mean_error_m, e90_m (errors empty in stage I)
  stage1/encoders.eccparam per-BS encoder weights; checkpoint_eNNNN.eccparam per validation
  quant_steps.csv          q_bits, bs, step
  stage2_<Q>/metrics.csv   epoch, loss, mean_error_m, e90_m on the validation set
  stage2_<Q>/model.eccparam, quantizer.csv (bs, n_bits, step)
  eval_<Q>/errors.csv      index, x_m, y_m, z_m, x_hat_m, y_hat_m, z_hat_m, error_m
  eval_<Q>/cdf.csv         error_m, cdf
  eval_<Q>/summary.txt     mean_error_m, e90_m, eta, eta_total, bit budgets
  tradeoff.csv             setting, q_bits, eta_percent, mean_error_m, e90_m
  trajectory_<Q>/trajectory.csv  index, x_m, y_m, z_m, x_hat_m, y_hat_m, z_hat_m, error_m
  trajectory_<Q>/summary.txt     points, mean_error_m, e90_m
<Q> is q4, q10, ... or lossless (unquantized embedding).
"""


class UsageError(RuntimeError):
    """Missing prerequisite or inconsistent run directory."""


def parse_bits(text: str) -> list[int | None]:
    """``"lossless,4,10"`` -> ``[None, 4, 10]``."""
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        if not part:
            continue
        if part in ("lossless", "none"):
            out.append(None)
            continue
        q = int(part)
        if not 1 <= q <= 32:
            raise argparse.ArgumentTypeError(f"quantizer bits must be in 1..32, got {q}")
        out.append(q)
    if not out:
        raise argparse.ArgumentTypeError("empty --quant-bits list")
    return out


def bits_label(q: int | None) -> str:
    return "lossless" if q is None else f"q{q}"


class RunDir:
    """Paths and cached artifacts of one run directory."""

    def __init__(self, root: str, run: RunConfig, config_text: str):
        self.root = root
        self.run = run
        self.config_text = config_text
        self._env = None
        self._bank = None

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    def prepare(self):
        os.makedirs(self.root, exist_ok=True)
        resolved = render_config(self.run)
        target = self.path("config_resolved.ini")
        if os.path.exists(target):
            with open(target, encoding="utf-8") as fh:
                if fh.read() != resolved:
                    raise UsageError(f"{self.root} was created with a different config; "
                                     f"use a fresh --out directory")
        with open(target, "w", encoding="utf-8") as fh:
            fh.write(resolved)
        with open(self.path("config.ini"), "w", encoding="utf-8") as fh:
            fh.write(self.config_text)

    @property
    def env(self):
        if self._env is None:
            self._env = build_environment(self.run.scenario)
        return self._env

    def require(self, name: str, producer: str) -> str:
        p = self.path(name)
        if not os.path.exists(p):
            raise UsageError(f"missing {p}; run '{producer}' first")
        return p

    @property
    def bank(self) -> CovarianceBank:
        if self._bank is None:
            self._bank = CovarianceBank.load(self.require("covariance.ecccov", "calibrate-cov"))
        return self._bank

    def encoders(self):
        if self.run.train.skip_stage1:
            return None
        return ad.ParamSet(ad.load_params(self.require(os.path.join("stage1", "encoders.eccparam"),
                                                        "train-stage1")))

    def quant_steps(self, q: int) -> list[float]:
        p = self.require("quant_steps.csv", "calibrate-quant")
        with open(p, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["q_bits"]) == q]
        if len(rows) != self.run.scenario.n_bs:
            raise UsageError(f"{p} has no steps for Q={q}; rerun calibrate-quant with it")
        return [float(r["step"]) for r in sorted(rows, key=lambda r: int(r["bs"]))]

    def model(self, q: int | None) -> tr.EccModel:
        d = f"stage2_{bits_label(q)}"
        self.require(os.path.join(d, "model.eccparam"), "train-stage2")
        return tr.load_model(self.run, self.path(d))

    def test_samples(self) -> tr.Samples:
        data = read_dataset(self.require("test.eccdata", "gen-data"))
        sc = self.run.scenario
        if (data.n_bs, data.n_slots, data.n_antennas, data.n_subcarriers) != \
                (sc.n_bs, sc.n_slots, sc.n_antennas, sc.n_subcarriers):
            raise UsageError("test.eccdata dimensions do not match the config")
        X, g = tr.prepare_inputs(self.run, data.observations, self.bank)
        return tr.Samples(data.positions, X, g)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate_cov(rd: RunDir, args):
    bank = tr.covariance_bank(rd.run, rd.env)
    bank.save(rd.path("covariance.ecccov"))
    rd._bank = bank
    log.info("covariance bank from %d realizations", bank.count)


def cmd_gen_data(rd: RunDir, args):
    run = rd.run
    p, Y = tr.simulate_observations(run, tr.stream_id(tr.TEST), run.eval.test_samples, rd.env)
    write_dataset(rd.path("test.eccdata"), run.scenario, p, Y)
    log.info("wrote %d test snapshots", len(p))


def cmd_train_stage1(rd: RunDir, args):
    out = rd.path("stage1")
    os.makedirs(out, exist_ok=True)
    tr.run_stage1(rd.run, rd.bank, rd.env, out)


def cmd_calibrate_quant(rd: RunDir, args):
    encoders = rd.encoders()
    if encoders is None:
        encoders = tr.encoders_only(tr.init_encoders(rd.run, seed_key=0x5C))
    samples = tr.calibration_samples(rd.run, rd.bank, rd.env)
    with open(rd.path("quant_steps.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("q_bits", "bs", "step"))
        for q in args.quant_bits:
            if q is None:
                continue
            for l, s in enumerate(tr.calibrate_quantizer(encoders, samples, q,
                                                         rd.run.quant.percentile)):
                w.writerow((q, l, repr(s)))


def cmd_train_stage2(rd: RunDir, args):
    encoders = rd.encoders()
    for q in args.quant_bits:
        steps = None if q is None else rd.quant_steps(q)
        model = tr.build_model(rd.run, encoders, q, steps, rd.bank, rd.env)
        out = rd.path(f"stage2_{bits_label(q)}")
        os.makedirs(out, exist_ok=True)
        tr.run_stage2(rd.run, rd.bank, model, rd.env, out)
        tr.save_model(model, out)


def _evaluate_all(rd: RunDir, bits) -> list[ev.EvalReport]:
    samples = rd.test_samples()
    reports = []
    for q in bits:
        rep = ev.evaluate(rd.model(q), samples, rd.run.scenario, rd.run.eval.cdf_bins,
                          rd.config_text)
        ev.emit_reports(rep, rd.path(f"eval_{bits_label(q)}"))
        log.info("%s: mean %.2f m, e90 %.2f m", bits_label(q), rep.mean, rep.e90)
        reports.append(rep)
    return reports


def cmd_evaluate(rd: RunDir, args):
    for rep in _evaluate_all(rd, args.quant_bits):
        print(ev.summary_text(rep), end="")


def cmd_tradeoff(rd: RunDir, args):
    rows = ev.tradeoff_rows(_evaluate_all(rd, args.quant_bits))
    ev.write_tradeoff_csv(rd.path("tradeoff.csv"), rows)
    for r in rows:
        print(f"{r.label:>9}  eta {100 * r.eta:6.2f}%  mean {r.mean:7.2f} m  e90 {r.e90:7.2f} m")


def cmd_trajectory(rd: RunDir, args):
    run = rd.run
    sc, tc = run.scenario, run.trajectory
    centre = 0.5 * (sc.region_low + sc.region_high)
    pts = ev.spiral_trajectory(tc.points, tc.radius, tc.turns, sc.height, centre[:2])
    ev.check_inside(sc, pts)
    samples = tr.generate_samples(run, rd.bank, tr.stream_id(tr.TRAJ), len(pts), rd.env, pts)
    for q in args.quant_bits:
        rep = ev.evaluate(rd.model(q), samples, sc, run.eval.cdf_bins, rd.config_text)
        res = ev.TrajectoryResult(pts, rep.estimates, rep.errors)
        out = rd.path(f"trajectory_{bits_label(q)}")
        os.makedirs(out, exist_ok=True)
        ev.write_trajectory_csv(os.path.join(out, "trajectory.csv"), res)
        with open(os.path.join(out, "summary.txt"), "w") as fh:
            fh.write(f"points: {len(pts)}\nmean_error_m: {res.mean:.2f}\n"
                     f"e90_m: {tr.nearest_rank(res.errors):.2f}\n")
        print(f"trajectory {bits_label(q)}: mean tracking error {res.mean:.2f} m")


def cmd_report(rd: RunDir, args):
    for step in (cmd_calibrate_cov, cmd_gen_data, cmd_train_stage1, cmd_calibrate_quant,
                 cmd_train_stage2, cmd_tradeoff, cmd_trajectory):
        log.info("== %s", step.__name__[4:].replace("_", "-"))
        step(rd, args)


COMMANDS = {
    "gen-data": (cmd_gen_data, "simulate the independent test set"),
    "calibrate-cov": (cmd_calibrate_cov, "build the LMMSE covariance bank"),
    "train-stage1": (cmd_train_stage1, "self-supervised per-BS autoencoder training"),
    "calibrate-quant": (cmd_calibrate_quant, "calibrate quantizer steps per BS and Q"),
    "train-stage2": (cmd_train_stage2, "end-to-end positioning training per Q"),
    "evaluate": (cmd_evaluate, "error statistics and CDF per Q on the test set"),
    "tradeoff": (cmd_tradeoff, "payload/accuracy table over Q"),
    "trajectory": (cmd_trajectory, "track a helical UE trajectory"),
    "report": (cmd_report, "run every stage in order"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: the run directory's "
                        "config.ini if present, else built-in defaults)")
    common.add_argument("--seed", type=int, help="override [scenario] seed (unsigned 64-bit)")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--quant-bits", type=parse_bits, default=None,
                        help="comma list such as 'lossless,4,10' (default: [quant] bits)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(
        prog="eccpos", description="Fronthaul-constrained edge-cloud 3D positioning.",
        epilog=FILES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text,
                       epilog=FILES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def resolve_config(args) -> tuple[RunConfig, str]:
    echoed = os.path.join(args.out, "config.ini")
    if args.config:
        run, text = load_config(args.config)
    elif os.path.exists(echoed):
        run, text = load_config(echoed)
    else:
        run = RunConfig()
        text = render_config(run)
        parse_config(text)
    if args.seed is not None:
        if not 0 <= args.seed < 1 << 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        run = run.with_seed(args.seed)
    return run, text


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        run, text = resolve_config(args)
        if args.quant_bits is None:
            args.quant_bits = list(run.quant.bits)
        rd = RunDir(args.out, run, text)
        rd.prepare()
        COMMANDS[args.command][0](rd, args)
    except (UsageError, ValueError, OSError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"eccpos {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0
