"""Command-line entry point: ``flowtdvp run`` and ``flowtdvp verify``.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 numerical abort during integration.
"""
import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .density import CheckpointError, LatentSpec, init_identity, make_blocks
from .integrator import Evolution, IntegratorConfig, NumericalAbort
from .observables import ball_probability, mc_moments, nu_observer
from .pde import heat_problem, phase_space_problem
from .reference import (
    RadialGridConfig,
    gaussian_linear_oracle,
    radial_heat_evolve,
    radial_profile,
    sde_evolve,
)
from .tdvp import RegularizationPolicy

log = logging.getLogger("flowtdvp")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "FLOWTDVP_OUTPUT_ROOT"


# --- building blocks from a config ------------------------------------------------


def initial_moments(cfg):
    d = cfg["model"]["dim"]
    ini = cfg["initial"]
    mean = np.zeros(d) if ini["mean"] is None else np.asarray(ini["mean"], dtype=float)
    var = np.broadcast_to(np.asarray(ini["variance"], dtype=float), (d,))
    return mean, np.diag(var)


def build_model(cfg):
    m, ini = cfg["model"], cfg["initial"]
    latent = LatentSpec(ini["family"], m["dim"], m["covariance"])
    blocks = make_blocks(m["dim"], m["n_blocks"], m["include_t"], seed=m["split_seed"], hidden=m["hidden"])
    mean, cov = initial_moments(cfg)
    nu = ini["nu"] if ini["family"] == "student_t" else None
    return init_identity(latent, blocks, m["init_seed"], mean=mean, cov=cov, nu=nu)


def build_problem(cfg):
    p = cfg["problem"]
    if p["kind"] == "heat":
        return heat_problem(cfg["model"]["dim"], p["D"])
    return phase_space_problem(p["n_osc"], p["m"], p["omega"], p["k"], p["gamma"], p["temps"])


def integrator_config(cfg):
    i, r = cfg["integrator"], cfg["regularization"]
    return IntegratorConfig(
        scheme=i["scheme"],
        dt=i["dt"],
        t_end=i["t_end"],
        n_samples=i["n_samples"],
        seed=i["seed"],
        adaptive=i["adaptive"],
        tol=i["tol"],
        dt_min=i["dt_min"],
        shared_samples=i["shared_samples"],
        observe_every=cfg["observables"]["every"],
        checkpoint_every=cfg["output"]["checkpoint_every"],
        trainable=tuple(i["trainable"]),
        regularization=RegularizationPolicy(r["svd_rel_cutoff"], r["tikhonov_shift"]),
    )


def timeseries_columns(cfg):
    d = cfg["model"]["dim"]
    cols = ["t", "entropy", "entropy_se", "nu", "residual_normalized", "n_retained", "theta_dot_norm"]
    for name in ("mean", "mean_se", "var", "var_se"):
        cols += [f"{name}_{i}" for i in range(d)]
    for r in cfg["observables"]["ball_radii"]:
        cols += [f"ball_{r:g}", f"ball_{r:g}_se"]
    return cols + ["wall_time"]


COMPARISON_COLUMNS = ["t", "quantity", "tdvp", "tdvp_se", "reference", "reference_se", "z_score"]


class Observer:
    """Entropy, moments, nu and ball probabilities on a batch independent of the dynamics."""

    def __init__(self, cfg):
        self.obs = cfg["observables"]
        self.count = 0

    def __call__(self, model, t):
        o = self.obs
        seq = np.random.SeedSequence(o["seed"], spawn_key=(self.count,))
        self.count += 1
        rng = np.random.default_rng(seq)
        X = model.sample(o["n_samples"], rng)
        lp = model.log_prob(X)
        row = {"entropy": float(-lp.mean()), "entropy_se": float(lp.std(ddof=1) / math.sqrt(len(lp)))}
        mean, var, mean_se, var_se = mc_moments(X)
        for i in range(model.dim):
            row[f"mean_{i}"], row[f"mean_se_{i}"] = mean[i], mean_se[i]
            row[f"var_{i}"], row[f"var_se_{i}"] = var[i], var_se[i]
        row["nu"] = nu_observer(model) if model.latent.family == "student_t" else float("nan")
        for r in o["ball_radii"]:
            center = None if o["ball_center"] is None else np.asarray(o["ball_center"])
            est, se = ball_probability(model, r, center, o["n_samples"], rng, o["stratified"])
            row[f"ball_{r:g}"], row[f"ball_{r:g}_se"] = est, se
        return row


def fmt(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.17g}"


class CsvSink:
    def __init__(self, path, columns):
        self.fh = open(path, "w", newline="")
        self.columns = columns
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(columns)

    def write(self, row):
        self.writer.writerow([fmt(row.get(c, float("nan"))) for c in self.columns])
        self.fh.flush()

    def close(self):
        self.fh.close()


# --- reference comparisons ------------------------------------------------------


class Reference:
    """Produces comparison rows for a TDVP record at time t."""

    def __init__(self, cfg, problem, record_times):
        self.kind = cfg_kind = cfgmod.resolve_reference(cfg)
        self.cfg = cfg
        self.problem = problem
        self.d = cfg["model"]["dim"]
        if cfg_kind == "radial":
            g = cfg["reference"]["grid"]
            self.grid = RadialGridConfig(g["delta"], g["r_max"], g["lhopital_cells"], g["scheme"], g["dt_grid"], g["order"])
            self.profile = radial_profile(cfg["initial"]["family"], self.d, self.grid, cfg["initial"]["nu"])
        elif cfg_kind == "sde":
            ref = cfg["reference"]
            rng = np.random.default_rng(ref["seed"])
            X0 = build_model(cfg).sample(ref["n_particles"], rng)
            times = sorted(set(record_times))
            log.info("running SDE reference with %d particles", ref["n_particles"])
            traj = sde_evolve(problem, X0, ref["sde_dt"], max(times), ref["seed"], times, ref["sde_scheme"])
            self.ensembles = {round(t, 12): X for t, X in traj}

    def rows(self, rec):
        t = rec["t"]
        if self.kind == "oracle":
            mean0, cov0 = initial_moments(self.cfg)
            mean, cov, ent = gaussian_linear_oracle(self.problem, mean0, cov0, t)
            out = [("entropy", rec["entropy"], rec["entropy_se"], ent, 0.0)]
            for i in range(self.d):
                out.append((f"mean_{i}", rec[f"mean_{i}"], rec[f"mean_se_{i}"], mean[i], 0.0))
                out.append((f"var_{i}", rec[f"var_{i}"], rec[f"var_se_{i}"], cov[i, i], 0.0))
            return [_comparison(t, *r) for r in out]
        if self.kind == "radial":
            D = self.problem.info["D"]
            self.profile = radial_heat_evolve(self.profile, D, self.grid, t - self.profile.t)
            return [_comparison(t, "entropy", rec["entropy"], rec["entropy_se"], self.profile.entropy(), 0.0)]
        if self.kind == "sde":
            X = self.ensembles.get(round(t, 12))
            if X is None:
                return []
            mean, var, mean_se, var_se = mc_moments(X)
            out = []
            for i in range(self.d):
                out.append(_comparison(t, f"mean_{i}", rec[f"mean_{i}"], rec[f"mean_se_{i}"], mean[i], mean_se[i]))
                out.append(_comparison(t, f"var_{i}", rec[f"var_{i}"], rec[f"var_se_{i}"], var[i], var_se[i]))
            return out
        return []


def _comparison(t, quantity, a, a_se, b, b_se):
    se = math.hypot(a_se, b_se)
    z = (a - b) / se if se > 0 else float("nan")
    return {"t": t, "quantity": quantity, "tdvp": a, "tdvp_se": a_se, "reference": b, "reference_se": b_se, "z_score": z}


def record_times(icfg):
    """Times at which Evolution emits records for a fixed-step run."""
    if icfg.t_end <= 0:
        return [0.0]
    n = int(np.ceil(icfg.t_end / icfg.dt - 1e-9))
    steps = [i for i in range(1, n + 1) if i % icfg.observe_every == 0 or i == n]
    return [0.0] + [icfg.t_end if i == n else i * icfg.dt for i in steps]


# --- commands ---------------------------------------------------------------------


def output_dir(cfg):
    if cfg["output"]["dir"]:
        return Path(cfg["output"]["dir"])
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{cfg['experiment']}-{cfg['initial']['family']}-seed{cfg['integrator']['seed']}"


def run(cfg):
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfgmod.canonical_json(cfg))
    model = build_model(cfg)
    problem = build_problem(cfg)
    icfg = integrator_config(cfg)
    log.info("model with %d parameters, output in %s", model.n_params, out)

    reference = None
    kind = cfgmod.resolve_reference(cfg)
    if kind != "none":
        if icfg.adaptive and kind == "sde":
            raise cfgmod.ConfigError("reference.kind: the SDE comparison needs fixed integrator steps")
        reference = Reference(cfg, problem, record_times(icfg))

    ev = Evolution(model, problem, icfg, [Observer(cfg)], checkpoint_dir=out / "checkpoints")
    (out / "checkpoints").mkdir(exist_ok=True)
    series = CsvSink(out / "timeseries.csv", timeseries_columns(cfg))
    comparison = CsvSink(out / "comparison.csv", COMPARISON_COLUMNS) if reference else None
    spectrum = open(out / "spectrum.csv", "w") if cfg["observables"]["spectrum"] else None
    try:
        for rec in ev:
            series.write(rec)
            if comparison:
                for row in reference.rows(rec):
                    comparison.write(row)
            if spectrum is not None and "eigvals" in ev.last_diag:
                lam = np.sort(ev.last_diag["eigvals"])[::-1]
                spectrum.write(",".join([fmt(rec["t"])] + [fmt(v) for v in lam]) + "\n")
    except NumericalAbort as exc:
        log.error("%s (last good state t=%s, checkpoint %s)", exc, exc.t, exc.checkpoint)
        return EXIT_ABORT
    finally:
        series.close()
        if comparison:
            comparison.close()
        if spectrum is not None:
            spectrum.close()
    return EXIT_OK


def _parse_overrides(extra):
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or len(tok) == 2:
            raise cfgmod.ConfigError(f"<cli>: unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise cfgmod.ConfigError(f"{key}: missing value")
        if key not in cfgmod.ALIASES:
            key = key.replace("-", "_")
        pairs.append((key, val))
    return pairs


def build_parser():
    ap = argparse.ArgumentParser(prog="flowtdvp", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="integrate one experiment and write CSV output")
    r.add_argument("--config", help="JSON run configuration")
    r.add_argument("--experiment", choices=cfgmod.EXPERIMENTS)
    r.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    v = sub.add_parser("verify", help="run the invariant battery")
    v.add_argument("--checkpoint", action="append", default=[], help="also check that this checkpoint loads")
    v.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None):
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        if extra:
            ap.error(f"unrecognized arguments: {' '.join(extra)}")
        from .verify import run_checks

        return EXIT_OK if run_checks(seed=args.seed, checkpoints=args.checkpoint) else EXIT_VERIFY
    try:
        cfg = cfgmod.load(args.config, args.experiment, _parse_overrides(extra))
        if args.print_config:
            sys.stdout.write(cfgmod.canonical_json(cfg))
            return EXIT_OK
        return run(cfg)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
