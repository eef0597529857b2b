"""Experiment runner.

Subcommands map onto the lab's experiments:

    generate   materialize clean / noisy / held-out datasets
    pretrain   train a denoiser on the clean set, write a checkpoint
    sfbd       full alternating run with per-iteration metrics
    rate       deconvolution MISE sweep over sample sizes
    deconv     one deconvolving-kernel density estimate
    diagnose   CF-bound grid and gradient-equivalence checks

Configs are flat ``section.key = value`` text (see README); unknown keys are
rejected.  Every command writes a manifest (config hash, seed, versions) so a
rerun reproduces outputs bit-identically.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import GaussianSpec
from .data_io import (Dataset, DistributionSpec, export_csv, load_dataset,
                      sample_distribution, save_dataset, split_clean_ratio)
from .deconv_kde import DeconvKernelSpec, deconv_estimate, rate_sweep, write_rate_csv
from .diagnostics import cf_kl_bound_grid, consistency_equivalence_report
from .losses import TimeSampler
from .net import DenoiserNet, NetConfig, save_checkpoint
from .sampler import SolverConfig
from .schedule_sde import CorruptionSpec, NoiseSchedule, corrupt_dataset
from .sfbd import EvalConfig, SfbdConfig, TrainConfig, pretrain, run_sfbd


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


class Config:
    """Typed access to the flat key/value map with field-path errors."""

    def __init__(self, values: dict[str, str]):
        self.values = dict(values)
        self.used: set[str] = set()

    def _get(self, key, default, required):
        if key in self.values:
            self.used.add(key)
            return self.values[key]
        if required:
            raise ConfigError(f"missing required config field {key!r}")
        return default

    def str_(self, key, default=None, required=False):
        v = self._get(key, default, required)
        return v

    def int_(self, key, default=None, required=False):
        v = self._get(key, default, required)
        if v is None or isinstance(v, int):
            return v
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"field {key!r}: expected an integer, got {v!r}") from None

    def float_(self, key, default=None, required=False):
        v = self._get(key, default, required)
        if v is None or isinstance(v, float):
            return v
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"field {key!r}: expected a number, got {v!r}") from None

    def bool_(self, key, default=None, required=False):
        v = self._get(key, default, required)
        if v is None or isinstance(v, bool):
            return v
        if v.lower() in ("true", "1", "yes", "on"):
            return True
        if v.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"field {key!r}: expected a boolean, got {v!r}")

    def floats_(self, key, default=None, required=False):
        v = self._get(key, default, required)
        if v is None or isinstance(v, tuple):
            return v
        try:
            return tuple(float(x) for x in v.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"field {key!r}: expected comma-separated numbers, got {v!r}") from None

    def ints_(self, key, default=None, required=False):
        v = self._get(key, default, required)
        if v is None or isinstance(v, tuple):
            return v
        try:
            return tuple(int(x) for x in v.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"field {key!r}: expected comma-separated integers, got {v!r}") from None

    def allow(self, *keys):
        """Mark keys as recognized without reading them (shared config files)."""
        self.used.update(keys)

    def reject_unknown(self):
        unknown = sorted(set(self.values) - self.used)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")


def _dist_spec(cfg: Config) -> DistributionSpec:
    family = cfg.str_("dist.family", required=True)
    if family == "gaussian":
        mean = np.asarray(cfg.floats_("dist.mean", (0.0,)))
        var = cfg.float_("dist.var", 1.0)
        return DistributionSpec(family=family, mean=mean, cov=var * np.eye(len(mean)))
    if family == "gaussian-mixture":
        means = np.asarray(cfg.floats_("dist.means", required=True))[:, None]
        var = cfg.float_("dist.var", 1.0)
        k = len(means)
        weights = np.asarray(cfg.floats_("dist.weights", tuple([1.0 / k] * k)))
        covs = np.repeat(var * np.eye(1)[None], k, axis=0)
        return DistributionSpec(family=family, means=means, covs=covs, weights=weights)
    if family == "ring-of-gaussians":
        return DistributionSpec(family=family, modes=cfg.int_("dist.modes", 8),
                                radius=cfg.float_("dist.radius", 0.7),
                                width=cfg.float_("dist.width", 0.035))
    if family == "two-moons":
        return DistributionSpec(family=family, width=cfg.float_("dist.width", 0.1))
    raise ConfigError(f"field 'dist.family': unknown family {family!r}")


def _schedule(cfg: Config) -> NoiseSchedule:
    sigma_max = cfg.float_("schedule.sigma_max", 10.0)
    return NoiseSchedule(sigma_max=sigma_max, T=sigma_max)


def _write_manifest(out: Path, config_text: str, seed: int) -> None:
    digest = hashlib.sha256(config_text.encode("utf-8")).hexdigest()
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(
        f"config_sha256={digest}\n"
        f"seed={seed}\n"
        f"sfbdlab_version={__version__}\n"
        f"numpy_version={np.__version__}\n"
    )


def cmd_generate(cfg: Config, out: Path, seed: int) -> int:
    spec = _dist_spec(cfg)
    schedule = _schedule(cfg)
    n_clean = cfg.int_("data.n_clean", required=True)
    n_noisy = cfg.int_("data.n_noisy", required=True)
    n_heldout = cfg.int_("data.n_heldout", 2000)
    sigma_zeta = cfg.float_("corruption.sigma_zeta", required=True)
    cfg.reject_unknown()
    corruption = CorruptionSpec.from_schedule(schedule, zeta=sigma_zeta)

    clean = sample_distribution(spec, n_clean, seed=seed + 1)
    source = sample_distribution(spec, n_noisy, seed=seed + 2)
    noisy = corrupt_dataset(source, corruption, seed=seed + 3)
    heldout = sample_distribution(spec, n_heldout, seed=seed + 4)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(clean, out / "clean.f64")
    save_dataset(noisy, out / "noisy.f64")
    save_dataset(heldout, out / "heldout.f64")
    export_csv(clean, out / "clean.csv")
    export_csv(noisy, out / "noisy.csv")
    print(f"generate: wrote clean (n={clean.n}), noisy (n={noisy.n}), "
          f"heldout (n={heldout.n}) to {out}")
    return 0


def _train_cfg(cfg: Config, prefix: str, schedule: NoiseSchedule, default_epochs: int) -> TrainConfig:
    sampler = TimeSampler(t_min=cfg.float_("train.t_min", 2e-3),
                          t_max=cfg.float_("train.t_max", schedule.sigma_max))
    return TrainConfig(epochs=cfg.int_(f"train.{prefix}_epochs", default_epochs),
                       batch_size=cfg.int_("train.batch_size", 256),
                       lr=cfg.float_(f"train.{prefix}_lr", 1e-3 if prefix == "pretrain" else 3e-4),
                       lr_end=cfg.float_(f"train.{prefix}_lr_end", None),
                       time_sampler=sampler)


def _load_required(out: Path, name: str) -> Dataset:
    path = out / name
    if not path.exists():
        raise ConfigError(f"{path} not found; run the generate command first")
    return load_dataset(path)


_SHARED_KEYS = (
    "experiment.name", "dist.family", "dist.mean", "dist.var", "dist.means", "dist.weights",
    "dist.radius", "dist.width", "dist.modes", "data.n_clean", "data.n_noisy",
    "data.n_heldout", "data.clean_ratio", "corruption.sigma_zeta",
    "train.pretrain_epochs", "train.pretrain_lr", "train.pretrain_lr_end",
    "train.finetune_epochs", "train.finetune_lr", "train.finetune_lr_end",
    "train.batch_size", "train.t_min", "train.t_max", "net.hidden",
    "sfbd.iterations", "sfbd.clean_injection", "solver.method", "solver.steps", "solver.rho",
)


def cmd_pretrain(cfg: Config, out: Path, seed: int) -> int:
    schedule = _schedule(cfg)
    train_cfg = _train_cfg(cfg, "pretrain", schedule, default_epochs=200)
    hidden = cfg.ints_("net.hidden", (64, 64, 64))
    ratio = cfg.float_("data.clean_ratio", None)
    cfg.allow(*_SHARED_KEYS)
    cfg.reject_unknown()

    clean = _load_required(out, "clean.f64")
    if ratio is not None:
        clean, _ = split_clean_ratio(clean, ratio, seed=seed + 5)
    net_cfg = NetConfig(input_dim=clean.d, hidden_widths=tuple(hidden))
    net = pretrain(clean, net_cfg, train_cfg, schedule, seed=seed + 6)
    save_checkpoint(net, out / "pretrained.ckpt")
    print(f"pretrain: trained on {clean.n} clean points, wrote {out / 'pretrained.ckpt'}")
    return 0


def cmd_sfbd(cfg: Config, out: Path, seed: int, resume: bool) -> int:
    name = cfg.str_("experiment.name", "experiment")
    schedule = _schedule(cfg)
    spec = _dist_spec(cfg)
    sigma_zeta = cfg.float_("corruption.sigma_zeta", required=True)
    corruption = CorruptionSpec.from_schedule(schedule, zeta=sigma_zeta)
    solver = SolverConfig(t_start=corruption.zeta, t_end=0.0,
                          method=cfg.str_("solver.method", "heun-2"),
                          steps=cfg.int_("solver.steps", 18),
                          rho=cfg.float_("solver.rho", 7.0))
    iterations = cfg.int_("sfbd.iterations", required=True)
    pretrain_cfg = _train_cfg(cfg, "pretrain", schedule, default_epochs=200)
    finetune_cfg = _train_cfg(cfg, "finetune", schedule, default_epochs=100)
    hidden = tuple(cfg.ints_("net.hidden", (64, 64, 64)))
    injection = cfg.bool_("sfbd.clean_injection", False)
    ratio = cfg.float_("data.clean_ratio", None)
    cfg.allow(*_SHARED_KEYS)
    cfg.reject_unknown()

    clean = _load_required(out, "clean.f64")
    noisy = _load_required(out, "noisy.f64")
    heldout = _load_required(out, "heldout.f64")
    if ratio is not None:
        clean, _ = split_clean_ratio(clean, ratio, seed=seed + 5)
    truth = None
    if spec.family == "gaussian":
        truth = GaussianSpec(mean=spec.mean, cov=spec.cov)
    sfbd_cfg = SfbdConfig(
        iterations=iterations,
        corruption=corruption,
        solver=solver,
        schedule=schedule,
        pretrain=pretrain_cfg,
        finetune=finetune_cfg,
        hidden_widths=hidden,
        clean_injection=injection,
        seed=seed,
        eval=EvalConfig(truth=truth, reference=heldout),
    )
    run_dir = out / "runs" / name
    state = run_sfbd(clean, noisy, sfbd_cfg, run_dir=run_dir, resume=resume)
    last = state.history[-1]
    print(f"sfbd: {len(state.history)} metric rows in {run_dir / 'metrics.csv'}; "
          f"final kl={last.kl_estimate:.5g} mmd={last.mmd:.5g}")
    return 0


def cmd_rate(cfg: Config, out: Path, seed: int) -> int:
    sigma_zeta = cfg.float_("rate.sigma_zeta", 0.2)
    n_list = cfg.ints_("rate.n_list", (1000, 10000, 100000))
    replicates = cfg.int_("rate.replicates", 20)
    spec = DeconvKernelSpec(cf_support=cfg.float_("rate.cf_support", 0.55),
                            quad_points=cfg.int_("rate.quad_points", 4097))
    grid = np.linspace(cfg.float_("rate.grid_lo", -6.0), cfg.float_("rate.grid_hi", 6.0),
                       cfg.int_("rate.grid_points", 481))
    mean = cfg.float_("rate.truth_mean", 0.0)
    var = cfg.float_("rate.truth_var", 1.0)
    cfg.reject_unknown()
    truth = GaussianSpec.iso(mean, var)
    sweep = rate_sweep(truth, sigma_zeta, n_list, replicates, spec, grid, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    write_rate_csv(sweep, out / "rate.csv")
    summary = (f"sigma_zeta={sigma_zeta} fitted_log_exponent={sweep.log_exponent:.4f} "
               f"fitted_poly_exponent={sweep.poly_exponent:.4f}")
    (out / "rate_summary.txt").write_text(summary + "\n")
    print(f"rate: {summary}")
    print(f"rate: wrote {out / 'rate.csv'}")
    return 0


def cmd_deconv(cfg: Config, out: Path, seed: int) -> int:
    sigma_zeta = cfg.float_("corruption.sigma_zeta", required=True)
    spec = DeconvKernelSpec(cf_support=cfg.float_("deconv.cf_support", 0.9),
                            quad_points=cfg.int_("deconv.quad_points", 4097))
    grid = np.linspace(cfg.float_("deconv.grid_lo", -6.0), cfg.float_("deconv.grid_hi", 6.0),
                       cfg.int_("deconv.grid_points", 481))
    cfg.reject_unknown()
    noisy = _load_required(out, "noisy.f64")
    if noisy.d != 1:
        raise ConfigError(f"deconv needs 1-d data, got d={noisy.d}")
    est = deconv_estimate(noisy.points[:, 0], sigma_zeta, spec, grid)
    with open(out / "deconv.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "density"])
        for x, v in zip(est.grid, est.density):
            writer.writerow([repr(float(x)), repr(float(v))])
    print(f"deconv: bandwidth={est.bandwidth:.5g}, wrote {out / 'deconv.csv'}")
    return 0


def cmd_diagnose(cfg: Config, out: Path, seed: int) -> int:
    n_cases = cfg.int_("diagnose.cases", 100)
    tol = cfg.float_("diagnose.tol", 1e-9)
    cos_threshold = cfg.float_("diagnose.cosine_threshold", 0.9999)
    cfg.reject_unknown()
    if n_cases < 1:
        raise ConfigError("field 'diagnose.cases': need at least one case")

    reports = cf_kl_bound_grid(seed=seed, n_cases=n_cases, tol=tol)

    # gradient-equivalence check on a self-contained random configuration
    schedule = NoiseSchedule(sigma_max=10.0, T=10.0)
    corruption = CorruptionSpec.from_schedule(schedule, zeta=0.2)
    dist = DistributionSpec(family="gaussian", mean=np.zeros(1), cov=np.eye(1))
    source = sample_distribution(dist, 256, seed=seed + 11)
    noisy = corrupt_dataset(source, corruption, seed=seed + 12)
    net = DenoiserNet.create(NetConfig(input_dim=1, hidden_widths=(16, 16)), schedule,
                             seed=seed + 13)
    rng = np.random.default_rng(seed + 14)
    net = net.with_params(net.params + 0.05 * rng.standard_normal(net.params.size))
    solver = SolverConfig(t_start=corruption.zeta, t_end=0.0, steps=8)
    eq = consistency_equivalence_report(net, noisy, s=0.1, solver_cfg=solver, seed=seed + 15)

    out.mkdir(parents=True, exist_ok=True)
    ok = True
    with open(out / "diagnose.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["check", "case", "lhs", "rhs", "holds"])
        for i, r in enumerate(reports):
            writer.writerow(["cf-kl-bound", i, repr(r.lhs), repr(r.rhs), r.holds])
            ok = ok and r.holds
        eq_ok = eq.cosine >= cos_threshold
        writer.writerow(["consistency-equivalence-cosine", 0, repr(eq.cosine),
                         repr(cos_threshold), eq_ok])
        ok = ok and eq_ok
    print(f"diagnose: {len(reports)} bound cases, all hold: {all(r.holds for r in reports)}; "
          f"equivalence cosine {eq.cosine:.6f}")
    print(f"diagnose: wrote {out / 'diagnose.csv'}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sfbdlab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command",
                        choices=["generate", "pretrain", "sfbd", "rate", "deconv", "diagnose"])
    parser.add_argument("--config", required=True, help="path to a key=value config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--resume", action="store_true", help="resume an interrupted sfbd run")
    args = parser.parse_args(argv)

    config_text = Path(args.config).read_text()
    try:
        values = parse_config_text(config_text)
        cfg = Config(values)
        seed = args.seed if args.seed is not None else cfg.int_("seed", 0)
        out = Path(args.out)
        _write_manifest(out, config_text, seed)
        if args.command == "generate":
            return cmd_generate(cfg, out, seed)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out, seed)
        if args.command == "sfbd":
            return cmd_sfbd(cfg, out, seed, resume=args.resume)
        if args.command == "rate":
            return cmd_rate(cfg, out, seed)
        if args.command == "deconv":
            return cmd_deconv(cfg, out, seed)
        return cmd_diagnose(cfg, out, seed)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
