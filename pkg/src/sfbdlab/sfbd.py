"""The alternating denoise-retrain procedure: pretrain on a small clean set,
then repeat backward sampling of the fixed noisy set and fine-tuning of the
denoiser on the result.

Run directory layout (when a run directory is given):

    <run_dir>/iter_<k>/denoised.f64   backward-sampled set of iteration k
    <run_dir>/iter_<k>/net.ckpt      denoiser after iteration k's update
    <run_dir>/iter_<k>/metrics.csv   the single metrics row of iteration k
    <run_dir>/metrics.csv            all rows, one per iteration

Iteration 0 records the pretrained model: its ``denoised.f64`` is an
evaluation pass of the pretrained denoiser over the noisy set, its checkpoint
the pretrained weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analytic import GaussianSpec
from .data_io import Dataset, rng_stream
from .diagnostics import gaussian_fit_kl, kl_knn, median_heuristic, mmd
from .losses import TimeSampler, denoising_loss_pairs
from .net import DenoiserNet, NetConfig, adam_init, adam_step, load_checkpoint, save_checkpoint
from .sampler import SolverConfig, denoise_dataset
from .schedule_sde import CorruptionSpec, NoiseSchedule
from .data_io import save_dataset

METRICS_COLUMNS = ("iter", "kl_estimate", "mmd", "mean_err", "cov_err")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 256
    lr: float = 1e-3
    lr_end: float | None = None  # geometric decay target; None keeps lr constant
    time_sampler: TimeSampler = field(default_factory=TimeSampler)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    """What the per-iteration metrics are measured against."""

    truth: GaussianSpec | None = None      # closed-form KL via moment fit
    reference: Dataset | None = None       # held-out clean points for MMD / k-NN KL
    mmd_bandwidth: float | None = None     # None -> median heuristic on the reference
    max_points: int = 2000                 # subsample cap for MMD / k-NN KL
    knn_k: int = 5


@dataclass(frozen=True)
class SfbdConfig:
    iterations: int
    corruption: CorruptionSpec
    solver: SolverConfig
    schedule: NoiseSchedule
    pretrain: TrainConfig
    finetune: TrainConfig
    hidden_widths: tuple[int, ...] = (64, 64, 64)
    clean_injection: bool = False
    seed: int = 0
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        self.corruption.validate_against(self.schedule)
        if abs(self.solver.t_start - self.corruption.zeta) > 1e-12:
            raise ValueError("solver t_start must equal the corruption time zeta")


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    kl_estimate: float
    mmd: float
    mean_err: float
    cov_err: float


@dataclass(frozen=True)
class SfbdState:
    net: DenoiserNet
    k: int
    denoised: Dataset | None
    history: tuple[MetricsRow, ...]
    clean: Dataset | None = None  # retained for injection


def train_denoiser(net: DenoiserNet, points: np.ndarray, cfg: TrainConfig,
                   seed: int) -> tuple[DenoiserNet, list[float]]:
    """Minibatch training of the reconstruction objective; returns the new net
    and the per-epoch mean loss trace."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = rng_stream(seed, "train-denoiser")
    params = net.params
    state = adam_init(params.size, lr=cfg.lr)
    batch = min(cfg.batch_size, n)
    steps_per_epoch = (n + batch - 1) // batch
    total = max(cfg.epochs * steps_per_epoch, 1)
    trace: list[float] = []
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for i0 in range(0, n, batch):
            idx = perm[i0:i0 + batch]
            x0 = points[idx]
            t = cfg.time_sampler.sample(rng, len(idx))
            sig = np.asarray(net.schedule.sigma_at(t))
            x_t = x0 + sig[:, None] * rng.standard_normal(x0.shape)
            live = net.with_params(params)
            loss = denoising_loss_pairs(live, x0, x_t, t)
            if cfg.lr_end is None:
                lr = cfg.lr
            else:
                lr = cfg.lr * (cfg.lr_end / cfg.lr) ** (step / max(total - 1, 1))
            state, params = adam_step(state, params, loss.grad, lr=lr)
            epoch_losses.append(loss.value)
            step += 1
        trace.append(float(np.mean(epoch_losses)))
    return net.with_params(params), trace


def pretrain(clean: Dataset, net_cfg: NetConfig, train_cfg: TrainConfig,
             schedule: NoiseSchedule, seed: int) -> DenoiserNet:
    """Train a fresh denoiser on the clean set.  With zero epochs this returns
    the zero-final-layer initialization, i.e. the identity denoiser."""
    if clean.n == 0:
        raise ValueError("pretrain needs a nonempty clean set")
    net = DenoiserNet.create(net_cfg, schedule, seed=seed)
    if train_cfg.epochs == 0:
        return net
    net, _ = train_denoiser(net, clean.points, train_cfg, seed=seed)
    return net


def evaluate_metrics(iteration: int, points: np.ndarray, cfg: EvalConfig,
                     seed: int = 0) -> MetricsRow:
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rng = rng_stream(seed, "metrics-subsample")
    sub = x if len(x) <= cfg.max_points else x[rng.choice(len(x), cfg.max_points, replace=False)]

    kl = float("nan")
    if cfg.truth is not None:
        kl = gaussian_fit_kl(x, cfg.truth).value
    elif cfg.reference is not None:
        ref = cfg.reference.points
        refsub = ref if len(ref) <= cfg.max_points else \
            ref[rng.choice(len(ref), cfg.max_points, replace=False)]
        kl = kl_knn(refsub, sub, k=cfg.knn_k, n_boot=0, seed=seed).value

    mmd_val = float("nan")
    mean_err = float("nan")
    cov_err = float("nan")
    if cfg.reference is not None:
        ref = cfg.reference.points
        refsub = ref if len(ref) <= cfg.max_points else \
            ref[rng.choice(len(ref), cfg.max_points, replace=False)]
        bw = cfg.mmd_bandwidth if cfg.mmd_bandwidth is not None else median_heuristic(refsub)
        mmd_val = mmd(sub, refsub, bandwidth=bw)
    if cfg.truth is not None:
        target_mean, target_cov = cfg.truth.mean, cfg.truth.cov
    elif cfg.reference is not None:
        target_mean = cfg.reference.points.mean(axis=0)
        target_cov = np.cov(cfg.reference.points.T, bias=False).reshape(x.shape[1], x.shape[1])
    else:
        target_mean = None
    if target_mean is not None:
        mean_err = float(np.linalg.norm(x.mean(axis=0) - target_mean))
        cov = np.cov(x.T, bias=False).reshape(x.shape[1], x.shape[1])
        cov_err = float(np.linalg.norm(cov - target_cov, ord="fro"))
    return MetricsRow(iteration=iteration, kl_estimate=kl, mmd=mmd_val,
                      mean_err=mean_err, cov_err=cov_err)


def _iteration_seed(cfg: SfbdConfig, label: str, k: int) -> int:
    return int(rng_stream(cfg.seed, label, k).integers(2 ** 63))


def sfbd_iteration(state: SfbdState, noisy: Dataset, cfg: SfbdConfig) -> SfbdState:
    """One backward-sampling + denoiser-update round."""
    if state.k >= cfg.iterations:
        raise ValueError(f"state already at iteration {state.k} of {cfg.iterations}")
    k = state.k + 1
    denoised = denoise_dataset(state.net, noisy, cfg.corruption, cfg.solver,
                               seed=_iteration_seed(cfg, "backward", k))
    row = evaluate_metrics(k, denoised.points, cfg.eval, seed=_iteration_seed(cfg, "metrics", k))
    train_points = denoised.points
    if cfg.clean_injection:
        if state.clean is None:
            raise ValueError("clean_injection requires the clean set in the state")
        _check_same_source(state.clean, noisy)
        train_points = np.concatenate([denoised.points, state.clean.points], axis=0)
        denoised = denoised.with_points(train_points, origin=denoised.origin + "+injected-clean")
    net, _ = train_denoiser(state.net, train_points, cfg.finetune,
                            seed=_iteration_seed(cfg, "finetune", k))
    return SfbdState(net=net, k=k, denoised=denoised,
                     history=state.history + (row,), clean=state.clean)


def _check_same_source(clean: Dataset, noisy: Dataset) -> None:
    base = clean.origin.split("+")[0]
    noisy_base = noisy.origin.split("+")[0]
    if base != noisy_base:
        raise ValueError(
            f"clean injection needs clean and noisy sets from the same distribution; "
            f"got {base!r} vs {noisy_base!r}")


def run_sfbd(clean: Dataset, noisy: Dataset, cfg: SfbdConfig,
             run_dir: str | Path | None = None, resume: bool = False) -> SfbdState:
    """Pretrain then iterate; optionally checkpoint every iteration and resume
    from the last complete one."""
    net_cfg = NetConfig(input_dim=noisy.d, hidden_widths=cfg.hidden_widths)
    root = Path(run_dir) if run_dir is not None else None

    start_k = 0
    history: tuple[MetricsRow, ...] = ()
    net = None
    if resume and root is not None:
        net, start_k, history = _load_latest(root, cfg)
    if net is None:
        if clean.n > 0 and cfg.pretrain.epochs > 0:
            net = pretrain(clean, net_cfg, cfg.pretrain, cfg.schedule,
                           seed=_iteration_seed(cfg, "pretrain", 0))
        else:
            net = DenoiserNet.create(net_cfg, cfg.schedule, seed=_iteration_seed(cfg, "init", 0))
        eval_pass = denoise_dataset(net, noisy, cfg.corruption, cfg.solver,
                                    seed=_iteration_seed(cfg, "eval-pass", 0))
        row0 = evaluate_metrics(0, eval_pass.points, cfg.eval,
                                seed=_iteration_seed(cfg, "metrics", 0))
        history = (row0,)
        if root is not None:
            _save_iteration(root, 0, eval_pass, net, row0)
        start_k = 0

    state = SfbdState(net=net, k=start_k, denoised=None, history=history, clean=clean)
    for _ in range(start_k, cfg.iterations):
        state = sfbd_iteration(state, noisy, cfg)
        if root is not None:
            _save_iteration(root, state.k, state.denoised, state.net, state.history[-1])
    if root is not None:
        write_metrics_csv(state.history, root / "metrics.csv")
    return state


def _save_iteration(root: Path, k: int, denoised: Dataset, net: DenoiserNet,
                    row: MetricsRow) -> None:
    d = root / f"iter_{k}"
    d.mkdir(parents=True, exist_ok=True)
    save_dataset(denoised, d / "denoised.f64")
    save_checkpoint(net, d / "net.ckpt")
    write_metrics_csv([row], d / "metrics.csv")


def _load_latest(root: Path, cfg: SfbdConfig):
    """Latest complete iteration directory, or (None, 0, ()) when none exist."""
    rows: list[MetricsRow] = []
    net = None
    k = -1
    while True:
        d = root / f"iter_{k + 1}"
        if not all((d / f).exists() for f in ("denoised.f64", "net.ckpt", "metrics.csv")):
            break
        k += 1
        net = load_checkpoint(d / "net.ckpt")
        rows.extend(read_metrics_csv(d / "metrics.csv"))
    if net is None:
        return None, 0, ()
    return net, k, tuple(rows)


def write_metrics_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow([r.iteration, repr(r.kl_estimate), repr(r.mmd),
                             repr(r.mean_err), repr(r.cov_err)])


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        for rec in reader:
            out.append(MetricsRow(iteration=int(rec[0]), kl_estimate=float(rec[1]),
                                  mmd=float(rec[2]), mean_err=float(rec[3]),
                                  cov_err=float(rec[4])))
    return out
