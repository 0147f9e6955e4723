"""Two-substep training: a global triplet step and a local keypoint/descriptor step per iteration.

Randomness for step ``s`` comes from ``SeedSequence([seed, s])``, so a run
resumed from a checkpoint replays exactly the batches and augmentations of
an uninterrupted run.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import PairPool, Traversal, sample_pairs
from .geometry import PoseSE3, QuantizationSpec, augment_global, augment_local, remove_ground
from .losses import (LossConfig, batch_triplet_loss, chamfer_prob_loss, correspondence_matrix,
                     descriptor_loss, gt_correspondences, mine_batch_hard, p2p_pair_loss,
                     total_local_loss, transform_var)
from .model import EgoNN, NetConfig
from .sparse_ad import functional as F
from .sparse_ad.checkpoint import load_arrays, load_checkpoint, save_checkpoint
from .sparse_ad.tape import Parameter, Tape

CHECKPOINT_NAME = "checkpoint.egonn"


class NumericalError(FloatingPointError):
    """A loss or parameter became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    global_pairs: int = 16
    local_pairs: int = 1
    lr: float = 1e-3
    epochs: int = 1
    steps_per_epoch: int = 0
    seed: int = 0
    checkpoint_every: int = 0
    jitter_sigma: float = 0.1
    cuboid_min: float = 2.0
    cuboid_max: float = 10.0
    local_translation: float = 5.0
    z_min: float = -0.9
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig.toy)

    def __post_init__(self):
        if self.global_pairs < 2:
            raise ValueError("global_pairs must be at least 2 for mining")
        if self.local_pairs < 1 or self.epochs < 0 or self.steps_per_epoch < 0:
            raise ValueError("local_pairs must be >= 1; epochs and steps_per_epoch >= 0")
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError("lr must be a finite non-negative number")

    def total_steps(self, pool: PairPool) -> int:
        per = self.steps_per_epoch or max(1, len(pool.positives) // self.global_pairs)
        return self.epochs * per


class Adam:
    """Adam with per-parameter step counts.

    ``prefix`` namespaces the state records so several optimizers can share
    one checkpoint.
    """

    def __init__(self, named_params: Sequence[tuple[str, Parameter]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, prefix: str = "adam"):
        self.params = dict(named_params)
        self.prefix = prefix
        self.names = {id(p): n for n, p in self.params.items()}
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.t = {n: 0 for n in self.params}

    def step(self, params: Sequence[Parameter]) -> None:
        for p in params:
            n = self.names[id(p)]
            g = p.grad.astype(p.value.dtype)
            self.t[n] += 1
            t = self.t[n]
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            mhat = self.m[n] / (1 - self.b1 ** t)
            vhat = self.v[n] / (1 - self.b2 ** t)
            # overflow is reported below as a NumericalError
            with np.errstate(over="ignore", invalid="ignore"):
                p.value = (p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)
            if not np.all(np.isfinite(p.value)):
                raise NumericalError(f"parameter {n} became non-finite")

    def state_arrays(self) -> dict[str, np.ndarray]:
        out, pre = {}, self.prefix
        for n in self.params:
            out[f"{pre}.m.{n}"] = self.m[n]
            out[f"{pre}.v.{n}"] = self.v[n]
            out[f"{pre}.t.{n}"] = np.array([self.t[n]], dtype=np.float32)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        pre = self.prefix
        for n, p in self.params.items():
            if f"{pre}.m.{n}" in arrays:
                self.m[n] = np.array(arrays[f"{pre}.m.{n}"], dtype=p.value.dtype)
                self.v[n] = np.array(arrays[f"{pre}.v.{n}"], dtype=p.value.dtype)
                self.t[n] = int(arrays[f"{pre}.t.{n}"][0])


@dataclass
class TrainingSet:
    """Ground-removed clouds with their world poses and supervision pools."""

    clouds: list[np.ndarray]
    poses: list[PoseSE3]
    pool: PairPool

    @classmethod
    def from_traversals(cls, traversals: Sequence[Traversal], loss: LossConfig = LossConfig(),
                        z_min: float = -0.9) -> "TrainingSet":
        clouds, poses = [], []
        for t in traversals:
            for s in t.scans:
                clouds.append(remove_ground(s.cloud, z_min))
                poses.append(s.pose)
        pool = sample_pairs(poses, loss.positive_dist, loss.negative_dist)
        return cls(clouds, poses, pool)


@dataclass
class StepRecord:
    step: int
    global_loss: float | None
    triplets: int
    l_c: float | None
    l_p2p: float | None
    l_d: float | None
    correspondences: int


class TrainLog:
    COLUMNS = ["step", "global_loss", "triplets", "l_c", "l_p2p", "l_d", "correspondences"]

    def __init__(self, rows: list[StepRecord] | None = None):
        self.rows: list[StepRecord] = list(rows or [])

    def append(self, row: StepRecord) -> None:
        for f in ("global_loss", "l_c", "l_p2p", "l_d"):
            v = getattr(row, f)
            if v is not None and not math.isfinite(v):
                raise NumericalError(f"non-finite {f} at step {row.step}")
        self.rows.append(row)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in self.COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for r in reader:
                rows.append(StepRecord(int(r["step"]), _parse(r["global_loss"]), int(r["triplets"]),
                                       _parse(r["l_c"]), _parse(r["l_p2p"]), _parse(r["l_d"]),
                                       int(r["correspondences"])))
        return cls(rows)

    def series(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.rows])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(s: str) -> float | None:
    return float(s) if s else None


@dataclass
class GlobalStepResult:
    loss: float | None
    triplets: int
    trunk_grad_norm: float


@dataclass
class LocalStepResult:
    l_c: float
    l_p2p: float
    l_d: float | None
    correspondences: int
    trunk_grad_norm: float


def _grad_norm(params) -> float:
    return float(math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))


def _check_finite(value: float, what: str, ids) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {what} loss on batch ids {list(map(int, ids))}")


def global_substep(model: EgoNN, opt: Adam, ts: TrainingSet, indices: Sequence[int],
                   cfg: TrainConfig, rng: np.random.Generator) -> GlobalStepResult:
    """Global descriptor step: augment, embed, mine batch-hard triplets, update trunk + global branch."""
    groups = model.param_groups()
    params = model.parameters_for("global")
    clouds = [augment_global(ts.clouds[i], rng, cfg.jitter_sigma, (cfg.cuboid_min, cfg.cuboid_max))
              for i in indices]
    pos_mask, neg_mask = ts.pool.masks(indices)
    model.zero_grad()
    with Tape() as tape:
        out = model.forward(clouds, "global")
        triplets = mine_batch_hard(out.global_desc.value, pos_mask, neg_mask)
        if not triplets:
            return GlobalStepResult(None, 0, 0.0)
        loss = batch_triplet_loss(out.global_desc, triplets, cfg.loss.margin)
        value = float(loss.value)
        _check_finite(value, "global", indices)
        tape.backward(loss)
    gn = _grad_norm(groups["trunk"])
    opt.step(params)
    return GlobalStepResult(value, len(triplets), gn)


def relative_transform(pose_a: PoseSE3, aug_a: PoseSE3, pose_b: PoseSE3, aug_b: PoseSE3) -> PoseSE3:
    """Map from augmented frame a to augmented frame b: ``A_b ∘ P_b⁻¹ ∘ P_a ∘ A_a⁻¹``."""
    return aug_b.compose(pose_b.inverse()).compose(pose_a).compose(aug_a.inverse())


def local_losses(model: EgoNN, cloud_pairs, transforms, cfg: TrainConfig):
    """Forward a list of ``(cloud_a, cloud_b)`` pairs and return summed (L_C, L_P2P, L_D, n_corr)."""
    flat = [c for pair in cloud_pairs for c in pair]
    out = model.forward(flat, "local")
    loc = out.local
    lc = lp = ld = None
    n_corr = 0
    for k, ((ca, cb), T) in enumerate(zip(cloud_pairs, transforms)):
        ra, rb = loc.row_indices(2 * k), loc.row_indices(2 * k + 1)
        qa = F.take_rows(loc.positions, ra)
        qb = F.take_rows(loc.positions, rb)
        sa = F.take_rows(loc.saliency, ra)
        sb = F.take_rows(loc.saliency, rb)
        c = chamfer_prob_loss(qa, transform_var(qb, T.inverse()), sa, sb)
        p = p2p_pair_loss(qa, ca, qb, cb)
        rows, nn = gt_correspondences(qa.value, qb.value, T, cfg.loss.corr_radius)
        lc = c if lc is None else F.add(lc, c)
        lp = p if lp is None else F.add(lp, p)
        if len(rows):
            n_corr += len(rows)
            C = correspondence_matrix(F.take_rows(loc.descriptors, ra),
                                      F.take_rows(loc.descriptors, rb), rows, nn)
            d = descriptor_loss(C, cfg.loss.tau)
            ld = d if ld is None else F.add(ld, d)
    return lc, lp, ld, n_corr


def local_substep(model: EgoNN, opt: Adam, ts: TrainingSet, pairs: Sequence[tuple[int, int]],
                  cfg: TrainConfig, rng: np.random.Generator) -> LocalStepResult:
    """Local step on positive pairs: augment, keypoint + descriptor losses, update trunk + local branch."""
    groups = model.param_groups()
    params = model.parameters_for("local")
    cloud_pairs, transforms = [], []
    for i, j in pairs:
        ca, aa = augment_local(ts.clouds[i], rng, cfg.local_translation)
        cb, ab = augment_local(ts.clouds[j], rng, cfg.local_translation)
        cloud_pairs.append((ca, cb))
        transforms.append(relative_transform(ts.poses[i], aa, ts.poses[j], ab))
    model.zero_grad()
    ids = [k for pair in pairs for k in pair]
    with Tape() as tape:
        lc, lp, ld, n_corr = local_losses(model, cloud_pairs, transforms, cfg)
        total = total_local_loss((lc, lp, ld), cfg.loss)
        _check_finite(float(total.value), "local", ids)
        tape.backward(total)
    gn = _grad_norm(groups["trunk"])
    opt.step(params)
    return LocalStepResult(float(lc.value), float(lp.value),
                           None if ld is None else float(ld.value), n_corr, gn)


def step_rngs(seed: int, step: int) -> tuple[np.random.Generator, np.random.Generator]:
    g, l = np.random.SeedSequence([seed, step]).spawn(2)
    return np.random.default_rng(g), np.random.default_rng(l)


def sample_global_batch(pool: PairPool, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    k = min(n_pairs, len(pool.positives))
    pick = rng.choice(len(pool.positives), size=k, replace=False)
    return pool.positives[np.sort(pick)].reshape(-1)


def sample_local_pairs(pool: PairPool, n_pairs: int, rng: np.random.Generator):
    pick = rng.choice(len(pool.positives), size=min(n_pairs, len(pool.positives)), replace=False)
    return [tuple(int(v) for v in pool.positives[k]) for k in np.sort(pick)]


# ---------------------------------------------------------------- config records

_NET_INT_FIELDS = ("global_width", "global_hidden", "global_dim", "local_width", "position_hidden",
                   "saliency_hidden", "desc_hidden", "desc_dim", "scale", "theta_stride_cap")


def net_config_records(cfg: NetConfig) -> dict[str, np.ndarray]:
    rec = {f"net.{k}": np.array([getattr(cfg, k)], dtype=np.float32) for k in _NET_INT_FIELDS}
    rec["net.widths"] = np.array(cfg.widths, dtype=np.float32)
    rec["net.theta_wrap"] = np.array([float(cfg.theta_wrap)], dtype=np.float32)
    rec["net.gem_p"] = np.array([cfg.gem_p], dtype=np.float32)
    q = cfg.quant
    rec["net.quant"] = np.array([q.rho_step, q.n_theta, q.z_step], dtype=np.float32)
    return rec


def net_config_from_records(rec: dict[str, np.ndarray]) -> NetConfig:
    kw = {k: int(rec[f"net.{k}"][0]) for k in _NET_INT_FIELDS}
    q = rec["net.quant"].astype(np.float64)
    # steps were stored as float32; recover the decimal values they came from
    quant = QuantizationSpec.from_bins(float(f"{q[0]:.6g}"), int(q[1]), float(f"{q[2]:.6g}"))
    return NetConfig(widths=tuple(int(w) for w in rec["net.widths"]),
                     theta_wrap=bool(rec["net.theta_wrap"][0]), gem_p=float(f"{rec['net.gem_p'][0]:.6g}"),
                     quant=quant, **kw)


def substep_optimizers(model: EgoNN, lr: float) -> dict[str, Adam]:
    """One Adam per substep over the parameters that substep updates.

    Trunk weights get separate moment estimates for the two losses, so the
    larger local-loss gradients do not shrink the global substep's steps.
    """
    opts = {}
    for mode in ("global", "local"):
        ids = {id(p) for p in model.parameters_for(mode)}
        opts[mode] = Adam([(n, p) for n, p in model.named_parameters() if id(p) in ids], lr,
                          prefix=f"adam.{mode}")
    return opts


def save_training_state(path, model: EgoNN, opts: dict[str, Adam] | None, step: int) -> None:
    extra = net_config_records(model.cfg)
    extra["train.step"] = np.array([step], dtype=np.float32)
    for opt in (opts or {}).values():
        extra.update(opt.state_arrays())
    save_checkpoint(path, model, extra)


def load_model(path, dtype=np.float32) -> tuple[EgoNN, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns it with the non-parameter records."""
    arrays = load_arrays(path)
    cfg = net_config_from_records(arrays) if "net.widths" in arrays else NetConfig.toy()
    model = EgoNN(cfg, dtype=dtype)
    extra = load_checkpoint(path, model)
    return model, extra


@dataclass
class TrainResult:
    model: EgoNN
    log: TrainLog
    optimizers: dict[str, Adam]
    steps: int


def train(cfg: TrainConfig, ts: TrainingSet, out_dir=None, resume: str | Path | None = None,
          progress: Callable[[StepRecord], None] | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Alternate global and local substeps for ``cfg.epochs`` epochs.

    With ``out_dir`` set, writes ``train_log.csv``, a timing log and
    checkpoints (every ``checkpoint_every`` steps and at the end). ``resume``
    continues from a checkpoint written by a run with the same configuration.
    ``max_steps`` stops early (the log and checkpoint reflect the stop).
    """
    if len(ts.pool.positives) == 0 or not any(len(n) for n in ts.pool.negatives):
        raise ValueError("training set needs positive and negative pairs")
    model = EgoNN(cfg.net, seed=cfg.seed)
    opts = substep_optimizers(model, cfg.lr)
    log = TrainLog()
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        extra = load_checkpoint(resume, model)
        for opt in opts.values():
            opt.load_state(extra)
        start = int(extra["train.step"][0])
        prev_log = Path(resume).parent / "train_log.csv"
        if prev_log.exists():
            log = TrainLog([r for r in TrainLog.read_csv(prev_log).rows if r.step < start])
    total = cfg.total_steps(ts.pool)
    stop = total if max_steps is None else min(total, max_steps)
    timing = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model.train()
    step = start
    for step in range(start, stop):
        t0 = time.perf_counter()
        rng_g, rng_l = step_rngs(cfg.seed, step)
        batch = sample_global_batch(ts.pool, cfg.global_pairs, rng_g)
        g = global_substep(model, opts["global"], ts, batch, cfg, rng_g)
        pairs = sample_local_pairs(ts.pool, cfg.local_pairs, rng_l)
        loc = local_substep(model, opts["local"], ts, pairs, cfg, rng_l)
        row = StepRecord(step, g.loss, g.triplets, loc.l_c, loc.l_p2p, loc.l_d, loc.correspondences)
        log.append(row)
        timing.append((step, time.perf_counter() - t0))
        if progress is not None:
            progress(row)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_training_state(out / CHECKPOINT_NAME, model, opts, step + 1)
            log.write_csv(out / "train_log.csv")
    done = max(stop, start)
    if out is not None:
        save_training_state(out / CHECKPOINT_NAME, model, opts, done)
        log.write_csv(out / "train_log.csv")
        with open(out / "train_times.log", "a") as fh:
            fh.write(f"# run finished {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
            for s, dt in timing:
                fh.write(f"{s} {dt:.3f}\n")
    return TrainResult(model, log, opts, done)

