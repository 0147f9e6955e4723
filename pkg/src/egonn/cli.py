"""Command-line interface: ``python -m egonn <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Failures print a single ``ERROR <kind> <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (DataError, DatasetSpec, ScanSpec, WorldSpec, generate_dataset, load_cloud,
                   load_traversal, read_manifest, save_traversal)
from .geometry import QuantizationSpec, remove_ground, se3_relative
from .gradcheck_suite import run_suite
from .localization import SELECTIONS, Features, register_pair
from .losses import LossConfig
from .model import KeypointSet, NetConfig
from .registration import RansacConfig, pose_errors
from .retrieval import DatabaseError, DescriptorDB, evaluate_recall, query_topk
from .sparse_ad.checkpoint import CheckpointError, load_arrays, save_arrays
from .trainer import NumericalError, TrainConfig, TrainingSet, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- run config

@dataclass(frozen=True)
class EvalConfig:
    keypoints: int = 128
    top_n: str = "1,5"
    thresholds: str = "5,20"
    coarse_threshold: float = 5.0
    selection: str = "saliency"
    mutual: bool = False
    max_iters: int = 2000
    inlier_radius: float = 0.5
    min_inliers: int = 6
    confidence: float = 0.999
    batch_size: int = 16
    z_min: float = -0.9


@dataclass(frozen=True)
class NetSection:
    scale: int = 2
    theta_wrap: bool = True
    theta_stride_cap: int = 32
    rho_step: float = 0.3
    n_theta: int = 384
    z_step: float = 0.2
    gem_p: float = 3.0

    def build(self) -> NetConfig:
        return NetConfig(scale=self.scale, theta_wrap=self.theta_wrap,
                         theta_stride_cap=self.theta_stride_cap, gem_p=self.gem_p,
                         quant=QuantizationSpec.from_bins(self.rho_step, self.n_theta, self.z_step))


@dataclass(frozen=True)
class TrainSection:
    global_pairs: int = 16
    local_pairs: int = 1
    lr: float = 1e-3
    epochs: int = 1
    steps_per_epoch: int = 0
    checkpoint_every: int = 0
    jitter_sigma: float = 0.1
    cuboid_min: float = 2.0
    cuboid_max: float = 10.0
    local_translation: float = 5.0
    z_min: float = -0.9


@dataclass(frozen=True)
class DataSection:
    extent: float = 400.0
    road_radius: float = 110.0
    n_poles: int = 900
    n_boxes: int = 110
    n_scatter: int = 250
    surface_spacing: float = 0.15
    max_range: float = 40.0
    azimuth_resolution: float = 1.0
    rings: int = 24
    noise_sigma: float = 0.02
    train_spacing: float = 1.5
    train_count: int = 0
    db_count: int = 200
    db_spacing: float = 1.5
    query_stride: int = 2
    perturb_translation: float = 1.0
    perturb_yaw: float = 15.0
    layout: str = "xyz"

    def build(self) -> DatasetSpec:
        world = WorldSpec(extent=self.extent, road_radius=self.road_radius, n_poles=self.n_poles,
                          n_boxes=self.n_boxes, n_scatter=self.n_scatter, spacing=self.surface_spacing)
        scan = ScanSpec(max_range=self.max_range, azimuth_resolution=self.azimuth_resolution,
                        rings=self.rings, noise_sigma=self.noise_sigma)
        return DatasetSpec(world, scan, self.train_spacing, self.train_count, self.db_count,
                           self.db_spacing, self.query_stride, self.perturb_translation,
                           self.perturb_yaw)


SECTIONS = {"net": NetSection, "loss": LossConfig, "train": TrainSection, "data": DataSection,
            "eval": EvalConfig}


def _convert(kind, text: str):
    text = text.strip()
    if kind in (bool, "bool"):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


@dataclass
class RunConfig:
    """Key = value settings in sections ``net``, ``loss``, ``train``, ``data``, ``eval``."""

    sections: dict = field(default_factory=lambda: {k: cls() for k, cls in SECTIONS.items()})
    seed: int = 0

    @classmethod
    def load(cls, path: str | None, overrides: list[str] | None = None, seed: int = 0) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if path is not None:
            if not Path(path).exists():
                raise DataError(f"config file {path} not found")
            parser.read(path)
        for item in overrides or []:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise UsageError(f"override {item!r} must look like section.key=value")
            key, val = item.split("=", 1)
            sec, name = key.split(".", 1)
            if not parser.has_section(sec):
                parser.add_section(sec)
            parser.set(sec, name, val)
        cfg = cls(seed=seed)
        for sec in parser.sections():
            if sec not in SECTIONS:
                raise UsageError(f"unknown config section [{sec}]")
            known = {f.name: f for f in fields(SECTIONS[sec])}
            updates = {}
            for name, val in parser.items(sec):
                if name not in known:
                    raise UsageError(f"unknown config key {sec}.{name}")
                try:
                    updates[name] = _convert(known[name].type, val)
                except ValueError as exc:
                    raise UsageError(f"{sec}.{name}: {exc}") from None
            try:
                cfg.sections[sec] = replace(cfg.sections[sec], **updates)
            except ValueError as exc:
                raise UsageError(f"[{sec}] {exc}") from None
        try:
            cfg.train_config()
            cfg["data"].build()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return cfg

    def __getitem__(self, sec: str):
        return self.sections[sec]

    def ini_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# seed = {self.seed}\n")
        for sec, obj in self.sections.items():
            buf.write(f"[{sec}]\n")
            for f in fields(obj):
                buf.write(f"{f.name} = {getattr(obj, f.name)}\n")
            buf.write("\n")
        return buf.getvalue()

    def echo(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_config.ini").write_text(self.ini_text())

    def train_config(self) -> TrainConfig:
        t = self["train"]
        return TrainConfig(**{f.name: getattr(t, f.name) for f in fields(t)}, seed=self.seed,
                           loss=self["loss"], net=self["net"].build())

    def ransac(self, seed: int) -> RansacConfig:
        e = self["eval"]
        return RansacConfig(max_iters=e.max_iters, inlier_radius=e.inlier_radius,
                            min_inliers=e.min_inliers, confidence=e.confidence, seed=seed)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("EGONN_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- feature files

def save_features(path: Path, descriptor: np.ndarray, ks: KeypointSet) -> None:
    save_arrays(path, {"global": descriptor, "positions": ks.positions, "raw": ks.raw,
                       "saliency": ks.saliency, "descriptors": ks.descriptors,
                       "centers": ks.supervoxel_centers})


def load_features(path: Path) -> tuple[np.ndarray, KeypointSet]:
    a = load_arrays(path)
    try:
        f = {k: a[k].astype(np.float64) for k in
             ("global", "positions", "raw", "saliency", "descriptors", "centers")}
    except KeyError as exc:
        raise DataError(f"{path}: missing record {exc}") from None
    return f["global"], KeypointSet(f["positions"], f["raw"], f["saliency"], f["descriptors"],
                                    f["centers"])


def feature_path(directory: Path, index: int) -> Path:
    return Path(directory) / f"{index:06d}.egofeat"


def load_feature_dir(directory: Path, manifest) -> Features:
    entries = read_manifest(manifest)
    descs, kps = [], []
    for e in entries:
        p = feature_path(directory, e.index)
        if not p.exists():
            raise DataError(f"missing feature file {p}")
        d, ks = load_features(p)
        descs.append(d)
        kps.append(ks)
    return Features(np.vstack(descs) if descs else np.zeros((0, 256)), kps)


# ---------------------------------------------------------------- commands

def cmd_generate_data(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    cfg.echo(out)
    spec = cfg["data"].build()
    trav = generate_dataset(spec, cfg.seed)
    for name, t in trav.items():
        save_traversal(t, out, name, cfg["data"].layout)
    print(" ".join(f"{name}={len(t)}" for name, t in trav.items()))


def cmd_train(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    cfg.echo(out)
    data = Path(args.data)
    layout = cfg["data"].layout
    manifests = [data / "train_a.csv", data / "train_b.csv"]
    for m in manifests:
        if not m.exists():
            raise DataError(f"training manifest {m} not found")
    tcfg = cfg.train_config()
    ts = TrainingSet.from_traversals([load_traversal(m, layout) for m in manifests], tcfg.loss,
                                     tcfg.z_min)
    res = train(tcfg, ts, out_dir=out, resume=args.resume)
    print(f"steps={res.steps} checkpoint={out / 'checkpoint.egonn'}")


def cmd_extract(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    cfg.echo(out)
    model, _ = load_model(args.checkpoint)
    e = cfg["eval"]
    entries = read_manifest(args.manifest)
    bs = e.batch_size
    for s in range(0, len(entries), bs):
        chunk = entries[s:s + bs]
        clouds = [remove_ground(load_cloud(x.cloud_path, cfg["data"].layout), e.z_min) for x in chunk]
        g, kps = model.describe(clouds, "both", bs)
        for x, d, ks in zip(chunk, g, kps):
            save_features(feature_path(out, x.index), d, ks)
    print(f"extracted={len(entries)}")


def cmd_build_db(args, cfg: RunConfig) -> None:
    entries = read_manifest(args.manifest)
    db = DescriptorDB()
    for x in entries:
        d, _ = load_features(feature_path(Path(args.features), x.index))
        db.add(x.index, d, x.pose, str(x.cloud_path))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    db.save(args.out)
    print(f"entries={len(db)}")


def _query_inputs(args):
    db = DescriptorDB.load(args.db)
    entries = read_manifest(args.query_manifest)
    feats = load_feature_dir(Path(args.query_features), args.query_manifest)
    return db, entries, feats


def cmd_evaluate_retrieval(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    cfg.echo(out)
    db, entries, feats = _query_inputs(args)
    ns = _int_list(cfg["eval"].top_n)
    ths = _float_list(cfg["eval"].thresholds)
    report = evaluate_recall(db, [(d, x.pose) for d, x in zip(feats.descriptors, entries)], ns, ths)
    report.write_csv(out / "recall.csv")
    sys.stdout.write(report.csv_text())


def _localize_rows(args, cfg: RunConfig):
    db, entries, feats = _query_inputs(args)
    e = cfg["eval"]
    k = e.keypoints
    db_dir = Path(args.db_features)

    def one(qi: int):
        desc, kq = feats.descriptors[qi], feats.keypoints[qi]
        top = int(query_topk(db, desc, 1)[0])
        _, kd = load_features(feature_path(db_dir, top))
        rng = np.random.default_rng([cfg.seed, qi])
        res = register_pair(kq, kd, k, e.selection, cfg.ransac(int(rng.integers(2**31))), rng,
                            e.mutual)
        return qi, top, res

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one, range(len(entries))))
    return db, entries, results


def cmd_localize(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    cfg.echo(out)
    _, entries, results = _localize_rows(args, cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query", "top1_id", "success", "inliers"] + [f"T{r}{c}" for r in range(3) for c in range(4)])
    for qi, top, res in results:
        w.writerow([entries[qi].index, top, int(res.success), len(res.inliers)]
                   + [f"{v:.9g}" for v in res.pose.as_3x4().reshape(-1)])
    (out / "localize.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())


def cmd_evaluate_pose(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    cfg.echo(out)
    db, entries, results = _localize_rows(args, cfg)
    pose_of = {x.id: x.pose for x in db.entries}
    thr = cfg["eval"].coarse_threshold
    rows, coarse, succ, rtes, rres = [], 0, 0, [], []
    for qi, top, res in results:
        gt_pose = entries[qi].pose
        dist = float(np.linalg.norm(pose_of[top].translation - gt_pose.translation))
        err = pose_errors(res.pose, se3_relative(pose_of[top], gt_pose))
        ok_coarse = dist <= thr
        ok = ok_coarse and res.success and err.success
        coarse += ok_coarse
        if ok:
            succ += 1
            rtes.append(err.rte)
            rres.append(err.rre)
        rows.append([entries[qi].index, top, f"{dist:.6f}", int(ok_coarse), int(ok),
                     f"{err.rte:.6f}", f"{err.rre:.6f}"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query", "top1_id", "coarse_dist_m", "coarse_ok", "success", "rte_m", "rre_deg"])
    w.writerows(rows)
    (out / "pose_queries.csv").write_text(buf.getvalue())
    summary = io.StringIO()
    w = csv.writer(summary, lineterminator="\n")
    w.writerow(["queries", "coarse_successes", "pose_successes", "success_rate", "mean_rte_m",
                "mean_rre_deg"])
    rate = succ / coarse if coarse else 0.0
    w.writerow([len(entries), coarse, succ, f"{rate:.6f}",
                f"{np.mean(rtes):.6f}" if rtes else "nan", f"{np.mean(rres):.6f}" if rres else "nan"])
    (out / "pose.csv").write_text(summary.getvalue())
    sys.stdout.write(summary.getvalue())


def cmd_gradcheck(args, cfg: RunConfig) -> None:
    out = Path(args.out) if args.out else None
    results = run_suite(seed=cfg.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["primitive", "max_rel_error", "tolerance", "skipped", "pass"])
    worst_fail = []
    for name, err, tol, skipped in results:
        ok = err < tol
        w.writerow([name, f"{err:.3e}", f"{tol:g}", skipped, int(ok)])
        if not ok:
            worst_fail.append(name)
    if out is not None:
        cfg.echo(out)
        (out / "gradcheck.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    if worst_fail:
        raise NumericalError(f"gradient check failed for {','.join(worst_fail)}")


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "extract": cmd_extract,
    "build-db": cmd_build_db,
    "localize": cmd_localize,
    "evaluate-retrieval": cmd_evaluate_retrieval,
    "evaluate-pose": cmd_evaluate_pose,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="egonn", description="Point-cloud relocalization with global and local features.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration value (repeatable)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("generate-data", help="write synthetic traversals and manifests")
    common(sp)
    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", required=True, help="directory from generate-data")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp = sub.add_parser("extract", help="per-cloud global descriptor and keypoints")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp = sub.add_parser("build-db", help="EGODB1 database from extracted features")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--features", required=True)
    for name in ("localize", "evaluate-retrieval", "evaluate-pose"):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--db", required=True)
        sp.add_argument("--query-manifest", required=True)
        sp.add_argument("--query-features", required=True)
        if name != "evaluate-retrieval":
            sp.add_argument("--db-features", required=True)
            sp.add_argument("--keypoints", type=int)
        else:
            sp.add_argument("--top-n")
            sp.add_argument("--thresholds")
    sp = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    common(sp, out_required=False)
    return p


def _apply_flags(cfg: RunConfig, args) -> None:
    """Fold per-command flags into the eval section so the echoed config shows what ran."""
    upd = {}
    if getattr(args, "keypoints", None) is not None:
        if args.keypoints < 1:
            raise UsageError("--keypoints must be at least 1")
        upd["keypoints"] = args.keypoints
    for flag in ("top_n", "thresholds"):
        if getattr(args, flag, None):
            upd[flag] = args.__dict__[flag]
    cfg.sections["eval"] = replace(cfg["eval"], **upd)
    _int_list(cfg["eval"].top_n)
    _float_list(cfg["eval"].thresholds)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        if args.seed < 0 or args.seed >= 1 << 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg = RunConfig.load(args.config, args.set, args.seed)
        _apply_flags(cfg, args)
        if cfg["eval"].selection not in SELECTIONS:
            raise UsageError(f"eval.selection must be one of {SELECTIONS}")
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (NumericalError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (DataError, DatabaseError, CheckpointError, FileNotFoundError, IsADirectoryError,
            UnicodeDecodeError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except ValueError as exc:
        return _fail(EXIT_DATA, "data", exc)


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    sys.stderr.write(f"ERROR {kind} {msg}\n")
    return code
