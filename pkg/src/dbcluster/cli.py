"""Experiment command line: train-fcae, cluster, train-dbc, simulate-chain, eval.

Every training subcommand writes its artifacts into a run directory guarded
by a lock file, together with a resolved-config snapshot. Exit code is 0 only
when all artifacts were written and no failure marker exists.
"""
import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from .chain import ChainState, chain_run
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, SyntheticSpec, load_idx, make_synthetic
from .dbc import DbcConfig, hard_assign, soft_assign, train_dbc
from .errors import ConfigurationError
from .metrics import acc, kmeans, nmi
from .network import build_network, train_fcae

FAILURE_MARKER = "FAILED"


def _limit_threads():
    cap = os.environ.get("DBC_NUM_THREADS")
    if not cap:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(cap))
    except Exception:
        pass


def _overrides_from_args(args):
    over = {}
    if args.seed is not None:
        over["run.seed"] = args.seed
    if args.out is not None:
        over["run.out"] = args.out
    if args.deterministic:
        over["run.deterministic"] = "true"
    if getattr(args, "dataset", None):
        if args.dataset == "synthetic":
            over["dataset.source"] = "synthetic"
        else:
            over["dataset.source"] = "idx"
            over["dataset.images"] = args.dataset
    if getattr(args, "labels", None):
        over["dataset.labels"] = args.labels
    if getattr(args, "preset", None):
        over["network.preset"] = args.preset
    if getattr(args, "alpha", None) is not None:
        over["dbc.alpha"] = args.alpha
    if getattr(args, "norm_mode", None):
        over["dbc.normalization"] = args.norm_mode
    return over


def load_dataset(cfg):
    if cfg.dataset_source == "synthetic":
        spec = SyntheticSpec(
            k=cfg.synthetic_k, side=cfg.synthetic_side,
            samples_per_cluster=cfg.synthetic_samples_per_cluster,
            jitter=cfg.synthetic_jitter, noise=cfg.synthetic_noise,
            seed=cfg.synthetic_seed)
        return make_synthetic(spec)
    if not cfg.dataset_images:
        raise ConfigurationError("dataset.images is required for idx datasets")
    if not Path(cfg.dataset_images).exists():
        raise ConfigurationError(f"dataset file not found: {cfg.dataset_images}")
    labels = cfg.dataset_labels or None
    if labels and not Path(labels).exists():
        raise ConfigurationError(f"label file not found: {labels}")
    ds = load_idx(cfg.dataset_images, labels)
    if ds.k == 0:
        ds.k = cfg.dataset_k
    return ds


class RunDir:
    """Run directory with a lock file, config snapshot, and failure marker."""

    def __init__(self, path, cfg):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = self.path / ".lock"
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise ConfigurationError(
                f"run directory {path} is locked by another process")
        marker = self.path / FAILURE_MARKER
        if marker.exists():
            marker.unlink()
        (self.path / "config.txt").write_text(cfg.dump())

    def __enter__(self):
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            (self.path / FAILURE_MARKER).write_text(f"{exc_type.__name__}: {exc}\n")
        self.lock.unlink(missing_ok=True)
        return False


def write_csv(path, header, rows, float_fmt="%.6g"):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([float_fmt % v if isinstance(v, float) else v
                        for v in row])


def write_matrix_csv(path, mat, prefix):
    mat = np.asarray(mat)
    header = [f"{prefix}{j}" for j in range(mat.shape[1])]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in mat:
            w.writerow([repr(float(v)) for v in row])


def cmd_train_fcae(cfg):
    ds = load_dataset(cfg)
    with RunDir(cfg.run_out, cfg) as out:
        model = build_network(cfg.network_preset, seed=cfg.run_seed)
        report = train_fcae(model, ds, cfg.fcae_epochs, cfg.fcae_batch_size,
                            cfg.fcae_lr, cfg.fcae_momentum, cfg.run_seed)
        save_checkpoint(model, out / "fcae.ckpt")
        write_csv(out / "fcae_loss.csv", ["epoch", "loss"],
                  [(e + 1, repr(l)) for e, l in enumerate(report.epoch_losses)])
        print(f"trained {cfg.fcae_epochs} epochs; "
              f"final loss {report.epoch_losses[-1]:.4f}" if report.epoch_losses
              else "no epochs requested")
    return 0


def cmd_cluster(cfg, checkpoint=None, raw=False):
    ds = load_dataset(cfg)
    k = ds.k or cfg.dataset_k
    with RunDir(cfg.run_out, cfg) as out:
        if raw:
            feats = ds.images.reshape(len(ds), -1).astype(np.float64)
        else:
            if checkpoint is None or not Path(checkpoint).exists():
                raise ConfigurationError("a checkpoint is required unless --raw")
            model = load_checkpoint(checkpoint)
            feats = model.encode(ds.images, mode="eval").astype(np.float64)
            write_matrix_csv(out / "features.csv", feats, "z")
        centers, labels, obj = kmeans(feats, k, restarts=cfg.kmeans_restarts,
                                      seed=cfg.run_seed)
        write_matrix_csv(out / "centers.csv", centers, "c")
        rows = [("objective", repr(obj))]
        if ds.labels is not None:
            a, n = acc(labels, ds.labels), nmi(labels, ds.labels)
            rows += [("acc", f"{a:.4f}"), ("nmi", f"{n:.4f}")]
            print(f"ACC {a:.4f}  NMI {n:.4f}")
        write_csv(out / "metrics.csv", ["metric", "value"], rows)
        np.savetxt(out / "labels.csv", labels, fmt="%d", header="label",
                   comments="")
    return 0


def cmd_train_dbc(cfg, checkpoint=None, random_init=False, half_trained=False):
    ds = load_dataset(cfg)
    k = ds.k or cfg.dataset_k
    with RunDir(cfg.run_out, cfg) as out:
        if random_init or half_trained:
            model = build_network(cfg.network_preset, seed=cfg.run_seed)
            if half_trained:
                train_fcae(model, ds, max(cfg.fcae_epochs // 2, 1),
                           cfg.fcae_batch_size, cfg.fcae_lr, cfg.fcae_momentum,
                           cfg.run_seed)
        else:
            if checkpoint is None or not Path(checkpoint).exists():
                raise ConfigurationError(
                    "an FCAE checkpoint is required unless --random-init "
                    "or --half-trained")
            model = load_checkpoint(checkpoint)
        z = model.encode(ds.images, mode="eval").astype(np.float64)
        centers, _, _ = kmeans(z, k, restarts=cfg.kmeans_restarts,
                               seed=cfg.run_seed)
        config = DbcConfig(
            k=k, alpha=cfg.dbc_alpha, v=cfg.dbc_v, epochs=cfg.dbc_epochs,
            iters_per_epoch=cfg.dbc_iters_per_epoch,
            batch_size=cfg.dbc_batch_size, lr=cfg.dbc_lr,
            momentum=cfg.dbc_momentum, normalization=cfg.dbc_normalization,
            stop_delta=cfg.dbc_stop_delta, bn_mode=cfg.dbc_bn_mode,
            hist_cluster=cfg.dbc_hist_cluster, hist_bins=cfg.dbc_hist_bins)

        def per_epoch(entry):
            edges, counts = entry["histogram"]
            write_csv(out / f"hist_epoch_{entry['epoch']}.csv",
                      ["bin_low", "bin_high", "count"],
                      [(repr(float(lo)), repr(float(hi)), int(c))
                       for lo, hi, c in zip(edges[:-1], edges[1:], counts)])
            print(f"epoch {entry['epoch']:3d}  kl {entry['kl_loss']:.4f}  "
                  f"acc {entry['acc']:.4f}  nmi {entry['nmi']:.4f}  "
                  f"changed {entry['changed_fraction']:.4f}")

        centers, report = train_dbc(model, ds, config, centers,
                                    seed=cfg.run_seed, callback=per_epoch)
        write_csv(out / "metrics.csv",
                  ["epoch", "kl_loss", "acc", "nmi", "changed_fraction"],
                  [(e["epoch"], repr(e["kl_loss"]), f"{e['acc']:.4f}",
                    f"{e['nmi']:.4f}", repr(e["changed_fraction"]))
                   for e in report.epochs])
        write_matrix_csv(out / "centers.csv", centers, "c")
        save_checkpoint(model, out / "dbc.ckpt")
    return 0


def cmd_simulate_chain(alpha, rows_text, steps, out_path=None, tol=1e-9):
    if alpha <= 1:
        raise ConfigurationError("alpha must be > 1")
    rows = [[float(v) for v in row.split(",")]
            for row in rows_text.split(";") if row.strip()]
    state = ChainState(np.asarray(rows), alpha)
    run = chain_run(state, steps, tol)
    lines = []
    m, k = state.rows.shape
    header = ["t"] + [f"row{i}_s{j}" for i in range(m) for j in range(k)]
    for t, snap in enumerate(run.trajectory):
        lines.append([t] + [repr(float(v)) for v in snap.reshape(-1)])
    if out_path:
        write_csv(out_path, header, lines)
    else:
        print(",".join(header))
        for row in lines:
            print(",".join(str(v) for v in row))
    return 0


def cmd_eval(pred_path, cfg):
    ds = load_dataset(cfg)
    if ds.labels is None:
        raise ConfigurationError("eval needs a dataset with ground-truth labels")
    pred = np.loadtxt(pred_path, dtype=np.int64, skiprows=1)
    print(f"ACC {acc(pred, ds.labels):.4f}  NMI {nmi(pred, ds.labels):.4f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dbcluster",
                                description="Deep boosted clustering experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--out")
        sp.add_argument("--print-config", action="store_true")
        if dataset:
            sp.add_argument("--dataset",
                            help="'synthetic' or a path to IDX images")
            sp.add_argument("--labels", help="path to IDX labels")
            sp.add_argument("--preset", help="network preset name")

    sp = sub.add_parser("train-fcae", help="stage-I reconstruction training")
    common(sp)

    sp = sub.add_parser("cluster", help="k-means on features or raw pixels")
    common(sp)
    sp.add_argument("--checkpoint", help="FCAE checkpoint to extract features")
    sp.add_argument("--raw", action="store_true",
                    help="cluster raw pixels instead of features")

    sp = sub.add_parser("train-dbc", help="stage-II joint boosted training")
    common(sp)
    sp.add_argument("--checkpoint", help="FCAE checkpoint for initialization")
    sp.add_argument("--random-init", action="store_true")
    sp.add_argument("--half-trained", action="store_true")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--norm-mode",
                    choices=["constant", "score-sum", "boosted-sum"])

    sp = sub.add_parser("simulate-chain", help="exact boosting dynamics")
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--rows", required=True,
                    help="semicolon-separated rows of comma-separated scores")
    sp.add_argument("--steps", type=int, default=30)
    sp.add_argument("--out")

    sp = sub.add_parser("eval", help="metrics for stored predicted labels")
    common(sp)
    sp.add_argument("--pred", required=True, help="predicted labels CSV")
    return p


def main(argv=None):
    _limit_threads()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate-chain":
            return cmd_simulate_chain(args.alpha, args.rows, args.steps, args.out)
        cfg = RunConfig.load(args.config, _overrides_from_args(args))
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return 0
        if args.command == "train-fcae":
            return cmd_train_fcae(cfg)
        if args.command == "cluster":
            return cmd_cluster(cfg, args.checkpoint, args.raw)
        if args.command == "train-dbc":
            return cmd_train_dbc(cfg, args.checkpoint, args.random_init,
                                 args.half_trained)
        if args.command == "eval":
            return cmd_eval(args.pred, cfg)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
