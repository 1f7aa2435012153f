"""Command-line entry points.

Every subcommand writes into a fresh ``<runs>/<run-id>/`` directory, where the
run id is the seed plus a prefix of the resolved-config digest. ``<runs>``
defaults to ``./runs`` and can be moved with ``NARGACT_RUNS_DIR``. Existing
run directories are never touched.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, config, datasets, training
from .autodiff import make_rng
from .formats import Checkpoint, GridFile, MetricLog, write_csv, write_heatmap
from .inner import eval_on_grid
from .outer import param_count

log = logging.getLogger("nargact")

TRAINING_COMMANDS = ("pretrain", "train", "retrain", "baseline")


class RunExistsError(FileExistsError):
    pass


class CLIError(RuntimeError):
    pass


def runs_root() -> Path:
    return Path(os.environ.get("NARGACT_RUNS_DIR", "runs"))


def open_run(cfg: config.RunConfig) -> Path:
    root = runs_root()
    path = root / cfg.run_id()
    if path.exists():
        raise RunExistsError(f"run directory already exists: {path}")
    path.mkdir(parents=True)
    (path / "resolved_config.ini").write_text(cfg.to_text(), encoding="utf-8")
    return path


def load_splits(cfg: config.RunConfig):
    name = cfg["data.dataset"]
    root = Path(cfg["data.root"])
    sizes = dict(train_size=cfg["data.train_size"], val_size=cfg["data.val_size"], test_size=cfg["data.test_size"])
    seed = cfg["run.seed"]
    if name == "mnist":
        paths = datasets.find_mnist(root)
        if paths is None:
            raise CLIError(f"MNIST IDX files not found under {root}")
        full = datasets.load_mnist_idx(paths[0], paths[1])
        test = datasets.load_mnist_idx(paths[2], paths[3])
        tr, va, te, idx = datasets.split_and_subset(full, seed=seed, test_data=test, **sizes)
    elif name == "cifar10":
        batches = sorted(root.glob("data_batch_*.bin"))
        test_path = root / "test_batch.bin"
        if not batches or not test_path.exists():
            raise CLIError(f"CIFAR-10 binary batches not found under {root}")
        full = datasets.load_cifar10_bin(batches)
        test = datasets.load_cifar10_bin(test_path)
        tr, va, te, idx = datasets.split_and_subset(full, seed=seed, test_data=test, **sizes)
    elif name == "digits":
        ip, lp = datasets.load_digits_as_idx(root)
        full = datasets.load_mnist_idx(ip, lp)
        tr, va, te, idx = datasets.split_and_subset(full, seed=seed, **sizes)
    else:
        raise config.ConfigError(f"unknown dataset {name!r}")
    return tr, va, te


def resolve_checkpoint(path, name: str) -> Checkpoint:
    p = Path(path)
    if p.is_dir():
        p = p / name
    if not p.exists():
        raise CLIError(f"checkpoint not found: {p}")
    return Checkpoint.load(p)


def _save_grid(run: Path, stem: str, bounds, values, mask=None) -> None:
    GridFile.from_bounds(bounds, values).write(run / f"{stem}.grid")
    if np.ndim(values) == 2:
        write_heatmap(run / f"{stem}.ppm", values, mask)


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(cfg, args) -> Path:
    run = open_run(cfg)
    res = training.run_session1(cfg)
    res.checkpoint.save(run / "inner.ckpt")
    tm = res.target
    _save_grid(run, "target_map", tm.bounds, tm.field)
    _save_grid(run, "pretrained", tm.bounds, eval_on_grid(res.inner, tm.bounds, tm.resolution))
    write_csv(run / "pretrain.csv", ["arity", "rmse", "params"], [[tm.arity, res.rmse, res.inner.num_params()]])
    return run


def _write_train(run: Path, res: training.TrainResult, stem: str = "") -> None:
    suffix = f"_{stem}" if stem else ""
    res.checkpoint.save(run / f"model{suffix}.ckpt")
    res.log.write(run / f"metrics{suffix}.csv")
    res.log.write_timing(run / f"timing{suffix}.csv")
    (run / f"first_batch{suffix}.txt").write_text(" ".join(map(str, res.first_batch)) + "\n")


def cmd_train(cfg, args) -> Path:
    inner_ckpt = resolve_checkpoint(cfg["run.parent"], "inner.ckpt")
    tr, va, te = load_splits(cfg)
    run = open_run(cfg)
    snap = run / "snapshots"
    snap.mkdir()
    res = training.run_session2(cfg, inner_ckpt, tr, va, te, snapshot_dir=snap)
    for path in res.snapshots:
        grid = GridFile.read(path)
        if grid.values.ndim == 2:
            write_heatmap(path.with_suffix(".ppm"), grid.values)
    _write_train(run, res)
    return run


def cmd_retrain(cfg, args) -> Path:
    frozen = resolve_checkpoint(cfg["run.parent"], "model.ckpt")
    tr, va, te = load_splits(cfg)
    run = open_run(cfg)
    res = training.run_session3(cfg, frozen, tr, va, te)
    _write_train(run, res)
    (run / "inner_digests.txt").write_text("\n".join(res.inner_digests) + "\n")
    return run


def cmd_baseline(cfg, args) -> Path:
    tr, va, te = load_splits(cfg)
    run = open_run(cfg)
    res = training.run_baselines(cfg, tr, va, te)
    _write_train(run, res.relu, "relu")
    _write_train(run, res.one_arg, "1arg")
    res.one_arg_pretrain.checkpoint.save(run / "inner_1arg.ckpt")
    header, rows = training.aligned_logs({"relu": res.relu.log, "1arg": res.one_arg.log})
    write_csv(run / "aligned.csv", header, rows)
    write_csv(run / "param_counts.csv", ["model", "params"], sorted(res.param_counts.items()) + [["relu_beta", res.relu_beta]])
    return run


def _trained_net(cfg):
    ckpt = resolve_checkpoint(cfg["run.parent"], "model.ckpt")
    return training.net_from_checkpoint(ckpt), ckpt


def cmd_analyze(cfg, args) -> Path:
    net, _ = _trained_net(cfg)
    if net.inner is None or net.inner.arity != 2:
        raise CLIError("analyze needs a model with a two-argument inner net")
    _, _, te = load_splits(cfg)
    run = open_run(cfg)
    sample = analysis.collect_inputs(net, _analysis_images(cfg, te))
    mm = analysis.mass_mask(sample, cfg["analysis.mass"], cfg["analysis.bins"])
    bounds = mm.bbox
    res = cfg["analysis.grid_resolution"]
    gmask = mm.grid_mask(bounds, res)
    f = eval_on_grid(net.inner, bounds, res)
    _save_grid(run, "nonlinearity", bounds, f, gmask)
    _save_grid(run, "mask", bounds, gmask.astype(np.float64))
    fit = analysis.fit_quadratic(net.inner, sample, cfg["analysis.fit_mode"], bounds=bounds, resolution=res)
    _save_grid(run, "fitted", bounds, eval_on_grid(fit, bounds, res), gmask)
    write_csv(run / "quadfit.csv", list(analysis.QUAD_TERMS) + ["curvature", "r2", "count"],
              [list(map(float, fit.coeffs)) + [fit.curvature, fit.r2, fit.count]])
    hist = mm.counts
    write_csv(run / "input_hist.csv", ["axis1_lo", "axis1_hi", "axis2_lo", "axis2_hi", "bins", "covered"],
              [[float(mm.edges[0][0]), float(mm.edges[0][-1]), float(mm.edges[1][0]), float(mm.edges[1][-1]),
                hist.shape[0], mm.covered]])
    return run


def _analysis_images(cfg, data):
    cap = cfg["analysis.max_images"]
    return data.images[:cap] if cap > 0 else data.images


def _spectrum_rows(label, rep):
    return [[label, ell, float(p)] for ell, p in enumerate(rep.power)]


def cmd_spectrum(cfg, args) -> Path:
    net, _ = _trained_net(cfg)
    if net.inner is None or net.inner.arity not in (2, 3):
        raise CLIError("spectrum needs a model with a two- or three-argument inner net")
    _, _, te = load_splits(cfg)
    run = open_run(cfg)
    sample = analysis.collect_inputs(net, _analysis_images(cfg, te))
    lmax = cfg["analysis.lmax"]
    rows = _spectrum_rows("learned", analysis.spectral_power(net.inner, sample, lmax))
    controls = analysis.xavier_control(cfg["analysis.xavier_count"], net.inner.arity, make_rng(cfg["run.seed"]))
    for i, c in enumerate(controls):
        rows.extend(_spectrum_rows(f"xavier{i}", analysis.spectral_power(c, sample, lmax)))
    write_csv(run / "spectrum.csv", ["function", "order", "power"], rows)
    return run


def _parse_bounds(text: str):
    out = []
    for part in text.split(";"):
        lo, hi = part.split(",")
        out.append((float(lo), float(hi)))
    return out


def cmd_export_grid(cfg, args) -> Path:
    p = Path(cfg["run.parent"])
    name = "model.ckpt" if (p / "model.ckpt").exists() or p.name == "model.ckpt" else "inner.ckpt"
    ckpt = resolve_checkpoint(p, name)
    inner = training.inner_from_checkpoint(ckpt)
    bounds = _parse_bounds(args.bounds) if args.bounds else [(-2.5, 2.5)] * inner.arity
    if len(bounds) != inner.arity:
        raise CLIError(f"--bounds gives {len(bounds)} axes for a {inner.arity}-argument net")
    run = open_run(cfg)
    _save_grid(run, "nonlinearity", bounds, eval_on_grid(inner, bounds, cfg["analysis.grid_resolution"]))
    return run


def _read_csv_rows(path: Path) -> list[list[str]]:
    lines = path.read_text().splitlines()
    return [line.split(",") for line in lines[1:]]


def cmd_report(cfg, args) -> Path:
    dirs = [Path(d) for d in args.runs]
    for d in dirs:
        if not (d / "resolved_config.ini").exists():
            raise CLIError(f"not a run directory: {d}")
    run = open_run(cfg)
    rows, fits, labels = [], [], []
    lmax = cfg["analysis.lmax"]
    for d in dirs:
        rcfg = config.parse_text((d / "resolved_config.ini").read_text())
        row = {"run": d.name, "command": rcfg["run.command"], "final_test_acc": "", "best_epoch": "",
               "params": "", "curvature": "", "r2": ""}
        if (d / "model.ckpt").exists():
            ck = Checkpoint.load(d / "model.ckpt")
            spec = training.spec_from_dict(ck.meta["spec"])
            row["params"] = param_count(spec).total
            row["best_epoch"] = ck.meta["best_epoch"]
        if (d / "metrics.csv").exists():
            mlog = MetricLog.read(d / "metrics.csv")
            best = row["best_epoch"] or mlog.rows[-1]["epoch"]
            row["final_test_acc"] = next(r["test_acc"] for r in mlog.rows if r["epoch"] == best)
        if (d / "quadfit.csv").exists():
            vals = [float(v) for v in _read_csv_rows(d / "quadfit.csv")[0]]
            fit = analysis.QuadFit(np.array(vals[:6]), vals[7], int(vals[8]))
            fits.append(fit)
            labels.append(d.name)
            row["curvature"] = fit.curvature
            row["r2"] = fit.r2
        power = [""] * (lmax + 1)
        if (d / "spectrum.csv").exists():
            for label, ell, p in _read_csv_rows(d / "spectrum.csv"):
                if label == "learned" and int(ell) <= lmax:
                    power[int(ell)] = float(p)
        row.update({f"P{ell}": v for ell, v in enumerate(power)})
        rows.append(row)
    stats = analysis.curvature_stats(fits, labels=labels) if fits else None
    header = list(rows[0]) + ["fraction_negative", "p_two_sided", "p_one_sided"] if rows else []
    extra = [stats.fraction_negative, stats.p_two_sided, stats.p_one_sided] if stats else ["", "", ""]
    write_csv(run / "summary.csv", header, [list(r.values()) + extra for r in rows])
    if stats:
        write_csv(run / "curvature.csv", ["trial", "curvature", "negative", "r2"],
                  [[t["trial"], t["curvature"], int(t["negative"]), t["r2"]] for t in stats.table])
    return run


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "retrain": cmd_retrain,
    "baseline": cmd_baseline,
    "analyze": cmd_analyze,
    "spectrum": cmd_spectrum,
    "export-grid": cmd_export_grid,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nargact", description="Learned multi-argument activation functions.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file (INI sections of key = value)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. optim.lr=0.01")
        p.add_argument("--seed", type=int, required=name in TRAINING_COMMANDS)
        if name in ("train", "retrain", "analyze", "spectrum", "export-grid"):
            p.add_argument("--from", dest="parent", required=True, help="source run directory or checkpoint")
        if name == "export-grid":
            p.add_argument("--bounds", help='per-axis "lo,hi" pairs separated by ";"')
        if name == "report":
            p.add_argument("runs", nargs="+", help="finished run directories")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.set) + [f"run.command={args.command}"]
        if getattr(args, "parent", None):
            overrides.append(f"run.parent={Path(args.parent).resolve()}")
        elif args.command == "report":
            overrides.append("run.parent=" + ";".join(str(Path(r).resolve()) for r in args.runs))
        cfg = config.load(args.config, overrides, args.seed)
        run = COMMANDS[args.command](cfg, args)
    except Exception as exc:  # one machine-parseable line, nonzero exit
        print(f"nargact: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
