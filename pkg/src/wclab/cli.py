"""Command-line entry point.

Subcommands: train, eval, bound, converge, augment-preview, selfcheck.
Configs and reports are JSON, time series are CSV, optional plots are
SVG; model snapshots use the binary snapshot format.

Exit codes: 0 success, 2 configuration error, 3 numeric failure
(NaN/divergence), 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__, augment, convergence, selfcheck, theory, trainer
from . import data as data_mod
from .errors import ConfigError, FormatError, NumericError
from .model import Network, ParamSnapshot

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

OUTPUT_ROOT_ENV = "WCLAB_OUT"


# ---------------------------------------------------------------------------
# dataset specs

def load_dataset_spec(spec: dict):
    """Build (train dataset, test dataset) from a dataset spec document."""
    kind = spec.get("kind")
    if kind == "two-moons":
        n = int(spec.get("n", 500))
        noise = float(spec.get("noise", 0.1))
        seed = int(spec.get("seed", 0))
        test_n = int(spec.get("test-n", 2000))
        train = data_mod.make_two_moons(n, noise, seed)
        test = data_mod.make_two_moons(test_n, noise, seed + 1)
        return train, test
    if kind == "idx":
        train = data_mod.load_idx(spec["images"], spec["labels"], name="idx-train")
        if "test-images" in spec:
            test = data_mod.load_idx(spec["test-images"], spec["test-labels"], name="idx-test")
        else:
            test = None
        return train, test
    raise ConfigError(f"unknown dataset kind {kind!r} (expected two-moons or idx)")


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _resolve_out(out, default_name):
    if out is None:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        out = os.path.join(root, default_name)
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# metrics / plotting helpers

def write_metrics_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(trainer.METRICS_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row.as_tuple()])


def _svg_polyline(points, color, width=1.5):
    path = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{path}"/>'


def write_loss_plot_svg(path, rows):
    """Fixed-size line plot of the loss telemetry and test error vs step."""
    if not rows:
        return
    w, h, margin = 720, 400, 45
    series = {
        "loss_l": ("#1f77b4", [r.loss_l for r in rows]),
        "loss_u_max": ("#d62728", [r.loss_u_max for r in rows]),
        "loss_u_mean": ("#ff9896", [r.loss_u_mean for r in rows]),
        "loss_u_min": ("#2ca02c", [r.loss_u_min for r in rows]),
        "test_err": ("#7f7f7f", [r.test_err for r in rows]),
    }
    steps = [r.step for r in rows]
    finite = [v for _, vals in series.values() for v in vals if np.isfinite(v)]
    top = max(finite) if finite else 1.0
    top = top if top > 0 else 1.0
    x_span = max(steps[-1] - steps[0], 1)

    def sx(s):
        return margin + (s - steps[0]) / x_span * (w - 2 * margin)

    def sy(v):
        return h - margin - min(max(v, 0.0), top) / top * (h - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<line x1="{margin}" y1="{h - margin}" x2="{w - margin}" y2="{h - margin}" stroke="black"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{h - margin}" stroke="black"/>']
    for i, (name, (color, vals)) in enumerate(series.items()):
        pts = [(sx(s), sy(v)) for s, v in zip(steps, vals) if np.isfinite(v)]
        if pts:
            parts.append(_svg_polyline(pts, color))
        parts.append(f'<text x="{margin + 8 + 120 * i}" y="{margin - 18}" fill="{color}" '
                     f'font-size="12">{name}</text>')
    parts.append(f'<text x="{w // 2}" y="{h - 8}" font-size="12">step</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))


# ---------------------------------------------------------------------------
# train

def _write_manifest(out_dir, subcommand, config_doc, seeds, outputs):
    manifest = {
        "subcommand": subcommand,
        "config": config_doc,
        "seeds": seeds,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "finished": None,
        "outputs": outputs,
        "version": __version__,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return path, manifest


def _finish_manifest(path, manifest):
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def _run_single_fold(cfg, dataset_spec, out_dir, plot, quiet):
    train_ds, test_ds = load_dataset_spec(dataset_spec)
    labels_per_class = int(dataset_spec.get("labels-per-class", 4))
    disjoint = bool(dataset_spec.get("disjoint", False))
    split = data_mod.split_ssl(train_ds, labels_per_class, cfg.data_seed, disjoint=disjoint)
    state, rows = trainer.run_training(cfg, train_ds, split, test_dataset=test_ds)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(metrics_path, rows)
    snap_path = os.path.join(out_dir, "model.snap")
    ema_path = os.path.join(out_dir, "model_ema.snap")
    state.net.snapshot().save(snap_path)
    state.ema_net.snapshot().save(ema_path)
    if plot:
        write_loss_plot_svg(os.path.join(out_dir, "losses.svg"), rows)
    final = rows[-1]
    if not quiet:
        print(f"final: step={final.step} test_err={final.test_err:.4f} "
              f"ema_test_err={final.ema_test_err:.4f}")
    return final


def cmd_train(args):
    doc = _read_json(args.config)
    if args.from_manifest:
        doc = doc.get("config", doc)
    dataset_spec = doc.get("dataset")
    if dataset_spec is None:
        raise ConfigError("train config needs a 'dataset' section")
    cfg = trainer.TrainConfig.from_json_dict(doc.get("train", {}))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, model_seed=args.seed, data_seed=args.seed,
                                  augment_seed=args.seed).validate()

    out_dir = _resolve_out(args.out, f"train-{int(time.time())}")
    config_doc = {"dataset": dataset_spec, "train": cfg.to_json_dict()}
    seeds = [cfg.model_seed, cfg.data_seed, cfg.augment_seed]

    if args.folds <= 1:
        manifest_path, manifest = _write_manifest(
            out_dir, "train", config_doc, seeds,
            {"metrics": "metrics.csv", "snapshot": "model.snap", "ema_snapshot": "model_ema.snap"},
        )
        _run_single_fold(cfg, dataset_spec, out_dir, args.plot, args.quiet)
        _finish_manifest(manifest_path, manifest)
        return EXIT_OK

    manifest_path, manifest = _write_manifest(
        out_dir, "train", config_doc, seeds, {"folds": args.folds, "summary": "folds.json"})
    finals = []
    for fold in range(args.folds):
        fold_seed = seeding_fold(cfg.data_seed, fold)
        fold_cfg = dataclasses.replace(cfg, data_seed=fold_seed).validate()
        fold_dir = os.path.join(out_dir, f"fold{fold}")
        os.makedirs(fold_dir, exist_ok=True)
        final = _run_single_fold(fold_cfg, dataset_spec, fold_dir, args.plot, args.quiet)
        finals.append({"fold": fold, "data-seed": fold_seed,
                       "test-err": final.test_err, "ema-test-err": final.ema_test_err})
    errs = np.array([f["test-err"] for f in finals])
    ema_errs = np.array([f["ema-test-err"] for f in finals])
    summary = {
        "folds": finals,
        "test-err-mean": float(errs.mean()), "test-err-std": float(errs.std(ddof=0)),
        "ema-test-err-mean": float(ema_errs.mean()), "ema-test-err-std": float(ema_errs.std(ddof=0)),
    }
    with open(os.path.join(out_dir, "folds.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    if not args.quiet:
        print(f"folds: test err {summary['test-err-mean']:.4f} +/- {summary['test-err-std']:.4f}")
    _finish_manifest(manifest_path, manifest)
    return EXIT_OK


def seeding_fold(data_seed, fold):
    from . import seeding
    return seeding.derive_int(data_seed, seeding.TAG_FOLD, fold) % (2 ** 31)


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args):
    snap = ParamSnapshot.load(args.snapshot)
    net = Network.from_snapshot(snap)
    spec = _read_json(args.dataset)
    train_ds, test_ds = load_dataset_spec(spec)
    ds = test_ds if (args.split == "test" and test_ds is not None) else train_ds

    def per_class_report(network):
        preds = network.predict(ds.features)
        wrong = preds != ds.labels
        per_class = {}
        for cls in range(ds.n_c):
            sel = ds.labels == cls
            per_class[str(cls)] = {"count": int(sel.sum()), "errors": int(wrong[sel].sum())}
        return float(wrong.mean()), per_class

    err, per_class = per_class_report(net)
    report = {"dataset": ds.name, "split": args.split, "n": len(ds),
              "error-rate": err, "per-class": per_class, "ema-error-rate": None}
    if args.ema_snapshot:
        ema_net = Network.from_snapshot(ParamSnapshot.load(args.ema_snapshot))
        ema_err, ema_per_class = per_class_report(ema_net)
        report["ema-error-rate"] = ema_err
        report["ema-per-class"] = ema_per_class
    json.dump(report, sys.stdout, indent=2)
    print()
    return EXIT_OK


# ---------------------------------------------------------------------------
# bound

def _bound_config_from_doc(doc):
    known = {k.replace("-", "_"): v for k, v in doc.items()}
    valid = set(theory.BoundConfig.__dataclass_fields__)
    unknown = set(known) - valid
    if unknown:
        raise ConfigError(f"unknown bound config keys: {sorted(unknown)}")
    try:
        return theory.BoundConfig(**known).validate()
    except TypeError as exc:
        raise ConfigError(f"bound config: {exc}") from exc


def cmd_bound(args):
    doc = _read_json(args.config)
    cfg = _bound_config_from_doc(doc.get("bound", doc))

    risk_l = float(doc.get("risk-labeled", 0.0))
    risk_u = float(doc.get("risk-unlabeled", 0.0))
    if args.snapshot and args.dataset:
        snap = ParamSnapshot.load(args.snapshot)
        net = Network.from_snapshot(snap)
        spec = _read_json(args.dataset)
        train_ds, _ = load_dataset_spec(spec)
        labels_per_class = int(spec.get("labels-per-class", 4))
        split = data_mod.split_ssl(train_ds, labels_per_class, int(spec.get("seed", 0)))
        lab = split.labeled_indices
        unl = split.unlabeled_indices[: int(doc.get("risk-sample-cap", 256))]
        risk_l = theory.empirical_risk_labeled(net, train_ds.features[lab], train_ds.labels[lab])
        usets = [augment.build_uncertainty_set(train_ds.features[i], cfg.k, 0, i, 0)
                 for i in unl]
        risk_u = theory.empirical_risk_unlabeled_worst(net, train_ds.features[unl], usets,
                                                       eps=cfg.eps)

    if args.sweep:
        field, rng_spec = args.sweep.split("=", 1)
        start, stop, steps = rng_spec.split(":")
        values = np.linspace(float(start), float(stop), int(steps))
        field_name = field.replace("-", "_")
        writer = csv.writer(sys.stdout)
        writer.writerow([field, "total"] + list(theory.thm2_bound(cfg, risk_l, risk_u).terms()))
        for v in values:
            cast = int(v) if isinstance(getattr(cfg, field_name), int) else float(v)
            swept = dataclasses.replace(cfg, **{field_name: cast}).validate()
            report = theory.thm2_bound(swept, risk_l, risk_u)
            writer.writerow([cast, repr(report.total)] + [repr(t) for t in report.terms().values()])
        return EXIT_OK

    report = theory.thm2_bound(cfg, risk_l, risk_u)
    json.dump(report.to_dict(), sys.stdout, indent=2)
    print()
    if not args.quiet:
        print("term breakdown:", file=sys.stderr)
        for name, value in report.terms().items():
            print(f"  {name:>16}: {value:.6g}", file=sys.stderr)
        print(f"  {'total':>16}: {report.total:.6g}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# converge

def cmd_converge(args):
    doc = _read_json(args.config)
    m = int(doc.get("m", 5))
    d = int(doc.get("d", 10))
    if "centers" in doc:
        inst = convergence.SyntheticMinimax(np.asarray(doc["centers"], dtype=np.float64))
    else:
        inst = convergence.SyntheticMinimax.random(m, d, int(doc.get("center-seed", 0)),
                                                   spread=float(doc.get("spread", 2.0)))
    t_total = int(doc.get("t", 10000))
    eta = doc.get("eta", "auto")
    sigma = float(doc.get("sigma", 0.1))
    seed = int(doc.get("seed", 0))
    delta = float(doc.get("delta", 0.1))

    trace = convergence.run_convergence_experiment(inst, t_total, eta=eta, sigma=sigma, seed=seed)
    out_dir = _resolve_out(args.out, f"converge-{int(time.time())}")
    trace_path = os.path.join(out_dir, "trace.csv")
    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "envelope-grad-norm", "running-avg-sq", "rhs-bound"])
        for row in trace.to_csv_rows(delta=delta):
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    print(f"slope={trace.slope:.4f} final_avg_sq={trace.final_avg_sq:.6g} "
          f"rhs(T)={trace.rhs(t_total, delta):.6g} eta={trace.eta:.6g}")
    print(f"trace: {trace_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# augment preview

def _write_pgm(path, img):
    gray = np.clip(img[0] if img.ndim == 3 else img, 0.0, 1.0)
    h, w = gray.shape
    data = (gray * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _write_scatter_svg(path, groups):
    """groups: list of (label, color, (n,2) points)."""
    w = h = 420
    margin = 30
    pts_all = np.concatenate([g[2] for g in groups])
    lo, hi = pts_all.min() - 0.2, pts_all.max() + 0.2

    def sx(v):
        return margin + (v - lo) / (hi - lo) * (w - 2 * margin)

    def sy(v):
        return h - margin - (v - lo) / (hi - lo) * (h - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>']
    for i, (label, color, pts) in enumerate(groups):
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{margin}" y="{16 + 14 * i}" fill="{color}" '
                     f'font-size="12">{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))


def cmd_augment_preview(args):
    spec = _read_json(args.dataset)
    train_ds, _ = load_dataset_spec(spec)
    out_dir = _resolve_out(args.out, f"preview-{int(time.time())}")
    count = min(args.count, len(train_ds))
    for i in range(count):
        x = train_ds.features[i]
        weak = augment.weak_augment(x, augment.weak_seed(args.seed, i, 0))
        uset = augment.build_uncertainty_set(weak, args.k, args.seed, i, 0)
        if train_ds.is_image:
            panels = [x, weak] + list(uset.variants)
            spacer = np.ones((x.shape[0], x.shape[1], 2))
            strip = panels[0]
            for p in panels[1:]:
                strip = np.concatenate([strip, spacer, p], axis=2)
            _write_pgm(os.path.join(out_dir, f"sample{i}.pgm"), strip)
        else:
            groups = [("original", "#000000", x[None, :2]),
                      ("weak", "#1f77b4", weak[None, :2]),
                      ("strong", "#d62728", np.stack(uset.variants)[:, :2])]
            _write_scatter_svg(os.path.join(out_dir, f"sample{i}.svg"), groups)
    print(f"wrote {count} previews to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch

def build_parser():
    parser = argparse.ArgumentParser(prog="wclab",
                                     description="worst-case consistency SSL laboratory")
    parser.add_argument("--version", action="version", version=f"wclab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True, help="JSON config with dataset/train sections")
    p.add_argument("--from-manifest", action="store_true",
                   help="treat --config as a run manifest and reuse its resolved config")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override all three seeds")
    p.add_argument("--folds", type=int, default=1, help="number of labeled folds to run")
    p.add_argument("--plot", action="store_true", help="write losses.svg")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="error rate of a snapshot on a dataset")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--ema-snapshot", default=None)
    p.add_argument("--dataset", required=True, help="dataset spec JSON path")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bound", help="evaluate the generalization bound")
    p.add_argument("--config", required=True, help="BoundConfig JSON path")
    p.add_argument("--snapshot", default=None, help="measure empirical risks from this snapshot")
    p.add_argument("--dataset", default=None, help="dataset spec JSON for risk measurement")
    p.add_argument("--sweep", default=None, metavar="FIELD=START:STOP:STEPS",
                   help="emit CSV sweeping one config field")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_bound)

    p = sub.add_parser("converge", help="minimax testbed convergence run")
    p.add_argument("--config", required=True, help="instance spec JSON path")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_converge)

    p = sub.add_parser("augment-preview", help="write before/after transform grids")
    p.add_argument("--dataset", required=True, help="dataset spec JSON path")
    p.add_argument("--out", default=None)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_augment_preview)

    p = sub.add_parser("selfcheck", help="run the headless property suite")
    p.set_defaults(fn=lambda args: EXIT_OK if selfcheck.run_all() else 1)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
