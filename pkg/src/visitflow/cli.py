"""Command-line workflow over a run directory.

Every subcommand reads ``<run>/run.cfg`` (or ``--config``), applies any
``--set key=value`` overrides, writes its outputs into the run directory
and refreshes ``manifest.txt``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import (
    SOCIAL_VARIABLES,
    IndustryClass,
    minmax,
    aggregate,
    generate_synthetic,
    ingest,
    read_socioeconomic,
    write_synthetic,
)
from .forecast import (
    FlowTensor,
    assemble,
    evaluate,
    format_metrics_table,
    historical_average,
    load_checkpoint,
    predict_next,
    predict_windows,
    rate_of_change,
    save_checkpoint,
    train,
    write_loss_curve,
)
from .geoshapley import FeatureSchema, RidgePredictor, explain, make_background, summarize_importance
from .graph import Node, build_knn_graph, read_edge_file
from .spatial_stats import graph_weights, kmeans, knn_weights, level_bins, local_bivariate_moran

log = logging.getLogger("visitflow")

MANIFEST_VERSION = 1
REPORT_ARTIFACTS = {
    "metrics.csv": "metrics.csv",
    "rate_of_change.csv": "rate_of_change.csv",
    "clusters.csv": "cluster_levels.csv",
    "moran.csv": "moran.csv",
    "importance.csv": "importance.csv",
}


class CliError(RuntimeError):
    pass


def _fmt(v: float) -> str:
    return "nan" if v != v else repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# shared loading


class Run:
    def __init__(self, directory: Path, cfg: RunConfig, cfg_base: Path):
        self.dir = directory
        self.cfg = cfg
        self.base = cfg_base

    def path(self, key: str) -> Path | None:
        return self.cfg.resolve(key, self.base)

    @property
    def industry(self) -> IndustryClass:
        return IndustryClass.parse(self.cfg.industry)

    def flow_tensor(self) -> tuple[FlowTensor, object]:
        result = ingest(self.path("flows"))
        crosswalk = None
        if self.cfg.crosswalk:
            crosswalk = {r["origin_id"]: r["unit_id"] for r in _read_csv(self.path("crosswalk"))}
        tensor = aggregate(result.records, self.cfg.level, self.industry, crosswalk)
        return tensor, result

    def graph(self, tensor: FlowTensor):
        nodes = [Node(u, float(lat), float(lon)) for u, (lat, lon) in zip(tensor.node_ids, tensor.coordinates)]
        if self.cfg.edges:
            return read_edge_file(self.path("edges"), nodes)
        return build_knn_graph(nodes, min(self.cfg.k_neighbors, len(nodes) - 1))

    def checkpoint(self):
        path = self.dir / "checkpoint.txt"
        if not path.exists():
            raise CliError(f"no checkpoint found in {self.dir}; run 'train' first")
        return load_checkpoint(path)

    def socio(self, tensor: FlowTensor):
        table = read_socioeconomic(self.path("socioeconomic"), normalize=self.cfg.normalize_socio)
        return table.reorder(tensor.node_ids)

    def update_manifest(self, step: str) -> None:
        path = self.dir / "manifest.txt"
        steps = []
        if path.exists():
            steps = [line for line in path.read_text(encoding="utf-8").splitlines() if line.startswith("step.")]
        entry = f"step.{step} = done"
        if entry not in steps:
            steps.append(entry)
        lines = [f"format_version = {MANIFEST_VERSION}", f"visitflow_version = {__version__}"]
        lines += [f"config.{k} = {v}" for k, v in
                  (line.split(" = ", 1) for line in self.cfg.dumps().splitlines())]
        for key in ("flows", "socioeconomic", "edges", "crosswalk"):
            p = self.path(key)
            if p is not None and p.exists():
                lines.append(f"input.{key}.sha256 = {_sha256(p)}")
        lines.append(f"seed.model = {self.cfg.seed}")
        lines.append(f"seed.permutation = {self.cfg.seed}")
        lines += steps
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _open_run(args) -> Run:
    directory = Path(args.run)
    if not directory.is_dir():
        raise CliError(f"run directory {directory} does not exist")
    cfg_path = Path(args.config) if args.config else directory / "run.cfg"
    if cfg_path.exists():
        cfg = load_config(cfg_path)
        base = cfg_path.parent
    else:
        cfg, base = RunConfig(), directory
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        cfg.set(key, value)
    return Run(directory, cfg, base)


def _levels_and_clusters(run: Run, tensor: FlowTensor):
    value = tensor.values[:, 0, :].mean(axis=1)
    binning = level_bins(value)
    feats = minmax(np.column_stack([value, tensor.coordinates]))
    distinct = len(np.unique(feats, axis=0))
    km = kmeans(feats, min(run.cfg.kmeans_k, distinct), seed=run.cfg.seed)
    return value, binning, km


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> str:
    run = Path(args.run)
    data = generate_synthetic(seed=args.seed, n_units=args.units, weeks=args.weeks, noise=args.noise)
    paths = write_synthetic(data, run / "inputs")
    cfg_path = run / "run.cfg"
    if not cfg_path.exists():
        cfg = RunConfig(seed=args.seed)
        cfg_path.write_text(cfg.dumps(), encoding="utf-8")
    return f"synthetic data for {args.units} units x {args.weeks} weeks written to {paths['flows'].parent}"


def cmd_ingest(run: Run) -> str:
    tensor, result = run.flow_tensor()
    out = run.dir / "ingest"
    out.mkdir(exist_ok=True)
    _write_csv(out / "rejections.csv", ["row", "reason"], result.rejected)
    rows = [[u, w, _fmt(tensor.values[i, 0, t])]
            for i, u in enumerate(tensor.node_ids) for t, w in enumerate(tensor.week_labels)]
    _write_csv(out / "flow_tensor.csv", ["unit_id", "week", "visits"], rows)
    (out / "summary.txt").write_text(
        f"{result.summary()}\nindustry = {run.industry.value}\n"
        f"units = {tensor.n_nodes}\nweeks = {tensor.n_weeks}\nsparsity = {tensor.sparsity['text']}\n",
        encoding="utf-8",
    )
    return f"{result.summary()}; {tensor.n_nodes} units x {tensor.n_weeks} weeks ({tensor.sparsity['text']})"


def cmd_train(run: Run) -> str:
    tensor, _ = run.flow_tensor()
    model = assemble(run.cfg.model_config(), run.graph(tensor))
    ckpt = train(model, tensor, run.cfg.split_ratio)
    save_checkpoint(ckpt, run.dir / "checkpoint.txt")
    write_loss_curve(ckpt, run.dir / "loss_curve.csv")
    return f"trained {model.parameter_count()} parameters for {len(ckpt.loss_curve)} epochs; final mse {ckpt.loss_curve[-1]:.6g}"


def cmd_predict(run: Run) -> str:
    ckpt = run.checkpoint()
    tensor, _ = run.flow_tensor()
    forecast = predict_next(ckpt, tensor)
    last = tensor.values[:, 0, -1]
    roc = rate_of_change(last, forecast)
    _write_csv(
        run.dir / "predictions.csv",
        ["unit_id", "last_week", "last_visits", "predicted_next"],
        [[u, tensor.week_labels[-1], _fmt(last[i]), _fmt(forecast[i])] for i, u in enumerate(tensor.node_ids)],
    )
    rows = [[u, run.industry.value, _fmt(last[i]), _fmt(forecast[i]), _fmt(roc.percent[i])]
            for i, u in enumerate(tensor.node_ids)]
    rows.append(["AVERAGE", run.industry.value, "", "", _fmt(roc.average)])
    _write_csv(run.dir / "rate_of_change.csv", ["unit_id", "industry", "previous", "predicted", "change_pct"], rows)
    return f"forecast {tensor.n_nodes} units; average week-on-week change {roc.average:+.2f}%"


def cmd_evaluate(run: Run) -> str:
    ckpt = run.checkpoint()
    tensor, _ = run.flow_tensor()
    w = ckpt.config.history_window
    test = np.arange(w, tensor.n_weeks)[ckpt.n_train:]
    if len(test) == 0:
        raise CliError("no held-out weeks to evaluate")
    truth = tensor.values[:, 0, test].T
    reports = {
        run.industry.value: evaluate(predict_windows(ckpt, tensor, test), truth),
        "historical average": evaluate(historical_average(tensor, test), truth),
    }
    _write_csv(run.dir / "metrics.csv", ["category", "MAE", "RMSE", "R2", "MAPE"],
               [[name, *(_fmt(v) for v in rep.row())] for name, rep in reports.items()])
    (run.dir / "metrics.txt").write_text(format_metrics_table(reports) + "\n", encoding="utf-8")
    m = reports[run.industry.value]
    return f"MAE {m.mae:.4g} RMSE {m.rmse:.4g} R2 {m.r_squared:.4g} MAPE {m.mape:.2f}% on {len(test)} held-out weeks"


def cmd_cluster(run: Run) -> str:
    tensor, _ = run.flow_tensor()
    value, binning, km = _levels_and_clusters(run, tensor)
    _write_csv(run.dir / "clusters.csv", ["unit_id", "value", "level", "kmeans_cluster"],
               [[u, _fmt(value[i]), int(binning.levels[i]), int(km.labels[i])]
                for i, u in enumerate(tensor.node_ids)])
    counts = np.bincount(binning.levels, minlength=7)[1:]
    return f"levels 1-6 counts {counts.tolist()}; k-means inertia {km.inertia:.4g}"


def _moran_y(run: Run, tensor: FlowTensor, x: np.ndarray) -> np.ndarray:
    choice = run.cfg.moran_y
    if choice == "flow":
        return x
    if choice == "change":
        rows = _read_csv(run.dir / "rate_of_change.csv")
        by_unit = {r["unit_id"]: float(r["change_pct"]) for r in rows}
        y = np.array([by_unit[u] for u in tensor.node_ids])
        if not np.isfinite(y).all():
            raise CliError("rate of change is undefined for some units")
        return y
    if choice in SOCIAL_VARIABLES:
        return run.socio(tensor).values[:, SOCIAL_VARIABLES.index(choice)]
    raise CliError(f"moran_y must be 'flow', 'change' or one of {SOCIAL_VARIABLES}")


def cmd_moran(run: Run) -> str:
    tensor, _ = run.flow_tensor()
    value, binning, km = _levels_and_clusters(run, tensor)
    if run.cfg.edges:
        w = graph_weights(run.graph(tensor))
    else:
        lat, lon = tensor.coordinates.T
        w = knn_weights(lat, lon, min(run.cfg.k_neighbors, tensor.n_nodes - 1))
    y = _moran_y(run, tensor, value)
    res = local_bivariate_moran(value, y, w, run.cfg.permutations, run.cfg.alpha, run.cfg.seed)
    _write_csv(
        run.dir / "moran.csv",
        ["unit_id", "value", "level", "kmeans_cluster", "local_I", "class", "pseudo_p"],
        [[u, _fmt(value[i]), int(binning.levels[i]), int(km.labels[i]), _fmt(res.local[i]),
          res.classes[i], _fmt(res.local_p[i])] for i, u in enumerate(tensor.node_ids)],
    )
    (run.dir / "moran_summary.txt").write_text(
        f"y = {run.cfg.moran_y}\nI = {_fmt(res.statistic)}\nexpectation = {_fmt(res.expectation)}\n"
        f"z_score = {_fmt(res.z_score)}\npseudo_p = {_fmt(res.pseudo_p)}\npermutations = {run.cfg.permutations}\n",
        encoding="utf-8",
    )
    return f"bivariate Moran's I {res.statistic:.4f} (pseudo p {res.pseudo_p:.3f})"


def cmd_attribute(run: Run) -> str:
    path = run.dir / "rate_of_change.csv"
    if not path.exists():
        raise CliError("no forecasts found; run 'predict' first")
    tensor, _ = run.flow_tensor()
    socio = run.socio(tensor)
    change = {r["unit_id"]: float(r["change_pct"]) for r in _read_csv(path) if r["unit_id"] != "AVERAGE"}
    y = np.array([change[u] for u in tensor.node_ids])
    keep = np.isfinite(y)
    x = socio.features()
    names = list(SOCIAL_VARIABLES) + ["lat", "lon"]
    schema = FeatureSchema(names, [6, 7])
    model = RidgePredictor(run.cfg.ridge_alpha, interactions=True).fit(x[keep], y[keep])
    background = make_background(x[keep], run.cfg.background_rows, run.cfg.seed)
    decomps = explain(model.predict, x[keep], schema, background)
    units = [u for u, k in zip(tensor.node_ids, keep) if k]
    header = (["unit_id", "phi_0", "phi_geo"] + [f"phi_{n}" for n in schema.nongeo_names]
              + [f"phi_geo_x_{n}" for n in schema.nongeo_names] + ["prediction"])
    _write_csv(run.dir / "attribution.csv", header,
               [[u, _fmt(d.phi_0), _fmt(d.phi_geo), *map(_fmt, d.phi), *map(_fmt, d.phi_geo_x), _fmt(d.prediction)]
                for u, d in zip(units, decomps)])
    ranking = summarize_importance(decomps)
    _write_csv(run.dir / "importance.csv", ["component", "mean_abs_value", "rank"],
               [[r.component, _fmt(r.mean_abs_value), r.rank] for r in ranking])
    top = ", ".join(r.component for r in ranking[:3])
    return f"attributed {len(decomps)} units; top components: {top}"


def cmd_report(run: Run) -> str:
    missing = [name for name in REPORT_ARTIFACTS if not (run.dir / name).exists()]
    if missing:
        raise CliError(f"cannot report; missing {', '.join(missing)}")
    out = run.dir / "report"
    if out.exists():
        shutil.rmtree(out)
    out.mkdir()
    for src, dst in REPORT_ARTIFACTS.items():
        shutil.copyfile(run.dir / src, out / dst)

    metrics = _read_csv(run.dir / "metrics.csv")
    lines = ["Forecast accuracy", ""]
    width = max(len("Category"), *(len(r["category"]) for r in metrics))
    lines.append(f"{'Category':<{width}}  {'MAE':>9}  {'RMSE':>9}  {'R2':>9}  {'MAPE':>9}")
    for r in metrics:
        lines.append(f"{r['category']:<{width}}  {float(r['MAE']):>9.3f}  {float(r['RMSE']):>9.3f}  "
                     f"{float(r['R2']):>9.3f}  {float(r['MAPE']):>8.2f}%")
    lines += ["", "Week-on-week rate of change (%)", ""]
    for r in _read_csv(run.dir / "rate_of_change.csv"):
        lines.append(f"{r['unit_id']:<16} {float(r['change_pct']):>+9.2f}")
    lines += ["", "Cluster levels", ""]
    levels = [int(r["level"]) for r in _read_csv(run.dir / "clusters.csv")]
    for lv in range(1, 7):
        lines.append(f"level {lv}: {levels.count(lv)} units")
    lines += ["", "Local bivariate Moran classes", ""]
    classes = [r["class"] for r in _read_csv(run.dir / "moran.csv")]
    for cls in ("HH", "LL", "HL", "LH", "NotSignificant"):
        lines.append(f"{cls}: {classes.count(cls)}")
    lines += ["", "Feature importance (mean |GeoShapley value|)", ""]
    for r in _read_csv(run.dir / "importance.csv"):
        lines.append(f"{int(r['rank']):>2}. {r['component']:<24} {float(r['mean_abs_value']):.6g}")
    (run.dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return f"report bundle with {len(REPORT_ARTIFACTS)} artifacts written to {out}"


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "cluster": cmd_cluster,
    "moran": cmd_moran,
    "attribute": cmd_attribute,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visitflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic run directory")
    synth.add_argument("--run", required=True)
    synth.add_argument("--seed", type=int, default=7)
    synth.add_argument("--units", type=int, default=12)
    synth.add_argument("--weeks", type=int, default=60)
    synth.add_argument("--noise", type=float, default=0.05)

    helps = {
        "ingest": "validate flow records and build the flow tensor",
        "train": "train BiTransGCN and write a checkpoint",
        "predict": "forecast next-week flows and rates of change",
        "evaluate": "score held-out forecasts (MAE, RMSE, R2, MAPE)",
        "cluster": "K-means clusters and six cluster levels",
        "moran": "global and local bivariate Moran's I",
        "attribute": "GeoShapley attribution of forecast change",
        "report": "collect outputs into a report bundle",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--config", help="config file (default: <run>/run.cfg)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 2, --help/--version exit 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            Path(args.run).mkdir(parents=True, exist_ok=True)
            summary = cmd_synth(args)
            run = _open_run(argparse.Namespace(run=args.run, config=None, set=None))
        else:
            run = _open_run(args)
            summary = COMMANDS[args.command](run)
        run.update_manifest(args.command)
    except (CliError, ValueError, KeyError, FileNotFoundError, OSError, ArithmeticError) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"visitflow {args.command}: error: {msg}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
