"""Experiment command line.

Subcommands:
  unified      accuracy table over datasets x models (CSV + JSON + console)
  k-ablation   accuracy vs polynomial degree, with collapse annotations
               (CSV + SVG + JSON + console)
  poison-demo  side-by-side v3/v4 run past the measured overflow degree,
               reporting stability events and gradient health (JSON + console)
  response     learned scalar filter responses from a checkpoint (CSV)
  gen-sbm      write a synthetic graph in the on-disk format

Configs are JSON; every output embeds the root seed and the resolved config,
and rerunning any command with identical config and seed produces
byte-identical CSV/JSON/SVG outputs.  Wall-clock timings go to the console
only, never into output files.
"""

from __future__ import annotations

import argparse
import copy
import functools
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .filters import KrawtchoukShape, collapse_degree, scalar_response
from .graphs import Graph, SbmConfig, generate_sbm, load_graph, make_folds, save_graph, stratified_split
from .linalg import jacobi_eigh
from .models import (
    HET,
    STAB,
    ModelConfig,
    load_checkpoint,
    operator_pair,
    response_weights,
    save_checkpoint,
)
from .reporting import render_table, write_csv, write_json, write_svg_line_chart
from .seeding import substream
from .training import TrainConfig, train

DEFAULT_MODELS = ["cheby", "krawtchouk", "hyb_v3", "hyb_v4"]

DEFAULT_UNIFIED_CONFIG: dict = {
    "seed": 0,
    "models": DEFAULT_MODELS,
    "model": {"k": 3, "hidden": 16, "dropout": 0.5, "lattice": 8},
    "train": {"lr": 0.01, "weight_decay": 5e-4},
    "datasets": [
        {
            "name": "sbm-heterophilic",
            "kind": "sbm",
            "n": 400,
            "c": 3,
            "homophily": 0.1,
            "avg_degree": 26.0,
            "f": 6,
            "feature_noise": 2.5,
            "seed": 1000,
            "cv_folds": 10,
            "graph_seeds": 5,
            "epochs": 400,
        },
        {
            "name": "sbm-homophilic",
            "kind": "sbm",
            "n": 400,
            "c": 3,
            "homophily": 0.9,
            "avg_degree": 26.0,
            "f": 6,
            "feature_noise": 2.5,
            "seed": 1000,
            "cv_folds": 10,
            "graph_seeds": 5,
            "epochs": 200,
        },
    ],
}

DEFAULT_ABLATION_CONFIG: dict = {
    "seed": 0,
    "models": DEFAULT_MODELS,
    # raw_p_init puts the adaptive basis in its unstable regime so the scan
    # finds a finite overflow degree inside float64 range
    "model": {"k": 3, "hidden": 16, "dropout": 0.5, "raw_p_init": -16.0},
    "train": {"lr": 0.01, "weight_decay": 5e-4},
    "k_list": [2, 3, 5, 7, 10, 15, 20, 25, 30],
    "extend_to_collapse": True,
    "dataset": {
        "name": "sbm-ablation",
        "kind": "sbm",
        "n": 200,
        "c": 3,
        "homophily": 0.1,
        "avg_degree": 8.0,
        "f": 6,
        "feature_noise": 1.0,
        "seed": 7,
        "graph_seeds": 1,
        "epochs": 60,
    },
}

DEFAULT_POISON_CONFIG: dict = {
    "seed": 0,
    "model": {"k": 3, "hidden": 16, "dropout": 0.5, "raw_p_init": -16.0},
    "train": {"lr": 0.01, "weight_decay": 5e-4},
    "dataset": {
        "name": "sbm-poison",
        "kind": "sbm",
        "n": 200,
        "c": 3,
        "homophily": 0.1,
        "avg_degree": 8.0,
        "f": 6,
        "feature_noise": 1.0,
        "seed": 7,
        "epochs": 60,
    },
}


# ---------------------------------------------------------------- datasets --


def _graph_key(ds: dict, graph_seed: int) -> str:
    return json.dumps({"ds": ds, "gs": graph_seed}, sort_keys=True)


@functools.lru_cache(maxsize=8)
def _materialize_cached(key: str) -> Graph:
    spec = json.loads(key)
    ds, graph_seed = spec["ds"], spec["gs"]
    if ds["kind"] == "sbm":
        cfg = SbmConfig(
            n=int(ds["n"]),
            c=int(ds["c"]),
            homophily=float(ds["homophily"]),
            avg_degree=float(ds["avg_degree"]),
            f=int(ds["f"]),
            feature_noise=float(ds["feature_noise"]),
            seed=int(ds["seed"]) + graph_seed,
        )
        return generate_sbm(cfg)
    if ds["kind"] == "files":
        g = load_graph(ds["path"])
        if not g.masks:
            masks = stratified_split(g.labels, (0.6, 0.2), substream(graph_seed, 17))
            g = Graph(g.n, g.adjacency, g.features, g.labels, masks)
        return g
    raise ValueError(f"unknown dataset kind {ds['kind']!r}")


def materialize_graph(ds: dict, graph_seed: int) -> Graph:
    return _materialize_cached(_graph_key(ds, graph_seed))


# ------------------------------------------------------------------- cells --


def _run_cell(cell: dict) -> dict:
    """One (dataset, model, seed, fold, K) training run; worker-safe."""
    ds = cell["dataset"]
    g = materialize_graph(ds, cell["graph_seed"])
    model_kwargs = dict(cell["model"])
    model_cfg = ModelConfig(variant=cell["variant"], **model_kwargs)
    train_cfg = TrainConfig(seed=cell["run_seed"], epochs=cell["epochs"], **cell["train"])
    if cell.get("fold") is not None:
        masks = make_folds(g, cell["cv_folds"], seed=cell["fold_seed"])[cell["fold"]]
    else:
        masks = g.masks
    result = train(model_cfg, train_cfg, g, masks=masks)
    return {
        "key": cell["key"],
        "acc": result.reported_acc,
        "collapsed": result.collapsed,
        "majority": result.majority_acc,
        "events": len(result.stability_events),
    }


def _run_cells(cells: list[dict], jobs: int) -> list[dict]:
    if jobs <= 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, cells, chunksize=1))


def _load_config(path: str | None, default: dict, seed_override: int | None) -> dict:
    cfg = copy.deepcopy(default)
    if path:
        with open(path) as fh:
            user = json.load(fh)
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    if seed_override is not None:
        cfg["seed"] = seed_override
    return cfg


def _cell_fmt(mean: float, std: float | None, collapsed: bool) -> str:
    text = f"{100.0 * mean:.2f}" if std is None else f"{100.0 * mean:.2f} ± {100.0 * std:.2f}"
    if collapsed:
        text += " (COLLAPSED)"
    return text


# ------------------------------------------------------------------ unified --


def cmd_unified(args) -> int:
    cfg = _load_config(args.config, DEFAULT_UNIFIED_CONFIG, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = int(cfg["seed"])
    t0 = time.perf_counter()

    rows: list[list[str]] = []
    table_json: dict = {}
    for ds in cfg["datasets"]:
        name = ds["name"]
        try:
            materialize_graph(ds, root)  # fail fast per dataset row
        except (OSError, ValueError) as exc:
            print(f"dataset {name!r} failed: {exc}", file=sys.stderr)
            rows.append([name] + ["ERROR"] * len(cfg["models"]))
            table_json[name] = {"error": str(exc)}
            continue
        cells = []
        graph_seeds = int(ds.get("graph_seeds", 1))
        cv_folds = ds.get("cv_folds")
        for variant in cfg["models"]:
            for s in range(graph_seeds):
                s_eff = root + s
                fold_ids = range(cv_folds) if cv_folds else [None]
                for fold in fold_ids:
                    cells.append(
                        {
                            "key": (name, variant, s, -1 if fold is None else fold),
                            "dataset": ds,
                            "variant": variant,
                            "model": cfg["model"],
                            "train": cfg["train"],
                            "epochs": int(ds.get("epochs", 200)),
                            "graph_seed": s_eff,
                            "run_seed": s_eff,
                            "fold_seed": s_eff,
                            "cv_folds": cv_folds,
                            "fold": fold,
                        }
                    )
        results = {tuple(r["key"]): r for r in _run_cells(cells, args.jobs)}
        row = [name]
        table_json[name] = {}
        for variant in cfg["models"]:
            runs = [results[k] for k in sorted(results) if k[1] == variant]
            accs = np.array([r["acc"] for r in runs])
            collapsed_runs = sum(r["collapsed"] for r in runs)
            multi = len(runs) > 1
            cell_text = _cell_fmt(
                float(np.mean(accs)),
                float(np.std(accs)) if multi else None,
                collapsed_runs == len(runs),
            )
            row.append(cell_text)
            table_json[name][variant] = {
                "mean": float(np.mean(accs)),
                "std": float(np.std(accs)),
                "runs": [r["acc"] for r in runs],
                "collapsed_runs": collapsed_runs,
                "cell": cell_text,
            }
        rows.append(row)
        _save_reference_checkpoint(cfg, ds, root, out_dir)

    header = ["dataset"] + list(cfg["models"])
    csv_text = write_csv(out_dir / "unified.csv", header, rows)
    write_json(out_dir / "unified.json", {"root_seed": root, "config": cfg, "cells": table_json})
    print(render_table(header, rows))
    print(f"\nwrote {out_dir}/unified.csv, unified.json  ({time.perf_counter() - t0:.1f}s)")
    return 0


def _save_reference_checkpoint(cfg: dict, ds: dict, root: int, out_dir: Path) -> None:
    """Train one single-split run per model and save its parameters."""
    from .models import init_params

    ck_dir = out_dir / "checkpoints"
    ck_dir.mkdir(exist_ok=True)
    g = materialize_graph(ds, root)
    for variant in cfg["models"]:
        model_cfg = ModelConfig(variant=variant, **cfg["model"])
        train_cfg = TrainConfig(seed=root, epochs=int(ds.get("epochs", 200)), **cfg["train"])
        params = init_params(model_cfg, g.num_features, g.num_classes, train_cfg.seed)
        train(model_cfg, train_cfg, g, params=params)
        save_checkpoint(ck_dir / f"{ds['name']}-{variant}.json", params)


# --------------------------------------------------------------- k-ablation --


def cmd_k_ablation(args) -> int:
    cfg = _load_config(args.config, DEFAULT_ABLATION_CONFIG, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = int(cfg["seed"])
    ds = cfg["dataset"]
    t0 = time.perf_counter()

    k_list = sorted(set(int(k) for k in cfg["k_list"]))
    measured: dict = {}
    if cfg.get("extend_to_collapse"):
        g0 = materialize_graph(ds, root)
        _, lscaled = operator_pair(g0)
        lam = float(jacobi_eigh(lscaled)[0][-1])
        p_init = 1.0 / (1.0 + math.exp(-float(cfg["model"].get("raw_p_init", 0.0))))
        k_collapse = collapse_degree(p_init, lam)
        measured = {"lambda_max_scaled": lam, "collapse_degree": k_collapse}
        if k_collapse is not None:
            k_list = sorted(set(k_list + [k_collapse + 5]))

    graph_seeds = int(ds.get("graph_seeds", 1))
    cells = []
    for variant in cfg["models"]:
        for k in k_list:
            for s in range(graph_seeds):
                model_kwargs = dict(cfg["model"])
                model_kwargs["k"] = k
                cells.append(
                    {
                        "key": (variant, k, s),
                        "dataset": ds,
                        "variant": variant,
                        "model": model_kwargs,
                        "train": cfg["train"],
                        "epochs": int(ds.get("epochs", 200)),
                        "graph_seed": root + s,
                        "run_seed": root + s,
                        "fold_seed": root + s,
                        "cv_folds": None,
                        "fold": None,
                    }
                )
    results = {tuple(r["key"]): r for r in _run_cells(cells, args.jobs)}

    header = ["K"] + list(cfg["models"])
    rows = []
    series = []
    cells_json: dict = {}
    for variant in cfg["models"]:
        pts = []
        for k in k_list:
            runs = [results[(variant, k, s)] for s in range(graph_seeds)]
            mean = float(np.mean([r["acc"] for r in runs]))
            collapsed = all(r["collapsed"] for r in runs)
            pts.append((float(k), 100.0 * mean, collapsed))
            cells_json.setdefault(str(k), {})[variant] = {
                "mean": mean,
                "collapsed": collapsed,
                "runs": [r["acc"] for r in runs],
            }
        series.append((variant, pts))
    for i, k in enumerate(k_list):
        row = [str(k)]
        for variant, pts in zip(cfg["models"], series):
            _, acc, collapsed = pts[1][i]
            row.append(_cell_fmt(acc / 100.0, None, collapsed))
        rows.append(row)

    csv_text = write_csv(out_dir / "k_ablation.csv", header, rows)
    write_json(
        out_dir / "k_ablation.json",
        {"root_seed": root, "config": cfg, "k_list": k_list, "measured": measured, "cells": cells_json},
    )
    write_svg_line_chart(
        out_dir / "k_ablation.svg",
        series,
        title="Polynomial degree vs test accuracy",
        xlabel="K (polynomial degree)",
        ylabel="test accuracy (%)",
    )
    print(render_table(header, rows))
    if measured:
        print(f"\nmeasured overflow: {measured}")
    print(f"wrote {out_dir}/k_ablation.csv, .json, .svg  ({time.perf_counter() - t0:.1f}s)")
    return 0


# -------------------------------------------------------------- poison-demo --


def cmd_poison_demo(args) -> int:
    cfg = _load_config(args.config, DEFAULT_POISON_CONFIG, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = int(cfg["seed"])
    ds = cfg["dataset"]
    t0 = time.perf_counter()

    g = materialize_graph(ds, root)
    _, lscaled = operator_pair(g)
    lam = float(jacobi_eigh(lscaled)[0][-1])
    raw_p = float(cfg["model"].get("raw_p_init", 0.0))
    p_init = 1.0 / (1.0 + math.exp(-raw_p))
    k_collapse = collapse_degree(p_init, lam)
    k_used = args.k if args.k is not None else (k_collapse + 5 if k_collapse else int(cfg["model"]["k"]))
    below = k_collapse is None or k_used < k_collapse

    epochs = int(ds.get("epochs", 60))
    model_kwargs = dict(cfg["model"])
    model_kwargs["k"] = k_used
    train_kwargs = dict(cfg["train"])
    track = TrainConfig(seed=root, epochs=epochs, track_grad_norms=(HET, STAB), **train_kwargs)

    res_v3 = train(ModelConfig(variant="hyb_v3", **model_kwargs), track, g)
    res_v4 = train(ModelConfig(variant="hyb_v4", **model_kwargs), track, g)
    res_ch = train(ModelConfig(variant="cheby", **model_kwargs), track, g)

    v3_stab_grad = [e for e in res_v3.stability_events if e.site == "grad" and e.branch == STAB]
    v4_stab_norms = res_v4.grad_norms.get(STAB, [])
    report = {
        "root_seed": root,
        "config": cfg,
        "measured": {
            "lambda_max_scaled": lam,
            "p_init": p_init,
            "collapse_degree": k_collapse,
            "k_used": k_used,
            "k_below_overflow": below,
        },
        "v3": {
            "collapsed": res_v3.collapsed,
            "reported_acc": res_v3.reported_acc,
            "first_event": res_v3.stability_events[0].to_dict() if res_v3.stability_events else None,
            "stable_branch_grad_nonfinite_first_epoch": (
                min(e.epoch for e in v3_stab_grad) if v3_stab_grad else None
            ),
            "stable_branch_grad_nonfinite_params": sorted({e.param for e in v3_stab_grad}),
        },
        "v4": {
            "collapsed": res_v4.collapsed,
            "reported_acc": res_v4.reported_acc,
            "excluded_epochs": res_v4.excluded_epochs,
            "stable_branch_grad_norms_finite": bool(np.all(np.isfinite(v4_stab_norms))),
            "stable_branch_grad_norm_range": (
                [float(np.min(v4_stab_norms)), float(np.max(v4_stab_norms))] if v4_stab_norms else None
            ),
            "first_event": res_v4.stability_events[0].to_dict() if res_v4.stability_events else None,
        },
        "cheby_reference": {"collapsed": res_ch.collapsed, "reported_acc": res_ch.reported_acc},
    }
    write_json(out_dir / "poison_demo.json", report)

    no_events = not res_v3.stability_events and not res_v4.stability_events
    print(f"scaled-operator top eigenvalue: {lam:.6f}; shape p_init={p_init:.3e}")
    print(f"measured overflow degree: {k_collapse}; running both hybrids at K={k_used}")
    if no_events:
        print("no events: every basis order stayed finite at this K")
    else:
        print(
            f"v3: collapsed={res_v3.collapsed}, accuracy {100 * res_v3.reported_acc:.2f}%; "
            f"stable-branch gradients first went non-finite at epoch "
            f"{report['v3']['stable_branch_grad_nonfinite_first_epoch']}"
        )
        print(
            f"v4: collapsed={res_v4.collapsed}, accuracy {100 * res_v4.reported_acc:.2f}%; "
            f"adaptive branch excluded for {res_v4.excluded_epochs.get(HET, 0)}/{epochs} epochs; "
            f"stable-branch gradient norms finite: {report['v4']['stable_branch_grad_norms_finite']}"
        )
        print(f"cheby reference accuracy: {100 * res_ch.reported_acc:.2f}%")
    print(f"wrote {out_dir}/poison_demo.json  ({time.perf_counter() - t0:.1f}s)")
    return 0


# ----------------------------------------------------------------- response --


def cmd_response(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = load_checkpoint(args.checkpoint)
    n_points = int(args.grid_points)
    rows: list[list[str]] = []
    for branch, kind, lo, hi in ((HET, "krawtchouk", 0.0, 1.0), (STAB, "cheb", -1.0, 1.0)):
        if f"{branch}.layer1.w0" not in params.params:
            continue
        weights = response_weights(params, branch)
        grid = np.linspace(lo, hi, n_points)
        if kind == "krawtchouk":
            raw_p = float(params[f"{branch}.layer1.raw_p"].value[0, 0])
            p = 1.0 / (1.0 + math.exp(-raw_p))
            shape = KrawtchoukShape(p, params.cfg.lattice_size)
            resp = scalar_response(kind, weights, grid, shape)
        else:
            resp = scalar_response(kind, weights, grid)
        for lam, val in zip(grid, resp):
            rows.append([branch, f"{lam:.6f}", f"{val:.10e}"])
    if not rows:
        raise ValueError("checkpoint contains no convolution layers")
    write_csv(out_dir / "response.csv", ["branch", "lambda", "response"], rows)
    print(f"wrote {out_dir}/response.csv ({len(rows)} points)")
    return 0


# ------------------------------------------------------------------ gen-sbm --


def cmd_gen_sbm(args) -> int:
    out_dir = Path(args.out_dir)
    cfg = SbmConfig(
        n=args.n,
        c=args.classes,
        homophily=args.homophily,
        avg_degree=args.avg_degree,
        f=args.features,
        feature_noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    g = generate_sbm(cfg)
    save_graph(g, out_dir)
    from .graphs import edge_homophily

    write_json(
        out_dir / "meta.json",
        {
            "root_seed": cfg.seed,
            "config": {
                "n": cfg.n,
                "c": cfg.c,
                "homophily": cfg.homophily,
                "avg_degree": cfg.avg_degree,
                "f": cfg.f,
                "feature_noise": cfg.feature_noise,
                "seed": cfg.seed,
            },
            "measured_edge_homophily": edge_homophily(g),
            "num_edges": g.adjacency.nnz // 2,
        },
    )
    print(f"wrote edges.txt, features.txt, masks.json, meta.json to {out_dir}")
    return 0


# --------------------------------------------------------------------- main --


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config path (defaults built in)")
    sub.add_argument("--seed", type=int, help="override the root seed")
    sub.add_argument("--out-dir", default="out", help="output directory")
    sub.add_argument("--jobs", type=int, default=1, help="worker processes for grid cells")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="specfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("unified", help="dataset x model accuracy table")
    _add_common(p)
    p.set_defaults(func=cmd_unified)

    p = sub.add_parser("k-ablation", help="accuracy vs polynomial degree")
    _add_common(p)
    p.set_defaults(func=cmd_k_ablation)

    p = sub.add_parser("poison-demo", help="side-by-side v3/v4 instability report")
    _add_common(p)
    p.add_argument("--k", type=int, help="degree to run at (default: measured overflow + 5)")
    p.set_defaults(func=cmd_poison_demo)

    p = sub.add_parser("response", help="learned filter response curves")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid-points", type=int, default=201)
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_response)

    p = sub.add_parser("gen-sbm", help="write a synthetic graph to disk")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--homophily", type=float, required=True)
    p.add_argument("--avg-degree", type=float, required=True)
    p.add_argument("--features", type=int, required=True)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_gen_sbm)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
