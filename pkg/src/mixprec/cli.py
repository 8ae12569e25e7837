"""Command-line entry point: search sweeps, Pareto filtering, space reports,
and lowering/export. All commands are offline batch jobs driven by a JSON
config; results land as CSV/JSON/npz files in the configured output dir.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 lowering equivalence failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .config import ExperimentConfig, dump_config, load_config
from .cost import CostLUT, count_search_space
from .data import Dataset, load_idx_pair, make_dataset, split_train_val, synthetic_dataset
from .errors import ConfigError, DivergenceError, EquivalenceError, MixprecError
from .fileio import atomic_write_bytes, atomic_write_text, load_npz, save_npz
from .gates import PrecisionAssignment
from .lower import DeployModel, lower_model, export_lowered, verify_equivalence
from .train import (SearchResult, ensure_warmup_state, run_search,
                    warmup_fingerprint, write_curves_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_EQUIVALENCE = 4

RESULTS_COLUMNS = ["lambda", "score", "size_bits", "energy_uJ", "act_bits", "per_layer_w_hist"]

log = logging.getLogger("mixprec")


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    """Materialize the configured dataset as train/val/test arrays."""
    ds = cfg.dataset
    if ds.name in ("blobs", "spirals"):
        return synthetic_dataset(ds.name, ds.n, ds.seed, noise=ds.noise,
                                 val_fraction=ds.val_fraction,
                                 test_fraction=ds.test_fraction)
    x, y = load_idx_pair(ds.images, ds.labels)
    if x.ndim == 3 and len(cfg.input_shape) == 3:
        x = x[:, None, :, :]
    if ds.test_images:
        xt, yt = load_idx_pair(ds.test_images, ds.test_labels)
        if xt.ndim == 3 and len(cfg.input_shape) == 3:
            xt = xt[:, None, :, :]
        x_train, y_train, x_val, y_val = split_train_val(x, y, ds.val_fraction, ds.seed)
        return Dataset(x_train, y_train, x_val, y_val, xt, yt)
    return make_dataset(x, y, ds.val_fraction, ds.test_fraction, ds.seed)


def _assignment_summary(result: SearchResult) -> tuple[str, str]:
    """(act bits per layer, per-layer weight-bit histogram) summary strings.

    Activation bits join with '|'; histograms use 'bits:count' pairs
    joined with '|' inside a layer and ';' between layers.
    """
    act = "|".join(str(result.assignment.act_bits[i])
                   for i in sorted(result.assignment.act_bits))
    hists = []
    for i in sorted(result.assignment.weight_bits):
        bits = result.assignment.weight_bits[i]
        values, counts = np.unique(bits, return_counts=True)
        hists.append("|".join(f"{int(v)}:{int(c)}" for v, c in zip(values, counts)))
    return act, ";".join(hists)


def _result_row(result: SearchResult) -> dict:
    act, hist = _assignment_summary(result)
    return {
        "lambda": repr(result.lambda_reg),
        "score": repr(result.val_score),
        "size_bits": result.size_bits,
        "energy_uJ": "" if result.energy_uj is None else repr(result.energy_uj),
        "act_bits": act,
        "per_layer_w_hist": hist,
    }


def write_results_csv(rows: list[dict], path):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULTS_COLUMNS)
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode())


def _sweep_one(cfg: ExperimentConfig, lam: float, index: int, out_dir: str,
               warmup_path: str) -> dict:
    """One lambda search; isolated so it can run in a worker process."""
    data = load_dataset(cfg)
    layers = cfg.effective_layers()
    train_cfg = replace(cfg.train, lambda_reg=lam, reg_mode=cfg.reg_mode)
    lut = CostLUT.from_csv(cfg.lut_path) if cfg.lut_path else None
    if lut is not None:
        lut.validate_cover(cfg.p_x, cfg.p_w)
    warmup_state = load_npz(warmup_path)
    result, _, final_state = run_search(layers, cfg.input_shape, data, train_cfg,
                                        cfg.p_x, cfg.p_w, lut=lut,
                                        tied=cfg.tied_gamma, warmup_state=warmup_state)
    tag = f"lambda{index}"
    atomic_write_text(os.path.join(out_dir, f"assignment_{tag}.json"),
                      json.dumps({"lambda": lam, **result.assignment.to_jsonable()},
                                 indent=1))
    save_npz(final_state, os.path.join(out_dir, f"model_{tag}.npz"))
    write_curves_csv(result.curves, os.path.join(out_dir, f"curves_{tag}.csv"))
    return _result_row(result)


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    out_dir = args.out or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "config.json"), dump_config(cfg))
    data = load_dataset(cfg)
    layers = cfg.effective_layers()
    lut = CostLUT.from_csv(cfg.lut_path) if cfg.lut_path else None
    if lut is not None:
        lut.validate_cover(cfg.p_x, cfg.p_w)

    base_train = replace(cfg.train, reg_mode=cfg.reg_mode)
    ensure_warmup_state(layers, cfg.input_shape, data, base_train, out_dir)
    warmup_path = os.path.join(
        out_dir, f"warmup_{warmup_fingerprint(layers, cfg.input_shape, data, base_train)}.npz")

    jobs = max(1, args.jobs)
    tasks = [(cfg, lam, i, out_dir, warmup_path) for i, lam in enumerate(cfg.lambdas)]
    if jobs == 1:
        rows = [_sweep_one(*t) for t in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, *zip(*tasks)))
    write_results_csv(rows, os.path.join(out_dir, "results.csv"))
    log.info("wrote %d results to %s", len(rows), os.path.join(out_dir, "results.csv"))
    return EXIT_OK


def pareto_front(records: list[dict], cost_key: str) -> list[dict]:
    """Non-dominated subset under (maximize score, minimize cost).

    Sort by (cost asc, score desc) and sweep with the best score seen at a
    strictly lower cost; within an equal-cost group, only the top scorers
    survive. Equal (score, cost) duplicates are all kept (neither strictly
    dominates).
    """
    def cost(r):
        raw = r[cost_key]
        if raw in ("", None):
            raise ConfigError(f"record without {cost_key!r} cost; "
                              "did this sweep run without a LUT?")
        return float(raw)

    def score(r):
        return float(r["score"])

    ordered = sorted(records, key=lambda r: (cost(r), -score(r)))
    front: list[dict] = []
    best_cheaper = -np.inf  # best score at strictly lower cost
    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and cost(ordered[j]) == cost(ordered[i]):
            j += 1
        group_best = score(ordered[i])
        if group_best > best_cheaper:
            front.extend(r for r in ordered[i:j] if score(r) == group_best)
            best_cheaper = group_best
        i = j
    return front


def cmd_pareto(args) -> int:
    if args.results:
        results_path = args.results
        cost_key = {"size": "size_bits", "energy": "energy_uJ"}[args.cost or "size"]
        out_path = args.out or os.path.join(os.path.dirname(results_path) or ".", "pareto.csv")
    else:
        cfg = load_config(args.config)
        results_path = os.path.join(cfg.output_dir, "results.csv")
        mode = args.cost or cfg.reg_mode
        cost_key = {"size": "size_bits", "energy": "energy_uJ"}[mode]
        out_path = args.out or os.path.join(cfg.output_dir, "pareto.csv")
    try:
        with open(results_path, newline="", encoding="utf-8") as fh:
            records = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read results {results_path}: {exc}") from exc
    if not records:
        raise ConfigError(f"{results_path} holds no records")
    front = pareto_front(records, cost_key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(records[0].keys()))
    writer.writeheader()
    writer.writerows(front)
    atomic_write_bytes(out_path, buf.getvalue().encode())
    log.info("pareto front: %d of %d records -> %s", len(front), len(records), out_path)
    return EXIT_OK


def cmd_space(args) -> int:
    cfg = load_config(args.config)
    layers = cfg.effective_layers()
    lw = count_search_space(layers, cfg.p_w, cfg.p_x, "layerwise")
    cw = count_search_space(layers, cfg.p_w, cfg.p_x, "channelwise")
    searchable = [s for s in layers if s.is_quantized and s.searchable]
    report = "\n".join([
        f"searchable layers : {len(searchable)}",
        f"total channels    : {sum(s.out_channels for s in searchable)}",
        f"activation set    : {list(cfg.p_x.bits)}",
        f"weight set        : {list(cfg.p_w.bits)}",
        f"layer-wise space  : 10^{lw:.3f}",
        f"channel-wise space: 10^{cw:.3f}",
    ])
    print(report)
    if args.out:
        atomic_write_text(args.out, report + "\n")
    return EXIT_OK


def cmd_lower(args) -> int:
    cfg = load_config(args.config)
    layers = cfg.effective_layers()
    state = load_npz(args.checkpoint)
    with open(args.assignment, encoding="utf-8") as fh:
        assignment = PrecisionAssignment.from_jsonable(json.load(fh))
    deploy = DeployModel(layers, state, assignment, cfg.input_shape)
    lowered = lower_model(deploy)
    diff = verify_equivalence(deploy, lowered, n_inputs=args.n_inputs,
                              seed=args.seed if args.seed is not None else 0)
    out_path = args.out or "lowered.zip"
    export_lowered(lowered, out_path)
    report = {
        "max_abs_diff": diff,
        "size_bits": lowered.size_bits(),
        "layers": [
            {"index": rec.index, "kind": rec.kind, "permuted": rec.permuted,
             "groups": [{"bits": s.bits, "channels": len(s.positions)}
                        for s in rec.sublayers]}
            for rec in lowered.quant_layers()
        ],
        "skipped": lowered.report,
    }
    atomic_write_text(out_path + ".report.json", json.dumps(report, indent=1))
    print(f"lowered -> {out_path} (max |diff| = {diff})")
    if diff != 0.0:
        raise EquivalenceError(f"lowered model diverges from original: max diff {diff}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixprec",
        description="Channel-wise mixed-precision search, Pareto sweeps, and lowering.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the lambda sweep from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--seed", type=int, default=None, help="override training seed")
    p.add_argument("--jobs", type=int, default=1, help="concurrent searches")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("pareto", help="filter results.csv down to the Pareto front")
    p.add_argument("results", nargs="?", default=None, help="results.csv path")
    p.add_argument("--config", default=None)
    p.add_argument("--cost", choices=("size", "energy"), default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("space", help="report search-space cardinality")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_space)

    p = sub.add_parser("lower", help="reorder/split a searched model and export it")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True, help="model npz")
    p.add_argument("--assignment", required=True, help="assignment json")
    p.add_argument("--out", default=None, help="lowered container path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-inputs", type=int, default=8, dest="n_inputs")
    p.set_defaults(func=cmd_lower)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("MIXPREC_LOG", "INFO").upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except EquivalenceError as exc:
        log.error("equivalence failure: %s", exc)
        return EXIT_EQUIVALENCE
    except MixprecError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
