"""Command-line interface: ``rivercast <command> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import grc
from . import training as tr
from .network import generate_network, load_graph, refine_network, save_graph, save_mapping, \
    select_gauge_reaches, split_gauges
from .oracle import REGIMES, OraclePhysics, make_observations, route, synthesize_runoff
from .pipeline import Dataset, SplitSpec, read_dataset, write_dataset

log = logging.getLogger("rivercast")

MANIFEST = "run_manifest.json"


class UsageError(Exception):
    """Invalid arguments or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers ---------------------------------------------------------------------

def default_seed():
    raw = os.environ.get("GRC_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GRC_SEED must be an integer, got {raw!r}") from None


def parse_config(path):
    """Read a JSON object or ``key=value`` lines (``#`` comments allowed)."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    text = p.read_text()
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(value)
    return out


def _coerce(value):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            pass
    return value


def split_config(conf):
    """Route config keys to model, training and fine-tuning settings (``ft.`` prefix)."""
    grc_keys = {f.name for f in fields(grc.GrcConfig)}
    tr_keys = {f.name for f in fields(tr.TrainConfig)}
    ft_keys = {f.name for f in fields(tr.FinetuneConfig)}
    model, train, ft = {}, {}, {}
    for key, value in conf.items():
        if key.startswith("ft."):
            if key[3:] not in ft_keys:
                raise UsageError(f"unknown fine-tuning config key {key!r}")
            ft[key[3:]] = value
        elif key in grc_keys:
            model[key] = value
        elif key in tr_keys:
            train[key] = value
        else:
            raise UsageError(f"unknown config key {key!r}")
    return model, train, ft


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(root):
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            out[str(p.relative_to(root))] = sha256(p)
    return out


def prepare_out(path, overwrite):
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise UsageError(f"output directory {out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out, args, config, inputs, seeds, started, argv=None):
    inputs = [Path(p) for p in inputs if p is not None]
    hashes = {}
    for p in inputs:
        if p.is_dir():
            hashes.update({f"{p}/{k}": v for k, v in _hash_tree(p).items()})
        elif p.exists():
            hashes[str(p)] = sha256(p)
    doc = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": config,
        "seeds": seeds,
        "input_hashes": hashes,
        "outputs": _hash_tree(out),
        "started": started,
        "finished": _now(),
    }
    (Path(out) / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return doc


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_data(path):
    _require(path, "dataset directory")
    return read_dataset(path)


def _load_ckpt(path):
    d = _require(path, "checkpoint directory")
    _require(d / "params.json", "checkpoint manifest")
    return grc.load_checkpoint(d)


def _static_norm(norm):
    return {"mu_static": norm.mu_static.tolist(), "sd_static": norm.sd_static.tolist()}


def _with_model_statics(ds, manifest):
    """Normalise statics with the checkpoint's statistics when it carries them."""
    sn = manifest.get("static_norm")
    if not sn:
        return ds
    norm = replace(ds.norm, mu_static=np.asarray(sn["mu_static"]), sd_static=np.asarray(sn["sd_static"]))
    return ds.with_norm(norm)


def _model_cfg(args, model_conf):
    conf = dict(model_conf)
    if args.mode is not None:
        conf["mode"] = args.mode
    try:
        return grc.GrcConfig(**conf)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from None


def _train_cfg(args, train_conf):
    conf = dict(train_conf)
    conf.setdefault("seed", args.seed)
    for key in ("epochs", "max_batches"):
        if getattr(args, key, None) is not None:
            conf[key] = getattr(args, key)
    try:
        return tr.TrainConfig(**conf)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def _ft_cfg(args, ft_conf):
    conf = dict(ft_conf)
    conf.setdefault("seed", args.seed)
    if getattr(args, "ft_epochs", None) is not None:
        conf["epochs"] = args.ft_epochs
    return tr.FinetuneConfig(**conf)


def _log_row(row):
    log.info("epoch %d train %.5f val %.5f lr %.2e", row["epoch"], row["train_loss"], row["val_loss"], row["lr"])


def _save_model(out, cfg, result, ds, seed, extra=None):
    out = Path(out)
    grc.save_checkpoint(out, cfg, result.params, seed=seed, norm_ref="norm.json",
                        extra={"static_norm": _static_norm(ds.norm), "best_epoch": result.best_epoch,
                               "best_val": result.best_val, "status": result.status, **(extra or {})})
    (out / "norm.json").write_text(json.dumps(ds.norm.to_dict(), indent=2))
    result.write_log(out / "train_log.csv")


def _gauges(args, ds):
    if args.gauges_file:
        reaches = json.loads(_require(args.gauges_file, "gauge file").read_text())
        return sorted(int(r) for r in reaches)
    return select_gauge_reaches(ds.graph, ds.feats, args.gauges, args.seed)


# -- commands --------------------------------------------------------------------

def cmd_gen_network(args, conf):
    out = prepare_out(args.out, args.overwrite)
    graph, feats = generate_network(args.reaches, args.branching, args.seed)
    save_graph(out / "graph.json", graph, feats)
    if args.refine > 1:
        fine_g, fine_f, mapping = refine_network(graph, feats, args.refine)
        save_graph(out / "graph_fine.json", fine_g, fine_f)
        save_mapping(out / "coarse_to_fine.json", mapping)
    log.info("wrote %d-reach network to %s", graph.n_reaches, out)
    return out, [], {"network": args.seed}


def cmd_gen_data(args, conf):
    if args.graph:
        graph, feats = load_graph(_require(args.graph, "graph file"))
    else:
        graph, feats = generate_network(args.reaches, args.branching, args.seed)
    split = SplitSpec.from_lengths(*args.split)
    steps = args.steps or split.end
    if steps < split.end:
        raise UsageError(f"--steps {steps} is shorter than the split ({split.end} steps)")
    if args.regime not in REGIMES:
        raise UsageError(f"unknown regime {args.regime!r}; choose from {sorted(REGIMES)}")
    out = prepare_out(args.out, args.overwrite)
    forcing = synthesize_runoff(graph, feats, steps, args.seed, args.regime)
    truth = OraclePhysics()
    hydro = route(graph, feats, forcing, truth)
    meta = {"seed": args.seed, "regime": args.regime, "physics": "truth"}
    ds = Dataset(graph, feats, forcing, hydro, split, meta=meta)
    write_dataset(out, ds)
    if args.obs_manning_scale != 1.0 or args.obs_runoff_bias != 1.0:
        obs_phys = OraclePhysics(manning_scale=args.obs_manning_scale, runoff_bias=args.obs_runoff_bias)
        obs = make_observations(truth, obs_phys, graph, feats, forcing)
        obs_ds = Dataset(graph, feats, forcing, obs, split, norm=ds.norm,
                         meta={**meta, "physics": "observed", "manning_scale": args.obs_manning_scale,
                               "runoff_bias": args.obs_runoff_bias})
        write_dataset(out / "obs", obs_ds)
    return out, [args.graph], {"data": args.seed}


def cmd_pretrain(args, conf):
    model_conf, train_conf, _ = split_config(conf)
    cfg = _model_cfg(args, model_conf)
    tcfg = _train_cfg(args, train_conf)
    ds = _load_data(args.data)
    out = prepare_out(args.out, args.overwrite)
    result = tr.pretrain(cfg, tcfg, ds, log_fn=_log_row)
    _save_model(out, cfg, result, ds, tcfg.seed)
    if result.status == "aborted_nonfinite":
        raise RuntimeError("training aborted on a non-finite loss; best checkpoint saved")
    return out, [args.data], {"train": tcfg.seed}


def cmd_ablate(args, conf):
    model_conf, train_conf, _ = split_config(conf)
    base = _model_cfg(args, model_conf)
    tcfg = _train_cfg(args, train_conf)
    ds = _load_data(args.data)
    out = prepare_out(args.out, args.overwrite)
    results = tr.run_ablation_matrix(ds, base, tcfg, log_fn=lambda k, row: _log_row(row))
    values, extra = {}, {}
    failed = []
    for key, res in results.items():
        if isinstance(res, Exception):
            failed.append(tr.variant_key(key))
            extra[key] = {"status": f"failed: {res}"}
            continue
        cfg = tr.variant_config(base, key)
        _save_model(out / f"variant_{ev._label(key)}", cfg, res, ds, tcfg.seed)
        curves, _, _ = ev.evaluate(cfg, res.params, ds, "test")
        values[key] = float(np.nanmedian(curves.nse_avg[:, 0]))
        extra[key] = {"val_loss": float(res.best_val), "fhv": float(np.nanmedian(curves.fhv_avg[:, 0])),
                      "status": res.status}
    ev.write_ablation_csv(out / "ablation_matrix.csv", values, extra)
    if failed:
        raise RuntimeError(f"{len(failed)} ablation cell(s) failed; see ablation_matrix.csv")
    return out, [args.data], {"train": tcfg.seed}


def cmd_finetune(args, conf):
    _, _, ft_conf = split_config(conf)
    cfg, params, manifest = _load_ckpt(args.checkpoint)
    ft = _ft_cfg(args, ft_conf)
    ds = _with_model_statics(_load_data(args.data), manifest)
    gauges = _gauges(args, ds)
    gs = split_gauges(ds.graph, gauges, [args.ratio], args.seed)[0]
    out = prepare_out(args.out, args.overwrite)
    before = params.copy()
    result = tr.finetune(cfg, params, ds, sorted(gs.supervised), ft, log_fn=_log_row)
    frozen, _ = ft.layer_plan(cfg)
    if not tr.frozen_unchanged(before, result.params, frozen):
        raise RuntimeError("frozen layers changed during fine-tuning")
    _save_model(out, cfg, result, ds, args.seed,
                extra={"static_norm": manifest.get("static_norm") or _static_norm(ds.norm),
                       "supervised": sorted(gs.supervised), "unsupervised": sorted(gs.unsupervised)})
    rows = []
    for tag, params_ in (("pretrained", before), ("finetuned", result.params)):
        for group, reaches in (("supervised", gs.supervised), ("unsupervised", gs.unsupervised)):
            rows.append({"model": tag, "group": group, "n": len(reaches),
                         "median_nse": tr.gauge_skill(cfg, params_, ds, reaches)})
    _write_rows(out / "finetune.csv", rows)
    return out, [args.checkpoint, args.data], {"finetune": args.seed}


def cmd_sweep(args, conf):
    _, train_conf, ft_conf = split_config(conf)
    cfg, params, manifest = _load_ckpt(args.checkpoint)
    ft = _ft_cfg(args, ft_conf)
    ds = _with_model_statics(_load_data(args.data), manifest)
    gauges = _gauges(args, ds)
    scratch = _train_cfg(args, train_conf) if args.scratch else None
    out = prepare_out(args.out, args.overwrite)
    res = tr.finetune_ratio_sweep(cfg, params, ds, gauges, args.ratios, ft, scratch, seed=args.seed,
                                  log_fn=lambda kind, ratio, row: _log_row(row))
    res.write_csv(out / "sweep.csv")
    for ratio, gs in zip(args.ratios, res.gauge_sets):
        if not gs.unsupervised:
            print(f"notice: ratio {ratio:g} supervises every gauge; unsupervised evaluation skipped")
    (out / "gauge_sets.json").write_text(json.dumps(
        [{"ratio": r, "supervised": sorted(g.supervised), "unsupervised": sorted(g.unsupervised)}
         for r, g in zip(args.ratios, res.gauge_sets)], indent=2))
    return out, [args.checkpoint, args.data], {"sweep": args.seed}


def cmd_eval(args, conf):
    cfg, params, manifest = _load_ckpt(args.checkpoint)
    ds = _with_model_statics(_load_data(args.data), manifest)
    out = Path(args.out)
    name = args.name or Path(args.checkpoint).name
    target = out / f"eval_{name}.npz"
    if target.exists() and not args.overwrite:
        raise UsageError(f"{target} exists; pass --overwrite to replace it")
    out.mkdir(parents=True, exist_ok=True)
    curves, _, _ = ev.evaluate(cfg, params, ds, args.partition, workers=args.workers)
    ev.save_eval(target, curves)
    if args.spinup and not cfg.hotstart:
        s, per = ev.spinup_curve(cfg, params, ds, args.spinup, args.partition)
        _write_rows(out / "spinup.csv", [{"spinup": int(a), "median_nse": float(np.nanmedian(b))}
                                         for a, b in zip(s, per)])
    print(f"{name}: median lead-averaged discharge NSE {np.nanmedian(curves.nse_avg[:, 0]):.4f}")
    return out, [args.checkpoint, args.data], {}


def cmd_report(args, conf):
    run = _require(args.run, "run directory")
    out = Path(args.out) if args.out else run
    if not list(run.glob("eval_*.npz")) and not (run / "ablation_matrix.csv").exists():
        raise UsageError(f"{run} holds no eval_*.npz or ablation_matrix.csv to report")
    exps = ev.report(run, out, figures=not args.no_figures)
    print(f"wrote metrics.csv and summary.json for {len([e for e in exps if not e.startswith('_')])} "
          f"experiment(s) to {out}")
    return out, [run], {}


def _write_rows(path, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})


# -- parser ----------------------------------------------------------------------

def _ratios(text):
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ratios, got {text!r}") from None


def _split(text):
    try:
        parts = [int(x) for x in text.split(",")]
    except ValueError:
        parts = []
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected train,val,test step counts, got {text!r}")
    return parts


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="rivercast", description="Synthetic river-network data, GRC training and evaluation.",
                formatter_class=fmt)
    p.add_argument("--log-level", default="INFO", help="logging level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, model=False, config=True):
        sp = sub.add_parser(name, help=help_, formatter_class=fmt)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: $GRC_SEED or 0)")
        sp.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        sp.add_argument("--workers", type=int, default=1, help="parallel window evaluation workers")
        if config:
            sp.add_argument("--config", default=None,
                            help="config file: JSON object or key=value lines; 'ft.' keys set fine-tuning")
        if model:
            sp.add_argument("--mode", choices=(grc.COLDSTART, grc.HOTSTART), default=None,
                            help="inference mode (default: config 'mode' or coldstart)")
        return sp

    sp = add("gen-network", cmd_gen_network, "generate a synthetic river network", config=False)
    sp.add_argument("--reaches", type=int, default=200, help="number of reaches")
    sp.add_argument("--branching", type=float, default=0.3, help="branching probability")
    sp.add_argument("--refine", type=int, default=1, help="also write a network with each reach split k ways")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("gen-data", cmd_gen_data, "synthesize runoff and route it with the oracle", config=False)
    sp.add_argument("--reaches", type=int, default=200, help="reaches of a generated network")
    sp.add_argument("--branching", type=float, default=0.3, help="branching probability")
    sp.add_argument("--graph", default=None, help="existing graph.json instead of generating one")
    sp.add_argument("--steps", type=int, default=None, help="daily steps (default: end of split)")
    sp.add_argument("--split", type=_split, default=[2000, 400, 400], help="train,val,test step counts")
    sp.add_argument("--regime", default="humid", help=f"runoff regime {sorted(REGIMES)}")
    sp.add_argument("--obs-manning-scale", type=float, default=1.0,
                    help="Manning factor of the perturbed observation oracle (writes obs/ when != 1)")
    sp.add_argument("--obs-runoff-bias", type=float, default=1.0, help="runoff factor of the observation oracle")
    sp.add_argument("--out", required=True, help="dataset directory")

    for name, fn, help_ in (("pretrain", cmd_pretrain, "pretrain a GRC model on routed truth"),
                            ("ablate", cmd_ablate, "train all 8 ablation variants")):
        sp = add(name, fn, help_, model=True)
        sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--epochs", type=int, default=None, help="override maximum epochs")
        sp.add_argument("--max-batches", dest="max_batches", type=int, default=None,
                        help="cap mini-batches per epoch")
        sp.add_argument("--out", required=True, help="output directory")

    for name, fn, help_ in (("finetune", cmd_finetune, "fine-tune a checkpoint on gauge observations"),
                            ("sweep", cmd_sweep, "fine-tune across nested supervision ratios")):
        sp = add(name, fn, help_)
        sp.add_argument("--checkpoint", required=True, help="pretrained checkpoint directory")
        sp.add_argument("--data", required=True, help="observation dataset directory")
        sp.add_argument("--gauges", type=int, default=40, help="number of candidate gauges")
        sp.add_argument("--gauges-file", default=None, help="JSON list of gauge reach ids")
        sp.add_argument("--ft-epochs", dest="ft_epochs", type=int, default=None, help="fine-tuning epochs")
        sp.add_argument("--out", required=True, help="output directory")
        if name == "finetune":
            sp.add_argument("--ratio", type=float, default=0.5, help="supervised fraction of gauges")
        else:
            sp.add_argument("--ratios", type=_ratios, default=[0.1, 0.25, 0.5, 0.75, 0.9, 1.0],
                            help="comma-separated supervision ratios")
            sp.add_argument("--scratch", action="store_true", help="also train from-scratch baselines")
            sp.add_argument("--epochs", type=int, default=None, help="scratch training epochs")
            sp.add_argument("--max-batches", dest="max_batches", type=int, default=None,
                            help="cap scratch mini-batches per epoch")

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a dataset partition", config=False)
    sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--partition", choices=("train", "val", "test"), default="test", help="partition")
    sp.add_argument("--name", default=None, help="experiment id (default: checkpoint directory name)")
    sp.add_argument("--spinup", type=int, default=0, help="also write a coldstart spin-up curve up to this lag")
    sp.add_argument("--out", required=True, help="run directory receiving eval_<name>.npz")

    sp = add("report", cmd_report, "write metrics.csv, summary.json and figures", config=False)
    sp.add_argument("--run", required=True, help="run directory with eval outputs")
    sp.add_argument("--out", default=None, help="report directory (default: the run directory)")
    sp.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        if args.seed is None:
            args.seed = default_seed()
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        conf = parse_config(getattr(args, "config", None))
        out, inputs, seeds = args.func(args, conf)
        write_manifest(out, args, {**conf, **{k: v for k, v in vars(args).items() if k != "func"}},
                       inputs, seeds, started, argv)
    except (UsageError, FileNotFoundError) as exc:
        print(f"rivercast {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"rivercast {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        log.debug("failure", exc_info=True)
        print(f"rivercast {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
