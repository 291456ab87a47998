"""The `ran` command line tool.

Subcommands: train, eval, discover, bound, influence, ablate. Every run
writes its outputs atomically into --out together with a manifest.json
that is sufficient to reproduce the command. Exit codes: 0 success,
2 configuration error, 3 training divergence.

Metrics files contain only seed-determined values; wall-clock timing goes
to results.csv, which is the one deliberately non-reproducible output.
"""

import argparse
import csv
import json
import os
import subprocess
import sys
import tempfile

import numpy as np

from . import __version__
from .benchmarks import (CSV_HEADER, get_target, grid_holdout, make_dataset,
                         run_ablation_topology)
from .discovery import (_frac_str, anova_report, smart_select_pairs,
                        symbolic_formula)
from .dynamics import predict_influence
from .model import (AnovaModel, DeepRanStack, DeepBlock, InteractionSet,
                    all_pairs, build_anova_model, build_deep_stack,
                    build_random_topology, param_count)
from .stability import network_bound, unit_lipschitz_bound
from .training import Dataset, TrainConfig, evaluate, loss_and_grad, train
from .units import (DEN_BASIS_2D, NUM_BASIS_2D, RationalUnit1D,
                    RationalUnit2D, eval_1d_batch)

MODEL_FORMAT_VERSION = 1


class ConfigError(Exception):
    """User-facing configuration problem; maps to exit code 2."""


# ---------------------------------------------------------------------------
# atomic output plumbing


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_json(path: str, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True,
                                   default=_json_default) + "\n")


def version_string() -> str:
    """git-describe when available, package version otherwise."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"v{__version__}"


def write_manifest(outdir: str, subcommand: str, resolved: dict,
                   seed: int) -> None:
    write_json(os.path.join(outdir, "manifest.json"), {
        "subcommand": subcommand,
        "config": resolved,
        "version": version_string(),
        "seed": seed,
    })


# ---------------------------------------------------------------------------
# model serialization


def _unit_to_json(u) -> dict:
    rec = {
        "version": MODEL_FORMAT_VERSION,
        "degree_num": int(u.degree_num) if isinstance(u, RationalUnit1D)
        else 2,
        "degree_den": int(u.degree_den) if isinstance(u, RationalUnit1D)
        else 2,
        "num_coeffs": [float(c) for c in u.num_coeffs],
        "den_coeffs": [float(c) for c in u.den_coeffs],
        "gate_logit": float(u.gate_logit),
        "eps": float(u.eps),
    }
    if isinstance(u, RationalUnit2D):
        rec["basis"] = {"num": [list(map(int, b)) for b in u.num_basis],
                        "den": [list(map(int, b)) for b in u.den_basis]}
    return rec


def _unit_from_json(rec: dict):
    num = np.array(rec["num_coeffs"], dtype=float)
    den = np.array(rec["den_coeffs"], dtype=float)
    if "basis" in rec:
        nb = [tuple(b) for b in rec["basis"]["num"]]
        db = [tuple(b) for b in rec["basis"]["den"]]
        return RationalUnit2D(num, den, nb, db,
                              gate_logit=rec["gate_logit"], eps=rec["eps"])
    return RationalUnit1D(num, den, gate_logit=rec["gate_logit"],
                          eps=rec["eps"])


def save_model(model, path: str) -> None:
    if isinstance(model, AnovaModel):
        doc = {
            "version": MODEL_FORMAT_VERSION,
            "kind": "anova",
            "d": model.d,
            "pairs": [list(p) for p in model.iset.pairs],
            "main_units": [_unit_to_json(u) for u in model.main_units],
            "pair_units": [_unit_to_json(u) for u in model.pair_units],
            "head_w": model.head_w.tolist(),
            "head_b": model.head_b.tolist(),
        }
    elif isinstance(model, DeepRanStack):
        doc = {
            "version": MODEL_FORMAT_VERSION,
            "kind": "deep",
            "blocks": [{
                "weight": b.weight.tolist(),
                "units": [_unit_to_json(u) for u in b.units],
                "gate_logit": float(b.gate_logit),
            } for b in model.blocks],
            "in_weight": model.in_weight.tolist(),
            "in_bias": model.in_bias.tolist(),
            "out_weight": model.out_weight.tolist(),
            "out_bias": model.out_bias.tolist(),
        }
    else:
        raise ConfigError(f"cannot serialize model type {type(model)}")
    write_json(path, doc)


def load_model(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"model file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"model file {path} is not valid JSON: {e}")
    kind = doc.get("kind")
    if kind == "anova":
        iset = InteractionSet(doc["d"], [tuple(p) for p in doc["pairs"]])
        return AnovaModel(
            [_unit_from_json(r) for r in doc["main_units"]], iset,
            [_unit_from_json(r) for r in doc["pair_units"]],
            np.array(doc["head_w"], dtype=float),
            np.array(doc["head_b"], dtype=float))
    if kind == "deep":
        blocks = [DeepBlock(np.array(b["weight"], dtype=float),
                            [_unit_from_json(r) for r in b["units"]],
                            b["gate_logit"]) for b in doc["blocks"]]
        return DeepRanStack(blocks,
                            np.array(doc["in_weight"], dtype=float),
                            np.array(doc["in_bias"], dtype=float),
                            np.array(doc["out_weight"], dtype=float),
                            np.array(doc["out_bias"], dtype=float))
    raise ConfigError(f"model file {path} has unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# dataset loading


def load_dataset_csv(path: str) -> Dataset:
    """CSV with header x0,..,x{d-1},y0[,y1..] or x0,..,label.

    Numeric body, d/C inferred from the header; a `label` column turns
    the file into a classification set with one-hot targets.
    """
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError:
        raise ConfigError(f"dataset file not found: {path}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file")
        header = [h.strip() for h in header]
        x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
        y_cols = [i for i, h in enumerate(header) if h.startswith("y")]
        label_col = [i for i, h in enumerate(header) if h == "label"]
        if not x_cols or (not y_cols and not label_col):
            raise ConfigError(
                f"{path}: header must name x columns and y/label columns, "
                f"got {header}")
        if y_cols and label_col:
            raise ConfigError(f"{path}: mixed y and label columns")
        if x_cols != list(range(len(x_cols))):
            raise ConfigError(f"{path}: x columns must come first")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ConfigError(
                    f"{path}:{lineno}: expected {len(header)} cells, "
                    f"got {len(row)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ConfigError(
                        f"{path}:{lineno}: non-numeric cell {cell!r} "
                        f"in column {col}")
                if not np.isfinite(v):
                    raise ConfigError(
                        f"{path}:{lineno}: non-finite cell {cell!r} "
                        f"in column {col}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    X = arr[:, x_cols]
    if y_cols:
        Y = arr[:, y_cols]
    else:
        labels = arr[:, label_col[0]]
        classes = np.unique(labels)
        Y = (labels[:, None] == classes[None, :]).astype(float)
    name = os.path.splitext(os.path.basename(path))[0]
    return Dataset(X, Y, name=name)


def _resolve_dataset(args, need: str = "train"):
    if getattr(args, "benchmark", None) and getattr(args, "data", None):
        raise ConfigError("--benchmark and --data are mutually exclusive")
    if args.benchmark:
        target = get_target(args.benchmark)
        recipe = dict(target.recipe)
        if "grid" in recipe:
            tr, te = grid_holdout(target, recipe["grid"],
                                  recipe.get("holdout", 7), seed=args.seed)
        else:
            n = getattr(args, "n", None) or recipe.get("n", 1024)
            tr = make_dataset(target, n, seed=args.seed)
            te = make_dataset(target, recipe.get("n_test", 2000),
                              seed=args.seed + 7919)
        return target, tr, te
    if args.data:
        ds = load_dataset_csv(args.data)
        return None, ds, None
    raise ConfigError(f"{need} needs either --benchmark or --data")


# ---------------------------------------------------------------------------
# flag parsing helpers


def _parse_degrees(text: str):
    try:
        m, n = (int(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"--degrees wants 'm,n', got {text!r}")
    if m < 0 or n < 0:
        raise ConfigError("degrees must be nonnegative")
    return m, n


def _parse_topology(text, d: int, seed: int, dataset=None):
    if text is None or text == "none":
        return []
    if text == "full":
        return all_pairs(d)
    if text.startswith("random:"):
        return build_random_topology(d, _pos_int(text.split(":", 1)[1],
                                                 "random pair count"), seed)
    if text.startswith("smart:"):
        if dataset is None:
            raise ConfigError("smart topology needs training data")
        return smart_select_pairs(dataset,
                                  _pos_int(text.split(":", 1)[1],
                                           "smart pair count"), seed=seed)
    if text.startswith("pairs:"):
        pairs = []
        for part in text.split(":", 1)[1].split(","):
            bits = part.split("-")
            if len(bits) != 2:
                raise ConfigError(f"bad pair {part!r}, want i-j")
            try:
                pairs.append((int(bits[0]), int(bits[1])))
            except ValueError:
                raise ConfigError(f"bad pair {part!r}, want integers i-j")
        return pairs
    raise ConfigError(f"unknown topology {text!r}")


def _pos_int(text: str, what: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise ConfigError(f"{what} must be an integer, got {text!r}")
    if v < 1:
        raise ConfigError(f"{what} must be >= 1")
    return v


def _build_from_flags(args, d: int, C: int, dataset, recipe: dict):
    degrees = _parse_degrees(args.degrees) if args.degrees \
        else tuple(recipe.get("degrees", (3, 2)))
    if args.deep and args.topology:
        raise ConfigError("--deep and --topology are mutually exclusive")
    # an explicit --topology overrides a deep-stack recipe default
    deep = args.deep or ("deep" if "depth" in recipe
                         and args.topology is None else None)
    if deep:
        if deep == "deep":
            L, width = recipe["depth"], recipe.get("width", d)
        else:
            try:
                L, width = (int(p) for p in deep.split(","))
            except ValueError:
                raise ConfigError(f"--deep wants 'L,width', got {deep!r}")
            if L < 1 or width < 1:
                raise ConfigError("--deep L and width must be >= 1")
        return build_deep_stack(d, width=width, depth=L, C=C,
                                degree_num=degrees[0], degree_den=degrees[1],
                                seed=args.seed)
    topo_flag = args.topology
    if topo_flag is None:
        topo = recipe.get("pairs")
        if topo is None:
            rt = recipe.get("topology")
            topo = _parse_topology(rt, d, args.seed, dataset) \
                if isinstance(rt, str) else rt
    else:
        topo = _parse_topology(topo_flag, d, args.seed, dataset)
    return build_anova_model(d, C=C, degree_num=degrees[0],
                             degree_den=degrees[1], topology=topo,
                             seed=args.seed)


def _train_config(args, recipe: dict, loss: str) -> TrainConfig:
    return TrainConfig(
        loss=loss,
        lr_main=args.lr if args.lr is not None else recipe.get("lr", 1e-2),
        lr_den_gate_scale=recipe.get("lr_scale", 1.0),
        weight_decay_den=recipe.get("wd", 0.0),
        group_lasso_lambda=args.group_lasso if args.group_lasso is not None
        else recipe.get("lam", 0.0),
        batch_size=recipe.get("batch_size", 0),
        epochs=args.epochs if args.epochs is not None
        else recipe.get("epochs", 4000),
        seed=args.seed,
        val_fraction=recipe.get("val_fraction", 0.2),
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args) -> int:
    target, train_ds, test_ds = _resolve_dataset(args)
    d = train_ds.d
    C = train_ds.targets.shape[1]
    recipe = dict(target.recipe) if target else {}
    loss = "softmax_ce" if (args.data and C > 1) else "mse"
    model = _build_from_flags(args, d, C, train_ds, recipe)
    config = _train_config(args, recipe, loss)
    report = train(model, train_ds, config)

    name = target.name if target else train_ds.name
    save_model(model, os.path.join(args.out, "model.json"))
    train_loss = evaluate(model, train_ds.inputs, train_ds.targets, loss)
    lines = [
        "metric,value",
        f"benchmark,{name}",
        f"params,{param_count(model)}",
        f"seed,{args.seed}",
        f"train_{loss},{train_loss:.17g}",
        f"final_val_{loss},{report.final_val_loss:.17g}",
        f"best_epoch,{report.best_epoch}",
        f"diverged,{int(report.diverged)}",
    ]
    test_loss = None
    if test_ds is not None:
        test_loss = evaluate(model, test_ds.inputs, test_ds.targets, loss)
        lines.append(f"test_{loss},{test_loss:.17g}")
    _atomic_write(os.path.join(args.out, "metrics.csv"),
                  "\n".join(lines) + "\n")
    te = "" if test_loss is None else f"{test_loss:.6e}"
    _atomic_write(os.path.join(args.out, "results.csv"),
                  CSV_HEADER + "\n" +
                  f"{name},{_model_tag(model)},{param_count(model)},"
                  f"{args.seed},{train_loss:.6e},{te},,"
                  f"{report.wall_clock_s * 1e3:.0f}\n")
    write_manifest(args.out, "train", _resolved(args), args.seed)
    return 3 if report.diverged else 0


def _model_tag(model) -> str:
    if isinstance(model, AnovaModel):
        pairs = ";".join(f"{i}-{j}" for i, j in model.iset.pairs) or "none"
        return f"ran[d={model.d},pairs={pairs}]"
    return f"deep[L={model.depth},w={model.width}]"


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    target, ds, _ = _resolve_dataset(args, need="eval")
    if target is not None:
        ds = make_dataset(target, 2000, seed=args.seed + 7919)
    loss = args.loss
    value = evaluate(model, ds.inputs, ds.targets, loss)
    _atomic_write(os.path.join(args.out, "metrics.csv"),
                  "metric,value\n"
                  f"dataset,{ds.name}\n"
                  f"n,{ds.n}\n"
                  f"{loss},{value:.17g}\n")
    write_manifest(args.out, "eval", _resolved(args), args.seed)
    return 0


def _dense_frac_list(poly: dict, arity: int):
    """Fraction strings on a dense ascending-degree (1D) or fixed 2D basis."""
    if arity == 1:
        top = max((k[0] for k in poly), default=0)
        return [_frac_str(poly.get((k,), 0)) for k in range(top + 1)]
    basis = [(0, 0)] + NUM_BASIS_2D + DEN_BASIS_2D
    seen, order = set(), []
    for b in basis:
        if b not in seen:
            seen.add(b)
            order.append(b)
    extras = sorted(k for k in poly if k not in seen)
    return {str(list(k)): _frac_str(poly.get(k, 0))
            for k in order + extras if poly.get(k, 0) != 0} or \
        {str([0, 0]): "0"}


def _cmd_discover(args) -> int:
    model = load_model(args.model)
    if not isinstance(model, AnovaModel):
        raise ConfigError("discover works on additive models only")
    box = None
    if args.benchmark:
        box = [tuple(b) for b in get_target(args.benchmark).train_box]
    form = symbolic_formula(model, precision=args.precision, box=box)
    _atomic_write(os.path.join(args.out, "formula.txt"),
                  form.expression + "\n")
    write_json(os.path.join(args.out, "terms.json"), {
        "terms": [{
            "kind": t.kind,
            "indices": list(t.indices),
            "num": _dense_frac_list(t.num, len(t.indices)),
            "den": _dense_frac_list(t.den or {(0,) * len(t.indices): 1},
                                    len(t.indices)),
            "gate": t.gate,
            "head": [_frac_str(w) for w in t.head_weights],
            "den_fit_residual": t.den_fit_residual,
        } for t in form.terms],
        "bias": [_frac_str(b) for b in form.bias],
        "expression": form.expression,
        "complexity": form.complexity,
        "unsnapped": form.unsnapped,
    })
    if args.data or args.benchmark:
        if args.data:
            ds = load_dataset_csv(args.data)
        else:
            ds = make_dataset(get_target(args.benchmark), 2000,
                              seed=args.seed)
        _, shares, degenerate = anova_report(model, ds)
        rows = ["term,share"]
        rows += [f"{k},{v:.17g}" for k, v in shares.items()]
        if degenerate:
            rows.append("degenerate,1")
        _atomic_write(os.path.join(args.out, "anova.csv"),
                      "\n".join(rows) + "\n")
    write_manifest(args.out, "discover", _resolved(args), args.seed)
    return 0


def _cmd_bound(args) -> int:
    model = load_model(args.model)
    if args.radius <= 0:
        raise ConfigError("--radius must be positive")
    B = args.radius
    if isinstance(model, DeepRanStack):
        units = [(f"block{l}_unit{k}", u)
                 for l, blk in enumerate(model.blocks)
                 for k, u in enumerate(blk.units)]
        total = network_bound(model, B)
    else:
        units = [(f"main{i}", u) for i, u in enumerate(model.main_units)]
        total = None
    reports = {}
    csv_rows = ["unit,x,abs_deriv,K_phi"]
    xs = np.linspace(-B, B, 257)
    for label, u in units:
        rep = unit_lipschitz_bound(u, B)
        reports[label] = {k: getattr(rep, k) for k in (
            "B", "W_P", "W_Q", "S0_m", "S1_m", "S1_n", "M_P", "M_P_prime",
            "M_Q_prime", "K_phi", "empirical_sup", "margin")}
        ev = eval_1d_batch(u, xs, with_params=False)
        csv_rows += [f"{label},{x:.17g},{abs(dx):.17g},{rep.K_phi:.17g}"
                     for x, dx in zip(xs, ev.raw_dx)]
    doc = {"radius": B, "units": reports}
    if total is not None:
        doc["network_bound"] = total
    write_json(os.path.join(args.out, "lipschitz.json"), doc)
    _atomic_write(os.path.join(args.out, "lipschitz.csv"),
                  "\n".join(csv_rows) + "\n")
    write_manifest(args.out, "bound", _resolved(args), args.seed)
    return 0


def _parse_indices(text: str, n: int, what: str):
    try:
        idx = [int(p) for p in text.split(",") if p != ""]
    except ValueError:
        raise ConfigError(f"--{what} wants comma-separated integers")
    if not idx:
        raise ConfigError(f"--{what} must name at least one row")
    for i in idx:
        if not 0 <= i < n:
            raise ConfigError(f"--{what} index {i} out of range [0, {n})")
    return idx


def _cmd_influence(args) -> int:
    model = load_model(args.model)
    if args.data:
        ds = load_dataset_csv(args.data)
    elif args.benchmark:
        ds = make_dataset(get_target(args.benchmark), 256, seed=args.seed)
    else:
        raise ConfigError("influence needs --data or --benchmark")
    if args.eta <= 0:
        raise ConfigError("--eta must be positive")
    queries = _parse_indices(args.query, ds.n, "query")
    updates = _parse_indices(args.update, ds.n, "update")
    rows = ["t,x_u_index,x_o_index,channel,value"]
    discrepancies = []
    for t, u in enumerate(updates):
        x_u, y_u = ds.inputs[u], ds.targets[u]
        for o in queries:
            rec = predict_influence(model, ds.inputs[o], x_u, y_u, args.eta)
            discrepancies.append(rec.discrepancy)
            rows += [f"{t},{u},{o},{c},{v:.17g}"
                     for c, v in enumerate(np.atleast_1d(rec.predicted))]
        # the analyzed step is then actually taken, so later rows see it
        _, grads, _ = loss_and_grad(model, ds.inputs[u:u + 1],
                                    ds.targets[u:u + 1], "mse")
        model.set_flat(model.get_flat() - args.eta * grads.flat)
    _atomic_write(os.path.join(args.out, "influence.csv"),
                  "\n".join(rows) + "\n")
    write_json(os.path.join(args.out, "influence.json"), {
        "eta": args.eta,
        "steps": len(updates),
        "queries": queries,
        "updates": updates,
        "mean_abs_discrepancy": float(np.mean(discrepancies)),
        "max_abs_discrepancy": float(np.max(discrepancies)),
    })
    write_manifest(args.out, "influence", _resolved(args), args.seed)
    return 0


def _cmd_ablate(args) -> int:
    seeds = tuple(_parse_indices(args.seeds, 10 ** 9, "seeds"))
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    results, table = run_ablation_topology(gamma=args.gamma, seeds=seeds,
                                           overrides=overrides)
    rows = [CSV_HEADER] + [r.csv_row() for r in results]
    _atomic_write(os.path.join(args.out, "results.csv"),
                  "\n".join(rows) + "\n")
    det = ["topology,seed,params,train_mse,test_mse"]
    det += [f"{r.model_desc},{r.seed},{r.params},"
            f"{r.train_mse:.17g},{r.test_mse:.17g}" for r in results]
    _atomic_write(os.path.join(args.out, "metrics.csv"),
                  "\n".join(det) + "\n")
    write_json(os.path.join(args.out, "aggregate.json"),
               {"gamma": args.gamma, "table": table})
    write_manifest(args.out, "ablate", _resolved(args), args.seed)
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _resolved(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _add_common(p, with_out=True):
    if with_out:
        p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ran",
        description="rational additive networks: train, analyze, discover")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    t = sub.add_parser("train", help="fit a model on a benchmark or CSV")
    t.add_argument("--benchmark")
    t.add_argument("--data")
    t.add_argument("--n", type=int, help="training points (benchmark only)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--degrees", help="numerator,denominator degrees m,n")
    t.add_argument("--topology",
                   help="random:k | smart:k | full | pairs:i-j,...")
    t.add_argument("--deep", help="L,width deep stack instead of additive")
    t.add_argument("--lambda", dest="group_lasso", type=float,
                   help="group lasso weight on pair units")
    _add_common(t)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--data")
    e.add_argument("--benchmark")
    e.add_argument("--loss", default="mse",
                   choices=["mse", "mae", "softmax_ce"])
    _add_common(e)
    e.set_defaults(func=_cmd_eval)

    d = sub.add_parser("discover", help="extract a snapped symbolic formula")
    d.add_argument("--model", required=True)
    d.add_argument("--precision", type=float, default=1e-5)
    d.add_argument("--data", help="dataset for variance shares (optional)")
    d.add_argument("--benchmark",
                   help="benchmark box/shares source (optional)")
    _add_common(d)
    d.set_defaults(func=_cmd_discover)

    b = sub.add_parser("bound", help="certified Lipschitz bounds")
    b.add_argument("--model", required=True)
    b.add_argument("--radius", type=float, required=True)
    _add_common(b)
    b.set_defaults(func=_cmd_bound)

    i = sub.add_parser("influence",
                       help="first-order cross-example influence")
    i.add_argument("--model", required=True)
    i.add_argument("--data")
    i.add_argument("--benchmark")
    i.add_argument("--query", required=True, help="query row indices i,j,...")
    i.add_argument("--update", required=True,
                   help="update row indices i,j,...")
    i.add_argument("--eta", type=float, default=1e-2)
    _add_common(i)
    i.set_defaults(func=_cmd_influence)

    a = sub.add_parser("ablate", help="interaction topology comparison")
    a.add_argument("--gamma", type=float, default=1.0)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--epochs", type=int)
    _add_common(a)
    a.set_defaults(func=_cmd_ablate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if getattr(args, "out", None):
            os.makedirs(args.out, exist_ok=True)
            if not os.access(args.out, os.W_OK):
                raise ConfigError(f"output directory {args.out} not writable")
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
