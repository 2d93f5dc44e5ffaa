"""Command-line front end chaining data generation, training, certification,
bound reports, and closed-loop simulation into reproducible artifacts.

Every subcommand writes its outputs plus a manifest (config hash, seeds,
file list) into --out, and identical invocations produce identical bytes.
Exit codes: 0 success, 2 validation/usage failure, 3 numerical failure.
"""

import argparse
import csv
import io
import os
import sys

import numpy as np

from .autodiff import PowerIterationError
from .certify import (
    certify_network,
    erc_bound_for_network,
    generalization_bound,
    squared_loss_constants,
)
from .cstr import (
    CSTRParams,
    InputBounds,
    IntegrationDivergedError,
    LyapunovSpec,
    generate_dataset,
    level_set_box,
    load_process_config,
    save_process_config,
)
from .io_utils import atomic_write_text, write_manifest
from .lmpc import (
    FirstPrinciplesPredictor,
    MPCConfig,
    NetworkPredictor,
    simulate_closed_loop,
    save_trace,
)
from .network import (
    init_network,
    is_constrained_form,
    load_network,
    save_network,
)
from .plots import plot_closed_loop, plot_history, plot_paired_bars
from .training import (
    TrainConfig,
    TrainingDivergedError,
    evaluate_mse,
    load_dataset,
    load_scaler,
    prepare_splits,
    save_dataset,
    save_history,
    save_scaler,
    train,
)

_PRESETS = {
    "desk": {
        "n_samples": 5000,
        "architectures": ((40, 40), (64, 64)),
        "noise_sds": (0.1, 0.2),
        "max_epochs": 500,
        "patience": 20,
        "bab_budget": 4000,
    },
    "paper": {
        "n_samples": 20000,
        "architectures": ((640, 640), (1280, 1280)),
        "noise_sds": (0.1, 0.2),
        "max_epochs": 500,
        "patience": 20,
        "bab_budget": 20000,
    },
}


# -- shared helpers ---------------------------------------------------------------


def _load_process(path):
    """Process constants from --config, or the built-in benchmark values."""
    if path is None:
        return CSTRParams.benchmark(), LyapunovSpec(), InputBounds()
    if not os.path.exists(path):
        raise FileNotFoundError(f"process config not found: {path}")
    return load_process_config(path)


def _require(path, hint):
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing prerequisite artifact: {path} ({hint})")
    return path


def _write_csv_rows(path, metadata, header, rows):
    buf = io.StringIO()
    for key in sorted(metadata):
        buf.write(f"# {key}={metadata[key]}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _fmt(value):
    return repr(float(value))


def _scaled_input_box(scaler, lyap, bounds):
    """The network's input domain (states over the operating ellipse's box,
    inputs over their saturation box) mapped through the standardizer."""
    half = level_set_box(lyap)
    raw_lo = np.concatenate([-half, bounds.lo])
    raw_hi = np.concatenate([half, bounds.hi])
    return ((raw_lo - scaler.in_mean) / scaler.in_sd,
            (raw_hi - scaler.in_mean) / scaler.in_sd)


def _parse_hidden(text):
    try:
        dims = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValueError(f"bad --hidden value {text!r}; expected e.g. 64,64")
    if not dims or min(dims) < 1:
        raise ValueError("hidden layer sizes must be positive integers")
    return dims


def _train_one(dataset, kind, hidden, noise_sd, seed, max_epochs, patience):
    config = TrainConfig(noise_sd=noise_sd, seed=seed, max_epochs=max_epochs,
                         patience=patience)
    prepared = prepare_splits(dataset, config)
    net = init_network(dataset.inputs.shape[1], list(hidden),
                       dataset.outputs.shape[1], kind=kind, seed=seed)
    result = train(net, prepared.train, prepared.val, config)
    test_mse = evaluate_mse(result.net, prepared.test)
    return result, prepared, test_mse


# -- subcommands ------------------------------------------------------------------


def cmd_generate(args):
    params, lyap, bounds = _load_process(args.config)
    dataset = generate_dataset(params, lyap, bounds, args.n, args.seed,
                               delta=args.delta)
    out = os.path.join(args.out, "dataset.csv")
    save_dataset(
        dataset, out,
        in_cols=("ca_dev", "t_dev", "feed_dev", "heat"),
        out_cols=("ca_dev_next", "t_dev_next"),
        metadata={"n": args.n, "seed": args.seed, "delta": repr(args.delta)},
    )
    config_path = os.path.join(args.out, "process.json")
    save_process_config(config_path, params, lyap, bounds)
    write_manifest(
        os.path.join(args.out, "manifest.json"), "generate",
        {"n": args.n, "delta": args.delta, "config": args.config},
        {"dataset": args.seed}, [out, config_path],
    )
    print(f"wrote {args.n} transition pairs to {out}")
    return 0


def cmd_train(args):
    data_path = _require(args.data, "run `lipmpc generate` first")
    dataset, _, _ = load_dataset(data_path)
    hidden = _parse_hidden(args.hidden)
    result, prepared, test_mse = _train_one(
        dataset, args.kind, hidden, args.noise_sd, args.seed,
        args.epochs, args.patience)

    model_path = os.path.join(args.out, "model.json")
    scaler_path = os.path.join(args.out, "scaler.json")
    history_path = os.path.join(args.out, "history.csv")
    metrics_path = os.path.join(args.out, "metrics.csv")
    save_network(result.net, model_path)
    save_scaler(prepared.scaler, scaler_path)
    save_history(result.history, history_path)
    _write_csv_rows(
        metrics_path, {}, ["kind", "hidden", "noise_sd", "seed",
                           "best_epoch", "val_mse", "test_mse"],
        [[args.kind, "x".join(map(str, hidden)), _fmt(args.noise_sd),
          str(args.seed), str(result.best_epoch), _fmt(result.best_val_mse),
          _fmt(test_mse)]],
    )
    outputs = [model_path, scaler_path, history_path, metrics_path]
    if not args.no_plots:
        hist_plot = os.path.join(args.out, "history.svg")
        plot_history(result.history, hist_plot)
        outputs.append(hist_plot)
    write_manifest(
        os.path.join(args.out, "manifest.json"), "train",
        {"data": args.data, "kind": args.kind, "hidden": list(hidden),
         "noise_sd": args.noise_sd, "epochs": args.epochs,
         "patience": args.patience},
        {"train": args.seed}, outputs,
    )
    print(f"{args.kind} {'x'.join(map(str, hidden))} "
          f"noise={args.noise_sd}: test MSE {test_mse:.3e} "
          f"(best epoch {result.best_epoch})")
    return 0


def cmd_certify(args):
    model_path = _require(args.model, "run `lipmpc train` first")
    net = load_network(model_path)
    lo = hi = None
    if args.scaler is not None:
        scaler = load_scaler(_require(args.scaler, "written by `lipmpc train`"))
        _, lyap, bounds = _load_process(args.config)
        lo, hi = _scaled_input_box(scaler, lyap, bounds)
    elif not is_constrained_form(net):
        raise ValueError(
            "dense certification needs the input domain; pass --scaler "
            "(and optionally --config) so the box can be reconstructed")
    cert = certify_network(net, lo=lo, hi=hi, eps=args.eps,
                           budget=args.budget, n_samples=args.samples,
                           seed=args.seed)
    cert_path = os.path.join(args.out, "certificate.csv")
    _write_csv_rows(
        cert_path, {"model": os.path.basename(model_path)},
        ["method", "upper", "lower", "gap", "boxes_used", "tight"],
        [[cert.method, _fmt(cert.upper), _fmt(cert.lower), _fmt(cert.gap),
          str(cert.boxes_used), str(bool(cert.tight))]],
    )
    report_path = os.path.join(args.out, "certificate.txt")
    atomic_write_text(report_path, (
        f"model: {model_path}\n"
        f"method: {cert.method}\n"
        f"certified Lipschitz upper bound: {cert.upper:.6f}\n"
        f"largest witnessed slope: {cert.lower:.6f}\n"
        f"bracket gap: {cert.gap:.2e}  boxes: {cert.boxes_used}  "
        f"tight: {bool(cert.tight)}\n"
    ))
    write_manifest(
        os.path.join(args.out, "manifest.json"), "certify",
        {"model": args.model, "scaler": args.scaler, "config": args.config,
         "eps": args.eps, "budget": args.budget, "samples": args.samples},
        {"sampling": args.seed}, [cert_path, report_path],
    )
    print(f"{cert.method}: upper {cert.upper:.6f}, lower {cert.lower:.6f}, "
          f"tight={bool(cert.tight)}")
    return 0


def cmd_bounds(args):
    rows = []
    for model_path in args.model:
        _require(model_path, "run `lipmpc train` first")
        net = load_network(model_path)
        kind = "lcnn" if is_constrained_form(net) else "dense"
        erc = erc_bound_for_network(net, args.samples,
                                    input_bound=args.input_bound)
        lips, sup = squared_loss_constants(args.output_bound)
        shapes = [layer.weight.shape for layer in net.layers[:-1]]
        gen = generalization_bound(
            args.empirical, args.input_bound, args.samples, shapes,
            net.out_dim, lips, sup, args.confidence)
        rows.append([os.path.basename(model_path), kind, str(args.samples),
                     _fmt(erc), _fmt(lips), _fmt(sup), _fmt(gen)])
    bounds_path = os.path.join(args.out, "bounds.csv")
    _write_csv_rows(
        bounds_path,
        {"empirical": _fmt(args.empirical), "confidence": _fmt(args.confidence),
         "input_bound": _fmt(args.input_bound),
         "output_bound": _fmt(args.output_bound)},
        ["model", "kind", "samples", "complexity_bound",
         "loss_lipschitz", "loss_sup", "generalization_bound"], rows,
    )
    lines = ["complexity and generalization bounds", ""]
    for row in rows:
        lines.append(f"{row[0]} ({row[1]}, m={row[2]}): "
                     f"complexity {float(row[3]):.4e}, "
                     f"generalization {float(row[6]):.4e}")
    lines.append("")
    lines.append("size-only bounds depend on the architecture alone; "
                 "dense bounds track the trained weight norms.")
    report_path = os.path.join(args.out, "bounds.txt")
    atomic_write_text(report_path, "\n".join(lines) + "\n")
    write_manifest(
        os.path.join(args.out, "manifest.json"), "bounds",
        {"models": list(args.model), "samples": args.samples,
         "empirical": args.empirical, "confidence": args.confidence,
         "input_bound": args.input_bound, "output_bound": args.output_bound},
        {}, [bounds_path, report_path],
    )
    for row in rows:
        print(f"{row[0]}: complexity {float(row[3]):.4e}, "
              f"generalization {float(row[6]):.4e}")
    return 0


def cmd_mpc(args):
    params, lyap, bounds = _load_process(args.config)
    if args.model is not None:
        _require(args.model, "run `lipmpc train` first")
        if args.scaler is None:
            raise ValueError("--model needs --scaler (written by `lipmpc train`)")
        scaler = load_scaler(_require(args.scaler,
                                      "written by `lipmpc train`"))
        predictor = NetworkPredictor(load_network(args.model), scaler)
        predictor_name = os.path.basename(args.model)
    else:
        predictor = FirstPrinciplesPredictor(params, delta=args.delta)
        predictor_name = "first-principles"
    try:
        x0 = np.array([float(t) for t in args.x0.split(",")])
    except ValueError:
        raise ValueError(f"bad --x0 value {args.x0!r}; expected e.g. -1.65,72")
    if x0.shape != (2,):
        raise ValueError("--x0 needs exactly two comma-separated numbers")
    config = MPCConfig(delta=args.delta, horizon=args.horizon, seed=args.seed)
    trace = simulate_closed_loop(params, predictor, config, x0,
                                 args.duration, lyap=lyap, bounds=bounds)

    trace_path = os.path.join(args.out, "trace.csv")
    save_trace(trace_path, trace, metadata={"predictor": predictor_name,
                                            "seed": args.seed})
    inner = trace.lyapunov <= lyap.inner_level
    entry = float(trace.times[np.argmax(inner)]) if inner.any() else float("nan")
    stayed = bool(inner.any() and inner[np.argmax(inner):].all())
    summary_path = os.path.join(args.out, "summary.csv")
    _write_csv_rows(
        summary_path, {"predictor": predictor_name},
        ["entry_time_h", "stayed_in_terminal_set", "fallback_steps",
         "final_v", "duration_h"],
        [[_fmt(entry), str(stayed), str(int(trace.fallback.sum())),
          _fmt(trace.lyapunov[-1]), _fmt(args.duration)]],
    )
    outputs = [trace_path, summary_path]
    if not args.no_plots:
        plot_path = os.path.join(args.out, "closed_loop.svg")
        plot_closed_loop(trace, lyap, bounds, plot_path)
        outputs.append(plot_path)
    write_manifest(
        os.path.join(args.out, "manifest.json"), "mpc",
        {"config": args.config, "model": args.model, "scaler": args.scaler,
         "x0": args.x0, "duration": args.duration, "delta": args.delta,
         "horizon": args.horizon},
        {"mpc": args.seed}, outputs,
    )
    print(f"{predictor_name}: terminal-set entry at "
          f"{entry if inner.any() else float('nan'):.3f} h, "
          f"stayed={stayed}, fallback steps={int(trace.fallback.sum())}")
    return 0


def _cell_tag(hidden, noise_sd):
    return f"{'x'.join(map(str, hidden))}_sd{noise_sd:g}"


def cmd_table1(args):
    preset = _PRESETS[args.preset]
    params, lyap, bounds = _load_process(args.config)
    dataset = generate_dataset(params, lyap, bounds, preset["n_samples"],
                               args.seed)
    models_dir = os.path.join(args.out, "models")
    os.makedirs(models_dir, exist_ok=True)
    config_path = os.path.join(models_dir, "process.json")
    save_process_config(config_path, params, lyap, bounds)

    rows, bar_rows, outputs = [], [], [config_path]
    for hidden in preset["architectures"]:
        for noise_sd in preset["noise_sds"]:
            cell = {}
            for kind in ("lcnn", "dense"):
                result, prepared, test_mse = _train_one(
                    dataset, kind, hidden, noise_sd, args.seed,
                    preset["max_epochs"], preset["patience"])
                cell[kind] = test_mse
                tag = f"{kind}_{_cell_tag(hidden, noise_sd)}"
                model_path = os.path.join(models_dir, f"{tag}.json")
                scaler_path = os.path.join(models_dir, f"{tag}_scaler.csv")
                save_network(result.net, model_path)
                save_scaler(prepared.scaler, scaler_path)
                outputs += [model_path, scaler_path]
                print(f"table1 {tag}: test MSE {test_mse:.3e}")
            improvement = cell["dense"] / cell["lcnn"]
            label = f"({'x'.join(map(str, hidden))}) sd={noise_sd:g}"
            rows.append(["x".join(map(str, hidden)), _fmt(noise_sd),
                         _fmt(cell["lcnn"]), _fmt(cell["dense"]),
                         _fmt(improvement)])
            bar_rows.append((label, cell["lcnn"], cell["dense"]))

    table_path = os.path.join(args.out, "table1.csv")
    _write_csv_rows(
        table_path, {"preset": args.preset, "seed": args.seed,
                     "n": preset["n_samples"]},
        ["hidden", "noise_sd", "lcnn_mse", "dense_mse", "improvement_factor"],
        rows,
    )
    outputs.append(table_path)
    if not args.no_plots:
        plot_path = os.path.join(args.out, "table1.svg")
        plot_paired_bars(bar_rows, plot_path, "test MSE (scaled)",
                         "paired test errors")
        outputs.append(plot_path)
    write_manifest(
        os.path.join(args.out, "manifest.json"), "table1",
        {"preset": args.preset, "config": args.config}, {"table1": args.seed},
        outputs,
    )
    for row in rows:
        print(f"table1 ({row[0]}, sd={float(row[1]):g}): "
              f"improvement factor {float(row[4]):.1f}")
    return 0


def cmd_table2(args):
    preset = _PRESETS[args.preset]
    models_dir = args.models or os.path.join(args.out, "models")
    config_path = _require(os.path.join(models_dir, "process.json"),
                           "run `lipmpc table1` first")
    _, lyap, bounds = load_process_config(config_path)

    rows, bar_rows, outputs = [], [], []
    for hidden in preset["architectures"]:
        for noise_sd in preset["noise_sds"]:
            cell = {}
            for kind in ("lcnn", "dense"):
                tag = f"{kind}_{_cell_tag(hidden, noise_sd)}"
                model_path = _require(
                    os.path.join(models_dir, f"{tag}.json"),
                    "run `lipmpc table1` first")
                scaler = load_scaler(_require(
                    os.path.join(models_dir, f"{tag}_scaler.csv"),
                    "run `lipmpc table1` first"))
                net = load_network(model_path)
                lo, hi = _scaled_input_box(scaler, lyap, bounds)
                cert = certify_network(net, lo=lo, hi=hi,
                                       budget=preset["bab_budget"],
                                       n_samples=args.samples, seed=args.seed)
                cell[kind] = cert
                print(f"table2 {tag}: {cert.method} upper {cert.upper:.4f}")
            label = f"({'x'.join(map(str, hidden))}) sd={noise_sd:g}"
            ratio = cell["dense"].upper / cell["lcnn"].upper
            rows.append(["x".join(map(str, hidden)), _fmt(noise_sd),
                         _fmt(cell["lcnn"].upper), _fmt(cell["dense"].upper),
                         _fmt(ratio), cell["lcnn"].method,
                         cell["dense"].method])
            bar_rows.append((label, cell["lcnn"].upper, cell["dense"].upper))

    table_path = os.path.join(args.out, "table2.csv")
    _write_csv_rows(
        table_path, {"preset": args.preset, "models": models_dir},
        ["hidden", "noise_sd", "lcnn_bound", "dense_bound", "ratio",
         "lcnn_method", "dense_method"], rows,
    )
    outputs.append(table_path)
    if not args.no_plots:
        plot_path = os.path.join(args.out, "table2.svg")
        plot_paired_bars(bar_rows, plot_path, "certified Lipschitz bound",
                         "paired certified bounds")
        outputs.append(plot_path)
    write_manifest(
        os.path.join(args.out, "manifest.json"), "table2",
        {"preset": args.preset, "models": models_dir,
         "samples": args.samples}, {"sampling": args.seed}, outputs,
    )
    for row in rows:
        print(f"table2 ({row[0]}, sd={float(row[1]):g}): "
              f"lcnn {float(row[2]):.3f} vs dense {float(row[3]):.3f} "
              f"(ratio {float(row[4]):.1f})")
    return 0


# -- argument parsing --------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lipmpc",
        description="Lipschitz-constrained models, certification, and "
                    "predictive control for the benchmark reactor",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate", help="sample one-step transition data")
    add_common(p)
    p.add_argument("--config", help="process config JSON (default: built-in)")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--delta", type=float, default=1e-3,
                   help="sampling period [h]")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit one network on generated data")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset.csv from generate")
    p.add_argument("--kind", choices=("lcnn", "dense"), default="lcnn")
    p.add_argument("--hidden", default="64,64",
                   help="comma-separated hidden sizes")
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="certify a trained model's Lipschitz "
                                       "constant")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--scaler", help="scaler file, needed for dense models")
    p.add_argument("--config", help="process config JSON (default: built-in)")
    p.add_argument("--eps", type=float, default=1e-9)
    p.add_argument("--budget", type=int, default=20000)
    p.add_argument("--samples", type=int, default=1000)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("bounds", help="complexity and generalization bounds")
    add_common(p)
    p.add_argument("--model", action="append", required=True,
                   help="model file; repeat for a paired report")
    p.add_argument("--samples", type=int, default=20000,
                   help="training sample count m")
    p.add_argument("--empirical", type=float, default=0.0,
                   help="empirical error term")
    p.add_argument("--confidence", type=float, default=0.1,
                   help="failure probability delta")
    p.add_argument("--input-bound", type=float, default=1.0)
    p.add_argument("--output-bound", type=float, default=1.0)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("mpc", help="closed-loop simulation under the "
                                   "certificate-constrained controller")
    add_common(p)
    p.add_argument("--config", help="process config JSON (default: built-in)")
    p.add_argument("--model", help="model file; omit for the reference "
                                   "first-principles predictor")
    p.add_argument("--scaler", help="scaler file matching --model")
    p.add_argument("--x0", default="-1.65,72",
                   help="initial deviation state, e.g. -1.65,72")
    p.add_argument("--duration", type=float, default=1.0, help="hours")
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--horizon", type=int, default=2)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("table1", help="paired test-error table over "
                                      "architectures and noise levels")
    add_common(p)
    p.add_argument("--preset", choices=sorted(_PRESETS), default="desk")
    p.add_argument("--config", help="process config JSON (default: built-in)")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("table2", help="paired certified-bound table for "
                                      "table1's trained models")
    add_common(p)
    p.add_argument("--preset", choices=sorted(_PRESETS), default="desk")
    p.add_argument("--models", help="models directory (default: OUT/models)")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_table2)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, IntegrationDivergedError,
            PowerIterationError, FloatingPointError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
