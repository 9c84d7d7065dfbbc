"""Command-line surface: mesh inspection, data synthesis, training,
forecasting, evaluation, spectra, the aliasing demo, and benchmarks.

Every run is reproducible from (config, seed); commands that write to an
output location also write a manifest of inputs, versions, seed, and wall
time. Exit codes: 0 ok, 2 configuration error, 3 numeric failure,
4 I/O error. ``SPHERE_BSA_THREADS`` caps internal parallelism and must be
honored before numpy is imported, which is why imports here are lazy.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _apply_thread_cap() -> int | None:
    cap = os.environ.get("SPHERE_BSA_THREADS")
    if not cap:
        return None
    try:
        n = max(1, int(cap))
    except ValueError:
        raise SystemExit(f"SPHERE_BSA_THREADS must be an integer, got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n


def _manifest(path, command: str, args: dict, seed, wall_time: float) -> None:
    import numpy
    from . import __version__
    payload = {
        "command": command,
        "inputs": {k: v for k, v in args.items()
                   if v is not None and isinstance(v, (str, int, float, bool, list))},
        "seed": seed,
        "versions": {"sphere_bsa": __version__, "numpy": numpy.__version__,
                     "python": sys.version.split()[0]},
        "wall_time_s": round(wall_time, 3),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except Exception:
        raise ValueError(f"grid must look like 32x64, got {text!r}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_mesh(args) -> int:
    from .healpix import build_mesh
    if args.action != "info":
        raise ValueError(f"unknown mesh action {args.action!r}")
    mesh = build_mesh(args.nside)
    import numpy as np
    res_deg = np.degrees(mesh.resolution_rad)
    print(f"nside {mesh.nside}")
    print(f"npix {mesh.npix}")
    print(f"resolution {res_deg:.2f} deg")
    if args.block_size:
        part = mesh.partition(args.block_size)
        print(f"blocks {part.num_blocks} x {part.block_size}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import synth
    t0 = time.time()
    h, w = _parse_grid(args.grid)
    cfg = synth.SynthConfig(
        grid_h=h, grid_w=w, channels=args.channels, statics=args.statics,
        steps=args.steps, seed=args.seed, band_limit=args.band_limit,
        rotation=args.rotation, persistence=args.persistence)
    ds = synth.generate(cfg)
    synth.save_dataset(ds, args.out)
    _manifest(os.path.join(args.out, "run_manifest.json"), "synth",
              vars(args), args.seed, time.time() - t0)
    print(f"wrote {ds.n_steps} states to {args.out}")
    return EXIT_OK


def _load_model_config(args, dataset):
    from .model import ModelConfig, config_from_text
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    overrides.setdefault("grid_h", dataset.cfg.grid_h)
    overrides.setdefault("grid_w", dataset.cfg.grid_w)
    overrides.setdefault("c_dyn", dataset.cfg.channels)
    overrides.setdefault("c_static", dataset.cfg.statics)
    if args.config:
        with open(args.config) as fh:
            return config_from_text(fh.read(), overrides)
    return config_from_text("", overrides)


def _save_checkpoint(directory, cfg, params) -> None:
    from .model import config_to_text
    from .msgt import save_tensor_dir
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.txt"), "w") as fh:
        fh.write(config_to_text(cfg))
    save_tensor_dir(os.path.join(directory, "weights"),
                    {k: v.data for k, v in params.items()})


def _load_checkpoint(directory):
    from .model import Model, config_from_text
    from .msgt import load_tensor_dir
    from .tensor import Tensor
    with open(os.path.join(directory, "config.txt")) as fh:
        cfg = config_from_text(fh.read())
    model = Model(cfg)
    arrays = load_tensor_dir(os.path.join(directory, "weights"))
    params = {}
    for name in model.param_names:
        if name not in arrays:
            raise ValueError(f"checkpoint missing tensor {name}")
        params[name] = Tensor(arrays[name].astype(cfg.np_dtype), requires_grad=True)
    return model, params


def _run_training(args, rollout_k: int) -> int:
    import numpy as np
    from . import synth, training
    from .model import Model
    t0 = time.time()
    dataset = synth.load_dataset(args.data)

    if rollout_k > 1:
        model, params = _load_checkpoint(args.checkpoint_in)
    else:
        model = Model(_load_model_config(args, dataset))
        params = model.init_params(seed=args.seed)
        if args.checkpoint_in:
            model, params = _load_checkpoint(args.checkpoint_in)

    weights = training.LossWeights.uniform(model.cfg.c_dyn, model.grid_lat)
    opt = training.MuonState()
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 7]))
    hist_len = model.cfg.history
    t_max = dataset.n_steps - rollout_k - 1
    if t_max < hist_len - 1:
        raise ValueError("dataset too short for the requested rollout")

    warmup = 500 if rollout_k > 1 else 0
    log_rows = []
    for step in range(args.steps):
        lr = training.cosine_lr(step, args.steps, args.lr, args.lr * args.lr_decay,
                                warmup=warmup)
        t = int(rng.integers(hist_len - 1, t_max + 1))
        history = dataset.history(t, hist_len)
        if rollout_k == 1:
            stats = training.train_step(
                model, params, opt, history, dataset.normalized(t + 1),
                dataset.time_of(t + 1), weights, lr, rng,
                weight_decay=args.weight_decay)
        else:
            targets = [dataset.normalized(t + 1 + j) for j in range(rollout_k)]
            stats = training.rollout_finetune_step(
                model, params, opt, history, targets, dataset.time_of, t,
                weights, lr, rng, k=rollout_k, weight_decay=args.weight_decay)
        log_rows.append((step, stats.loss, stats.grad_norm, stats.lr))
        if args.verbose and (step % 50 == 0 or step == args.steps - 1):
            print(f"step {step} loss {stats.loss:.5f} grad {stats.grad_norm:.3f} "
                  f"lr {stats.lr:.2e}")

    _save_checkpoint(args.checkpoint_out, model.cfg, params)
    if args.log:
        with open(args.log, "w") as fh:
            fh.write("step,loss,grad_norm,lr\n")
            for row in log_rows:
                fh.write(f"{row[0]},{row[1]:.8f},{row[2]:.8f},{row[3]:.3e}\n")
    _manifest(os.path.join(args.checkpoint_out, "run_manifest.json"),
              "finetune" if rollout_k > 1 else "train",
              vars(args), args.seed, time.time() - t0)
    print(f"final loss {log_rows[-1][1]:.5f} ({args.steps} steps)")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, rollout_k=1)


def cmd_finetune(args) -> int:
    return _run_training(args, rollout_k=args.rollout)


def cmd_forecast(args) -> int:
    import numpy as np
    from . import synth, training
    from .msgt import write_msgt
    t0 = time.time()
    dataset = synth.load_dataset(args.data)
    model, params = _load_checkpoint(args.checkpoint)
    threads = _THREAD_CAP
    hist_len = model.cfg.history
    start = args.start if args.start is not None else hist_len - 1
    history = dataset.history(start, hist_len)
    ens = training.generate_ensemble(
        model, params, history, args.members, args.steps, dataset.time_of,
        start_step=start, seed=args.seed, max_workers=threads)

    os.makedirs(args.out, exist_ok=True)
    for m in range(args.members):
        for s in range(args.steps):
            physical = dataset.stats.denormalize(ens.members[m][s])
            write_msgt(os.path.join(args.out, f"member_{m:03d}_step_{s + 1:03d}.msgt"),
                       physical.astype(np.float32))
    meta = {"members": args.members, "steps": args.steps, "start": start,
            "data": os.path.abspath(args.data),
            "checkpoint": os.path.abspath(args.checkpoint)}
    with open(os.path.join(args.out, "forecast.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    _manifest(os.path.join(args.out, "run_manifest.json"), "forecast",
              vars(args), args.seed, time.time() - t0)
    print(f"wrote {args.members * args.steps} member-step files to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np
    from . import synth
    from .diagnostics import ensemble_metrics, gmsp_drift
    from .msgt import read_msgt
    t0 = time.time()
    with open(os.path.join(args.forecast, "forecast.json")) as fh:
        meta = json.load(fh)
    dataset = synth.load_dataset(args.truth)
    members, steps, start = meta["members"], meta["steps"], meta["start"]

    forecast = np.stack([
        np.stack([read_msgt(os.path.join(args.forecast,
                                         f"member_{m:03d}_step_{s + 1:03d}.msgt"))
                  for s in range(steps)]).astype(np.float64)
        for m in range(members)])
    truth = np.stack([dataset.fields[start + 1 + s] for s in range(steps)])
    lat = synthetic_lat(dataset)
    report = ensemble_metrics(forecast, truth, lat,
                              climatology_std=dataset.stats.std)
    ens_mean = forecast.mean(axis=0)
    drift = np.stack([gmsp_drift(ens_mean[:, ch], dataset.fields[start][ch], lat)
                      for ch in range(truth.shape[1])], axis=1)  # [leads, C]

    with open(args.report, "w") as fh:
        fh.write("lead,channel,rmse,nrmse,crps,spread,ssr,drift\n")
        for row in report.rows():
            d = drift[row["lead"] - 1, row["channel"]]
            fh.write(f"{row['lead']},{row['channel']},{row['rmse']:.8f},"
                     f"{row['nrmse']:.8f},{row['crps']:.8f},{row['spread']:.8f},"
                     f"{row['ssr']:.8f},{d:.8f}\n")
    _manifest(args.report + ".manifest.json", "eval", vars(args), None,
              time.time() - t0)
    print(f"wrote report for {members} members x {steps} leads to {args.report}")
    return EXIT_OK


def synthetic_lat(dataset):
    from .model import grid_latlon
    return grid_latlon(dataset.cfg.grid_h, dataset.cfg.grid_w)[0]


def cmd_spectra(args) -> int:
    import numpy as np
    from .diagnostics import spectral_ratio, spherical_power_spectrum
    from .msgt import read_msgt
    t0 = time.time()
    field = read_msgt(args.field).astype(np.float64)
    if field.ndim == 3:
        field = field[args.channel]
    spec = spherical_power_spectrum(field, args.nmax)
    with open(args.out, "w") as fh:
        fh.write("# degree power\n")
        for n, p in enumerate(spec.power):
            fh.write(f"{n} {p:.10e}\n")
    if args.ref:
        ref = read_msgt(args.ref).astype(np.float64)
        if ref.ndim == 3:
            ref = ref[args.channel]
        ratio = spectral_ratio([field], [ref], args.nmax)
        out = args.ratio_out or (args.out + ".ratio")
        with open(out, "w") as fh:
            fh.write("# degree ratio\n")
            for n, r in enumerate(ratio):
                fh.write(f"{n} {r:.10e}\n")
    _manifest(args.out + ".manifest.json", "spectra", vars(args), None,
              time.time() - t0)
    return EXIT_OK


def cmd_alias_demo(args) -> int:
    import numpy as np
    from .diagnostics import aliasing_demo
    from .model import grid_latlon
    t0 = time.time()
    h, w = _parse_grid(args.grid)
    lat, lon = grid_latlon(h, w)
    rng = np.random.default_rng(args.seed)
    from scipy.special import sph_harm_y
    theta, phi = np.meshgrid(np.pi / 2 - lat, lon, indexing="ij")

    def harmonic(n, m):
        y = sph_harm_y(n, m, theta, phi)
        return (np.sqrt(2.0) * y.real) if m else y.real

    signal = np.zeros((h, w))
    for n in range(1, args.background_limit + 1):
        for m in range(0, n + 1):
            signal += 0.3 * rng.standard_normal() * harmonic(n, m)
    signal += 2.0 * harmonic(args.signal_degree, args.signal_order)

    out = aliasing_demo(signal, args.native_nside, args.coarse_nside,
                        nonlinearity=args.nonlinearity, n_max=args.nmax, lat=lat)
    with open(args.out, "w") as fh:
        fh.write("# degree input_power ratio_native ratio_coarse\n")
        for n in range(args.nmax + 1):
            fh.write(f"{n} {out['input_power'][n]:.10e} "
                     f"{out['native'][n]:.10e} {out['coarse'][n]:.10e}\n")
    _manifest(args.out + ".manifest.json", "alias-demo", vars(args), args.seed,
              time.time() - t0)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .attention import AttentionConfig, bench_attention
    t0 = time.time()
    if args.action != "attention":
        raise ValueError(f"unknown bench action {args.action!r}")
    lengths = [int(v) for v in args.lengths.split(",")]
    variants = ("bsa", "nsa", "dense") if args.variant == "all" else (args.variant,)
    cfg = AttentionConfig(
        num_heads=args.heads, gqa_ratio=1, head_dim=args.head_dim,
        local_block_size=args.local, sparse_block_size=args.block,
        top_n=args.top_n)
    rows = bench_attention(cfg, lengths, variants=variants, reps=args.reps,
                           seed=args.seed, include_backward=args.backward)
    lines = ["length,variant,ms"]
    for n, variant, ms in rows:
        lines.append(f"{n},{variant},{ms:.3f}")
    text = "\n".join(lines) + "\n"
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(text)
        _manifest(args.csv + ".manifest.json", "bench", vars(args), args.seed,
                  time.time() - t0)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sphere-bsa",
        description="Block-sparse attention forecasting on the HEALPix sphere.",
        epilog="exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="inspect a HEALPix mesh")
    p.add_argument("action", choices=["info"])
    p.add_argument("--nside", type=int, required=True)
    p.add_argument("--block-size", type=int, default=None)
    p.set_defaults(fn=cmd_mesh)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="32x64")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--statics", type=int, default=2)
    p.add_argument("--steps", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--band-limit", type=int, default=6)
    p.add_argument("--rotation", type=float, default=float(2 * 3.141592653589793 / 32))
    p.add_argument("--persistence", type=float, default=0.97)
    p.set_defaults(fn=cmd_synth)

    def training_common(p):
        p.add_argument("--data", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a model config key")
        p.add_argument("--steps", type=int, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--checkpoint-out", required=True)
        p.add_argument("--log", default=None, help="loss log CSV path")
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--lr-decay", type=float, default=1e-3,
                       help="final lr as a fraction of --lr")
        p.add_argument("--weight-decay", type=float, default=1e-2)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("train", help="single-step pretraining")
    training_common(p)
    p.add_argument("--checkpoint-in", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="autoregressive rollout finetuning")
    training_common(p)
    p.add_argument("--checkpoint-in", required=True)
    p.add_argument("--rollout", type=int, required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("forecast", help="generate an ensemble forecast")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--members", type=int, default=24)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("eval", help="score a forecast against truth")
    p.add_argument("--forecast", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("spectra", help="spherical power spectrum of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--nmax", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--ref", default=None)
    p.add_argument("--ratio-out", default=None)
    p.set_defaults(fn=cmd_spectra)

    p = sub.add_parser("alias-demo", help="aliasing probe: native vs coarse mesh")
    p.add_argument("--native-nside", type=int, default=16)
    p.add_argument("--coarse-nside", type=int, default=4)
    p.add_argument("--signal-degree", type=int, default=10)
    p.add_argument("--signal-order", type=int, default=7)
    p.add_argument("--background-limit", type=int, default=6)
    p.add_argument("--nonlinearity", choices=["identity", "square", "relu"],
                   default="square")
    p.add_argument("--grid", default="32x64")
    p.add_argument("--nmax", type=int, default=15)
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_alias_demo)

    p = sub.add_parser("bench", help="attention wall-time benchmark")
    p.add_argument("action", choices=["attention"])
    p.add_argument("--lengths", required=True, help="comma-separated token counts")
    p.add_argument("--variant", choices=["bsa", "nsa", "dense", "all"], default="all")
    p.add_argument("--csv", default=None)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--block", type=int, default=64)
    p.add_argument("--local", type=int, default=256)
    p.add_argument("--top-n", type=int, default=6)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--backward", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    return parser


_THREAD_CAP: int | None = None


def main(argv=None) -> int:
    global _THREAD_CAP
    _THREAD_CAP = _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, IOError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
