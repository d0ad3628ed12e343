"""Command-line interface: generate | selfsup | train | unmix | eval.

Every command writes a manifest recording its arguments, seed, inputs,
outputs, and wall time; rerunning a command with the same arguments
reproduces the output files byte for byte (the manifest's wall-clock and
the live-measured baseline runtime are the only nondeterministic values).

Exit codes: 0 ok, 2 input error, 3 numeric/training error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import data as dt
from . import diffcore as dc
from . import evaluation as ev
from .errors import InputError, TrainingError, UnmixError
from .generative import mixing_mean
from .inference import init_model, model_parameters, point_estimates
from .objective import TrainConfig, history_to_csv, train

_EXIT_INPUT = 2
_EXIT_NUMERIC = 3


def _strip_bundle(path: str) -> str:
    for suffix in (".json", ".raw"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def _write_manifest(path: str, command: str, args: dict, seed,
                    inputs: dict, outputs: dict, wall_clock_s: float):
    manifest = {"command": command, "args": args, "seed": seed,
                "inputs": inputs, "outputs": outputs,
                "wall_clock_s": wall_clock_s}
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def _prepare_out_dir(path: str, force: bool):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise InputError(f"output directory {path} is not empty; use --force")
    os.makedirs(path, exist_ok=True)


def _write_pgm(path: str, image: np.ndarray):
    """8-bit grayscale PGM from values in [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    gray = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    p = args.endmembers if args.endmembers else (3 if args.kind == "dc1" else 5)
    _prepare_out_dir(args.out_dir, args.force)
    root = np.random.default_rng(args.seed)
    lib_rng, map_rng, mix_rng = root.spawn(3)
    library = dt.synth_endmember_library(args.bands, p, lib_rng)
    maps = dt.synth_abundance_maps(args.width, args.height, p, map_rng)
    if args.kind == "dc1":
        cube, truth = dt.generate_dc1(maps, library, args.snr, mix_rng,
                                      width=args.width, height=args.height)
    else:
        cube, truth = dt.generate_dc2(maps, library, args.variability,
                                      args.snr, mix_rng,
                                      width=args.width, height=args.height)
    cube.wavelengths = np.linspace(400.0, 2400.0, args.bands)
    paths = {n: os.path.join(args.out_dir, n)
             for n in ("cube", "abundances", "endmembers")}
    dt.save_cube(paths["cube"], cube)
    dt.save_abundances(paths["abundances"], truth.abundances,
                       args.width, args.height)
    dt.save_endmembers(paths["endmembers"], truth.endmembers,
                       args.width, args.height)
    _write_manifest(
        os.path.join(args.out_dir, "manifest.json"), "generate",
        {"kind": args.kind, "width": args.width, "height": args.height,
         "bands": args.bands, "snr_db": args.snr, "endmembers": p,
         "variability": args.variability if args.kind == "dc2" else None},
        args.seed, {}, {k: v + ".json" for k, v in paths.items()},
        time.perf_counter() - t0)
    print(f"wrote {args.kind} scene ({args.width}x{args.height}x{args.bands}, "
          f"P={p}) to {args.out_dir}")
    return 0


def cmd_selfsup(args) -> int:
    t0 = time.perf_counter()
    cube_base = _strip_bundle(args.cube)
    cube = dt.load_cube(cube_base)
    rng = np.random.default_rng(args.seed)
    vca_rng, set_rng = rng.spawn(2)
    refs = dt.vca(cube, args.p, vca_rng)
    ppx = dt.extract_pure_pixels(cube, refs, args.n_ppx)
    samples = dt.build_supervised_set(ppx, args.n_draws, args.snr, set_rng)
    out_base = _strip_bundle(args.out)
    dt.save_supervised(out_base, samples)
    _write_manifest(
        out_base + ".manifest.json", "selfsup",
        {"p": args.p, "n_ppx": args.n_ppx, "n_draws": args.n_draws,
         "snr_db": args.snr}, args.seed,
        {"cube": cube_base + ".json"}, {"supervised": out_base + ".json"},
        time.perf_counter() - t0)
    print(f"wrote {len(samples)} supervised samples to {out_base}.json")
    return 0


def _save_model(base: str, theta, phi, meta: dict):
    params = model_parameters(theta, phi)
    dc.save_checkpoint(base, meta, params)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cube = dt.load_cube(_strip_bundle(args.cube))
    y_s, a_s, m_s = dt.load_supervised(_strip_bundle(args.supervised))
    if y_s.shape[1] != cube.n_bands:
        raise InputError("supervised set band count differs from the cube")
    config = TrainConfig(lam=args.lam, beta=args.beta, tau=args.tau,
                         varsigma1=args.varsigma1, varsigma2=args.varsigma2,
                         k=args.k, k_e=args.ke, batch_size=args.batch_size,
                         max_epochs=args.epochs,
                         rel_stop_tol=args.rel_stop_tol)
    out_base = args.out_ckpt
    theta = phi = None
    start_epoch = 0
    if args.resume:
        meta, arrays = dc.load_checkpoint(_strip_bundle(args.resume))
        theta, phi = init_model(meta["n_bands"], meta["n_endmembers"],
                                meta["latent_dim"], meta["lista_layers"],
                                np.random.default_rng(args.seed))
        dc.load_params_into(model_parameters(theta, phi), arrays)
        start_epoch = meta["epoch"] + 1
    meta = {"n_bands": cube.n_bands, "n_endmembers": a_s.shape[1],
            "latent_dim": args.latent_dim, "lista_layers": args.lista_layers,
            "seed": args.seed, "config": config.as_dict(), "epoch": 0}
    try:
        theta, phi, history = train(
            cube.pixels, (y_s, a_s, m_s), config, args.seed,
            latent_dim=args.latent_dim, lista_layers=args.lista_layers,
            theta=theta, phi=phi, start_epoch=start_epoch)
    except TrainingError as err:
        if err.last_good is not None and err.last_epoch is not None \
                and err.last_epoch >= 0:
            meta["epoch"] = err.last_epoch
            dc.save_checkpoint(out_base, meta, err.last_good)
            print(f"training diverged; last-good checkpoint saved to "
                  f"{out_base}.json", file=sys.stderr)
        raise
    meta["epoch"] = history[-1].epoch if history else start_epoch
    _save_model(out_base, theta, phi, meta)
    with open(out_base + ".history.csv", "w") as f:
        f.write(history_to_csv(history))
    _write_manifest(
        out_base + ".manifest.json", "train",
        {"config": config.as_dict(), "latent_dim": args.latent_dim,
         "lista_layers": args.lista_layers, "resume": args.resume},
        args.seed,
        {"cube": _strip_bundle(args.cube) + ".json",
         "supervised": _strip_bundle(args.supervised) + ".json"},
        {"checkpoint": out_base + ".json",
         "history": out_base + ".history.csv"},
        time.perf_counter() - t0)
    print(f"trained {len(history)} epochs "
          f"(final objective {history[-1].total:.4f}); "
          f"checkpoint at {out_base}.json")
    return 0


def _load_model(ckpt_base: str):
    meta, arrays = dc.load_checkpoint(ckpt_base)
    theta, phi = init_model(meta["n_bands"], meta["n_endmembers"],
                            meta["latent_dim"], meta["lista_layers"],
                            np.random.default_rng(meta.get("seed", 0)))
    dc.load_params_into(model_parameters(theta, phi), arrays)
    return meta, theta, phi


def cmd_unmix(args) -> int:
    t0 = time.perf_counter()
    cube = dt.load_cube(_strip_bundle(args.cube))
    meta, theta, phi = _load_model(_strip_bundle(args.ckpt))
    if meta["n_bands"] != cube.n_bands:
        raise InputError(
            f"checkpoint expects {meta['n_bands']} bands, cube has {cube.n_bands}")
    _prepare_out_dir(args.out_dir, args.force)
    a_hat, m_hat = point_estimates(cube.pixels, phi, theta)
    recon = mixing_mean(a_hat, m_hat, theta).data
    eta = ev.nonlinearity_degree(cube.pixels, m_hat, phi)
    paths = {n: os.path.join(args.out_dir, n)
             for n in ("abundances_est", "endmembers_est", "eta_d",
                       "reconstruction")}
    dt.save_abundances(paths["abundances_est"], a_hat, cube.width, cube.height)
    dt.save_endmembers(paths["endmembers_est"], m_hat, cube.width, cube.height)
    dt.save_scalar_map(paths["eta_d"], eta, cube.width, cube.height)
    dt.save_cube(paths["reconstruction"],
                 dt.HyperCube(width=cube.width, height=cube.height,
                              pixels=recon, wavelengths=cube.wavelengths))
    for k in range(a_hat.shape[1]):
        _write_pgm(os.path.join(args.out_dir, f"abundance_{k}.pgm"),
                   a_hat[:, k].reshape(cube.height, cube.width))
    _write_manifest(
        os.path.join(args.out_dir, "manifest.json"), "unmix",
        {"ckpt": args.ckpt}, meta.get("seed"),
        {"cube": _strip_bundle(args.cube) + ".json",
         "checkpoint": _strip_bundle(args.ckpt) + ".json"},
        {k: v + ".json" for k, v in paths.items()},
        time.perf_counter() - t0)
    print(f"wrote abundance/endmember/nonlinearity maps to {args.out_dir}")
    return 0


def _load_truth(truth_dir: str):
    cube = dt.load_cube(os.path.join(truth_dir, "cube"))
    abundances = endmembers = None
    if os.path.exists(os.path.join(truth_dir, "abundances.json")):
        abundances, _, _ = dt.load_abundances(os.path.join(truth_dir, "abundances"))
    if os.path.exists(os.path.join(truth_dir, "endmembers.json")):
        endmembers = dt.load_endmembers(os.path.join(truth_dir, "endmembers"))
    truth = (dt.GroundTruth(abundances=abundances, endmembers=endmembers)
             if abundances is not None else None)
    return cube, truth


def cmd_eval(args) -> int:
    cube, truth = _load_truth(args.truth_dir)
    est_dir = args.estimates_dir
    a_hat, _, _ = dt.load_abundances(os.path.join(est_dir, "abundances_est"))
    m_hat = eta = recon = None
    if os.path.exists(os.path.join(est_dir, "endmembers_est.json")):
        m_hat = dt.load_endmembers(os.path.join(est_dir, "endmembers_est"))
    if os.path.exists(os.path.join(est_dir, "eta_d.json")):
        eta = dt.load_scalar_map(os.path.join(est_dir, "eta_d"))
    if os.path.exists(os.path.join(est_dir, "reconstruction.json")):
        recon = dt.load_cube(os.path.join(est_dir, "reconstruction")).pixels
    runtime = 0.0
    manifest_path = os.path.join(est_dir, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as f:
            runtime = float(json.load(f).get("wall_clock_s", 0.0))
    reports = [ev.evaluate(cube, truth, ev.Estimates(
        abundances=a_hat, endmembers=m_hat, reconstruction=recon,
        eta_d=eta, runtime_s=runtime))]
    if args.baseline == "fcls":
        t0 = time.perf_counter()
        refs = dt.vca(cube, a_hat.shape[1], np.random.default_rng(args.seed))
        a_base = ev.fcls(cube, refs)
        base_est = ev.Estimates(abundances=a_base, endmembers=None,
                                reconstruction=a_base @ refs.T,
                                align_with=refs,
                                runtime_s=time.perf_counter() - t0)
        reports.append(ev.evaluate(cube, truth, base_est))
    csv_text = ev.reports_to_csv(reports)
    with open(args.out_csv, "w") as f:
        f.write(csv_text)
    _write_manifest(
        args.out_csv + ".manifest.json", "eval",
        {"baseline": args.baseline}, args.seed,
        {"truth": args.truth_dir, "estimates": est_dir},
        {"report": args.out_csv}, 0.0)
    print(csv_text, end="")
    return 0


# ----------------------------------------------------------------- parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unmix",
        description="Variational hyperspectral unmixing toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a benchmark scene")
    g.add_argument("kind", choices=["dc1", "dc2"])
    g.add_argument("out_dir")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=50)
    g.add_argument("--height", type=int, default=50)
    g.add_argument("--bands", type=int, default=64)
    g.add_argument("--snr", type=float, default=30.0)
    g.add_argument("--variability", type=float, default=0.15)
    g.add_argument("--endmembers", type=int, default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("selfsup", help="build the self-supervised labeled set")
    s.add_argument("cube")
    s.add_argument("out")
    s.add_argument("--p", type=int, default=3)
    s.add_argument("--n-ppx", type=int, default=100)
    s.add_argument("--n-draws", type=int, default=100)
    s.add_argument("--snr", type=float, default=30.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selfsup)

    t = sub.add_parser("train", help="fit the unmixing model")
    t.add_argument("cube")
    t.add_argument("supervised")
    t.add_argument("out_ckpt")
    t.add_argument("--lambda", dest="lam", type=float, default=1.0)
    t.add_argument("--beta", type=float, default=0.1)
    t.add_argument("--tau", type=float, default=0.01)
    t.add_argument("--varsigma1", type=float, default=1.0)
    t.add_argument("--varsigma2", type=float, default=1.0)
    t.add_argument("--latent-dim", type=int, default=2)
    t.add_argument("--lista-layers", type=int, default=11)
    t.add_argument("--k", type=int, default=5)
    t.add_argument("--ke", type=int, default=1)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--rel-stop-tol", type=float, default=0.01)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("unmix", help="export abundance and endmember maps")
    u.add_argument("cube")
    u.add_argument("ckpt")
    u.add_argument("out_dir")
    u.add_argument("--force", action="store_true")
    u.set_defaults(func=cmd_unmix)

    e = sub.add_parser("eval", help="score estimates against ground truth")
    e.add_argument("truth_dir")
    e.add_argument("estimates_dir")
    e.add_argument("out_csv")
    e.add_argument("--baseline", choices=["fcls"], default=None)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_INPUT
    except UnmixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
