"""``microct`` command line.

Subcommands: gen-data, train, reconstruct, eval, predict-artifacts and
dump-filters.  Every command accepts ``--config FILE`` (a JSON object whose
keys are the long option names with dashes replaced by underscores);
explicit flags override the file.  The fully resolved configuration is
written next to the outputs.

Exit codes: 0 success, 2 invalid arguments, 3 data or checkpoint integrity
failure, 1 anything else (for example a diverged training run).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CorruptDatasetError, InvalidArgumentError, MicroCTError
from .geometry import FULL, parse_geometry
from .masks import build_mask, to_pbm
from .metrics import MetricReport
from .microlocal import (Visibility, classify_visibility, estimate_kernel_atlas, extract_edges,
                         peak_gradient, predict_streaks)
from .phantoms import EllipseSpec, PhantomConfig, generate_dataset, rasterize, read_dataset
from .pngio import save_png16, save_rgb, tile

EXIT_OK, EXIT_FAIL, EXIT_ARGS, EXIT_INTEGRITY = 0, 1, 2, 3

DEFAULTS = {
    "gen-data": dict(out=None, train=500, test=50, size=64, geometry="limited:60", angles=60,
                     noise=0.01, seed=0, force=False),
    "train": dict(data=None, out=None, blocks=10, filter_size=17, mask="full", q=0, levels=3,
                  epochs=15, batch=25, lr=1e-3, lambda0=1e-3, seed=0, chunk=5, filter_gain=0.0,
                  val_samples=0),
    "reconstruct": dict(data=None, out=None, split="test", checkpoint=None, fbp=False, ista=False,
                        lam=1e-3, iterations=500, levels=3, window=None, png=True),
    "eval": dict(data=None, recon=None, out=None, split="test", label=""),
    "predict-artifacts": dict(out=None, data=None, split="test", index=0, disk=0.5, size=128,
                              geometry="limited:60", angles=60, threshold=0.1, tolerance=0.0),
    "dump-filters": dict(out=None, size=128, geometry="limited:60", angles=60, levels=2, patch=31,
                         checkpoint=None, layer=0),
}

# options that change how fast, not what, a command computes
RUNTIME_ONLY = {"threads", "config"}


def _threads_default() -> int:
    try:
        return max(1, int(os.environ.get("MICROCT_THREADS", "1")))
    except ValueError:
        return 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="microct", description="Limited/sparse-angle CT toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: $MICROCT_THREADS or 1)")
        return p

    S = argparse.SUPPRESS
    p = common(sub.add_parser("gen-data", help="generate a synthetic dataset", argument_default=S))
    p.add_argument("--out", "-o")
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--geometry", help="limited:<deg half-width> | sparse:<count> | full[:<count>]")
    p.add_argument("--angles", type=int, help="angle count for limited geometries")
    p.add_argument("--noise", type=float, help="noise std relative to the sinogram max")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")

    p = common(sub.add_parser("train", help="train an unrolled network", argument_default=S))
    p.add_argument("--data")
    p.add_argument("--out", "-o", help="checkpoint path")
    p.add_argument("--blocks", type=int)
    p.add_argument("--filter-size", type=int)
    p.add_argument("--mask", choices=["full", "bow", "x", "sparse"])
    p.add_argument("--q", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda0", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--chunk", type=int, help="samples per gradient work item")
    p.add_argument("--filter-gain", type=float, help="0 selects the per-tap default")
    p.add_argument("--val-samples", type=int)

    p = common(sub.add_parser("reconstruct", help="reconstruct a dataset split", argument_default=S))
    p.add_argument("--data")
    p.add_argument("--out", "-o")
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--checkpoint")
    p.add_argument("--fbp", action="store_true")
    p.add_argument("--ista", action="store_true")
    p.add_argument("--lam", "--lambda", type=float, dest="lam")
    p.add_argument("--iterations", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--window", choices=["hann"])
    p.add_argument("--no-png", dest="png", action="store_false")

    p = common(sub.add_parser("eval", help="PSNR/SSIM of reconstructions", argument_default=S))
    p.add_argument("--data")
    p.add_argument("--recon", help="directory written by reconstruct")
    p.add_argument("--out", "-o", help="CSV path")
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--label")

    p = common(sub.add_parser("predict-artifacts", help="visibility and streak overlay",
                              argument_default=S))
    p.add_argument("--out", "-o", help="PNG path")
    p.add_argument("--data", help="take the image and geometry from a dataset")
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--index", type=int)
    p.add_argument("--disk", type=float, help="radius of a centred disk phantom (no --data)")
    p.add_argument("--size", type=int)
    p.add_argument("--geometry")
    p.add_argument("--angles", type=int)
    p.add_argument("--threshold", type=float, help="edge threshold relative to the peak gradient")
    p.add_argument("--tolerance", type=float, help="streak tolerance in degrees (0: one angular step)")

    p = common(sub.add_parser("dump-filters", help="kernel atlas or learned filters",
                              argument_default=S))
    p.add_argument("--out", "-o", help="output directory")
    p.add_argument("--size", type=int)
    p.add_argument("--geometry")
    p.add_argument("--angles", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--checkpoint", help="dump this network's filters instead of the atlas")
    p.add_argument("--layer", type=int)
    return ap


def resolve(command: str, ns: argparse.Namespace) -> tuple[dict, int]:
    cfg = dict(DEFAULTS[command])
    given = {k: v for k, v in vars(ns).items() if k not in ("command",)}
    if given.get("config"):
        try:
            file_cfg = json.loads(Path(given["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidArgumentError(f"cannot read config {given['config']}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise InvalidArgumentError("config file must hold a JSON object")
        recorded = file_cfg.pop("command", command)
        if recorded != command:
            raise InvalidArgumentError(f"config was written by {recorded!r}, not {command!r}")
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k, v in given.items():
        if k not in RUNTIME_ONLY and v is not None:
            cfg[k] = v
    threads = given.get("threads")
    threads = _threads_default() if threads is None else threads
    if threads < 1:
        raise InvalidArgumentError("--threads must be positive")
    return cfg, threads


def _need(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise InvalidArgumentError(f"--{k.replace('_', '-')} is required")


def _write_config(path: Path, command: str, cfg: dict) -> None:
    path.write_text(json.dumps({"command": command, **cfg}, indent=1, sort_keys=True))


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg: dict, threads: int) -> int:
    _need(cfg, "out")
    g = parse_geometry(cfg["geometry"], cfg["size"], cfg["angles"])
    out = Path(cfg["out"])
    generate_dataset(out, g, cfg["train"], cfg["test"], seed=cfg["seed"], sigma_rel=cfg["noise"],
                     config=PhantomConfig(), force=cfg["force"], workers=threads)
    _write_config(out / "config.json", "gen-data", cfg)
    print(f"wrote {cfg['train']} train / {cfg['test']} test samples to {out}")
    return EXIT_OK


def cmd_train(cfg: dict, threads: int) -> int:
    from .grad import TrainConfig, train

    _need(cfg, "data", "out")
    ds = read_dataset(cfg["data"])
    # surface mask/geometry problems before any work
    build_mask(cfg["mask"], ds.geometry.angle_set, cfg["filter_size"], cfg["q"])
    tc = TrainConfig(blocks=cfg["blocks"], filter_size=cfg["filter_size"], mask=cfg["mask"], q=cfg["q"],
                     levels=cfg["levels"], epochs=cfg["epochs"], batch=cfg["batch"], lr=cfg["lr"],
                     lambda0=cfg["lambda0"], seed=cfg["seed"], chunk=cfg["chunk"], threads=threads,
                     filter_gain=cfg["filter_gain"], val_samples=cfg["val_samples"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    log = out.with_suffix(".log.csv")

    def report(epoch, loss, vp):
        print(f"epoch {epoch}: loss {loss:.6g}  val PSNR {vp:.2f} dB", flush=True)

    train(ds, tc, checkpoint=out, log_path=log, progress=report)
    _write_config(out.with_suffix(".config.json"), "train", cfg)
    return EXIT_OK


def _recon_names(ds, split: str) -> list[str]:
    return [Path(e["image"]).stem for e in ds.manifest["samples"][split]]


def cmd_reconstruct(cfg: dict, threads: int) -> int:
    from .unrolled import IstaConfig, ista_solve, load_params, psidonet_forward
    from .xray import XRayTransform

    _need(cfg, "data", "out")
    modes = [bool(cfg["checkpoint"]), cfg["fbp"], cfg["ista"]]
    if sum(modes) != 1:
        raise InvalidArgumentError("choose exactly one of --checkpoint, --fbp, --ista")
    ds = read_dataset(cfg["data"])
    g = ds.geometry
    X = ds.sinograms[cfg["split"]]
    op = XRayTransform(g, ds.scale)
    chunk = 5
    if cfg["checkpoint"]:
        params, _, head = load_params(cfg["checkpoint"])
        if head["geometry_hash"] != g.digest():
            raise CorruptDatasetError("checkpoint geometry does not match the dataset "
                                      f"({head['geometry_hash']} vs {g.digest()})")
        if not math.isclose(params.scale, ds.scale, rel_tol=1e-12):
            raise CorruptDatasetError("checkpoint operator scale does not match the dataset")

        def run(batch):
            return psidonet_forward(batch, params, op=op)[0]
    elif cfg["fbp"]:
        def run(batch):
            return op.fbp(batch, cfg["window"])
    else:
        ic = IstaConfig(cfg["lam"], 1.0, cfg["iterations"])

        def run(batch):
            return ista_solve(batch, op, ic, levels=cfg["levels"])

    bounds = [(s, min(s + chunk, len(X))) for s in range(0, len(X), chunk)]
    if threads > 1 and len(bounds) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda b: run(X[b[0]:b[1]]), bounds))
    else:
        parts = [run(X[s:e]) for s, e in bounds]
    recon = np.concatenate(parts) if parts else np.zeros((0,) + g.shape)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name, u in zip(_recon_names(ds, cfg["split"]), recon):
        (out / f"{name}.f32").write_bytes(np.asarray(u, dtype="<f4").tobytes())
        if cfg["png"]:
            save_png16(out / f"{name}.png", u)
    _write_config(out / "config.json", "reconstruct", cfg)
    print(f"reconstructed {len(recon)} samples into {out}")
    return EXIT_OK


def cmd_eval(cfg: dict, threads: int) -> int:
    _need(cfg, "data", "recon", "out")
    ds = read_dataset(cfg["data"])
    g = ds.geometry
    refs = ds.images[cfg["split"]]
    rec_dir = Path(cfg["recon"])
    rep = MetricReport()
    names = _recon_names(ds, cfg["split"])
    for name, ref in zip(names, refs):
        f = rec_dir / f"{name}.f32"
        try:
            blob = f.read_bytes()
        except FileNotFoundError as exc:
            raise CorruptDatasetError(f"{f}: missing reconstruction") from exc
        if len(blob) != 4 * g.image_size ** 2:
            raise CorruptDatasetError(f"{f}: wrong size")
        rep.add(np.frombuffer(blob, dtype="<f4").reshape(g.shape), ref.astype(np.float32))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "method", "psnr", "ssim"])
        for name, p, s in zip(names, rep.psnr, rep.ssim):
            w.writerow([name, cfg["label"], f"{p:.6f}", f"{s:.6f}"])
        w.writerow(["mean", cfg["label"], f"{rep.mean_psnr:.6f}", f"{rep.mean_ssim:.6f}"])
    _write_config(out.with_suffix(".config.json"), "eval", cfg)
    print(f"mean PSNR {rep.mean_psnr:.2f} dB, mean SSIM {rep.mean_ssim:.4f}")
    return EXIT_OK


def _draw_line(rgb, omega, offset, pitch, colour):
    n = rgb.shape[0]
    c = (n - 1) / 2
    ts = np.linspace(-1.5, 1.5, 8 * n)
    x1 = offset * math.cos(omega) - ts * math.sin(omega)
    x2 = offset * math.sin(omega) + ts * math.cos(omega)
    cols = np.round(x1 / pitch + c).astype(int)
    rows = np.round(c - x2 / pitch).astype(int)
    ok = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
    rgb[rows[ok], cols[ok]] = colour


def cmd_predict_artifacts(cfg: dict, threads: int) -> int:
    _need(cfg, "out")
    if cfg["data"]:
        ds = read_dataset(cfg["data"])
        g = ds.geometry
        u = ds.images[cfg["split"]][cfg["index"]]
    else:
        g = parse_geometry(cfg["geometry"], cfg["size"], cfg["angles"])
        disk = EllipseSpec((0.0, 0.0), (cfg["disk"], cfg["disk"]), 0.0, 1.0)
        u = rasterize([disk], g.image_size)
    grad_peak = peak_gradient(u)
    if grad_peak == 0:
        raise InvalidArgumentError("image has no edges")
    edges = extract_edges(u, cfg["threshold"] * grad_peak, g.pixel_pitch)
    tol = math.radians(cfg["tolerance"]) if cfg["tolerance"] > 0 else g.angular_step
    a = g.angle_set
    streaks = predict_streaks(edges, a, tol) if a.kind != FULL else []
    base = (u - u.min()) / (np.ptp(u) or 1.0)
    rgb = np.repeat(0.6 * base[..., None], 3, axis=2)
    n = g.image_size
    centre = (n - 1) / 2
    counts = {v.value: 0 for v in Visibility}
    for s in streaks:
        _draw_line(rgb, s.omega, s.offset, g.pixel_pitch, (0.2, 0.4, 1.0))
    for e in edges:
        col = int(round(e.position[0] / g.pixel_pitch + centre))
        row = int(round(centre - e.position[1] / g.pixel_pitch))
        v = classify_visibility(e, a, tol)
        counts[v.value] += 1
        if v is Visibility.VISIBLE:
            rgb[row, col] = (0.1, 0.9, 0.1)
        elif v is Visibility.BOUNDARY:
            rgb[row, col] = (1.0, 0.9, 0.1)
        elif ((row + col) // 2) % 2 == 0:          # dashed: every other pixel pair
            rgb[row, col] = (0.95, 0.1, 0.1)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rgb(out, rgb)
    directions = sorted({round(math.degrees(s.omega), 6) for s in streaks})
    summary = {"edges": counts, "streak_lines": len(streaks), "streak_directions_deg": directions}
    out.with_suffix(".json").write_text(json.dumps(summary, indent=1))
    _write_config(out.with_suffix(".config.json"), "predict-artifacts", cfg)
    print(f"{len(edges)} edge points, {len(streaks)} streak lines along {directions} degrees")
    return EXIT_OK


def cmd_dump_filters(cfg: dict, threads: int) -> int:
    _need(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["checkpoint"]:
        from .unrolled import load_params

        params, _, _ = load_params(cfg["checkpoint"])
        if not 0 <= cfg["layer"] < params.num_blocks:
            raise InvalidArgumentError(f"layer must be in [0, {params.num_blocks})")
        bank = params.filter_gain * params.layers[cfg["layer"]].filters * params.mask.support
        (out / "mask.pbm").write_bytes(to_pbm(params.mask))
        info = {"source": "checkpoint", "layer": cfg["layer"], "levels": params.levels}
    else:
        g = parse_geometry(cfg["geometry"], cfg["size"], cfg["angles"])
        bank = estimate_kernel_atlas(g, cfg["levels"], cfg["patch"]).filters
        info = {"source": "atlas", "levels": cfg["levels"], "geometry": g.to_dict()}
    save_png16(out / "filters.png", tile(bank))
    (out / "filters.f64").write_bytes(np.asarray(bank, dtype="<f8").tobytes())
    info["shape"] = list(bank.shape)
    info["layout"] = "[target subband][source subband][row][col], little-endian float64"
    (out / "filters.json").write_text(json.dumps(info, indent=1))
    _write_config(out / "config.json", "dump-filters", cfg)
    print(f"wrote {bank.shape[0]}x{bank.shape[1]} filter tiles to {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "predict-artifacts": cmd_predict_artifacts,
    "dump-filters": cmd_dump_filters,
}


def main(argv=None) -> int:
    ap = _parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg, threads = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg, threads)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except CorruptDatasetError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except MicroCTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
