"""Command-line entry point: stitch, decompose, search-sigma, eval and synth."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as pio
from .config import RunConfig, resolve
from .correlation import (DualMatcher, FeatureMap, estimate_homography_dual,
                          fixed_sigma_sweep, ternary_search_sigma)
from .distortion import final_scores, normalize_saliency_pair, saliency_map, to_luma
from .errors import ConfigError, DegenerateQuad, EmptyOverlap, FormatError, StitchError
from .homography import DecompositionCoefficients, Homography, corner_error, decompose
from .losses import LossBreakdown, alignment_loss_h, alignment_loss_tps, inter_grid_loss, intra_grid_loss
from .metrics import bucket, evaluate_pair, format_table, summary_rows
from .plane_optimizer import PlaneObjective, optimize_coefficients, plane_quads
from .synth import TEXTURES, SceneSpec, generate
from .warp import (WarpedImage, bidirectional_stitch, composite_average, local_refinement,
                   target_in_reference)

SCHEMA_VERSION = 1
PROG = "planestitch"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _same_channels(a, b):
    if a.ndim == b.ndim:
        return a, b
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    if b.ndim == 2:
        b = np.repeat(b[..., None], 3, axis=2)
    return a, b


def _overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "cell", None) is not None:
        out["cell"] = args.cell
    if getattr(args, "local", False):
        out["local"] = True
    if getattr(args, "bucket", None) is not None:
        out["bucket"] = args.bucket
    sigma = {}
    if getattr(args, "sigma_range", None) is not None:
        sigma["range_lo"], sigma["range_hi"] = args.sigma_range
    if getattr(args, "sigma_iters", None) is not None:
        sigma["iters"] = args.sigma_iters
    if sigma:
        out["sigma"] = sigma
    return out


def _config(args) -> RunConfig:
    return resolve(getattr(args, "config", None), _overrides(args))


def _features(paths):
    if not paths:
        return None
    return tuple(FeatureMap.from_chw(pio.read_rsft(p)) for p in paths)


def _saliency(i_ref, i_tgt):
    return normalize_saliency_pair(saliency_map(i_ref), saliency_map(i_tgt))


def _grid_losses(tps, weights, w, h_px):
    if tps is None:
        return 0.0, 0.0
    mesh = tps.src.reshape(weights.u + 1, weights.v + 1, 2)
    return intra_grid_loss(mesh, w, h_px, weights), inter_grid_loss(mesh, weights)


# --- stitch -----------------------------------------------------------------

def cmd_stitch(args) -> int:
    cfg = _config(args)
    i_ref = pio.read_png(args.ref)
    i_tgt = pio.read_png(args.tgt)
    if i_ref.shape[:2] != i_tgt.shape[:2]:
        raise FormatError(f"{args.ref} and {args.tgt} differ in size: {i_ref.shape[:2]} vs {i_tgt.shape[:2]}")
    i_ref, i_tgt = _same_channels(i_ref, i_tgt)
    hh, ww = i_ref.shape[:2]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    info: dict = {}
    h, sigma = estimate_homography_dual(i_ref, i_tgt, cfg.sigma, cfg.cell, cfg.seed,
                                        features=_features(args.features), info=info)
    s_ref, s_tgt = _saliency(i_ref, i_tgt)
    trace = optimize_coefficients(h, s_ref, s_tgt, ww, hh, cfg.optimizer)
    c = trace.final_c

    tps_tgt = None
    if cfg.local:
        tps_tgt = local_refinement(info["flow"], h, c, ww, hh, cfg.cell, cfg.loss.u, cfg.loss.v)
    a, b, canvas = bidirectional_stitch(i_ref, i_tgt, h, c, tps_tgt=tps_tgt)
    panorama = composite_average(a, b)

    lum_ref, lum_tgt = to_luma(i_ref), to_luma(i_tgt)
    align_tps = 0.0
    if tps_tgt is not None:
        align_tps = alignment_loss_tps(lum_ref, target_in_reference(lum_tgt, h, c, (hh, ww), tps_tgt), cfg.loss)
    intra, inter = _grid_losses(tps_tgt, cfg.loss, ww, hh)
    losses = LossBreakdown(alignment_loss_h(lum_ref, lum_tgt, h, cfg.loss), align_tps, intra, inter,
                           trace.final_loss, cfg.loss)
    try:
        metrics = evaluate_pair(a, b, name=out.name).to_json()
    except EmptyOverlap:
        metrics = None

    pio.write_png(out / "panorama.png", panorama)
    pio.write_png(out / "pair.a.png", a.pixels)
    pio.write_png(out / "pair.b.png", b.pixels)
    pio.write_png(out / "pair.a.mask.png", a.mask)
    pio.write_png(out / "pair.b.mask.png", b.mask)

    result = {
        "schema_version": SCHEMA_VERSION,
        "command": "stitch",
        "inputs": {"ref": Path(args.ref).name, "tgt": Path(args.tgt).name, "width": ww, "height": hh},
        "config": cfg.to_json(),
        "homography": h.to_json()["h"],
        "sigma": sigma,
        "sigma_trace": [{"lo": lo, "hi": hi} for lo, hi in info["brackets"]],
        "sigma_objective": info["objective"],
        "c_dec": [float(v) for v in c.c],
        "coef_trace": trace.to_json(),
        "losses": losses.to_json(),
        "metrics": metrics,
        "canvas": {"width": canvas.width, "height": canvas.height, "offset": list(canvas.offset)},
        "local": tps_tgt is not None,
    }
    if args.truth:
        h_true = Homography.from_json(pio.read_json(args.truth))
        result["corner_error"] = corner_error(h, h_true, ww, hh)
    pio.write_json(out / "result.json", result)
    print(f"H found with sigma={sigma:.4f}; c_dec={np.round(c.c, 4).tolist()}; wrote {out / 'result.json'}")
    return 0


# --- decompose ---------------------------------------------------------------

def cmd_decompose(args) -> int:
    cfg = _config(args)
    try:
        h = Homography.from_json(pio.read_json(args.h))
    except (TypeError, KeyError, ValueError) as exc:
        if isinstance(exc, StitchError):
            raise
        raise DegenerateQuad(f"{args.h}: not a homography ({exc})") from None
    if args.ref and args.tgt:
        i_ref, i_tgt = pio.read_png(args.ref), pio.read_png(args.tgt)
        hh, ww = i_ref.shape[:2]
        s_ref, s_tgt = _saliency(i_ref, i_tgt)
    elif args.size:
        ww, hh = args.size
        # no images: every pixel matters equally
        s_ref = s_tgt = np.ones((hh, ww))
    else:
        raise ConfigError("decompose needs --size W H or both --ref and --tgt")

    result = {"schema_version": SCHEMA_VERSION, "command": "decompose", "homography": h.to_json()["h"],
              "width": ww, "height": hh}
    if args.optimize:
        trace = optimize_coefficients(h, s_ref, s_tgt, ww, hh, cfg.optimizer)
        c = trace.final_c
        result["trace"] = trace.to_json()
    else:
        c = DecompositionCoefficients(args.c if args.c is not None else (1.0, 1.0, 1.0, 1.0))
    h_ref, h_tgt = decompose(h, c, ww, hh)
    q_ref, q_tgt = plane_quads(h, c, ww, hh)
    result.update(
        c_dec=[float(v) for v in c.c],
        h_ref=h_ref.to_json()["h"],
        h_tgt=h_tgt.to_json()["h"],
        scores={"ref": final_scores(q_ref).to_json(), "tgt": final_scores(q_tgt).to_json()},
        l_coef=PlaneObjective(h, s_ref, s_tgt, ww, hh)(c.c),
    )
    text = pio.dumps(result)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# --- search-sigma ------------------------------------------------------------

def cmd_search_sigma(args) -> int:
    cfg = _config(args)
    i_ref, i_tgt = pio.read_png(args.ref), pio.read_png(args.tgt)
    matcher = DualMatcher(i_ref, i_tgt, cfg.cell, cfg.seed, _features(args.features), cfg.loss)
    report = {"schema_version": SCHEMA_VERSION, "command": "search-sigma",
              "range": [cfg.sigma.range_lo, cfg.sigma.range_hi]}
    if args.fixed is not None:
        if args.fixed < 2:
            raise ConfigError("--fixed needs at least 2 sweep points")
        sigma, value, sweep = fixed_sigma_sweep(matcher.objective, cfg.sigma, args.fixed)
        for s, v in sweep:
            print(f"sigma={s:+.6f} objective={v:.8f}")
        report.update(mode="fixed", sweep=[{"sigma": s, "objective": v} for s, v in sweep])
    else:
        trace: list = []
        sigma, value = ternary_search_sigma(matcher.objective, cfg.sigma, trace)
        for k, (lo, hi) in enumerate(trace, 1):
            print(f"iter {k:2d}: bracket [{lo:+.6f}, {hi:+.6f}] width {hi - lo:.6f}")
        report.update(mode="ternary", iters=cfg.sigma.iters, trace=[{"lo": lo, "hi": hi} for lo, hi in trace])
    print(f"sigma={sigma:.6f} objective={value:.8f}")
    report.update(sigma=sigma, objective=value)
    if args.json:
        pio.write_json(args.json, report)
    return 0


# --- eval ----------------------------------------------------------------------

def _mask_or_ones(path, shape):
    if path.exists():
        m = pio.read_png(path)
        return (to_luma(m) > 0.5).astype(float)
    return np.ones(shape)


def _collect_pairs(target: Path):
    """Aligned pairs ``NAME.a.png``/``NAME.b.png`` and raw pairs ``NAME.ref.png``/``NAME.tgt.png``."""
    pairs = []
    for a_path in sorted(target.glob("*.a.png")):
        name = a_path.name[:-len(".a.png")]
        pairs.append(("aligned", name, a_path.parent))
    for r_path in sorted(target.glob("*.ref.png")):
        name = r_path.name[:-len(".ref.png")]
        pairs.append(("raw", name, r_path.parent))
    return pairs


def _load_pair(kind, name, root):
    if kind == "aligned":
        a = pio.read_png(root / f"{name}.a.png")
        b = pio.read_png(root / f"{name}.b.png")
        a, b = _same_channels(a, b)
        ma = _mask_or_ones(root / f"{name}.a.mask.png", a.shape[:2])
        mb = _mask_or_ones(root / f"{name}.b.mask.png", b.shape[:2])
        return WarpedImage(a, ma), WarpedImage(b, mb)
    i_ref = pio.read_png(root / f"{name}.ref.png")
    i_tgt = pio.read_png(root / f"{name}.tgt.png")
    i_ref, i_tgt = _same_channels(i_ref, i_tgt)
    spec = pio.read_json(root / f"{name}.h.json")
    h = Homography.from_json(spec)
    c = DecompositionCoefficients(spec.get("c", (1.0, 1.0, 1.0, 1.0)))
    a, b, _ = bidirectional_stitch(i_ref, i_tgt, h, c)
    return a, b


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.pair:
        a = WarpedImage(pio.read_png(args.pair[0]), None)
        b = WarpedImage(pio.read_png(args.pair[1]), None)
        a.pixels, b.pixels = _same_channels(a.pixels, b.pixels)
        masks = args.masks or (None, None)
        a.mask = _mask_or_ones(Path(masks[0]), a.pixels.shape[:2]) if masks[0] else np.ones(a.pixels.shape[:2])
        b.mask = _mask_or_ones(Path(masks[1]), b.pixels.shape[:2]) if masks[1] else np.ones(b.pixels.shape[:2])
        loaded = [(Path(args.pair[0]).stem, a, b)]
    else:
        target = Path(args.dir)
        if not target.is_dir():
            raise FormatError(f"{target} is not a directory")
        loaded = [(name, *_load_pair(kind, name, root)) for kind, name, root in _collect_pairs(target)]

    reports, skipped = [], []
    for name, a, b in loaded:
        try:
            reports.append(evaluate_pair(a, b, name=name))
        except EmptyOverlap:
            skipped.append(name)
    bucket(reports, cfg.bucket)
    for r in reports:
        print(f"{r.name:<24} mPSNR {r.mpsnr:8.3f}  mSSIM {r.mssim:.4f}  overlap {r.overlap_fraction:.3f}  {r.bucket}")
    for name in skipped:
        print(f"{name:<24} skipped: empty overlap")
    print(format_table(reports, cfg.bucket))
    if args.json:
        rows = summary_rows(reports)
        pio.write_json(args.json, {
            "schema_version": SCHEMA_VERSION,
            "command": "eval",
            "bucket_mode": cfg.bucket,
            "reports": [r.to_json() for r in reports],
            "skipped": skipped,
            "summary": [{"bucket": lab, "count": n, "mpsnr": p, "mssim": s} for lab, n, p, s in rows],
        })
    return 0


# --- synth ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    try:
        spec = SceneSpec(size=tuple(args.size) if len(args.size) == 2 else args.size[0], texture=args.texture,
                         h_magnitude=args.h_magnitude, parallax_px=args.parallax, gamma=args.gamma,
                         brightness=args.brightness, noise_std=args.noise, seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    i_ref, i_tgt, h_true = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pio.write_png(out / "ref.png", i_ref)
    pio.write_png(out / "tgt.png", i_tgt)
    pio.write_json(out / "h_true.json", h_true.to_json())
    print(f"wrote {out / 'ref.png'}, {out / 'tgt.png'}, {out / 'h_true.json'}")
    return 0


# --- parser ------------------------------------------------------------------

def _common(p, sigma=True):
    p.add_argument("--config", help="TOML file with run settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--cell", type=int, help="correlation cell size in pixels")
    if sigma:
        p.add_argument("--sigma-range", type=float, nargs=2, metavar=("LO", "HI"))
        p.add_argument("--sigma-iters", type=int)
        p.add_argument("--features", nargs=4, metavar=("A_REF", "A_TGT", "B_REF", "B_TGT"),
                       help="RSFT feature tensors replacing both extractors")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Two-view stitching on an optimized intermediate plane.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stitch", help="estimate H, choose the plane, warp and composite")
    p.add_argument("ref")
    p.add_argument("tgt")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--local", action="store_true", help="add the flow-driven TPS refinement")
    p.add_argument("--truth", help="ground-truth homography JSON; reports the corner error")
    _common(p)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("decompose", help="split H into the two plane warps")
    p.add_argument("h", help="homography JSON")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--c", type=float, nargs=4, metavar=("C1", "C2", "C3", "C4"))
    g.add_argument("--optimize", action="store_true")
    p.add_argument("--size", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--ref")
    p.add_argument("--tgt")
    p.add_argument("--out", help="output JSON (default stdout)")
    _common(p, sigma=False)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("search-sigma", help="trace the sigma search for an image pair")
    p.add_argument("ref")
    p.add_argument("tgt")
    p.add_argument("--fixed", type=int, metavar="N", help="evenly spaced sweep instead of ternary search")
    p.add_argument("--json", help="also write the report as JSON")
    _common(p)
    p.set_defaults(func=cmd_search_sigma)

    p = sub.add_parser("eval", help="masked mPSNR/mSSIM over aligned or raw pairs")
    p.add_argument("dir", nargs="?", help="directory of NAME.a.png/NAME.b.png or NAME.ref.png/NAME.tgt.png/NAME.h.json")
    p.add_argument("--pair", nargs=2, metavar=("A", "B"))
    p.add_argument("--masks", nargs=2, metavar=("MASK_A", "MASK_B"))
    p.add_argument("--bucket", help="tertile or fixed:T1,T2 (dB)")
    p.add_argument("--json", help="write reports and summary as JSON")
    p.add_argument("--config", help="TOML file with run settings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a synthetic pair with a planted homography")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, nargs="+", default=[512], metavar="PX")
    p.add_argument("--texture", choices=TEXTURES, default="perlin")
    p.add_argument("--h-magnitude", type=float, default=0.15)
    p.add_argument("--parallax", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--brightness", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="TOML file with run settings")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "eval" and not args.pair and not args.dir:
            raise ConfigError("eval needs a directory or --pair A B")
        if args.command == "synth" and len(args.size) not in (1, 2):
            raise ConfigError("--size takes one or two values")
        return args.func(args)
    except StitchError as exc:
        print(f"{PROG}: error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_status
    except (ValueError, ArithmeticError) as exc:
        print(f"{PROG}: error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
