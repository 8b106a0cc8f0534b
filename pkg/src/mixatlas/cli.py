"""Command-line front end: ``mixatlas {train,synth,sample,render,info}``.

Options come from three layers: built-in defaults, an optional JSON file
given with ``--config`` and explicit flags, later layers winning.
``--dump-config`` prints the merged result and exits.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    TEMPLATE_SHAPES, Dataset, draw_samples, generate_synthetic, load_dataset, render_template,
    save_dataset, shape_template, write_pgm,
)
from .errors import ConfigError, MissingFile, MixAtlasError
from .kernels import Box, Geometry, KernelConfig, LandmarkGrid
from .params import ComponentParams, Hyperparams, ModelParams
from .rng import SAMPLE, SYNTH, CounterRNG, default_seed
from .saem import SaemConfig, Trace, train

log = logging.getLogger("mixatlas")


@dataclass(frozen=True)
class Opt:
    name: str
    type: type
    default: object
    help: str
    nargs: int | str | None = None
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


KERNEL_OPTS = [
    Opt("sigma_p", float, 0.2, "photometric kernel width"),
    Opt("sigma_g", float, 0.12, "geometric kernel width"),
    Opt("p_grid", int, [6, 6], "photometric landmark grid (nx ny)", nargs=2),
    Opt("g_grid", int, [2, 2], "geometric landmark grid (nx ny)", nargs=2),
    Opt("photometric_box", float, [-1.5, 1.5, -1.5, 1.5],
        "photometric domain (xmin xmax ymin ymax)", nargs=4),
    Opt("geometric_box", float, [-1.0, 1.0, -1.0, 1.0],
        "geometric landmark domain (xmin xmax ymin ymax)", nargs=4),
]

PRIOR_OPTS = [
    Opt("a_p", float, 3.0, "weight of the noise-variance prior (>= 3)"),
    Opt("sigma0_2", float, 1.0, "scale of the noise-variance prior"),
    Opt("a_g", float, None, "weight of the covariance prior (default 4 k_g + 1)"),
    Opt("a_rho", float, 1.0, "Dirichlet weight on the mixture proportions"),
    Opt("sigma_g_scale", float, 1.0, "multiplier on the kernel-induced covariance prior"),
]

COMMON_OPTS = [
    Opt("seed", int, None, "master seed (default: $MIXATLAS_SEED or a fixed constant)"),
    Opt("threads", int, 1, "sampler worker threads (0 = one per CPU)"),
]

TRAIN_OPTS = [
    Opt("manifest", str, None, "dataset manifest"),
    Opt("out", str, None, "output directory"),
    Opt("components", int, 2, "number of mixture components"),
    Opt("k_max", int, 200, "number of iterations"),
    Opt("k_heat", int, 150, "iterations with unit step size"),
    Opt("step_exponent", float, 0.6, "step-size decay exponent after heating"),
    Opt("J", int, 50, "sweeps per Markov chain and iteration"),
    Opt("J_growth", bool, False, "grow chain length as J * ceil(sqrt(k))"),
    Opt("compact_radius0", float, None, "radius of the first compact set"),
    Opt("compact_growth", float, 2.0, "radius growth factor per truncation"),
    Opt("kappa_max", int, 64, "maximum number of truncations"),
    Opt("sigma_fixed", bool, False, "keep noise variances at their initial value"),
    Opt("init_sigma2", float, 1.0, "initial noise variance"),
    Opt("checkpoint_every", int, 50, "checkpoint period in iterations (0 = off)"),
] + KERNEL_OPTS + PRIOR_OPTS + COMMON_OPTS

SYNTH_OPTS = [
    Opt("out", str, None, "output directory"),
    Opt("n", int, 40, "number of images"),
    Opt("params", str, None, "checkpoint supplying the true parameters"),
    Opt("width", int, 8, "image width in pixels"),
    Opt("height", int, 8, "image height in pixels"),
    Opt("shapes", str, ["ring", "cross"], "template shapes, one per component", nargs="+",
        choices=TEMPLATE_SHAPES),
    Opt("rho", float, None, "mixture proportions (default uniform)", nargs="+"),
    Opt("sigma2", float, 0.05, "noise variance of every component"),
    Opt("deformation_scale", float, 0.02,
        "deformation covariance as a multiple of the kernel-induced one"),
    Opt("format", str, "npy", "image file format", choices=("npy", "pgm")),
] + KERNEL_OPTS[:1] + [
    Opt("sigma_g", float, 0.6, "geometric kernel width"),
] + KERNEL_OPTS[2:] + COMMON_OPTS[:1]

SAMPLE_OPTS = [
    Opt("checkpoint", str, None, "parameter checkpoint"),
    Opt("out", str, None, "output directory"),
    Opt("count", int, 8, "number of (beta, -beta) pairs"),
    Opt("template", int, 1, "component supplying the template (1-based)"),
    Opt("covariance", int, None, "component supplying the deformation law (default: template)"),
    Opt("format", str, "pgm", "image file format", choices=("npy", "pgm")),
] + COMMON_OPTS[:1]

RENDER_OPTS = [
    Opt("checkpoint", str, None, "parameter checkpoint"),
    Opt("out", str, None, "output directory"),
    Opt("raw", bool, False, "also write unclamped float images (.npy)"),
]

INFO_OPTS = [
    Opt("checkpoint", str, None, "parameter checkpoint"),
    Opt("manifest", str, None, "dataset manifest"),
]

REQUIRED = {
    "train": ("manifest", "out"),
    "synth": ("out",),
    "sample": ("checkpoint", "out"),
    "render": ("checkpoint", "out"),
    "info": (),
}


def _add(parser: argparse.ArgumentParser, opt: Opt) -> None:
    if opt.type is bool:
        parser.add_argument(opt.flag, dest=opt.name, action=argparse.BooleanOptionalAction,
                            default=None, help=opt.help)
        return
    kw = dict(dest=opt.name, type=opt.type, default=None, help=opt.help)
    if opt.nargs is not None:
        kw["nargs"] = opt.nargs
    if opt.choices is not None:
        kw["choices"] = opt.choices
    parser.add_argument(opt.flag, **kw)


def _subparser(sub, name: str, opts: list[Opt], help_text: str):
    p = sub.add_parser(name, help=help_text, description=help_text)
    _add_layering(p)
    for opt in opts:
        _add(p, opt)
    p.set_defaults(opts=opts)
    return p


def _add_layering(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--dump-config", action="store_true",
                   help="print the effective configuration and exit")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixatlas",
        description="Mixtures of deformable templates estimated by stochastic EM.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    _subparser(sub, "train", TRAIN_OPTS, "estimate a mixture from a dataset")
    _subparser(sub, "synth", SYNTH_OPTS, "generate a synthetic dataset")
    _subparser(sub, "sample", SAMPLE_OPTS, "draw deformed template pairs from a checkpoint")
    _subparser(sub, "render", RENDER_OPTS, "write the templates of a checkpoint as images")
    _subparser(sub, "info", INFO_OPTS, "summarise a checkpoint or a dataset")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, the JSON config file and explicit flags."""
    opts: list[Opt] = args.opts
    cfg = {o.name: o.default for o in opts}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"{path}: unknown keys: {', '.join(unknown)}")
        for o in opts:
            if o.name in loaded:
                cfg[o.name] = _coerce(o, loaded[o.name], path)
    for o in opts:
        value = getattr(args, o.name)
        if value is not None:
            cfg[o.name] = value
    if "seed" in cfg and cfg["seed"] is None:
        try:
            cfg["seed"] = default_seed()
        except ValueError as exc:
            raise ConfigError(f"invalid seed in environment: {exc}") from exc
    if cfg.get("threads") == 0:
        cfg["threads"] = os.cpu_count() or 1
    return cfg


def _coerce(opt: Opt, value, path):
    def one(v):
        if opt.type is bool:
            if not isinstance(v, bool):
                raise ConfigError(f"{path}: {opt.name} must be true or false")
            return v
        if opt.type is float and isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
        if opt.type is int and isinstance(v, int) and not isinstance(v, bool):
            return v
        if opt.type is str and isinstance(v, str):
            return v
        raise ConfigError(f"{path}: {opt.name} has the wrong type")

    if value is None:
        return None
    if opt.nargs is not None:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: {opt.name} must be a list")
        if isinstance(opt.nargs, int) and len(value) != opt.nargs:
            raise ConfigError(f"{path}: {opt.name} needs {opt.nargs} values")
        out = [one(v) for v in value]
    else:
        out = one(value)
    if opt.choices is not None:
        for v in out if isinstance(out, list) else [out]:
            if v not in opt.choices:
                raise ConfigError(f"{path}: {opt.name} must be one of {opt.choices}")
    return out


def _require(cfg: dict, names) -> None:
    missing = [n for n in names if cfg.get(n) is None]
    if missing:
        raise ConfigError("missing required option(s): " +
                          ", ".join("--" + n.replace("_", "-") for n in missing))


def _positive(cfg: dict, *names, allow_zero=False) -> None:
    for name in names:
        v = cfg.get(name)
        if v is None:
            continue
        if isinstance(v, list):
            bad = any(x < 0 or (x == 0 and not allow_zero) for x in v)
        else:
            bad = v < 0 or (v == 0 and not allow_zero)
        if bad:
            raise ConfigError(f"--{name.replace('_', '-')} must be "
                              f"{'non-negative' if allow_zero else 'positive'}")


def kernel_config(cfg: dict) -> KernelConfig:
    return KernelConfig(cfg["sigma_p"], cfg["sigma_g"], Box(*cfg["photometric_box"]),
                        Box(*cfg["geometric_box"]))


def _geometry_for(dataset: Dataset, cfg: dict) -> Geometry:
    kc = kernel_config(cfg)
    return Geometry(dataset.grid, LandmarkGrid.uniform(*cfg["p_grid"], kc.photometric_box),
                    LandmarkGrid.uniform(*cfg["g_grid"], kc.geometric_box), kc)


def _hyperparams(geometry: Geometry, cfg: dict, tau_m: int) -> Hyperparams:
    try:
        return Hyperparams.from_geometry(
            geometry, tau_m, a_p=cfg["a_p"], sigma0_2=cfg["sigma0_2"], a_g=cfg["a_g"],
            a_rho=cfg["a_rho"], sigma_g_scale=cfg["sigma_g_scale"],
            sigma_fixed=cfg.get("sigma_fixed", False))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -- subcommands -------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    _require(cfg, REQUIRED["train"])
    _positive(cfg, "components", "k_max", "J", "sigma_p", "sigma_g", "p_grid", "g_grid",
              "init_sigma2", "sigma0_2", "a_rho", "sigma_g_scale")
    _positive(cfg, "checkpoint_every", "k_heat", "kappa_max", allow_zero=True)
    manifest = Path(cfg["manifest"])
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    try:
        saem_cfg = SaemConfig(
            k_max=cfg["k_max"], k_heat=cfg["k_heat"], step_exponent=cfg["step_exponent"],
            J=cfg["J"], J_growth=cfg["J_growth"], compact_radius0=cfg["compact_radius0"],
            compact_growth=cfg["compact_growth"], kappa_max=cfg["kappa_max"], seed=cfg["seed"],
            sigma_fixed=cfg["sigma_fixed"], init_sigma2=cfg["init_sigma2"],
            threads=cfg["threads"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    dataset = load_dataset(manifest, default_box=Box(*cfg["photometric_box"]))
    geometry = _geometry_for(dataset, cfg)
    hyper = _hyperparams(geometry, cfg, cfg["components"])

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    every = cfg["checkpoint_every"]
    ckpt_dir = out / "checkpoints"

    def on_iteration(state, row):
        if every and state.k % every == 0:
            save_checkpoint(ckpt_dir / f"iter_{state.k:05d}.bin", state.eta, hyper, geometry,
                            state.hidden, extra={"iteration": state.k, "kappa": state.kappa})
        log.info("iteration %d/%d  log-posterior %.6g", row["k"], saem_cfg.k_max,
                 row["log_posterior"])

    result = train(dataset.images, geometry, hyper, saem_cfg, callback=on_iteration)
    (out / "trace.tsv").write_text(result.trace.to_text())
    save_checkpoint(out / "params.bin", result.eta, result.hyper, geometry, result.state.hidden,
                    extra={"iteration": result.state.k, "kappa": result.state.kappa})
    for t, comp in enumerate(result.eta.components):
        write_pgm(out / f"template_{t + 1}.pgm", render_template(comp, geometry, clamp=True))
    counts = np.bincount(result.state.hidden.tau, minlength=hyper.tau_m)
    print(f"trained {hyper.tau_m} components on {dataset.n} images "
          f"({result.state.k} iterations, {result.state.kappa} truncations)")
    for t in range(hyper.tau_m):
        print(f"  component {t + 1}: images={counts[t]} rho={result.eta.rho[t]:.4f} "
              f"sigma2={result.eta.components[t].sigma2:.6g}")
    return 0


def _synthetic_truth(cfg: dict) -> tuple[ModelParams, Geometry]:
    if cfg["params"] is not None:
        ck = load_checkpoint(cfg["params"])
        if ck.geometry is None:
            raise ConfigError(f"{cfg['params']}: checkpoint carries no geometry")
        return ck.eta, ck.geometry
    _positive(cfg, "width", "height", "sigma2", "deformation_scale", "sigma_p", "sigma_g",
              "p_grid", "g_grid")
    kc = kernel_config(cfg)
    geometry = Geometry.regular(cfg["width"], cfg["height"], tuple(cfg["p_grid"]),
                                tuple(cfg["g_grid"]), kc)
    shapes = cfg["shapes"]
    tau_m = len(shapes)
    rho = cfg["rho"] if cfg["rho"] is not None else [1.0 / tau_m] * tau_m
    if len(rho) != tau_m or any(r < 0 for r in rho) or not abs(sum(rho) - 1.0) < 1e-9:
        raise ConfigError("--rho needs one non-negative weight per shape, summing to 1")
    gamma = Hyperparams.from_geometry(geometry, tau_m,
                                      sigma_g_scale=cfg["deformation_scale"]).sigma_g_mat
    comps = [ComponentParams(shape_template(s, geometry), cfg["sigma2"], gamma.copy())
             for s in shapes]
    return ModelParams(comps, np.asarray(rho, dtype=float) / sum(rho)), geometry


def cmd_synth(cfg: dict) -> int:
    _require(cfg, REQUIRED["synth"])
    if cfg["n"] < 1:
        raise ConfigError("--n must be at least 1")
    eta, geometry = _synthetic_truth(cfg)
    gen = CounterRNG(cfg["seed"]).generator(0, 0, SYNTH)
    dataset = generate_synthetic(eta, cfg["n"], geometry, gen)
    manifest = save_dataset(dataset, cfg["out"], fmt=cfg["format"], geometry=geometry)
    counts = np.bincount(dataset.truth_hidden.tau, minlength=eta.tau_m)
    print(f"n = {dataset.n}")
    print(f"tau_m = {eta.tau_m}")
    for t in range(eta.tau_m):
        print(f"component {t + 1}: {counts[t]}")
    print(f"manifest: {manifest}")
    return 0


def cmd_sample(cfg: dict) -> int:
    _require(cfg, REQUIRED["sample"])
    if cfg["count"] < 0:
        raise ConfigError("--count must be non-negative")
    ck = load_checkpoint(cfg["checkpoint"])
    if ck.geometry is None:
        raise MixAtlasError(f"{cfg['checkpoint']}: checkpoint carries no geometry")
    tau_m = ck.eta.tau_m
    t1 = cfg["template"]
    t2 = t1 if cfg["covariance"] is None else cfg["covariance"]
    for name, t in (("template", t1), ("covariance", t2)):
        if not 1 <= t <= tau_m:
            raise ConfigError(f"--{name} must lie in 1..{tau_m}")
    out = Path(cfg["out"])
    if cfg["count"] == 0:
        print("0 sample pairs requested; nothing written")
        return 0
    gen = CounterRNG(cfg["seed"]).generator(0, t1, SAMPLE, t2)
    _, plus, minus = draw_samples(ck.eta, cfg["count"], ck.geometry, gen, t1 - 1, t2 - 1)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg["count"]):
        for sign, img in (("plus", plus[i]), ("minus", minus[i])):
            stem = f"sample_t{t1}_c{t2}_{i:04d}_{sign}"
            if cfg["format"] == "npy":
                np.save(out / f"{stem}.npy", img, allow_pickle=False)
            else:
                write_pgm(out / f"{stem}.pgm", img)
    print(f"wrote {cfg['count']} pairs (template {t1}, covariance {t2}) to {out}")
    return 0


def cmd_render(cfg: dict) -> int:
    _require(cfg, REQUIRED["render"])
    ck = load_checkpoint(cfg["checkpoint"])
    if ck.geometry is None:
        raise MixAtlasError(f"{cfg['checkpoint']}: checkpoint carries no geometry")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for t, comp in enumerate(ck.eta.components):
        img = render_template(comp, ck.geometry)
        write_pgm(out / f"template_{t + 1}.pgm", img)
        if cfg["raw"]:
            np.save(out / f"template_{t + 1}.npy", img, allow_pickle=False)
    print(f"wrote {ck.eta.tau_m} templates to {out}")
    return 0


def cmd_info(cfg: dict) -> int:
    if cfg["checkpoint"] is None and cfg["manifest"] is None:
        raise ConfigError("info needs --checkpoint or --manifest")
    if cfg["checkpoint"] is not None:
        ck = load_checkpoint(cfg["checkpoint"])
        eta = ck.eta
        print(f"checkpoint: {cfg['checkpoint']}")
        print(f"components: {eta.tau_m}  k_p: {eta.components[0].alpha.size}  "
              f"k_g: {eta.components[0].gamma_g.shape[0] // 2}")
        if "iteration" in ck.header:
            print(f"iteration: {ck.header['iteration']}")
        if ck.geometry is not None:
            print(f"image: {ck.geometry.pixels.width}x{ck.geometry.pixels.height}")
        for t, c in enumerate(eta.components):
            print(f"  component {t + 1}: rho={eta.rho[t]:.6g} sigma2={c.sigma2:.6g} "
                  f"trace(Gamma)={np.trace(c.gamma_g):.6g}")
    if cfg["manifest"] is not None:
        ds = load_dataset(cfg["manifest"])
        print(f"dataset: {cfg['manifest']}")
        print(f"images: {ds.n}  size: {ds.grid.width}x{ds.grid.height}")
        print(f"gray range: [{ds.images.min():.6g}, {ds.images.max():.6g}]")
        if ds.truth_hidden is not None:
            counts = np.bincount(ds.truth_hidden.tau, minlength=ds.truth_params.tau_m)
            print("true counts: " + " ".join(str(c) for c in counts))
    return 0


COMMANDS = {
    "train": cmd_train, "synth": cmd_synth, "sample": cmd_sample,
    "render": cmd_render, "info": cmd_info,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"mixatlas {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MixAtlasError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"mixatlas {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
