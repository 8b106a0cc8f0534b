"""Parameter checkpoints: model, hyperparameters and geometry in one file."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .kernels import Box, Geometry, KernelConfig, LandmarkGrid, PixelGrid
from .params import ComponentParams, HiddenState, Hyperparams, ModelParams
from .store import parse_bool, parse_floats, read_container, write_container

KIND = "model-params"


@dataclass
class Checkpoint:
    eta: ModelParams
    hyper: Hyperparams | None
    geometry: Geometry | None
    hidden: HiddenState | None
    header: dict[str, str]


def _landmark_header(prefix: str, grid: LandmarkGrid) -> dict:
    out = {f"{prefix}_box": list(grid.box.as_tuple())}
    if grid.axes is not None:
        out[f"{prefix}_shape"] = [len(grid.axes[0]), len(grid.axes[1])]
    return out


def geometry_header(geometry: Geometry) -> dict:
    cfg = geometry.config
    head = {
        "width": geometry.pixels.width,
        "height": geometry.pixels.height,
        "pixel_box": list(geometry.pixels.box.as_tuple()),
        "sigma_p": float(cfg.sigma_p),
        "sigma_g": float(cfg.sigma_g),
        "photometric_box": list(cfg.photometric_box.as_tuple()),
        "geometric_box": list(cfg.geometric_box.as_tuple()),
    }
    head.update(_landmark_header("p", geometry.p_landmarks))
    head.update(_landmark_header("g", geometry.g_landmarks))
    return head


def _landmarks(header, arrays, prefix) -> LandmarkGrid:
    box = Box(*parse_floats(header[f"{prefix}_box"]))
    if f"{prefix}_shape" in header:
        nx, ny = (int(v) for v in header[f"{prefix}_shape"].split())
        grid = LandmarkGrid.uniform(nx, ny, box)
        if not np.array_equal(grid.points, arrays[f"{prefix}_points"]):
            raise ParseError(f"{prefix} landmarks do not match their declared grid")
        return grid
    return LandmarkGrid(arrays[f"{prefix}_points"], box)


def geometry_from(header, arrays) -> Geometry:
    cfg = KernelConfig(float(header["sigma_p"]), float(header["sigma_g"]),
                       Box(*parse_floats(header["photometric_box"])),
                       Box(*parse_floats(header["geometric_box"])))
    pixels = PixelGrid(int(header["width"]), int(header["height"]),
                       Box(*parse_floats(header["pixel_box"])))
    return Geometry(pixels, _landmarks(header, arrays, "p"), _landmarks(header, arrays, "g"), cfg)


def save_checkpoint(path, eta: ModelParams, hyper: Hyperparams | None = None,
                    geometry: Geometry | None = None, hidden: HiddenState | None = None,
                    extra: dict | None = None) -> Path:
    header = {
        "kind": KIND,
        "tau_m": eta.tau_m,
        "k_p": int(eta.components[0].alpha.shape[0]),
        "k_g": int(eta.components[0].gamma_g.shape[0] // 2),
    }
    arrays = {
        "alpha": eta.alphas(),
        "sigma2": eta.sigma2(),
        "gamma_g": eta.gammas(),
        "rho": eta.rho,
    }
    if geometry is not None:
        header["n_pixels"] = geometry.n_pixels
        header.update(geometry_header(geometry))
        arrays["p_points"] = geometry.p_points
        arrays["g_points"] = geometry.g_landmarks.points
    if hyper is not None:
        header.update(a_p=float(hyper.a_p), sigma0_2=float(hyper.sigma0_2),
                      a_g=float(hyper.a_g), a_rho=float(hyper.a_rho), R=float(hyper.R),
                      sigma_fixed=bool(hyper.sigma_fixed))
        arrays.update(mu_p=hyper.mu_p, sigma_p_mat=hyper.sigma_p_mat,
                      precision_p=hyper.precision_p, sigma_g_mat=hyper.sigma_g_mat)
    if hidden is not None:
        arrays.update(beta=hidden.beta, tau=hidden.tau)
    header.update(extra or {})
    return write_container(path, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    if header.get("kind") != KIND:
        raise ParseError(f"{path}: not a parameter checkpoint")
    try:
        comps = [ComponentParams(a, s, g) for a, s, g in
                 zip(arrays["alpha"], arrays["sigma2"], arrays["gamma_g"])]
        eta = ModelParams(comps, arrays["rho"])
        hyper = None
        if "mu_p" in arrays:
            hyper = Hyperparams(
                mu_p=arrays["mu_p"], sigma_p_mat=arrays["sigma_p_mat"],
                precision_p=arrays["precision_p"], a_p=float(header["a_p"]),
                sigma0_2=float(header["sigma0_2"]), sigma_g_mat=arrays["sigma_g_mat"],
                a_g=float(header["a_g"]), a_rho=float(header["a_rho"]),
                tau_m=int(header["tau_m"]), R=float(header["R"]),
                sigma_fixed=parse_bool(header["sigma_fixed"]))
        geometry = geometry_from(header, arrays) if "width" in header else None
        hidden = HiddenState(arrays["beta"], arrays["tau"]) if "beta" in arrays else None
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc}") from exc
    return Checkpoint(eta, hyper, geometry, hidden, header)
