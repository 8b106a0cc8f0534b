"""Datasets, image files and the forward generative sampler.

Gray levels live in [0, 2] with 0 for the background.  Datasets on disk are a
manifest (``key = value`` header, blank line, one image path per line) next
to image files: 8-bit binary PGM for interchange or ``.npy`` float64 for
lossless round trips.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DimensionMismatch, EmptyDataset, MissingFile, ParseError
from .kernels import Box, Geometry, PixelGrid, build_gram
from .params import ComponentParams, HiddenState, ModelParams, _chol
from .store import parse_floats

GRAY_MAX = 2.0
NORMALIZATIONS = ("8bit", "none")


@dataclass
class Dataset:
    images: np.ndarray  # (n, |Lambda|), row-major pixels
    grid: PixelGrid
    truth_params: ModelParams | None = None
    truth_hidden: HiddenState | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 2 or self.images.shape[0] < 1:
            raise EmptyDataset("a dataset needs at least one image")
        if self.images.shape[1] != self.grid.size:
            raise DimensionMismatch("images do not match the pixel grid")

    @property
    def n(self) -> int:
        return self.images.shape[0]


# -- PGM ---------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (raw integer pixels of shape (height, width), maxval)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such image: {path}")
    data = path.read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PGM header") from exc
    if not 0 < maxval < 65536:
        raise ParseError(f"{path}: invalid maxval {maxval}")
    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos + 1:pos + 1 + w * h * dtype.itemsize]
        if len(raw) != w * h * dtype.itemsize:
            raise ParseError(f"{path}: truncated pixel data")
        pix = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    elif magic == b"P2":
        values, _ = _pgm_tokens(data[pos:], w * h)
        pix = np.array([int(v) for v in values], dtype=np.int64)
    else:
        raise ParseError(f"{path}: not a PGM file")
    return pix.reshape(h, w), maxval


def write_pgm(path, image: np.ndarray) -> None:
    """Write gray levels in [0, 2] as an 8-bit binary PGM (clamped)."""
    image = np.asarray(image, dtype=float)
    q = np.rint(np.clip(image, 0.0, GRAY_MAX) * (255.0 / GRAY_MAX)).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


# -- manifests ---------------------------------------------------------------

@dataclass
class Manifest:
    paths: list[Path]
    width: int
    height: int
    normalization: str = "8bit"
    box: Box | None = None


def parse_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such manifest: {path}")
    header: dict[str, str] = {}
    paths: list[Path] = []
    in_header = True
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            if not line and header:
                in_header = False
            continue
        if in_header and "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            header[key] = value
            continue
        in_header = False
        p = Path(line)
        paths.append(p if p.is_absolute() else path.parent / p)
    for key in header:
        if key not in ("width", "height", "normalization", "box"):
            raise ParseError(f"{path}: unknown manifest key {key!r}")
    try:
        width, height = int(header["width"]), int(header["height"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: manifest needs integer width and height") from exc
    norm = header.get("normalization", "8bit")
    if norm not in NORMALIZATIONS:
        raise ParseError(f"{path}: normalization must be one of {NORMALIZATIONS}")
    box = Box(*parse_floats(header["box"])) if "box" in header else None
    if not paths:
        raise EmptyDataset(f"{path}: manifest lists no images")
    return Manifest(paths, width, height, norm, box)


def _load_image(p: Path, manifest: Manifest) -> np.ndarray:
    if not p.is_file():
        raise MissingFile(f"no such image: {p}")
    if p.suffix == ".npy":
        img = np.load(p, allow_pickle=False).astype(float)
        if manifest.normalization == "8bit":
            img = img * (GRAY_MAX / 255.0)
    else:
        raw, maxval = read_pgm(p)
        img = raw.astype(float)
        if manifest.normalization == "8bit":
            img = img * (GRAY_MAX / maxval)
    if img.shape != (manifest.height, manifest.width):
        raise DimensionMismatch(f"{p}: image is {img.shape[::-1]}, manifest says "
                                f"{manifest.width}x{manifest.height}")
    return img.ravel()


def load_dataset(manifest_path, default_box: Box | None = None) -> Dataset:
    m = parse_manifest(manifest_path)
    box = m.box or default_box or Box.square(1.5)
    images = np.stack([_load_image(p, m) for p in m.paths])
    ds = Dataset(images, PixelGrid(m.width, m.height, box))
    truth = Path(manifest_path).parent / "truth.bin"
    if truth.is_file():
        ck = load_checkpoint(truth)
        ds.truth_params, ds.truth_hidden = ck.eta, ck.hidden
    return ds


def save_dataset(dataset: Dataset, outdir, fmt: str = "npy", geometry: Geometry | None = None,
                 preview: bool = False) -> Path:
    """Write images, a manifest and (when known) the ground-truth sidecar."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = dataset.grid
    names = []
    for i, img in enumerate(dataset.images):
        img2d = img.reshape(grid.height, grid.width)
        if fmt == "npy":
            name = f"img{i:05d}.npy"
            np.save(outdir / name, img2d, allow_pickle=False)
        elif fmt == "pgm":
            name = f"img{i:05d}.pgm"
            write_pgm(outdir / name, img2d)
        else:
            raise ValueError(f"unknown image format {fmt!r}")
        if preview and fmt != "pgm":
            write_pgm(outdir / f"img{i:05d}.pgm", img2d)
        names.append(name)
    box = " ".join(repr(v) for v in grid.box.as_tuple())
    norm = "none" if fmt == "npy" else "8bit"
    lines = [f"width = {grid.width}", f"height = {grid.height}",
             f"normalization = {norm}", f"box = {box}", ""] + names
    manifest = outdir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    if dataset.truth_params is not None:
        save_checkpoint(outdir / "truth.bin", dataset.truth_params, geometry=geometry,
                        hidden=dataset.truth_hidden)
    return manifest


# -- generative model --------------------------------------------------------

def generate_synthetic(eta: ModelParams, n: int, geometry: Geometry,
                       rng: np.random.Generator, chunk: int = 512) -> Dataset:
    """Draw labels, deformations and noisy images from the mixture."""
    if n < 1:
        raise EmptyDataset("n must be positive")
    dim = 2 * geometry.k_g
    chols = [_chol(c.gamma_g) for c in eta.components]
    tau = rng.choice(eta.tau_m, size=n, p=eta.rho)
    beta = np.empty((n, dim))
    for i, t in enumerate(tau):
        beta[i] = chols[t] @ rng.standard_normal(dim)
    images = np.empty((n, geometry.n_pixels))
    alphas = eta.alphas()
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        images[lo:hi] = geometry.render(alphas[tau[lo:hi]], beta[lo:hi])
    sd = np.sqrt(eta.sigma2())[tau]
    images += sd[:, None] * rng.standard_normal(images.shape)
    return Dataset(images, geometry.pixels, eta.copy(), HiddenState(beta, tau))


def render_template(comp: ComponentParams, geometry: Geometry, clamp: bool = False) -> np.ndarray:
    """Undeformed template image, shape (height, width)."""
    img = geometry.render(comp.alpha).reshape(geometry.pixels.height, geometry.pixels.width)
    return np.clip(img, 0.0, GRAY_MAX) if clamp else img


def draw_samples(eta: ModelParams, count: int, geometry: Geometry, rng: np.random.Generator,
                 template: int = 0, covariance: int | None = None):
    """Pairs of images deformed by ``beta`` and ``-beta``.

    ``beta`` follows the deformation law of component ``covariance`` (default:
    the template's own component).  Returns (betas, plus, minus); images are
    shaped (count, height, width).
    """
    covariance = template if covariance is None else covariance
    alpha = eta.components[template].alpha
    c = _chol(eta.components[covariance].gamma_g)
    dim = 2 * geometry.k_g
    betas = rng.standard_normal((count, dim)) @ c.T
    shape = (count, geometry.pixels.height, geometry.pixels.width)
    if count == 0:
        return betas, np.empty(shape), np.empty(shape)
    plus = geometry.render(np.broadcast_to(alpha, (count, alpha.size)), betas).reshape(shape)
    minus = geometry.render(np.broadcast_to(alpha, (count, alpha.size)), -betas).reshape(shape)
    return betas, plus, minus


# -- synthetic templates -----------------------------------------------------

def _shape_image(kind: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = np.hypot(x, y)
    if kind == "ring":
        return 2.0 * np.exp(-((r - 0.75) ** 2) / (2 * 0.18 ** 2))
    if kind == "disk":
        return 2.0 * (r < 0.7)
    if kind == "cross":
        return 2.0 * ((np.abs(x) < 0.25) | (np.abs(y) < 0.25)) * (r < 1.2)
    if kind == "hbar":
        return 2.0 * (np.abs(y) < 0.3) * (np.abs(x) < 1.1)
    if kind == "vbar":
        return 2.0 * (np.abs(x) < 0.3) * (np.abs(y) < 1.1)
    if kind == "square":
        return 2.0 * ((np.maximum(np.abs(x), np.abs(y)) < 0.9)
                      & (np.maximum(np.abs(x), np.abs(y)) > 0.5))
    raise ValueError(f"unknown template shape {kind!r}")


TEMPLATE_SHAPES = ("ring", "cross", "hbar", "vbar", "disk", "square")


def fit_alpha(image: np.ndarray, geometry: Geometry, ridge: float = 1e-3) -> np.ndarray:
    """Kernel coefficients whose undeformed rendering approximates ``image``."""
    k0 = geometry.design0
    m_p = build_gram(geometry.p_landmarks, geometry.config.sigma_p)
    return np.linalg.solve(k0.T @ k0 + ridge * m_p, k0.T @ image.ravel())


def shape_template(kind: str, geometry: Geometry) -> np.ndarray:
    c = geometry.coords
    return fit_alpha(_shape_image(kind, c[:, 0], c[:, 1]), geometry)
