"""Dataset layout, image/mask file IO, and the synthetic camouflage generator.

Directory layout follows the public COD releases: ``root/Imgs`` and
``root/GT`` share file stems, and split manifests are newline-delimited stem
lists at the root. Ground truth is 8-bit grayscale binarized at 128.

The generator paints multi-octave value-noise backgrounds and 1-3 blobby
elliptical foregrounds filled with the same texture family, brightness-shifted
by a contrast delta in (0, 1]; masks are exact binary renderings of the
painted region. Everything is drawn from one seeded generator, so a given
config yields a byte-identical dataset.
"""

import dataclasses
import pathlib

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DataError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclasses.dataclass
class DatasetSpec:
    root: pathlib.Path
    stems: list
    image_dir: str = "Imgs"
    gt_dir: str = "GT"
    image_extensions: tuple = IMAGE_EXTENSIONS

    @classmethod
    def from_manifest(cls, root, manifest_name: str) -> "DatasetSpec":
        root = pathlib.Path(root)
        manifest = root / manifest_name
        if not manifest.is_file():
            raise DataError(f"manifest not found: {manifest}")
        stems = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
        if len(stems) != len(set(stems)):
            raise DataError(f"manifest {manifest} contains duplicate stems")
        return cls(root=root, stems=stems)

    def image_path(self, stem: str) -> pathlib.Path:
        base = self.root / self.image_dir
        hits = [base / f"{stem}{ext}" for ext in self.image_extensions
                if (base / f"{stem}{ext}").is_file()]
        if len(hits) != 1:
            raise DataError(
                f"stem '{stem}' resolves to {len(hits)} image files under {base}"
            )
        return hits[0]

    def gt_path(self, stem: str) -> pathlib.Path:
        p = self.root / self.gt_dir / f"{stem}.png"
        if not p.is_file():
            raise DataError(f"missing GT file for stem '{stem}': {p}")
        return p


def load_image(path):
    """Load a single RGB image as a float32 (3, H, W) tensor in [0, 1]."""
    try:
        img = Image.open(path).convert("RGB")
    except Exception as e:  # PIL raises various decode errors
        raise DataError(f"cannot decode image {path}: {e}") from e
    return torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1)


def load_pair(spec: DatasetSpec, stem: str):
    """Load (image, mask): float32 (3, H, W) in [0, 1] and binary (1, H, W)."""
    if stem not in spec.stems:
        raise DataError(f"stem '{stem}' is not in the manifest")
    img_path = spec.image_path(stem)
    gt_path = spec.gt_path(stem)
    try:
        img = Image.open(img_path).convert("RGB")
    except Exception as e:  # PIL raises various decode errors
        raise DataError(f"cannot decode image for stem '{stem}': {e}") from e
    try:
        gt = Image.open(gt_path).convert("L")
    except Exception as e:
        raise DataError(f"cannot decode GT for stem '{stem}': {e}") from e
    if img.size != gt.size:
        raise DataError(
            f"stem '{stem}': image size {img.size} != GT size {gt.size}"
        )
    image = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1)
    mask = (np.asarray(gt, dtype=np.uint8) >= 128).astype(np.float32)
    return image, torch.from_numpy(mask)[None]


def save_mask(path, mask) -> None:
    """Write a probability-space mask in [0, 1] as an 8-bit grayscale PNG."""
    arr = np.asarray(mask, dtype=np.float64)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise DataError(f"mask must be 2-d after squeeze, got shape {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


@dataclasses.dataclass
class SynthConfig:
    count: int = 400
    image_size: int = 64
    octaves: int = 4
    base_frequency: int = 4
    blob_count: tuple = (1, 3)
    blob_radius: tuple = (0.08, 0.20)
    contrast: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.count < 2:
            raise ConfigError(f"count must be >= 2, got {self.count}")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        if not (0.0 < self.contrast <= 1.0):
            raise ConfigError(f"contrast must be in (0, 1], got {self.contrast}")
        if self.octaves < 1 or self.base_frequency < 1:
            raise ConfigError("octaves and base_frequency must be >= 1")
        if not (0 < self.blob_count[0] <= self.blob_count[1]):
            raise ConfigError(f"bad blob_count range {self.blob_count}")
        if not (0 < self.blob_radius[0] <= self.blob_radius[1] < 0.5):
            raise ConfigError(f"bad blob_radius range {self.blob_radius}")


def _bilinear_grid(grid: np.ndarray, out: int) -> np.ndarray:
    """Upsample a (g+1, g+1) lattice to (out, out) by exact bilinear blending."""
    g = grid.shape[0] - 1
    coords = (np.arange(out) + 0.5) / out * g
    i0 = np.floor(coords).astype(np.int64)
    frac = coords - i0
    i1 = np.minimum(i0 + 1, g)
    g00 = grid[np.ix_(i0, i0)]
    g01 = grid[np.ix_(i0, i1)]
    g10 = grid[np.ix_(i1, i0)]
    g11 = grid[np.ix_(i1, i1)]
    fy, fx = frac[:, None], frac[None, :]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def value_noise(rng: np.random.Generator, size: int, octaves: int, base_frequency: int) -> np.ndarray:
    """Multi-octave value noise in [0, 1], amplitude halving per octave."""
    acc = np.zeros((size, size))
    total = 0.0
    amp = 1.0
    freq = base_frequency
    for _ in range(octaves):
        lattice = rng.random((freq + 1, freq + 1))
        acc += amp * _bilinear_grid(lattice, size)
        total += amp
        amp *= 0.5
        freq *= 2
    return acc / total


def _blob_mask(rng: np.random.Generator, size: int, radius_range) -> np.ndarray:
    """One wobbly ellipse rendered as an exact binary mask on pixel centers."""
    cx, cy = rng.uniform(0.2, 0.8, size=2) * size
    rx, ry = rng.uniform(radius_range[0], radius_range[1], size=2) * size
    angle = rng.uniform(0.0, np.pi)
    amp1, amp2 = rng.uniform(0.0, 0.15, size=2)
    ph1, ph2 = rng.uniform(0.0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / rx
    v = (-sa * dx + ca * dy) / ry
    rho = np.sqrt(u ** 2 + v ** 2)
    phi = np.arctan2(v, u)
    wobble = 1.0 + amp1 * np.sin(3 * phi + ph1) + amp2 * np.sin(5 * phi + ph2)
    return rho <= wobble


def _foreground_mask(rng, config: SynthConfig) -> np.ndarray:
    """Union of 1-3 blobs, resampled until coverage lands in [0.02, 0.5]."""
    size = config.image_size
    for _ in range(200):
        k = int(rng.integers(config.blob_count[0], config.blob_count[1] + 1))
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(k):
            mask |= _blob_mask(rng, size, config.blob_radius)
        frac = mask.mean()
        if 0.02 <= frac <= 0.5:
            return mask
    raise DataError("could not draw a foreground with coverage in [0.02, 0.5]")


def _render_pair(rng, config: SynthConfig):
    size, delta = config.image_size, config.contrast
    mask = _foreground_mask(rng, config)
    channels = []
    for _ in range(3):
        bg = (1.0 - delta) * value_noise(rng, size, config.octaves, config.base_frequency)
        fg = delta + (1.0 - delta) * value_noise(rng, size, config.octaves, config.base_frequency)
        channels.append(np.where(mask, fg, bg))
    image = np.stack(channels, axis=-1)
    return image, mask


def generate_synthetic(config: SynthConfig, out_root) -> DatasetSpec:
    """Write the dataset plus train/test manifests (90/10); returns the full spec."""
    root = pathlib.Path(out_root)
    try:
        (root / "Imgs").mkdir(parents=True, exist_ok=True)
        (root / "GT").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directories under {root}: {e}") from e

    rng = np.random.default_rng(config.seed)
    width = max(4, len(str(config.count - 1)))
    stems = []
    for i in range(config.count):
        stem = f"synth_{i:0{width}d}"
        image, mask = _render_pair(rng, config)
        img8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(root / "Imgs" / f"{stem}.png")
        Image.fromarray((mask * np.uint8(255)), mode="L").save(root / "GT" / f"{stem}.png")
        stems.append(stem)

    order = rng.permutation(config.count)
    n_test = max(1, config.count // 10)
    test = sorted(stems[i] for i in order[:n_test])
    train = sorted(stems[i] for i in order[n_test:])
    (root / "train.txt").write_text("".join(s + "\n" for s in train))
    (root / "test.txt").write_text("".join(s + "\n" for s in test))
    return DatasetSpec(root=root, stems=stems)
