"""
Datasets: tensor-backed domains, directory ingestion, synthetic multi-domain generation and
source-heavy minibatch sampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import RandomSampler, TensorDataset
from torchvision import transforms
from torchvision.utils import save_image

if TYPE_CHECKING:
    from .config import HyperParams
    from .ledger import PseudoSourceLedger

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
UNLABELED_DIR = "unlabeled"
SOURCE_DOMAIN_ID = 0


class DatasetError(Exception):
    """Base class for dataset construction errors."""


class LabelSpaceError(DatasetError):
    """Source tree missing (label space undefined) or target class absent from source."""


class ArityError(DatasetError):
    """Number of shift magnitudes does not match the number of target domains."""


@dataclass(frozen=True)
class Sample:
    """One image. `label` is None (ABSENT) for target samples that were not pseudo-labeled."""

    image: torch.Tensor
    label: Optional[int]
    domain_id: int
    index: int

    @property
    def uid(self) -> Tuple[int, int]:
        return (self.domain_id, self.index)


class DomainDataset:
    """
    Immutable image set of one domain. Target domains carry no training labels; ground truth,
    when known, is kept aside and only read through hidden_truth() by evaluation/audit.
    """

    def __init__(
        self,
        name: str,
        domain_id: int,
        images: torch.Tensor,
        labels: Optional[torch.Tensor] = None,
        hidden_truth: Optional[torch.Tensor] = None,
        shift: Optional[float] = None,
    ) -> None:
        if images.dim() != 4:
            raise DatasetError(f"{name}: images must be N x C x H x W, got {tuple(images.shape)}")
        if labels is not None and labels.shape[0] != images.shape[0]:
            raise DatasetError(f"{name}: {labels.shape[0]} labels for {images.shape[0]} images")
        self.name = name
        self.domain_id = domain_id
        self.shift = shift
        tensors = [images.detach().contiguous()]
        if labels is not None:
            tensors.append(labels.detach().long().contiguous())
        self._dataset = TensorDataset(*tensors)
        self._truth = None if hidden_truth is None else hidden_truth.detach().long().contiguous()

    def __len__(self) -> int:
        return len(self._dataset)

    def __repr__(self) -> str:
        kind = "labeled" if self.labeled else "unlabeled"
        return f"DomainDataset({self.name!r}, id={self.domain_id}, n={len(self)}, {kind})"

    @property
    def dataset(self) -> TensorDataset:
        """(images,) for unlabeled domains, (images, labels) for the source."""
        return self._dataset

    @property
    def images(self) -> torch.Tensor:
        return self._dataset.tensors[0]

    @property
    def labels(self) -> Optional[torch.Tensor]:
        return self._dataset.tensors[1] if len(self._dataset.tensors) > 1 else None

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def hidden_truth(self) -> Optional[torch.Tensor]:
        """Ground truth for evaluation/audit only (-1 marks unknown rows)."""
        if self.labels is not None:
            return self.labels
        return self._truth

    def sample(self, index: int) -> Sample:
        label = None if self.labels is None else int(self.labels[index])
        return Sample(self.images[index], label, self.domain_id, int(index))


@dataclass(frozen=True)
class DatasetRegistry:
    source: DomainDataset
    targets: Tuple[DomainDataset, ...]
    class_names: Tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.targets) < 1:
            raise DatasetError("at least one target domain is required")
        if not self.source.labeled:
            raise DatasetError("source domain must be labeled")
        labels = self.source.labels
        if labels is not None and labels.numel() and (labels.min() < 0 or labels.max() >= self.n_c):
            raise LabelSpaceError(f"source labels outside [0, {self.n_c})")
        for j, t in enumerate(self.targets, start=1):
            if t.labeled:
                raise DatasetError(f"target {t.name!r} must not expose labels")
            if t.domain_id != j:
                raise DatasetError(f"target {t.name!r} has domain_id {t.domain_id}, expected {j}")

    @property
    def n_c(self) -> int:
        return len(self.class_names)

    @property
    def N(self) -> int:
        return len(self.targets)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        c, h, w = self.source.images.shape[1:]
        return (int(c), int(h), int(w))

    def domain(self, domain_id: int) -> DomainDataset:
        if domain_id == SOURCE_DOMAIN_ID:
            return self.source
        return self.targets[domain_id - 1]


# --- directory ingestion ---------------------------------------------------------------


def _image_files(folder: Path) -> List[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def _load_images(paths: Sequence[Path], image_size: int) -> torch.Tensor:
    to_tensor = transforms.Compose(
        [transforms.Resize((image_size, image_size)), transforms.ToTensor()]
    )
    tensors = []
    for p in paths:
        with Image.open(p) as img:
            tensors.append(to_tensor(img.convert("RGB")))
    if not tensors:
        return torch.zeros(0, 3, image_size, image_size)
    return torch.stack(tensors)


def ingest_directory(root: str, image_size: int = 32) -> DatasetRegistry:
    """
    Read `source/<class>/<img>` and `target_<name>/<class|unlabeled>/<img>` trees.
    n_c comes from the source class folders; target class folders only feed hidden truth.
    """
    root_path = Path(root)
    source_dir = root_path / "source"
    if not source_dir.is_dir():
        raise LabelSpaceError(f"label space undefined: no source/ tree under {root}")
    class_names = tuple(sorted(p.name for p in source_dir.iterdir() if p.is_dir()))
    if not class_names:
        raise LabelSpaceError(f"label space undefined: source/ under {root} has no class folders")
    class_index = {c: i for i, c in enumerate(class_names)}

    src_paths: List[Path] = []
    src_labels: List[int] = []
    for c in class_names:
        files = _image_files(source_dir / c)
        src_paths.extend(files)
        src_labels.extend([class_index[c]] * len(files))
    source = DomainDataset(
        "source",
        SOURCE_DOMAIN_ID,
        _load_images(src_paths, image_size),
        labels=torch.tensor(src_labels, dtype=torch.long),
        shift=0.0,
    )

    target_dirs = sorted(p for p in root_path.iterdir() if p.is_dir() and p.name.startswith("target_"))
    if not target_dirs:
        raise DatasetError(f"no target_<name> trees under {root}")
    targets = []
    for j, tdir in enumerate(target_dirs, start=1):
        paths: List[Path] = []
        truth: List[int] = []
        for sub in sorted(p for p in tdir.iterdir() if p.is_dir()):
            if sub.name == UNLABELED_DIR:
                label = -1
            elif sub.name in class_index:
                label = class_index[sub.name]
            else:
                raise LabelSpaceError(
                    f"label-space mismatch: class {sub.name!r} in {tdir.name} is not a source class"
                )
            files = _image_files(sub)
            paths.extend(files)
            truth.extend([label] * len(files))
        truth_t = torch.tensor(truth, dtype=torch.long)
        targets.append(
            DomainDataset(
                tdir.name[len("target_"):],
                j,
                _load_images(paths, image_size),
                hidden_truth=truth_t if bool((truth_t >= 0).any()) else None,
            )
        )
    logger.info(
        "ingested %s: n_c=%d, source=%d, targets=%s",
        root,
        len(class_names),
        len(source),
        {t.name: len(t) for t in targets},
    )
    return DatasetRegistry(source, tuple(targets), class_names)


def export_directory(registry: DatasetRegistry, root: str) -> Path:
    """Write the registry to the ingest layout as PNG files. Hidden truth picks the class folder."""
    root_path = Path(root)
    domains: List[Tuple[str, DomainDataset]] = [("source", registry.source)]
    domains += [(f"target_{t.name}", t) for t in registry.targets]
    for folder, ds in domains:
        truth = ds.hidden_truth()
        for i in range(len(ds)):
            label = -1 if truth is None else int(truth[i])
            sub = registry.class_names[label] if label >= 0 else UNLABELED_DIR
            out = root_path / folder / sub
            out.mkdir(parents=True, exist_ok=True)
            save_image(ds.images[i], str(out / f"{i:05d}.png"))
    return root_path


# --- synthetic generation --------------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")

ROTATION_PER_UNIT = math.pi / 3.0
HUE_PER_UNIT = 0.25
NOISE_PER_UNIT = 0.25
BASE_NOISE = 0.02


def _shape_mask(shape: str, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    au, av = u.abs(), v.abs()
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "square":
        return torch.maximum(au, av) <= 0.8
    if shape == "triangle":
        return (v <= 0.7) & (v >= -0.9) & (au <= (v + 0.9) * 0.6)
    if shape == "cross":
        return ((au <= 0.25) & (av <= 0.9)) | ((av <= 0.25) & (au <= 0.9))
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.55 * 0.55)
    if shape == "diamond":
        return au + av <= 1.0
    if shape == "hbar":
        return (au <= 0.95) & (av <= 0.3)
    if shape == "vbar":
        return (av <= 0.95) & (au <= 0.3)
    raise ValueError(f"unknown shape {shape!r}")


def _hsv_to_rgb(h: torch.Tensor, s: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Vectorised HSV -> RGB for 1-D tensors; returns [n x 3]."""
    h = torch.remainder(h, 1.0)
    k = torch.tensor([5.0, 3.0, 1.0], dtype=h.dtype)
    t = torch.remainder(k[None, :] + h[:, None] * 6.0, 6.0)
    ramp = torch.clamp(torch.minimum(t, 4.0 - t), 0.0, 1.0)
    return v[:, None] - v[:, None] * s[:, None] * ramp


def _render_domain(
    labels: torch.Tensor, n_c: int, magnitude: float, image_size: int, gen: torch.Generator
) -> torch.Tensor:
    n = labels.shape[0]
    grid = torch.linspace(-1.0, 1.0, image_size, dtype=torch.float64)
    ys, xs = torch.meshgrid(grid, grid, indexing="ij")

    def uniform(lo: float, hi: float) -> torch.Tensor:
        return lo + (hi - lo) * torch.rand(n, generator=gen, dtype=torch.float64)

    cx, cy = uniform(-0.2, 0.2), uniform(-0.2, 0.2)
    scale = uniform(0.45, 0.65)
    angle = uniform(-0.1, 0.1) + ROTATION_PER_UNIT * magnitude
    hue = labels.double() / n_c + uniform(-0.04, 0.04) + HUE_PER_UNIT * magnitude
    rgb = _hsv_to_rgb(hue, uniform(0.6, 1.0), uniform(0.7, 1.0))
    background = uniform(0.05, 0.25)

    images = torch.empty(n, 3, image_size, image_size, dtype=torch.float64)
    for i in range(n):
        dx, dy = xs - cx[i], ys - cy[i]
        cos, sin = math.cos(angle[i]), math.sin(angle[i])
        u = (dx * cos + dy * sin) / scale[i]
        v = (-dx * sin + dy * cos) / scale[i]
        mask = _shape_mask(SHAPES[int(labels[i]) % len(SHAPES)], u, v).double()
        images[i] = background[i] * (1.0 - mask)[None] + rgb[i][:, None, None] * mask[None]
    sigma = BASE_NOISE + NOISE_PER_UNIT * magnitude
    images += sigma * torch.randn(images.shape, generator=gen, dtype=torch.float64)
    return images.clamp_(0.0, 1.0).float()


def make_synthetic(
    n_c: int,
    N: int,
    shift_magnitudes: Sequence[float],
    per_class: int,
    seed: int,
    image_size: int = 32,
) -> DatasetRegistry:
    """
    Procedural colored-shape domains. Domain 0 (source) has magnitude 0; target j applies a
    rotation + hue shift + noise of magnitude shift_magnitudes[j]. Pure function of arguments.
    """
    if len(shift_magnitudes) != N:
        raise ArityError(f"N={N} but {len(shift_magnitudes)} shift magnitudes given")
    if n_c < 2:
        raise DatasetError(f"n_c must be >= 2, got {n_c}")
    if per_class < 10:
        raise DatasetError(f"per_class must be >= 10, got {per_class}")

    labels = torch.arange(n_c).repeat_interleave(per_class)
    class_names = tuple(f"{SHAPES[c % len(SHAPES)]}_{c}" for c in range(n_c))

    def generator(domain_id: int) -> torch.Generator:
        return torch.Generator().manual_seed(int(seed) * 1_000_003 + domain_id)

    source = DomainDataset(
        "source",
        SOURCE_DOMAIN_ID,
        _render_domain(labels, n_c, 0.0, image_size, generator(SOURCE_DOMAIN_ID)),
        labels=labels.clone(),
        shift=0.0,
    )
    targets = []
    for j, m in enumerate(shift_magnitudes, start=1):
        targets.append(
            DomainDataset(
                f"shift{j}",
                j,
                _render_domain(labels, n_c, float(m), image_size, generator(j)),
                hidden_truth=labels.clone(),
                shift=float(m),
            )
        )
    return DatasetRegistry(source, tuple(targets), class_names)


# --- sampling --------------------------------------------------------------------------


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer parts (seed, reiteration, domain, stream tag)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class EpochSampler:
    """
    Index stream over range(n) drawn through a seeded RandomSampler: without replacement inside
    an epoch; an exhausted epoch wraps into a freshly shuffled one. Single consumer.
    """

    def __init__(self, n: int, seed: int) -> None:
        if n <= 0:
            raise DatasetError("cannot sample from an empty set")
        self.n = n
        self._sampler = RandomSampler(range(n), generator=torch.Generator().manual_seed(int(seed)))
        self._epoch_iter: Iterator[int] = iter(self._sampler)
        self.epoch = 0

    def draw(self, k: int) -> np.ndarray:
        chunks = []
        filled = 0
        while filled < k:
            chunk = np.fromiter(islice(self._epoch_iter, k - filled), dtype=np.int64)
            if chunk.size < k - filled:
                self._epoch_iter = iter(self._sampler)
                self.epoch += 1
            chunks.append(chunk)
            filled += chunk.size
        return np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)


@dataclass
class Minibatch:
    """B_s labeled ledger rows followed by B_t unlabeled rows of the current domain."""

    ledger_images: torch.Tensor
    ledger_labels: torch.Tensor
    target_images: torch.Tensor
    ledger_rows: np.ndarray
    target_rows: np.ndarray

    @property
    def sizes(self) -> Tuple[int, int]:
        return (int(self.ledger_images.shape[0]), int(self.target_images.shape[0]))

    @property
    def images(self) -> torch.Tensor:
        return torch.cat([self.ledger_images, self.target_images], dim=0)

    @property
    def domain_flags(self) -> torch.Tensor:
        b_s, b_t = self.sizes
        return torch.cat([torch.zeros(b_s), torch.ones(b_t)])

    @property
    def label_mask(self) -> torch.Tensor:
        b_s, b_t = self.sizes
        return torch.cat([torch.ones(b_s, dtype=torch.bool), torch.zeros(b_t, dtype=torch.bool)])


class MinibatchSampler:
    """Paired ledger/domain epoch samplers seeded per (seed, reiteration, domain)."""

    def __init__(self, ledger_size: int, domain_size: int, seed: int, reiteration: int, domain_id: int):
        self.ledger = EpochSampler(ledger_size, derive_seed(seed, reiteration, domain_id, 0))
        self.domain = EpochSampler(domain_size, derive_seed(seed, reiteration, domain_id, 1))


def sample_minibatch(
    ledger: "PseudoSourceLedger",
    domain: DomainDataset,
    hp: "HyperParams",
    rng: MinibatchSampler,
) -> Minibatch:
    """Draw B_s rows uniformly over the ledger (source and accepted pseudo-samples) and B_t rows of `domain`."""
    if len(ledger) == 0 or len(domain) == 0:
        raise DatasetError("sample_minibatch needs a non-empty ledger and domain")
    if rng.ledger.n != len(ledger) or rng.domain.n != len(domain):
        raise DatasetError("sampler was built for a different ledger/domain size")
    l_rows = rng.ledger.draw(hp.B_s)
    t_rows = rng.domain.draw(hp.B_t)
    ledger_images, ledger_labels = ledger.dataset()[torch.from_numpy(l_rows)]
    target_images = domain.dataset[torch.from_numpy(t_rows)][0]
    return Minibatch(
        ledger_images=ledger_images,
        ledger_labels=ledger_labels,
        target_images=target_images,
        ledger_rows=l_rows,
        target_rows=t_rows,
    )


def split_source(registry: DatasetRegistry, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation index split of the source domain."""
    n = len(registry.source)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(derive_seed(seed, 0, 0, 2))).numpy()
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])
