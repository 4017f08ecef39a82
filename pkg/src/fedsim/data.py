"""Synthetic heterogeneous federation data, splits, and external ingestion.

The generator mimics the structure of a skewed multi-site medical dataset:
clients differ in both sample count and class mixture.  Images are class
conditional textures (a Gaussian blob at a class-specific position plus an
oriented sinusoidal pattern) over a noisy background, with a separability
knob scaling the signal amplitude.
"""

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Invalid generation spec or malformed external data."""


@dataclass(frozen=True)
class SkewSpec:
    """Federation shape: per-client sizes and class-proportion rows."""

    client_sizes: tuple
    class_proportions: tuple
    separability: float = 1.0
    noise: float = 0.15

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.client_sizes)
        props = tuple(tuple(float(p) for p in row) for row in self.class_proportions)
        if len(sizes) == 0:
            raise DataError("client_sizes must be non-empty")
        if any(n < 1 for n in sizes):
            raise DataError(f"client sizes must be positive, got {sizes}")
        if len(props) != len(sizes):
            raise DataError(
                f"{len(props)} proportion rows for {len(sizes)} clients"
            )
        k = len(props[0])
        if k < 2:
            raise DataError("need at least two classes")
        for i, row in enumerate(props):
            if len(row) != k:
                raise DataError(f"proportion row {i} has {len(row)} entries, expected {k}")
            if any(p < 0.0 or p > 1.0 for p in row):
                raise DataError(f"proportion row {i} has entries outside [0, 1]")
            if abs(sum(row) - 1.0) > 1e-9:
                raise DataError(f"proportion row {i} sums to {sum(row)}, expected 1")
        if self.separability < 0:
            raise DataError("separability must be non-negative")
        if self.noise < 0:
            raise DataError("noise must be non-negative")
        object.__setattr__(self, "client_sizes", sizes)
        object.__setattr__(self, "class_proportions", props)

    @property
    def num_clients(self) -> int:
        return len(self.client_sizes)

    @property
    def num_classes(self) -> int:
        return len(self.class_proportions[0])


def default_skew(separability: float = 1.0, noise: float = 0.15) -> SkewSpec:
    """Six clients with heterogeneous sizes and a 20/80 to 80/20 class ramp."""
    return SkewSpec(
        client_sizes=(3000, 600, 900, 600, 450, 450),
        class_proportions=(
            (0.20, 0.80),
            (0.32, 0.68),
            (0.44, 0.56),
            (0.56, 0.44),
            (0.68, 0.32),
            (0.80, 0.20),
        ),
        separability=separability,
        noise=noise,
    )


@dataclass(frozen=True)
class ClientData:
    """One client's samples: flat images [n, size*size*channels] in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class FederationDataset:
    clients: tuple
    image_size: int
    channels: int
    num_classes: int

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def total_samples(self) -> int:
        return sum(len(c) for c in self.clients)


def _class_counts(n: int, proportions) -> np.ndarray:
    """Deterministic per-class counts: rounding, residue to largest classes."""
    raw = np.array([n * p for p in proportions])
    counts = np.floor(raw + 0.5).astype(np.int64)
    diff = n - int(counts.sum())
    order = np.argsort(-raw)
    i = 0
    while diff != 0:
        k = order[i % len(order)]
        step = 1 if diff > 0 else -1
        if counts[k] + step >= 0:
            counts[k] += step
            diff -= step
        i += 1
    return counts


def _class_images(class_id: int, num_classes: int, count: int, image_size: int,
                  channels: int, separability: float, noise: float, rng) -> np.ndarray:
    """Class-conditional image process, one rng stream per (client, class)."""
    s = image_size
    coords = (np.arange(s) + 0.5) / s
    ys, xs = np.meshgrid(coords, coords, indexing="ij")

    base_angle = 2.0 * np.pi * class_id / num_classes
    freq = 2.0 + 1.5 * class_id
    orient = np.pi * class_id / num_classes

    out = np.empty((count, s * s * channels))
    for i in range(count):
        angle = base_angle + rng.normal(0.0, 0.06)
        cx = 0.5 + 0.27 * np.cos(angle)
        cy = 0.5 + 0.27 * np.sin(angle)
        blob = np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * 0.12 ** 2)))
        phase = rng.normal(0.0, 0.4)
        wave = np.sin(2.0 * np.pi * freq * (xs * np.cos(orient) + ys * np.sin(orient)) + phase)
        signal = 0.22 * separability * blob * (0.7 + 0.3 * wave)
        img = 0.45 + noise * rng.normal(size=(s, s)) + signal
        np.clip(img, 0.0, 1.0, out=img)
        if channels == 1:
            out[i] = img.reshape(-1)
        else:
            out[i] = np.repeat(img[:, :, None], channels, axis=2).reshape(-1)
    return out


def generate_synthetic(spec: SkewSpec, seed: int, image_size: int = 16,
                       channels: int = 1) -> FederationDataset:
    """Deterministic skewed federation at the configured image size."""
    if image_size < 4:
        raise DataError(f"image_size must be at least 4, got {image_size}")
    if channels < 1:
        raise DataError("channels must be positive")
    root = np.random.SeedSequence(seed)
    client_seqs = root.spawn(spec.num_clients)
    clients = []
    for c in range(spec.num_clients):
        n = spec.client_sizes[c]
        counts = _class_counts(n, spec.class_proportions[c])
        class_seqs = client_seqs[c].spawn(spec.num_classes + 1)
        images = []
        labels = []
        for k in range(spec.num_classes):
            if counts[k] == 0:
                continue
            rng = np.random.default_rng(class_seqs[k])
            images.append(_class_images(
                k, spec.num_classes, int(counts[k]), image_size, channels,
                spec.separability, spec.noise, rng,
            ))
            labels.append(np.full(int(counts[k]), k, dtype=np.int64))
        images = np.concatenate(images, axis=0)
        labels = np.concatenate(labels)
        perm = np.random.default_rng(class_seqs[-1]).permutation(n)
        clients.append(ClientData(images[perm], labels[perm]))
    return FederationDataset(tuple(clients), image_size, channels, spec.num_classes)


def split(dataset: FederationDataset, fraction: float = 0.75, seed: int = 0):
    """Per-client, per-class stratified split into (train, test).

    Test share is 1 - fraction, rounded half-up per class; a class with a
    single sample stays in train.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must lie in (0, 1), got {fraction}")
    root = np.random.SeedSequence(seed)
    seqs = root.spawn(dataset.num_clients)
    train_clients = []
    test_clients = []
    for c, client in enumerate(dataset.clients):
        rng = np.random.default_rng(seqs[c])
        train_idx = []
        test_idx = []
        for k in np.unique(client.labels):
            idx = np.flatnonzero(client.labels == k)
            idx = idx[rng.permutation(len(idx))]
            n_k = len(idx)
            n_test = int(n_k * (1.0 - fraction) + 0.5)
            n_test = min(n_test, n_k - 1)
            test_idx.append(idx[:n_test])
            train_idx.append(idx[n_test:])
        train_idx = np.sort(np.concatenate(train_idx))
        test_idx = np.sort(np.concatenate(test_idx)) if test_idx else np.array([], dtype=np.int64)
        train_clients.append(ClientData(client.images[train_idx], client.labels[train_idx]))
        test_clients.append(ClientData(client.images[test_idx], client.labels[test_idx]))
    meta = (dataset.image_size, dataset.channels, dataset.num_classes)
    return (FederationDataset(tuple(train_clients), *meta),
            FederationDataset(tuple(test_clients), *meta))


# ---------------------------------------------------------------------------
# external data: client<i>/class<k>/*.bin layout
# ---------------------------------------------------------------------------

def _read_bin(path: Path) -> np.ndarray:
    """One sample file: ASCII 'width height channels' line, then LE float64."""
    with open(path, "rb") as f:
        header = f.readline()
        try:
            w, h, ch = (int(v) for v in header.split())
        except ValueError:
            raise DataError(f"{path}: malformed header {header!r}") from None
        if w < 1 or h < 1 or ch < 1:
            raise DataError(f"{path}: non-positive dimensions in header")
        raw = np.frombuffer(f.read(), dtype="<f8")
    if raw.size != w * h * ch:
        raise DataError(
            f"{path}: expected {w * h * ch} values for {w}x{h}x{ch}, found {raw.size}"
        )
    if raw.size and (raw.min() < 0.0 or raw.max() > 1.0):
        raise DataError(f"{path}: pixel values outside [0, 1]")
    return raw.reshape(h, w, ch)


def _resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    # bilinear weights are a convex combination, so [0,1] is preserved
    from .vit import bilinear_matrix
    h, w, ch = img.shape
    if h == size and w == size:
        return img
    uh = bilinear_matrix(h, size)
    uw = bilinear_matrix(w, size)
    out = np.empty((size, size, ch))
    for c in range(ch):
        out[:, :, c] = uh @ img[:, :, c] @ uw.T
    return out


def load_external(path, image_size: int, channels: int) -> FederationDataset:
    """Load a client<i>/class<k>/*.bin tree, resizing to image_size."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"data path {root} is not a directory")
    client_dirs = {}
    for entry in root.iterdir():
        m = re.fullmatch(r"client(\d+)", entry.name)
        if m and entry.is_dir():
            client_dirs[int(m.group(1))] = entry
    if not client_dirs:
        raise DataError(f"{root}: no client<i> directories found")
    ids = sorted(client_dirs)
    if ids != list(range(len(ids))):
        raise DataError(f"{root}: client directories must be contiguous from 0, got {ids}")

    max_class = -1
    per_client = []
    for cid in ids:
        cdir = client_dirs[cid]
        samples = []
        for entry in sorted(cdir.iterdir()):
            m = re.fullmatch(r"class(\d+)", entry.name)
            if not m or not entry.is_dir():
                raise DataError(f"{cdir}: unexpected entry {entry.name}, want class<k> directories")
            k = int(m.group(1))
            max_class = max(max_class, k)
            for f in sorted(entry.glob("*.bin")):
                img = _read_bin(f)
                if img.shape[2] != channels:
                    raise DataError(
                        f"{f}: has {img.shape[2]} channels, configuration wants {channels}"
                    )
                samples.append((_resize_bilinear(img, image_size).reshape(-1), k))
        if not samples:
            raise DataError(f"client{cid} has no samples")
        images = np.stack([s[0] for s in samples])
        labels = np.array([s[1] for s in samples], dtype=np.int64)
        per_client.append(ClientData(images, labels))
    return FederationDataset(tuple(per_client), image_size, channels, max_class + 1)


def write_external(dataset: FederationDataset, out_dir):
    """Emit the client<i>/class<k>/*.bin layout for later load_external."""
    out = Path(out_dir)
    s, ch = dataset.image_size, dataset.channels
    for cid, client in enumerate(dataset.clients):
        seen = {}
        for img, label in zip(client.images, client.labels):
            k = int(label)
            d = out / f"client{cid}" / f"class{k}"
            d.mkdir(parents=True, exist_ok=True)
            j = seen.get(k, 0)
            seen[k] = j + 1
            with open(d / f"sample{j:05d}.bin", "wb") as f:
                f.write(f"{s} {s} {ch}\n".encode("ascii"))
                f.write(np.ascontiguousarray(img, dtype="<f8").tobytes())
