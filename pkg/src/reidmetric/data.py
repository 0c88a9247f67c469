"""Dataset records, manifest and raw-tensor files, synthetic domain
generation, augmentation and query/gallery splitting.

Manifest format: one ``relative_path,person_id,camera_id`` line per sample,
``#`` starts a comment, paths are relative to the manifest's directory.

Raw tensor format: ``b"RMIMG1"``, three little-endian u32 ``C, H, W``, then
``C*H*W`` little-endian float32 values. A tensor with ``H == W == 1`` is a
feature vector of length ``C``.
"""

import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    EmptyDataset,
    InsufficientSamples,
    MissingPayload,
    ParseError,
)

RAW_MAGIC = b"RMIMG1"
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")


@dataclass
class SampleRecord:
    payload: np.ndarray
    person_id: int
    camera_id: int
    domain_tag: str = ""
    path: str = None

    def __post_init__(self):
        self.person_id = int(self.person_id)
        self.camera_id = int(self.camera_id)
        if self.person_id < 0 or self.camera_id < 0:
            raise ValueError("person_id and camera_id must be non-negative")
        if self.payload is not None and not np.all(np.isfinite(self.payload)):
            raise ValueError("payload contains non-finite values")

    def load(self):
        if self.payload is None:
            if self.path is None:
                raise MissingPayload("record has neither a payload nor a path")
            self.payload = read_payload(self.path)
        return self.payload


@dataclass
class Dataset:
    records: list
    role: str = "train"
    name: str = ""
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {}
        for i, r in enumerate(self.records):
            self.index.setdefault(r.person_id, []).append(i)

    def __len__(self):
        return len(self.records)

    @property
    def person_ids(self):
        return np.array([r.person_id for r in self.records], dtype=np.int64)

    @property
    def camera_ids(self):
        return np.array([r.camera_id for r in self.records], dtype=np.int64)

    @property
    def identities(self):
        return sorted(self.index)

    def payloads(self):
        """Stacked float64 payloads, loading lazily stored ones on demand."""
        return np.stack([np.asarray(r.load(), dtype=np.float64) for r in self.records])

    def subset(self, indices, role=None):
        return Dataset([self.records[i] for i in indices], role or self.role, self.name)


# ---------------------------------------------------------------------------
# payload files


def write_raw(path, array):
    a = np.asarray(array)
    if a.ndim == 1:
        shape = (a.shape[0], 1, 1)
    elif a.ndim == 3:
        shape = a.shape
    else:
        raise ValueError(f"raw payloads are vectors or (C,H,W) maps, got {a.shape}")
    data = np.ascontiguousarray(a, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<3I", *shape) + data)


def read_raw(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(RAW_MAGIC) or len(buf) < 18:
        raise ParseError("not a raw tensor file", path)
    C, H, W = struct.unpack("<3I", buf[6:18])
    n = C * H * W
    if len(buf) != 18 + 4 * n:
        raise ParseError(f"expected {n} float32 values", path)
    a = np.frombuffer(buf, dtype="<f4", offset=18).astype(np.float64)
    return a if H == 1 and W == 1 else a.reshape(C, H, W)


def read_image(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def read_payload(path):
    if not os.path.exists(path):
        raise MissingPayload(f"payload file not found: {path}")
    if path.lower().endswith(IMAGE_SUFFIXES):
        return read_image(path)
    return read_raw(path)


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path, eager=True, role="train", domain_tag=""):
    """Parse a manifest into a Dataset; payloads are read now or on first use."""
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3 or not parts[0]:
                raise ParseError(f"expected 'path,person_id,camera_id', got {raw.strip()!r}", path, lineno)
            try:
                pid, cam = int(parts[1]), int(parts[2])
            except ValueError:
                raise ParseError(f"non-integer id in {raw.strip()!r}", path, lineno) from None
            if pid < 0 or cam < 0:
                raise ParseError("ids must be non-negative", path, lineno)
            full = os.path.join(root, parts[0])
            rec = SampleRecord(None, pid, cam, domain_tag, full)
            if eager:
                rec.load()
            records.append(rec)
    if not records:
        raise EmptyDataset(f"{path}: manifest has no records")
    return Dataset(records, role, domain_tag)


def write_manifest(path, dataset, payload_dir="payloads"):
    """Write payloads as raw tensors under ``payload_dir`` plus the manifest.

    Records whose ``path`` already points inside the manifest's directory
    keep that path; others get ``<payload_dir>/<index>.raw`` and their
    ``path`` is updated, so manifests of subsets written afterwards refer to
    the same payload files.
    """
    root = os.path.dirname(os.path.abspath(path))
    lines = []
    for i, rec in enumerate(dataset.records):
        if rec.path is not None and os.path.abspath(rec.path).startswith(root + os.sep):
            rel = os.path.relpath(rec.path, root)
        else:
            rel = f"{payload_dir}/{i:06d}.raw"
            os.makedirs(os.path.join(root, payload_dir), exist_ok=True)
            write_raw(os.path.join(root, rel), rec.load())
            rec.path = os.path.join(root, rel)
        lines.append(f"{rel},{rec.person_id},{rec.camera_id}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


# ---------------------------------------------------------------------------
# synthetic domains


@dataclass
class DomainSpec:
    num_ids: int
    samples_per_id: int
    latent_dim: int
    sigma_w: float
    A: np.ndarray = None
    b: np.ndarray = None
    num_cameras: int = 6
    name: str = ""

    def __post_init__(self):
        if min(self.num_ids, self.samples_per_id, self.latent_dim, self.num_cameras) < 1:
            raise ConfigError("domain counts must be >= 1")
        if self.sigma_w < 0:
            raise ConfigError("sigma_w must be non-negative")
        d = self.latent_dim
        self.A = np.eye(d) if self.A is None else np.asarray(self.A, dtype=np.float64)
        self.b = np.zeros(d) if self.b is None else np.asarray(self.b, dtype=np.float64)
        if self.A.shape != (d, d) or self.b.shape != (d,):
            raise ConfigError("domain transform must be (d, d) with a length-d offset")
        if np.linalg.matrix_rank(self.A) < d:
            raise ConfigError("domain transform must be invertible")


def random_prototypes(rng, n, dim):
    z = rng.standard_normal((n, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def gen_synthetic(specs, shared_prototypes, rng):
    """One Dataset per DomainSpec: ``x = A (z_id + noise) + b``.

    With ``shared_prototypes`` every domain reuses the same identity
    prototypes, so identities are common to all domains and only the
    transform differs.
    """
    if not specs:
        raise ConfigError("need at least one DomainSpec")
    shared = None
    if shared_prototypes:
        first = specs[0]
        if any((s.num_ids, s.latent_dim) != (first.num_ids, first.latent_dim) for s in specs):
            raise ConfigError("shared prototypes need equal num_ids and latent_dim across domains")
        shared = random_prototypes(rng, first.num_ids, first.latent_dim)
    out = []
    for d, spec in enumerate(specs):
        z = shared if shared is not None else random_prototypes(rng, spec.num_ids, spec.latent_dim)
        tag = spec.name or f"domain{d}"
        pids = np.repeat(np.arange(spec.num_ids), spec.samples_per_id)
        noise = rng.normal(0.0, 1.0, size=(pids.size, spec.latent_dim)) * spec.sigma_w
        x = (z[pids] + noise) @ spec.A.T + spec.b
        cams = rng.integers(0, spec.num_cameras, size=pids.size)
        records = [SampleRecord(x[i], pids[i], cams[i], tag) for i in range(pids.size)]
        out.append(Dataset(records, "train", tag))
    return out


def make_domain_specs(num_domains, num_ids, samples_per_id, latent_dim, sigma_w,
                      num_cameras, shift, offset, rng):
    """Domain 0 is untransformed; each later domain gets ``A = I + shift*G/sqrt(d)``
    and ``b = offset*g/sqrt(d)`` with standard-normal ``G``, ``g``."""
    specs = []
    d = latent_dim
    for k in range(num_domains):
        if k == 0:
            A, b = np.eye(d), np.zeros(d)
        else:
            A = np.eye(d) + shift * rng.standard_normal((d, d)) / math.sqrt(d)
            b = offset * rng.standard_normal(d) / math.sqrt(d)
        specs.append(DomainSpec(num_ids, samples_per_id, latent_dim, sigma_w, A, b, num_cameras, f"domain{k}"))
    return specs


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    hsv_p: float = 0.5
    hue_delta: float = 0.02
    sat_range: tuple = (0.8, 1.2)
    val_range: tuple = (0.8, 1.2)
    gray_p: float = 0.1
    erase_p: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: tuple = (0.3, 3.3)
    erase_attempts: int = 10
    jitter_p: float = 1.0
    jitter_sigma: float = 0.05

    @classmethod
    def off(cls):
        return cls(flip_p=0.0, hsv_p=0.0, gray_p=0.0, erase_p=0.0, jitter_p=0.0)


def hflip(img):
    return img[:, :, ::-1].copy()


def rgb_to_hsv(img):
    from matplotlib.colors import rgb_to_hsv as _rgb_to_hsv

    return _rgb_to_hsv(np.clip(img, 0.0, 1.0).transpose(1, 2, 0)).transpose(2, 0, 1)


def hsv_to_rgb(hsv):
    from matplotlib.colors import hsv_to_rgb as _hsv_to_rgb

    return _hsv_to_rgb(hsv.transpose(1, 2, 0)).transpose(2, 0, 1)


def hsv_jitter(img, cfg, rng):
    hsv = rgb_to_hsv(img)
    hsv[0] = (hsv[0] + rng.uniform(-cfg.hue_delta, cfg.hue_delta)) % 1.0
    hsv[1] = np.clip(hsv[1] * rng.uniform(*cfg.sat_range), 0.0, 1.0)
    hsv[2] = np.clip(hsv[2] * rng.uniform(*cfg.val_range), 0.0, 1.0)
    return hsv_to_rgb(hsv)


def grayscale(img):
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.repeat(luma[None], img.shape[0], axis=0)


def erase_box(shape, cfg, rng):
    """Pick an erasing rectangle ``(top, left, h, w)`` or None if no attempt fits."""
    _, H, W = shape
    for _ in range(cfg.erase_attempts):
        area = rng.uniform(*cfg.erase_area) * H * W
        aspect = rng.uniform(*cfg.erase_aspect)
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if 0 < h < H and 0 < w < W:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    return None


def random_erase(img, cfg, rng):
    box = erase_box(img.shape, cfg, rng)
    if box is None:
        return img
    top, left, h, w = box
    out = img.copy()
    out[:, top:top + h, left:left + w] = rng.uniform(0.0, 1.0, size=(img.shape[0], h, w))
    return out


def augment(record, cfg, rng):
    """Randomly augmented copy of ``record``; ids and payload shape are preserved.

    Images (C,H,W) may be flipped, HSV-jittered, grayscaled and randomly
    erased, each with its own probability. Vectors only get Gaussian jitter.
    """
    x = record.load()
    if x.ndim == 1:
        if cfg.jitter_p > 0 and rng.random() < cfg.jitter_p:
            x = x + rng.normal(0.0, cfg.jitter_sigma, size=x.shape)
        return replace(record, payload=x)
    if cfg.flip_p > 0 and rng.random() < cfg.flip_p:
        x = hflip(x)
    if x.shape[0] == 3:
        if cfg.hsv_p > 0 and rng.random() < cfg.hsv_p:
            x = hsv_jitter(x, cfg, rng)
        if cfg.gray_p > 0 and rng.random() < cfg.gray_p:
            x = grayscale(x)
    if cfg.erase_p > 0 and rng.random() < cfg.erase_p:
        x = random_erase(x, cfg, rng)
    return replace(record, payload=x)


def augment_batch(payloads, cfg, rng):
    """Vector-mode fast path: jitter an (B, D) batch row by row with the same
    draws ``augment`` would make per record."""
    out = np.array(payloads, dtype=np.float64, copy=True)
    if cfg.jitter_p <= 0:
        return out
    for i in range(out.shape[0]):
        if rng.random() < cfg.jitter_p:
            out[i] += rng.normal(0.0, cfg.jitter_sigma, size=out.shape[1])
    return out


# ---------------------------------------------------------------------------
# query / gallery


def split_query_gallery(dataset, rng, query_fraction=0.25):
    """Per identity, ``ceil(fraction * n)`` samples (clamped to [1, n-1]) become queries."""
    query, gallery = [], []
    for pid in dataset.identities:
        idx = np.array(dataset.index[pid])
        n = idx.size
        if n < 2:
            raise InsufficientSamples(f"identity {pid} has {n} sample(s); need >= 2")
        nq = min(max(math.ceil(query_fraction * n), 1), n - 1)
        perm = rng.permutation(n)
        query.extend(sorted(idx[perm[:nq]].tolist()))
        gallery.extend(sorted(idx[perm[nq:]].tolist()))
    return dataset.subset(sorted(query), "query"), dataset.subset(sorted(gallery), "gallery")
