"""Image ingestion, lung-box patch extraction, masking and dataset splits.

Sources are 8-bit grayscale PNGs listed in a CSV manifest with header
``image,labels,patient_id`` (labels empty for healthy scans, otherwise
``|``-separated pathology names; the patient column may be empty). Pixels
map to [-1, 1] via 2*(p/255) - 1. Patch extraction samples crop centers
uniformly over the lung bounding boxes and never resamples: a patch is an
exact window of the normalized source.

Extraction output is a patch index CSV plus either per-patch PNGs or a
single packed store (magic "CXPD", versioned header, little-endian float32
payload). Both are deterministic functions of (manifest, seed).
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import ContractError, Rng, Tensor

PATHOLOGIES = (
    "Atelectasis", "Consolidation", "Infiltration", "Pneumothorax", "Edema",
    "Emphysema", "Fibrosis", "Effusion", "Pneumonia", "Pleural Thickening",
    "Cardiomegaly", "Nodule", "Mass", "Hernia",
)

MANIFEST_HEADER = ["image", "labels", "patient_id"]


class IngestError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


class ExtractionError(RuntimeError):
    pass


@dataclass
class ImageRecord:
    image: str
    labels: tuple = ()
    patient: str | None = None
    width: int | None = None
    height: int | None = None

    @property
    def healthy(self) -> bool:
        return not self.labels


@dataclass
class LungBoxes:
    """Two disjoint rectangles (x0, y0, x1, y1) in fractional coordinates."""

    left: tuple = (0.12, 0.22, 0.46, 0.78)
    right: tuple = (0.54, 0.22, 0.88, 0.78)

    def __post_init__(self):
        for name, box in (("left", self.left), ("right", self.right)):
            x0, y0, x1, y1 = box
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise ContractError(f"{name} lung box {box} not inside [0,1]^2")
        lx0, _, lx1, _ = self.left
        rx0, _, rx1, _ = self.right
        if not (lx1 <= rx0 or rx1 <= lx0):
            raise ContractError("lung boxes overlap horizontally")


@dataclass
class PatchRecord:
    patch_id: str
    image_id: str
    x: int
    y: int
    labels: tuple = ()
    pixels: Tensor | None = None

    @property
    def healthy(self) -> bool:
        return not self.labels


@dataclass
class MaskedSample:
    context: Tensor
    target: Tensor
    mask: Tensor


def read_manifest(path) -> list:
    """Parse the image manifest; header is mandatory, categories validated."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IngestError(f"cannot read manifest {path}: {e}") from e
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [h.strip() for h in rows[0]] != MANIFEST_HEADER:
        raise ManifestError(
            f"{path}: first row must be header {','.join(MANIFEST_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        image, labels_field, patient = (c.strip() for c in row)
        if not image:
            raise ManifestError(f"{path}:{lineno}: empty image column")
        labels = tuple(l for l in labels_field.split("|") if l) if labels_field else ()
        for label in labels:
            if label not in PATHOLOGIES:
                raise ManifestError(f"{path}:{lineno}: unknown pathology {label!r}")
        records.append(ImageRecord(image=image, labels=labels,
                                   patient=patient or None))
    return records


def load_grayscale_u8(path) -> np.ndarray:
    """8-bit grayscale PNG -> (H, W) uint8 array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise IngestError(f"{path}: expected PNG, got {im.format}")
            if im.mode != "L":
                raise IngestError(f"{path}: expected 8-bit grayscale, mode is {im.mode}")
            return np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise IngestError(f"cannot read image {path}: {e}") from e


def load_and_normalize(path) -> Tensor:
    """8-bit grayscale PNG -> Tensor (1, H, W) in [-1, 1]."""
    arr = load_grayscale_u8(path).astype(np.float64)
    return Tensor((2.0 * (arr / 255.0) - 1.0)[None])


def denormalize_to_u8(x: np.ndarray) -> np.ndarray:
    """[-1, 1] floats back to rounded uint8 intensities."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_png(path, pixels: Tensor) -> None:
    arr = pixels.array
    if arr.ndim == 3:
        arr = arr[0]
    Image.fromarray(denormalize_to_u8(arr), mode="L").save(path, format="PNG")


def resize(img: Tensor, size: int) -> Tensor:
    """Bilinear resize of a square image, half-pixel center convention."""
    arr = img.array
    squeeze = False
    if arr.ndim == 3:
        arr = arr[0]
        squeeze = True
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ContractError(f"resize expects a square image, got {img.shape}")
    n = arr.shape[0]
    if size == n:
        out = arr.copy()
    else:
        scl = n / size
        src = (np.arange(size) + 0.5) * scl - 0.5
        src = np.clip(src, 0, n - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n - 1)
        frac = src - i0
        rows = arr[i0][:, i0] * (1 - frac)[:, None] + arr[i1][:, i0] * frac[:, None]
        rows1 = arr[i0][:, i1] * (1 - frac)[:, None] + arr[i1][:, i1] * frac[:, None]
        out = rows * (1 - frac)[None, :] + rows1 * frac[None, :]
    return Tensor(out[None] if squeeze else out)


def _box_pixels(box, width, height):
    x0, y0, x1, y1 = box
    return (int(round(x0 * width)), int(round(y0 * height)),
            int(round(x1 * width)), int(round(y1 * height)))


def extract_patches(img: ImageRecord, boxes: LungBoxes, n: int, patch: int,
                    rng: Rng, images_dir=None) -> list:
    """Draw n crop centers uniformly over the lung-box union and cut patches.

    Centers land inside a box chosen in proportion to its area; the crop
    rectangle is clamped to stay inside that box (and therefore inside the
    image). Deterministic given the rng state.
    """
    if n < 1:
        raise ContractError(f"patch count must be >= 1, got {n}")
    path = Path(images_dir) / img.image if images_dir else Path(img.image)
    pixels = load_and_normalize(path)
    _, h, w = pixels.shape
    img.width, img.height = w, h
    pxs = [_box_pixels(boxes.left, w, h), _box_pixels(boxes.right, w, h)]
    for box in pxs:
        if box[2] - box[0] < patch or box[3] - box[1] < patch:
            raise ExtractionError(
                f"{img.image}: lung box {box} cannot fit a {patch}px patch")
    areas = [(b[2] - b[0]) * (b[3] - b[1]) for b in pxs]
    out = []
    for k in range(n):
        pick = 0 if rng.uniform(0.0, areas[0] + areas[1]) < areas[0] else 1
        bx0, by0, bx1, by1 = pxs[pick]
        cx = rng.uniform_int(bx0, bx1 - 1)
        cy = rng.uniform_int(by0, by1 - 1)
        ox = min(max(cx - patch // 2, bx0), bx1 - patch)
        oy = min(max(cy - patch // 2, by0), by1 - patch)
        window = pixels.array[:, oy:oy + patch, ox:ox + patch].copy()
        out.append(PatchRecord(patch_id=f"{img.image}:{k:03d}",
                               image_id=img.image, x=ox, y=oy,
                               labels=img.labels, pixels=Tensor(window)))
    return out


def make_masked(patch: PatchRecord, fill: float = 0.0) -> MaskedSample:
    """Blank the central (P/2)-sized region; mask is 1 exactly there."""
    pixels = patch.pixels.array
    p = pixels.shape[-1]
    if p % 2:
        raise ContractError(f"patch side must be even, got {p}")
    ctx, tgt, msk = mask_batch(pixels[None], fill)
    return MaskedSample(context=Tensor(ctx[0]), target=Tensor(tgt[0]),
                        mask=Tensor(msk[0]))


def mask_batch(x: np.ndarray, fill: float = 0.0):
    """Batch masking: (N, 1, P, P) -> (context, target, mask) arrays."""
    p = x.shape[-1]
    if p % 2:
        raise ContractError(f"patch side must be even, got {p}")
    half = p // 2
    lo = p // 4
    hi = lo + half
    ctx = x.copy()
    ctx[..., lo:hi, lo:hi] = fill
    tgt = x[..., lo:hi, lo:hi].copy()
    msk = np.zeros_like(x)
    msk[..., lo:hi, lo:hi] = 1.0
    return ctx, tgt, msk


def center_bounds(size: int) -> tuple:
    """(lo, hi) rows/cols of the blanked central region, hi exclusive."""
    return size // 4, size // 4 + size // 2


def composite_center(image: Tensor, center: Tensor) -> Tensor:
    """Insert a generated central patch back into its context image."""
    s = image.shape[-1]
    lo, hi = center_bounds(s)
    if center.shape[-2:] != (hi - lo, hi - lo):
        raise ContractError(
            f"center {center.shape} does not fit image {image.shape}")
    out = image.array.copy()
    out[..., lo:hi, lo:hi] = center.array
    return Tensor(out)


def _apportion(n: int, fractions) -> list:
    """Largest-remainder split of n items into len(fractions) buckets."""
    quotas = [n * f for f in fractions]
    counts = [int(q) for q in quotas]
    rest = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: quotas[i] - counts[i],
                   reverse=True)
    for i in order[:rest]:
        counts[i] += 1
    return counts


def split_dataset(records: list, fractions, rng: Rng, group_key=None):
    """Deterministic (train, val, test) split, grouped by patient when present.

    Groups are shuffled and greedily assigned so a patient's records never
    straddle splits. Pass group_key to group by something other than the
    patient attribute (e.g. source image for patch records).
    """
    if not records:
        raise ContractError("cannot split an empty record list")
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ContractError(f"fractions must be 3 values summing to 1: {fractions}")
    groups = {}
    for i, rec in enumerate(records):
        gk = group_key(rec) if group_key else getattr(rec, "patient", None)
        groups.setdefault(gk or f"__solo_{i}", []).append(rec)
    keys = sorted(groups)
    order = rng.permutation(len(keys))
    targets = _apportion(len(records), fractions)
    splits = ([], [], [])
    for idx in order:
        members = groups[keys[idx]]
        placed = False
        for s in range(3):
            if len(splits[s]) < targets[s]:
                splits[s].extend(members)
                placed = True
                break
        if not placed:
            splits[2].extend(members)
    return splits


# ---------------------------------------------------------------------------
# packed patch store ("CXPD") and index CSV

PATCH_MAGIC = b"CXPD"
PATCH_VERSION = 1
INDEX_HEADER = ["patch_id", "image_id", "x", "y", "label"]


def write_patch_index(path, records: list) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(INDEX_HEADER)
        for r in records:
            wr.writerow([r.patch_id, r.image_id, r.x, r.y,
                         "|".join(r.labels) if r.labels else "healthy"])


def read_patch_index(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != INDEX_HEADER:
        raise ManifestError(f"{path}: bad patch index header")
    out = []
    for row in rows[1:]:
        labels = () if row[4] == "healthy" else tuple(row[4].split("|"))
        out.append(PatchRecord(patch_id=row[0], image_id=row[1],
                               x=int(row[2]), y=int(row[3]), labels=labels))
    return out


def save_patch_store(path, records: list) -> None:
    """Pack normalized patches into one binary file (float32, little-endian)."""
    if not records:
        raise ContractError("no patches to save")
    p = records[0].pixels.shape[-1]
    meta = {
        "format_version": PATCH_VERSION,
        "patch_size": p,
        "count": len(records),
        "dtype": "float32",
        "records": [{"id": r.patch_id, "image": r.image_id, "x": r.x,
                     "y": r.y, "labels": list(r.labels)} for r in records],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(PATCH_MAGIC)
        f.write(struct.pack("<I", PATCH_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for r in records:
            if r.pixels.shape[-1] != p:
                raise ContractError("mixed patch sizes in one store")
            f.write(r.pixels.array.astype("<f4", copy=False).tobytes())


def load_patch_store(path):
    """Returns (pixels (N, 1, P, P) float32, list[PatchRecord] without pixels)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != PATCH_MAGIC:
        raise IngestError(f"{path}: not a patch store (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != PATCH_VERSION:
        raise IngestError(f"{path}: patch store version {version} unsupported")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    meta = json.loads(data[16:16 + hlen].decode())
    p = meta["patch_size"]
    count = meta["count"]
    need = count * p * p * 4
    payload = data[16 + hlen:]
    if len(payload) < need:
        raise IngestError(f"{path}: truncated patch payload")
    pixels = np.frombuffer(payload[:need], dtype="<f4").reshape(count, 1, p, p)
    records = [PatchRecord(patch_id=r["id"], image_id=r["image"], x=r["x"],
                           y=r["y"], labels=tuple(r["labels"]))
               for r in meta["records"]]
    return pixels.astype(np.float32, copy=True), records


# ---------------------------------------------------------------------------
# synthetic desk-scale corpus

def synthetic_texture_corpus(count: int, size: int, rng: Rng,
                             noise: float = 0.02, amplitude=(0.4, 0.7),
                             dtype="float64") -> np.ndarray:
    """Seeded sinusoidal gratings (rib-like texture) with varying phase,
    frequency and orientation plus pixel noise; (count, 1, size, size) in
    [-1, 1]."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((count, 1, size, size), dtype=np.float64)
    for i in range(count):
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(1.5, 4.5)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(*amplitude)
        u = xs * np.cos(theta) + ys * np.sin(theta)
        wave = amp * np.sin(2 * np.pi * freq * u / size + phase)
        wave += noise * rng.normal_array((size, size))
        out[i, 0] = np.clip(wave, -1.0, 1.0)
    return out.astype(dtype if isinstance(dtype, type) else
                      {"float32": np.float32, "float64": np.float64}[dtype],
                      copy=False)
