"""Dataset ingestion: IDX files (gzip or raw), image folders, and a
self-contained 28x28 handwritten-digits builder for offline runs.

Records are normalized to float32 [0,1], channel-first (N,C,H,W); labels ride
along when present. The trainer transposes to its internal channels-last
layout at the batch boundary.
"""

from __future__ import annotations

import gzip
import os
import struct

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


def _read_idx_bytes(path):
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as g:
                return g.read()
        return f.read()


def parse_idx(path):
    """Parse one IDX file into an ndarray; validates magic and sizes."""
    raw = _read_idx_bytes(path)
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header at byte {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IMAGES_MAGIC:
        ndim = 3
    elif magic == LABELS_MAGIC:
        ndim = 1
    else:
        raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x} "
                           f"(expected 0x{IMAGES_MAGIC:08x} images or "
                           f"0x{LABELS_MAGIC:08x} labels)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise DatasetError(f"{path}: size mismatch at byte {len(raw)}: "
                           f"header promises {header + count} bytes")
    return np.frombuffer(raw, np.uint8, offset=header).reshape(dims)


class Dataset:
    """Float [0,1] channel-first records with optional labels."""

    def __init__(self, images, labels=None, name="dataset"):
        self.images = np.asarray(images, np.float32)
        self.labels = None if labels is None else np.asarray(labels, np.int64)
        self.name = name
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DatasetError(f"{name}: {len(self.images)} images vs "
                               f"{len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape_hwc(self):
        c, h, w = self.images.shape[1:]
        return (h, w, c)

    def channels_last(self, indices=None):
        imgs = self.images if indices is None else self.images[indices]
        return np.ascontiguousarray(imgs.transpose(0, 2, 3, 1))

    def batches(self, batch_size, rng=None):
        """Yield (channels-last images, labels) minibatches; shuffled when
        an rng is given."""
        order = np.arange(len(self))
        if rng is not None:
            rng.shuffle(order)
        for start in range(0, len(self), batch_size):
            sel = order[start:start + batch_size]
            yield self.channels_last(sel), \
                (None if self.labels is None else self.labels[sel])


def ingest(path, kind):
    """Load a dataset: kind is "mnist-idx" or "image-folder".

    mnist-idx expects `path` to be the images IDX file (gzip or raw); a
    labels file is picked up automatically by swapping "images"->"labels"
    and "idx3"->"idx1" in the filename when such a sibling exists.
    """
    if kind == "mnist-idx":
        images = parse_idx(path)
        if images.ndim != 3:
            raise DatasetError(f"{path}: expected an images IDX file, got {images.ndim}-d")
        labels = None
        base = os.path.basename(path)
        sibling = os.path.join(os.path.dirname(path),
                               base.replace("images", "labels").replace("idx3", "idx1"))
        if sibling != path and os.path.exists(sibling):
            labels = parse_idx(sibling)
            if labels.ndim != 1:
                raise DatasetError(f"{sibling}: expected a labels IDX file")
        return Dataset(images[:, None, :, :].astype(np.float32) / 255.0, labels,
                       name=os.path.basename(path))
    if kind == "image-folder":
        from . import imaging

        names = sorted(n for n in os.listdir(path)
                       if n.lower().endswith((".png", ".jpg", ".jpeg")))
        if not names:
            raise DatasetError(f"{path}: no images found")
        records = [imaging.read_image(os.path.join(path, n)).transpose(2, 0, 1)
                   for n in names]
        shapes = {r.shape for r in records}
        if len(shapes) > 1:
            raise DatasetError(f"{path}: mixed image shapes {sorted(shapes)}")
        return Dataset(np.stack(records), None, name=os.path.basename(path))
    raise DatasetError(f"unknown dataset kind {kind!r}")


def write_idx_images(path, images_u8):
    """Write (N,H,W) uint8 images as a gzip IDX3 file."""
    images_u8 = np.ascontiguousarray(images_u8, np.uint8)
    n, h, w = images_u8.shape
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
            f.write(images_u8.tobytes())


def write_idx_labels(path, labels_u8):
    labels_u8 = np.ascontiguousarray(labels_u8, np.uint8)
    with open(path, "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(struct.pack(">II", LABELS_MAGIC, len(labels_u8)))
            f.write(labels_u8.tobytes())


def build_digits28(out_dir, train_count=60000, test_count=10000, seed=0):
    """Materialize a self-contained 28x28 digits dataset in IDX format.

    Built from scikit-learn's bundled 8x8 handwritten digits (real pen
    strokes), upscaled to 28x28 and augmented with deterministic shifts,
    rotations, and mild scaling. Base digits are split into disjoint
    train/test pools before augmentation, so no test digit is an augmented
    copy of a train digit. Returns (train_images_path, test_images_path);
    label files sit alongside.
    """
    from PIL import Image
    from sklearn.datasets import load_digits

    os.makedirs(out_dir, exist_ok=True)
    img_paths = {s: os.path.join(out_dir, f"{s}-images-idx3-ubyte.gz")
                 for s in ("train", "test")}
    lab_paths = {s: os.path.join(out_dir, f"{s}-labels-idx1-ubyte.gz")
                 for s in ("train", "test")}
    if all(os.path.exists(p) for p in (*img_paths.values(), *lab_paths.values())):
        return img_paths["train"], img_paths["test"]

    digits = load_digits()
    base_images = digits.images.astype(np.float32) * (255.0 / 16.0)
    base_labels = digits.target.astype(np.uint8)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(base_images))
    split = int(len(base_images) * 0.8)
    pools = {"train": order[:split], "test": order[split:]}
    counts = {"train": int(train_count), "test": int(test_count)}

    upscaled = [Image.fromarray(img.astype(np.uint8), mode="L").resize((28, 28),
                                                                       Image.BILINEAR)
                for img in base_images]

    for split_name, pool in pools.items():
        count = counts[split_name]
        images = np.empty((count, 28, 28), np.uint8)
        labels = np.empty(count, np.uint8)
        for i in range(count):
            src = int(pool[i % len(pool)])
            angle = float(rng.uniform(-12, 12))
            scale = float(rng.uniform(0.9, 1.1))
            dx, dy = (float(v) for v in rng.uniform(-2, 2, 2))
            cos = np.cos(np.radians(angle)) / scale
            sin = np.sin(np.radians(angle)) / scale
            # inverse affine about the image center, then the shift
            cx, cy = 13.5 - dx, 13.5 - dy
            matrix = (cos, sin, 13.5 - cos * cx - sin * cy,
                      -sin, cos, 13.5 + sin * cx - cos * cy)
            out = upscaled[src].transform((28, 28), Image.AFFINE, matrix,
                                          resample=Image.BILINEAR, fillcolor=0)
            images[i] = np.asarray(out, np.uint8)
            labels[i] = base_labels[src]
        write_idx_images(img_paths[split_name], images)
        write_idx_labels(lab_paths[split_name], labels)
    return img_paths["train"], img_paths["test"]
