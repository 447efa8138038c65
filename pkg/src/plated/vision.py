"""Stage 1: images or precomputed features in, multi-hot ingredient confidences out."""

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import metrics
from .lab import EarlyStopping, RunRecord
from .ndnum import (
    Activation, Adam, BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2, Sequential, bce,
    load_arrays, save_arrays,
)
from .ndnum.params import FLOAT

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".ppm")


class DecodeError(ValueError):
    pass


# -- images ------------------------------------------------------------------

def bilinear_resize(img, out_h, out_w):
    """Bilinear resampling with half-pixel centers and edge clamping (no antialiasing)."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(img.dtype)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def decode_and_preprocess(path, size=200):
    """Decode a raster image to a [size, size, 3] array scaled to [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=FLOAT)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return bilinear_resize(arr, size, size) / FLOAT(255)


def find_image(image_dir, stem):
    for ext in IMAGE_EXTENSIONS:
        p = os.path.join(image_dir, stem + ext)
        if os.path.exists(p):
            return p
    return None


@dataclass
class AugmentPolicy:
    enabled: bool = True
    crop_fraction: float = 0.8
    rotate: bool = True
    flip_h: bool = True
    flip_v: bool = True
    whiten: bool = True

    def __post_init__(self):
        if not 0.8 <= self.crop_fraction <= 1.0:
            raise ValueError(f"crop_fraction must be within [0.8, 1.0], got {self.crop_fraction}")


def flip_horizontal(img):
    return img[:, ::-1]


def flip_vertical(img):
    return img[::-1]


def rotate90(img, k=1):
    return np.rot90(img, k, axes=(0, 1))


def whiten(img, floor=1e-3):
    return (img - img.mean()) / max(float(img.std()), floor)


def random_crop(img, fraction, rng):
    """Crop a random square covering ``fraction``..1 of each side, resized back."""
    h, w = img.shape[:2]
    f = rng.uniform(fraction, 1.0)
    ch, cw = max(1, int(round(h * f))), max(1, int(round(w * f)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return bilinear_resize(img[top:top + ch, left:left + cw], h, w)


def augment(img, policy, rng):
    """Crop, flips (p=0.5 each), a random quarter turn, then per-image whitening."""
    if not policy.enabled:
        return img
    out = img
    if policy.crop_fraction < 1.0:
        out = random_crop(out, policy.crop_fraction, rng)
    if policy.flip_h and rng.random() < 0.5:
        out = flip_horizontal(out)
    if policy.flip_v and rng.random() < 0.5:
        out = flip_vertical(out)
    if policy.rotate:
        out = rotate90(out, int(rng.integers(4)))
    if policy.whiten:
        out = whiten(out)
    return np.ascontiguousarray(out, dtype=img.dtype)


# -- data sources ------------------------------------------------------------

class ArraySource:
    """In-memory inputs (feature vectors or pre-decoded images)."""

    def __init__(self, x):
        self.x = np.asarray(x, dtype=FLOAT)

    def __len__(self):
        return len(self.x)

    def batch(self, idx, rng=None, train=False):
        return self.x[idx]


class ImageSource:
    """Images decoded on demand; augmentation is applied only when training."""

    def __init__(self, paths, size=200, policy=None):
        self.paths = list(paths)
        self.size = size
        self.policy = policy or AugmentPolicy(enabled=False)

    def __len__(self):
        return len(self.paths)

    def batch(self, idx, rng=None, train=False):
        imgs = [decode_and_preprocess(self.paths[i], self.size) for i in idx]
        if train and self.policy.enabled:
            imgs = [augment(im, self.policy, rng) for im in imgs]
        return np.stack(imgs)


# -- models ------------------------------------------------------------------

@dataclass
class CnnConfig:
    blocks: int = 4
    base_filters: int = 32
    hidden: int = 256
    dropout: float = 0.0
    l2: float = 0.0
    labels: int = 200
    input_size: int = 200
    channels: int = 3

    def __post_init__(self):
        if self.blocks not in (2, 3, 4, 5):
            raise ValueError(f"blocks must be in 3..5 (2 allowed for small tests), got {self.blocks}")
        if self.hidden != 256:
            raise ValueError("the hidden dense layer has 256 units")

    def spatial_trace(self):
        sizes = [self.input_size]
        for _ in range(self.blocks):
            sizes.append(sizes[-1] // 2)
        return sizes


def build_custom_cnn(config, seed=0):
    """[conv3x3+ReLU -> batch norm -> maxpool2] x blocks -> flatten -> dense 256 -> dense K."""
    trace = config.spatial_trace()
    if trace[-1] < 1:
        raise ValueError(f"{config.blocks} blocks collapse a {config.input_size}px input below 1px")
    rng = np.random.default_rng(seed)
    layers = []
    cin = config.channels
    for i in range(config.blocks):
        cout = config.base_filters * 2 ** i
        layers += [Conv2D(cin, cout, rng, init="he"), Activation("relu"), BatchNorm(cout), MaxPool2()]
        cin = cout
    flat = trace[-1] ** 2 * cin
    layers += [Flatten(), Dense(flat, config.hidden, rng, init="he", l2=config.l2), Activation("relu")]
    if config.dropout > 0:
        layers.append(Dropout(config.dropout, np.random.default_rng([seed, len(layers)])))
    layers += [Dense(config.hidden, config.labels, rng), Activation("sigmoid")]
    return Sequential(layers, name="custom_cnn", meta={"kind": "cnn", "config": asdict(config), "seed": seed})


def build_transfer_head(feature_dim, labels, dropout_rate=0.0, seed=0):
    """Dropout then a sigmoid dense layer over frozen pooled backbone features."""
    rng = np.random.default_rng(seed)
    layers = []
    if dropout_rate > 0:
        layers.append(Dropout(dropout_rate, np.random.default_rng([seed, 0])))
    layers += [Dense(feature_dim, labels, rng), Activation("sigmoid")]
    meta = {"kind": "transfer", "feature_dim": feature_dim, "labels": labels,
            "dropout": dropout_rate, "seed": seed}
    return Sequential(layers, name="transfer_head", meta=meta)


def model_from_meta(meta):
    if meta["kind"] == "cnn":
        return build_custom_cnn(CnnConfig(**meta["config"]), seed=meta.get("seed", 0))
    if meta["kind"] == "transfer":
        return build_transfer_head(meta["feature_dim"], meta["labels"], meta["dropout"], meta.get("seed", 0))
    raise ValueError(f"not a stage-1 model kind: {meta['kind']!r}")


def save_model(model, path, extra=None):
    """Write the PLTD array container plus a ``<path>.json`` sidecar describing the graph."""
    save_arrays(path, model.state_dict())
    meta = dict(model.meta)
    meta.update(extra or {})
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def load_model(path, builder=None):
    with open(f"{path}.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    model = (builder or model_from_meta)(meta)
    model.load_state_dict(load_arrays(path))
    model.meta.update(meta)
    return model


# -- feature / target files --------------------------------------------------

@dataclass
class FeatureTable:
    dim: int
    rows: dict

    def matrix(self, names):
        missing = [n for n in names if n not in self.rows]
        if missing:
            raise KeyError(f"no features for images {missing[:5]}")
        return np.stack([self.rows[n] for n in names]) if names else np.zeros((0, self.dim), FLOAT)


def write_features(table, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"#dim={table.dim}\n")
        w = csv.writer(fh, lineterminator="\n")
        for name, vec in table.rows.items():
            w.writerow([name] + [repr(float(v)) for v in vec])


def load_features(path):
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline().strip()
        if not header.startswith("#dim="):
            raise ValueError(f"{path}:1: expected '#dim=<D>' header")
        dim = int(header[5:])
        rows = {}
        for lineno, row in enumerate(csv.reader(fh), start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(row) - 1}")
            name = row[0]
            if name in rows:
                raise ValueError(f"{path}:{lineno}: duplicate image_name {name!r}")
            vec = np.array([float(v) for v in row[1:]], dtype=FLOAT)
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{path}:{lineno}: non-finite feature value")
            rows[name] = vec
    return FeatureTable(dim, rows)


def write_targets(names, targets, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for name, y in zip(names, targets):
            w.writerow([name, "".join("1" if v > 0.5 else "0" for v in y)])


def read_targets(path):
    names, ys = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != 2 or set(row[1]) - {"0", "1"}:
                raise ValueError(f"{path}:{lineno}: expected image_name,bitstring")
            names.append(row[0])
            ys.append([int(c) for c in row[1]])
    return names, np.array(ys, dtype=FLOAT)


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 25
    patience: int = 3
    threshold: float = 0.5
    seed: int = 0


def predict_proba(model, source, batch_size=64):
    n = len(source)
    out = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        out.append(model.forward(source.batch(idx), train=False))
    return np.concatenate(out) if out else np.zeros((0, 0), FLOAT)


def evaluate(model, source, targets, threshold=0.5, batch_size=64):
    probs = predict_proba(model, source, batch_size)
    loss, _ = bce(probs, targets)
    report = metrics.multilabel_report(probs, targets, threshold)
    report["loss"] = loss
    return report


def train_ingredient_model(model, train, val, cfg, checkpoint=None):
    """Mini-batch Adam on binary cross-entropy with early stopping on val IoU.

    ``train`` and ``val`` are ``(source, targets)`` pairs. The best-epoch
    weights are restored into ``model`` before returning, and written to
    ``checkpoint`` when given.
    """
    src, y = train
    vsrc, vy = val
    if len(src) == 0 or len(vsrc) == 0:
        raise ValueError("training and validation sets must be non-empty")
    y = np.asarray(y, dtype=FLOAT)
    vy = np.asarray(vy, dtype=FLOAT)
    rng = np.random.default_rng(cfg.seed)
    model.reseed(cfg.seed)
    params = model.params()
    opt = Adam(cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience, mode="max")
    rows = []
    n = len(src)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        probs = np.empty_like(y)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = src.batch(idx, rng, train=True)
            params.zero_grad()
            out = model.forward(x, train=True)
            loss, grad = bce(out, y[idx])
            model.backward(grad)
            opt.step(params)
            probs[idx] = out
            loss_sum += loss * len(idx)
        tr = metrics.multilabel_report(probs, y, cfg.threshold)
        va = evaluate(model, vsrc, vy, cfg.threshold)
        rows.append({
            "epoch": epoch,
            "train_loss": loss_sum / n, "val_loss": va["loss"],
            "train_metric": tr["iou"], "val_metric": va["iou"],
            "train_accuracy": tr["accuracy"], "val_accuracy": va["accuracy"],
            "train_f1": tr["f1"], "val_f1": va["f1"],
        })
        log.info("epoch %d train_iou=%.4f val_iou=%.4f", epoch, tr["iou"], va["iou"])
        if stopper.update(epoch, va["iou"], state=model.state_dict):
            break
    model.load_state_dict(stopper.best_state)
    rec = RunRecord(epochs=rows, best_epoch=stopper.best_epoch, best_value=stopper.best)
    if checkpoint is not None:
        save_model(model, checkpoint)
        rec.checkpoint = str(checkpoint)
    return rec


def predict_ingredients(model, x, labels, threshold=0.05):
    """Labels whose confidence is >= threshold, most confident first.

    ``x`` is one input (image array or feature vector) without batch axis.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    probs = model.forward(np.asarray(x, dtype=FLOAT)[None], train=False)[0]
    return rank_labels(probs, labels, threshold)


def rank_labels(probs, labels, threshold):
    keep = [k for k in range(len(probs)) if probs[k] >= threshold]
    keep.sort(key=lambda k: (-probs[k], k))
    return [(labels[k], float(probs[k])) for k in keep]
