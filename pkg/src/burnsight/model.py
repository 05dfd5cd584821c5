"""Fusion classifier: projected backbone features + texture vector -> softmax.

The trainable head projects raw backbone features to 30 dimensions,
concatenates the texture vector, and classifies through a 1024-unit ReLU
layer and a 3-way softmax. The backbone itself is frozen: either the builtin
mean-pool descriptor (differentiable, needs no weights) or rows from a
precomputed feature file.
"""

from __future__ import annotations

import io
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CheckpointError, FeatureFileError, TrainingError
from .imaging import CLASS_NAMES, DatasetManifest, GrayImage, load_image, preprocess
from .texture import FEATURE_NAMES, GlcmConfig, texture_vector

PROJECTION_DIM = 30
HIDDEN_DIM = 1024
NUM_CLASSES = 3

BUILTIN_GRID = 16
BUILTIN_PATCH = 14
BUILTIN_DIM = BUILTIN_GRID * BUILTIN_GRID
BUILTIN_INPUT = BUILTIN_GRID * BUILTIN_PATCH  # 224

CHECKPOINT_MAGIC = b"BSCK"
FEATURE_MAGIC = b"FVEC"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneSource:
    """Where raw primary features come from: builtin pooling or a feature file."""

    kind: str  # "builtin-pool" | "feature-file"
    path: str | None = None
    dim: int | None = None

    def __post_init__(self):
        if self.kind not in ("builtin-pool", "feature-file"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "feature-file" and self.dim is not None and self.dim < 1:
            raise ValueError("feature dimension must be >= 1")

    @property
    def raw_dim(self) -> int:
        if self.kind == "builtin-pool":
            return BUILTIN_DIM
        if self.dim is None:
            raise ValueError("feature-file backbone dimension not resolved yet")
        return self.dim


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    selection: tuple = FEATURE_NAMES

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    predicted_class: int

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if (p < 0).any() or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probabilities", p)


class MlpCore:
    """Three linear maps (projection, hidden+ReLU, output) with explicit gradients."""

    PARAM_NAMES = ("proj_w", "proj_b", "hidden_w", "hidden_b", "out_w", "out_b")

    def __init__(self, raw_dim, proj_dim, aux_dim, hidden_dim, out_dim, rng=None):
        self.raw_dim = raw_dim
        self.proj_dim = proj_dim
        self.aux_dim = aux_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        if rng is None:
            self.params = {
                "proj_w": np.zeros((proj_dim, raw_dim)),
                "proj_b": np.zeros(proj_dim),
                "hidden_w": np.zeros((hidden_dim, proj_dim + aux_dim)),
                "hidden_b": np.zeros(hidden_dim),
                "out_w": np.zeros((out_dim, hidden_dim)),
                "out_b": np.zeros(out_dim),
            }
        else:
            self.params = {
                "proj_w": _kaiming_uniform(rng, proj_dim, raw_dim),
                "proj_b": np.zeros(proj_dim),
                "hidden_w": _kaiming_uniform(rng, hidden_dim, proj_dim + aux_dim),
                "hidden_b": np.zeros(hidden_dim),
                "out_w": _kaiming_uniform(rng, out_dim, hidden_dim),
                "out_b": np.zeros(out_dim),
            }

    def logits(self, raw: np.ndarray, aux: np.ndarray) -> np.ndarray:
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        aux = np.asarray(aux, dtype=np.float64).reshape(raw.shape[0], self.aux_dim)
        if raw.shape[1] != self.raw_dim:
            raise ValueError(f"backbone vector has dim {raw.shape[1]}, expected {self.raw_dim}")
        p = raw @ self.params["proj_w"].T + self.params["proj_b"]
        fused = np.concatenate([p, aux], axis=1)
        hidden = np.maximum(fused @ self.params["hidden_w"].T + self.params["hidden_b"], 0.0)
        return hidden @ self.params["out_w"].T + self.params["out_b"]

    def loss_and_grads(self, raw, aux, labels):
        """Mean cross-entropy over the batch and gradients for every parameter."""
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        aux = np.asarray(aux, dtype=np.float64).reshape(raw.shape[0], self.aux_dim)
        labels = np.asarray(labels, dtype=np.intp)
        n = raw.shape[0]
        p = raw @ self.params["proj_w"].T + self.params["proj_b"]
        fused = np.concatenate([p, aux], axis=1)
        pre = fused @ self.params["hidden_w"].T + self.params["hidden_b"]
        hidden = np.maximum(pre, 0.0)
        logits = hidden @ self.params["out_w"].T + self.params["out_b"]
        probs = softmax(logits)
        loss = -float(np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))

        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        dhidden = dlogits @ self.params["out_w"]
        dpre = dhidden * (pre > 0)
        dfused = dpre @ self.params["hidden_w"]
        dproj = dfused[:, : self.proj_dim]
        grads = {
            "out_w": dlogits.T @ hidden,
            "out_b": dlogits.sum(axis=0),
            "hidden_w": dpre.T @ fused,
            "hidden_b": dpre.sum(axis=0),
            "proj_w": dproj.T @ raw,
            "proj_b": dproj.sum(axis=0),
        }
        return loss, grads


def _kaiming_uniform(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class FusionModel:
    core: MlpCore
    backbone: BackboneSource
    selection: tuple
    classes: tuple = CLASS_NAMES
    glcm: GlcmConfig = field(default_factory=GlcmConfig)
    train_seed: int = 0

    def __post_init__(self):
        if self.core.proj_dim != PROJECTION_DIM:
            raise ValueError(f"projection width must be {PROJECTION_DIM}")
        if self.core.hidden_dim != HIDDEN_DIM:
            raise ValueError(f"hidden width must be {HIDDEN_DIM}")
        if self.core.out_dim != NUM_CLASSES:
            raise ValueError(f"output width must be {NUM_CLASSES}")
        if self.core.aux_dim != len(self.selection):
            raise ValueError("texture vector width must match the feature selection")
        for name in MlpCore.PARAM_NAMES:
            if not np.isfinite(self.core.params[name]).all():
                raise ValueError(f"non-finite weights in {name}")


def builtin_backbone(img: GrayImage) -> np.ndarray:
    """Mean intensity of each 14x14 patch on a 16x16 grid, flattened row-major."""
    if img.height != BUILTIN_INPUT or img.width != BUILTIN_INPUT:
        raise ValueError(
            f"builtin backbone expects {BUILTIN_INPUT}x{BUILTIN_INPUT} input, "
            f"got {img.width}x{img.height}"
        )
    patches = img.data.reshape(BUILTIN_GRID, BUILTIN_PATCH, BUILTIN_GRID, BUILTIN_PATCH)
    return patches.mean(axis=(1, 3)).ravel()


def forward(model: FusionModel, raw: np.ndarray, aux: np.ndarray) -> Prediction:
    """Run the fusion head on one raw backbone vector and texture vector."""
    raw = np.asarray(raw, dtype=np.float64).ravel()
    aux = np.asarray(aux, dtype=np.float64).ravel()
    if aux.shape[0] != len(model.selection):
        raise ValueError(
            f"texture vector has length {aux.shape[0]}, expected {len(model.selection)}"
        )
    probs = softmax(model.core.logits(raw[None, :], aux[None, :]))[0]
    return Prediction(probabilities=probs, predicted_class=int(np.argmax(probs)))


def predict_image(model: FusionModel, img: GrayImage) -> Prediction:
    """Image -> probabilities, for builtin-backbone models."""
    if model.backbone.kind != "builtin-pool":
        raise ValueError("image prediction requires the builtin-pool backbone")
    aux = texture_vector(img, model.glcm, model.selection)
    return forward(model, builtin_backbone(img), aux)


def logit_pixel_gradient(model: FusionModel, img: GrayImage, class_index: int) -> np.ndarray:
    """d logit(class) / d pixel via the chain rule, texture path held constant."""
    if model.backbone.kind != "builtin-pool":
        raise ValueError("pixel gradients require the builtin-pool backbone")
    if not (0 <= class_index < NUM_CLASSES):
        raise ValueError(f"class index {class_index} out of range")
    raw = builtin_backbone(img)[None, :]
    aux = texture_vector(img, model.glcm, model.selection)[None, :]
    params = model.core.params
    p = raw @ params["proj_w"].T + params["proj_b"]
    fused = np.concatenate([p, aux], axis=1)
    pre = fused @ params["hidden_w"].T + params["hidden_b"]
    dhidden = params["out_w"][class_index] * (pre[0] > 0)
    dfused = dhidden @ params["hidden_w"]
    draw = dfused[:PROJECTION_DIM] @ params["proj_w"]
    per_patch = draw.reshape(BUILTIN_GRID, BUILTIN_GRID) / (BUILTIN_PATCH * BUILTIN_PATCH)
    return np.kron(per_patch, np.ones((BUILTIN_PATCH, BUILTIN_PATCH)))


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays (updated in place)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def load_backbone_rows(backbone: BackboneSource, manifest: DatasetManifest) -> np.ndarray:
    """Feature-file rows for every manifest entry, in manifest order."""
    if not backbone.path:
        raise FeatureFileError("feature-file backbone has no feature file path bound")
    rows, _ = load_feature_file(backbone.path)
    if rows.shape[0] != len(manifest.entries):
        raise TrainingError(
            f"feature file has {rows.shape[0]} rows but the manifest has "
            f"{len(manifest.entries)} entries"
        )
    if backbone.dim is not None and rows.shape[1] != backbone.dim:
        raise TrainingError(
            f"feature file dim {rows.shape[1]} != declared dim {backbone.dim}"
        )
    return rows.astype(np.float64)


def compute_feature_matrices(
    manifest: DatasetManifest,
    backbone: BackboneSource,
    glcm: GlcmConfig = GlcmConfig(),
    workers: int = 1,
):
    """Raw backbone matrix, full 5-column texture matrix, and label indices.

    Rows follow manifest order so callers can slice any split or feature
    subset without recomputation.
    """

    def one(entry):
        img = preprocess(load_image(entry.path))
        return builtin_backbone(img), texture_vector(img, glcm, FEATURE_NAMES)

    if backbone.kind == "builtin-pool":
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, manifest.entries))
        else:
            results = [one(e) for e in manifest.entries]
        raw = np.array([r[0] for r in results])
        tex = np.array([r[1] for r in results])
    else:
        raw = load_backbone_rows(backbone, manifest)

        def tex_one(entry):
            img = preprocess(load_image(entry.path))
            return texture_vector(img, glcm, FEATURE_NAMES)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                tex = np.array(list(pool.map(tex_one, manifest.entries)))
        else:
            tex = np.array([tex_one(e) for e in manifest.entries])
    labels = np.array([CLASS_NAMES.index(e.label) for e in manifest.entries], dtype=np.intp)
    return raw, tex, labels


def slice_selection(texture_matrix: np.ndarray, selection) -> np.ndarray:
    """Columns of the full texture matrix for a canonical-order subset."""
    cols = [FEATURE_NAMES.index(name) for name in selection]
    return texture_matrix[:, cols] if cols else np.zeros((texture_matrix.shape[0], 0))


def train_on_arrays(raw, aux, labels, raw_dim, cfg: TrainConfig):
    """Seeded mini-batch Adam training on precomputed feature rows."""
    raw = np.asarray(raw, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = raw.shape[0]
    if n == 0:
        raise TrainingError("training split is empty")
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    core = MlpCore(
        raw_dim,
        PROJECTION_DIM,
        aux.shape[1],
        HIDDEN_DIM,
        NUM_CLASSES,
        rng=np.random.default_rng(init_seq),
    )
    optimizer = Adam(core.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    losses = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = core.loss_and_grads(raw[batch], aux[batch], labels[batch])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            optimizer.step(grads)
            total += loss * len(batch)
        losses.append(total / n)
    return core, losses


def train(manifest: DatasetManifest, backbone: BackboneSource, cfg: TrainConfig, workers: int = 1):
    """Train the fusion head on the manifest's train split; backbone stays frozen.

    Returns the trained model and the per-epoch loss trace.
    """
    train_idx = manifest.split_indices("train")
    if not train_idx:
        raise TrainingError("manifest has no train rows")
    raw_all, tex_all, labels_all = compute_feature_matrices(
        manifest, backbone, workers=workers
    )
    if backbone.kind == "feature-file" and backbone.dim is None:
        backbone = replace(backbone, dim=raw_all.shape[1])
    aux_all = slice_selection(tex_all, cfg.selection)
    core, losses = train_on_arrays(
        raw_all[train_idx], aux_all[train_idx], labels_all[train_idx],
        backbone.raw_dim, cfg,
    )
    model = FusionModel(core=core, backbone=backbone, selection=tuple(cfg.selection))
    return model, losses


# ---------------------------------------------------------------------------
# Linear SVM comparison baseline


@dataclass
class LinearSvm:
    weights: np.ndarray  # (classes, features)
    bias: np.ndarray  # (classes,)


def train_svm_baseline(features, labels, l2=1e-3, iterations=2000) -> LinearSvm:
    """One-vs-rest linear scorers fit by full-batch subgradient descent on hinge loss.

    Deterministic: zero initialization and a fixed step schedule, no sampling.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    classes = np.unique(y)
    if len(classes) < 2:
        raise TrainingError("SVM baseline needs at least 2 classes")
    k = int(classes.max()) + 1
    n, d = x.shape
    weights = np.zeros((k, d))
    bias = np.zeros(k)
    for c in range(k):
        target = np.where(y == c, 1.0, -1.0)
        w = np.zeros(d)
        b = 0.0
        for t in range(1, iterations + 1):
            step = 1.0 / (l2 * (t + 1))
            margins = target * (x @ w + b)
            active = margins < 1.0
            grad_w = l2 * w - (x[active] * target[active, None]).sum(axis=0) / n
            grad_b = -target[active].sum() / n
            w -= step * grad_w
            b -= step * grad_b
        weights[c] = w
        bias[c] = b
    return LinearSvm(weights=weights, bias=bias)


def svm_predict(svm: LinearSvm, features) -> np.ndarray:
    scores = np.asarray(features, dtype=np.float64) @ svm.weights.T + svm.bias
    return np.argmax(scores, axis=1)


# ---------------------------------------------------------------------------
# Checkpoint and feature-file formats


def save_checkpoint(model: FusionModel, path: str, train_seed: int | None = None) -> None:
    """magic, version byte, length-prefixed JSON header, then f32-LE weights."""
    core = model.core
    header = {
        "backbone_kind": model.backbone.kind,
        "raw_dim": core.raw_dim,
        "selection": list(model.selection),
        "classes": list(model.classes),
        "train_seed": model.train_seed if train_seed is None else train_seed,
        "arrays": [
            {"name": name, "shape": list(core.params[name].shape)}
            for name in MlpCore.PARAM_NAMES
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("B", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in MlpCore.PARAM_NAMES:
            fh.write(np.ascontiguousarray(core.params[name], dtype="<f4").tobytes())


def load_checkpoint(path: str) -> FusionModel:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    version_raw = buf.read(1)
    if len(version_raw) != 1 or version_raw[0] != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version_raw!r}")
    length_raw = buf.read(4)
    if len(length_raw) != 4:
        raise CheckpointError(f"{path}: truncated header length")
    (header_len,) = struct.unpack("<I", length_raw)
    blob = buf.read(header_len)
    if len(blob) != header_len:
        raise CheckpointError(f"{path}: truncated JSON header")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed JSON header: {exc}") from exc
    arrays = header.get("arrays", [])
    if [a["name"] for a in arrays] != list(MlpCore.PARAM_NAMES):
        raise CheckpointError(f"{path}: header array list does not match the model layout")
    expected = sum(4 * int(np.prod(a["shape"])) for a in arrays)
    payload = buf.read()
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: weight payload length mismatch: got {len(payload)} bytes, "
            f"expected {expected}"
        )
    shapes = {a["name"]: tuple(a["shape"]) for a in arrays}
    proj_shape = shapes["proj_w"]
    hidden_shape = shapes["hidden_w"]
    out_shape = shapes["out_w"]
    aux_dim = hidden_shape[1] - proj_shape[0]
    selection = tuple(header["selection"])
    if aux_dim != len(selection):
        raise CheckpointError(f"{path}: selection metadata inconsistent with weight shapes")
    core = MlpCore(proj_shape[1], proj_shape[0], aux_dim, hidden_shape[0], out_shape[0])
    offset = 0
    for name in MlpCore.PARAM_NAMES:
        shape = shapes[name]
        count = int(np.prod(shape))
        vals = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        core.params[name] = vals.astype(np.float64).reshape(shape)
        offset += 4 * count
    kind = header["backbone_kind"]
    backbone = BackboneSource(
        kind=kind, path=None, dim=header["raw_dim"] if kind == "feature-file" else None
    )
    return FusionModel(
        core=core,
        backbone=backbone,
        selection=selection,
        classes=tuple(header["classes"]),
        train_seed=int(header.get("train_seed", 0)),
    )


def save_feature_file(rows: np.ndarray, path: str, metadata: dict | None = None) -> None:
    """magic, version byte, u32-LE dim, u32-LE count, then f32-LE rows + JSON sidecar."""
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("feature rows must be a 2-D array")
    count, dim = rows.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("B", FORMAT_VERSION))
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<I", count))
        fh.write(rows.tobytes())
    sidecar = dict(metadata or {})
    sidecar.update({"dim": dim, "count": count})
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_feature_file(path: str):
    """Returns (rows as float32 array, sidecar metadata dict or None)."""
    if not os.path.isfile(path):
        raise FeatureFileError(f"no such feature file: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FEATURE_MAGIC:
        raise FeatureFileError(
            f"{path}: bad magic {data[:4]!r}, expected {FEATURE_MAGIC!r}"
        )
    if len(data) < 13:
        raise FeatureFileError(f"{path}: truncated header")
    if data[4] != FORMAT_VERSION:
        raise FeatureFileError(f"{path}: unsupported feature file version {data[4]}")
    dim, count = struct.unpack("<II", data[5:13])
    if dim < 1:
        raise FeatureFileError(f"{path}: feature dimension must be >= 1")
    expected = 13 + 4 * dim * count
    if len(data) != expected:
        raise FeatureFileError(
            f"{path}: payload length mismatch: got {len(data)} bytes, expected {expected}"
        )
    rows = np.frombuffer(data, dtype="<f4", count=dim * count, offset=13).reshape(count, dim)
    sidecar = None
    if os.path.isfile(path + ".json"):
        with open(path + ".json", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    return rows.copy(), sidecar
