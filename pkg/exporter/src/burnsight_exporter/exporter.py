"""Batch embedding export: frozen CNN features for every manifest image.

Consumes the classifier's external interfaces only: the `path,label,split`
manifest CSV on the way in, the FVEC container on the way out. Preprocessing
mirrors the classifier's chain (normalize to [0, 1], center crop with the
extra margin pixel on the right/bottom, corner-aligned bilinear resize to
224x224) before the usual 3-channel replication and ImageNet normalization.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torchvision
from PIL import Image

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1

CROP_WIDTH = 800
CROP_HEIGHT = 1000
INPUT_SIZE = 224

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

RANDOM_WEIGHTS_SEED = 0


class ExportError(Exception):
    pass


@dataclass(frozen=True)
class ExportJob:
    manifest_path: str
    output_path: str
    backbone: str = "resnet18"
    weights: str = "pretrained"  # "pretrained", "random", or a local .pth path
    device: str = "cpu"
    batch_size: int = 16


def read_manifest(path: str):
    """Rows of (absolute-path, label, split) in file order."""
    if not os.path.isfile(path):
        raise ExportError(f"no such manifest: {path}")
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise ExportError(f"{path}: expected header path,label,split, got {header}")
        for row in reader:
            if not row:
                continue
            p = row[0] if os.path.isabs(row[0]) else os.path.join(base, row[0])
            rows.append((p, row[1], row[2]))
    if not rows:
        raise ExportError(f"{path}: manifest has no rows")
    return rows


def load_gray(path: str) -> np.ndarray:
    """8- or 16-bit grayscale image as float64 in [0, 1]."""
    img = Image.open(path)
    img.load()
    if img.mode == "L":
        return np.asarray(img, dtype=np.float64) / 255.0
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        return np.asarray(img, dtype=np.float64) / 65535.0
    raise ExportError(f"{path}: unsupported color format {img.mode!r}")


def center_crop(data: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    h, w = data.shape
    tw, th = min(w, target_w), min(h, target_h)
    top = (h - th) // 2
    left = (w - tw) // 2
    return data[top : top + th, left : left + tw]


def resize_bilinear(data: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resample to size x size."""
    h, w = data.shape
    ys = np.array([(h - 1) / 2.0]) if size == 1 else np.arange(size) * (h - 1) / (size - 1)
    xs = np.array([(w - 1) / 2.0]) if size == 1 else np.arange(size) * (w - 1) / (size - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = data[np.ix_(y0, x0)] * (1 - wx) + data[np.ix_(y0, x1)] * wx
    bot = data[np.ix_(y1, x0)] * (1 - wx) + data[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def preprocess(path: str) -> np.ndarray:
    gray = load_gray(path)
    if gray.shape[0] < INPUT_SIZE or gray.shape[1] < INPUT_SIZE:
        raise ExportError(
            f"{path}: image {gray.shape[1]}x{gray.shape[0]} smaller than "
            f"{INPUT_SIZE}x{INPUT_SIZE}"
        )
    cropped = center_crop(gray, CROP_WIDTH, CROP_HEIGHT)
    resized = resize_bilinear(cropped, INPUT_SIZE)
    stacked = np.repeat(resized[None, :, :], 3, axis=0)
    mean = np.asarray(IMAGENET_MEAN)[:, None, None]
    std = np.asarray(IMAGENET_STD)[:, None, None]
    return (stacked - mean) / std


def build_backbone(name: str, weights: str):
    """Headless CNN (penultimate features) plus its output dimension."""
    if name != "resnet18":
        raise ExportError(f"unsupported backbone {name!r}; only resnet18 is wired up")
    if weights == "pretrained":
        try:
            net = torchvision.models.resnet18(
                weights=torchvision.models.ResNet18_Weights.IMAGENET1K_V1
            )
        except Exception as exc:
            raise ExportError(
                "could not obtain pretrained weights (offline?); pass "
                "--weights PATH for a local state dict or --weights random "
                f"for a seeded random backbone ({exc})"
            ) from exc
    elif weights == "random":
        torch.manual_seed(RANDOM_WEIGHTS_SEED)
        net = torchvision.models.resnet18(weights=None)
    else:
        if not os.path.isfile(weights):
            raise ExportError(f"no such weights file: {weights}")
        net = torchvision.models.resnet18(weights=None)
        net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    dim = net.fc.in_features
    net.fc = torch.nn.Identity()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net, dim


def export_features(job: ExportJob) -> dict:
    """Write FVEC rows in manifest order plus a JSON sidecar; returns the sidecar."""
    rows = read_manifest(job.manifest_path)
    net, dim = build_backbone(job.backbone, job.weights)
    device = torch.device(job.device)
    net.to(device)
    features = np.zeros((len(rows), dim), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(rows), job.batch_size):
            chunk = rows[start : start + job.batch_size]
            batch = []
            for offset, (path, _, _) in enumerate(chunk):
                try:
                    batch.append(preprocess(path))
                except ExportError:
                    raise
                except Exception as exc:
                    raise ExportError(
                        f"row {start + offset}: failed to decode {path}: {exc}"
                    ) from exc
            tensor = torch.from_numpy(np.stack(batch)).float().to(device)
            out = net(tensor).cpu().numpy()
            features[start : start + len(chunk)] = out
    sidecar = {
        "dim": dim,
        "count": len(rows),
        "backbone": job.backbone,
        "weights": job.weights,
        "source_manifest": os.path.abspath(job.manifest_path),
        "preprocess": {
            "range": [0, 1],
            "crop": [CROP_WIDTH, CROP_HEIGHT],
            "resize": INPUT_SIZE,
            "channels": "grayscale replicated to 3",
            "normalize": {"mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)},
        },
    }
    write_fvec(features, job.output_path, sidecar)
    return sidecar


def write_fvec(rows: np.ndarray, path: str, sidecar: dict) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    count, dim = rows.shape
    with open(path, "wb") as fh:
        fh.write(FVEC_MAGIC)
        fh.write(struct.pack("B", FVEC_VERSION))
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<I", count))
        fh.write(rows.tobytes())
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_fvec(path: str):
    """Minimal reader used by the exporter's own tests."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FVEC_MAGIC:
        raise ExportError(f"{path}: bad magic {data[:4]!r}")
    if data[4] != FVEC_VERSION:
        raise ExportError(f"{path}: unsupported version {data[4]}")
    dim, count = struct.unpack("<II", data[5:13])
    expected = 13 + 4 * dim * count
    if len(data) != expected:
        raise ExportError(f"{path}: payload length mismatch")
    return np.frombuffer(data, dtype="<f4", count=dim * count, offset=13).reshape(count, dim)
