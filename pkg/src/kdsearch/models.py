"""Toy joint detector/Re-ID student, external Re-ID teacher, SGD and checkpoints.

Checkpoint container (little-endian throughout)::

    8 bytes   magic b"KDPSCKPT"
    uint32    format version
    uint64    header length in bytes
    header    UTF-8 JSON: {"kind", "topology", "meta", "params": [{"name", "shape"}, ...]}
    payload   every parameter, flattened C-order as float64, in header order
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .augment import ShiftedProposal, roi_align_batch
from .autograd import Tensor
from .types import Rng, iou_matrix

MAGIC = b"KDPSCKPT"
CKPT_VERSION = 1
ANCHOR = 32.0  # reference box size (pixels) for size regression
STD_EPS = 1e-5


class Model:
    kind = "model"

    def __init__(self, topology: dict):
        self.topology = dict(topology)
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray):
        self.params[name] = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)

    def _conv(self, name, cin, cout, k, rng: Rng):
        std = math.sqrt(2.0 / (cin * k * k))
        self._add(f"{name}.w", rng.normal(0, std, (cout, cin, k, k)))
        self._add(f"{name}.b", np.zeros(cout))

    def _linear(self, name, fan_in, fan_out, rng: Rng, std=None):
        std = math.sqrt(2.0 / fan_in) if std is None else std
        self._add(f"{name}.w", rng.normal(0, std, (fan_in, fan_out)))
        self._add(f"{name}.b", np.zeros(fan_out))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def _embed_and_classify(self, feats: Tensor, prefix: str):
        emb = feats @ self.params[f"{prefix}.proj.w"] + self.params[f"{prefix}.proj.b"]
        # feature standardization with learned scale/offset ahead of the classifier
        mu = emb.mean(axis=1, keepdims=True)
        cen = emb - mu
        std = ag.sqrt((cen * cen).mean(axis=1, keepdims=True) + STD_EPS)
        normed = cen / std * self.params[f"{prefix}.bn.gamma"] + self.params[f"{prefix}.bn.beta"]
        logits = normed @ self.params[f"{prefix}.cls.w"] + self.params[f"{prefix}.cls.b"]
        return emb, logits

    def _add_embed_head(self, prefix, fan_in, dim, n_classes, rng):
        self._linear(f"{prefix}.proj", fan_in, dim, rng)
        self._add(f"{prefix}.bn.gamma", np.ones(dim))
        self._add(f"{prefix}.bn.beta", np.zeros(dim))
        self._linear(f"{prefix}.cls", dim, n_classes, rng, std=0.01)


# --- student -----------------------------------------------------------------

STUDENT_DEFAULTS = dict(
    trunk_channels=(8, 16), det_channels=8, reid_channels=16,
    pool_h=8, pool_w=4, dim=32, n_classes=32,
)


class StudentModel(Model):
    """Shared stride-S trunk feeding a detection head and a separate Re-ID head."""

    kind = "student"

    def __init__(self, rng: Optional[Rng] = None, **topology):
        topo = {**STUDENT_DEFAULTS, **topology}
        topo["trunk_channels"] = list(topo["trunk_channels"])
        super().__init__(topo)
        rng = rng or Rng(0)
        cin = 3
        for i, c in enumerate(topo["trunk_channels"]):
            self._conv(f"trunk.{i}", cin, c, 3, rng)
            cin = c
        self._conv("det.conv", cin, topo["det_channels"], 3, rng)
        self._conv("det.out", topo["det_channels"], 5, 1, rng)
        self._conv("reid.conv", cin, topo["reid_channels"], 3, rng)
        # per-proposal stride-2 conv halves the pooled grid
        fan_in = topo["reid_channels"] * ((topo["pool_h"] + 1) // 2) * ((topo["pool_w"] + 1) // 2)
        self._add_embed_head("reid", fan_in, topo["dim"], topo["n_classes"], rng)

    @property
    def stride(self) -> int:
        return 2 ** len(self.topology["trunk_channels"])

    def trunk(self, images) -> Tensor:
        x = ag.as_tensor(images)
        for i in range(len(self.topology["trunk_channels"])):
            x = ag.relu(ag.conv2d(x, self.params[f"trunk.{i}.w"], self.params[f"trunk.{i}.b"], stride=2, pad=1))
        return x

    def det_head(self, feats: Tensor) -> Tensor:
        p = self.params
        h = ag.relu(ag.conv2d(feats, p["det.conv.w"], p["det.conv.b"], stride=1, pad=1))
        return ag.conv2d(h, p["det.out.w"], p["det.out.b"])

    def reid_head(self, feats: Tensor, rois: np.ndarray):
        """Embeddings and logits for (R, 5) feature-space RoIs on the trunk map."""
        t, p = self.topology, self.params
        pooled = roi_align_batch(feats, rois, t["pool_h"], t["pool_w"])
        h = ag.relu(ag.conv2d(pooled, p["reid.conv.w"], p["reid.conv.b"], stride=2, pad=1))
        return self._embed_and_classify(h.reshape(len(rois), -1), "reid")

    # searcher interface used by evaluation
    def detect(self, image: np.ndarray, score_thresh: float = 0.05, max_dets: int = 20):
        det = self.det_head(self.trunk(image[None])).data[0]
        return decode_detections(det, self.stride, image.shape[1:], score_thresh, max_dets)

    def embed(self, image: np.ndarray, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if len(boxes) == 0:
            return np.zeros((0, self.topology["dim"]))
        rois = np.concatenate([np.zeros((len(boxes), 1)), boxes / self.stride], axis=1)
        return self.reid_head(self.trunk(image[None]), rois)[0].data

    def search_outputs(self, image: np.ndarray, score_thresh=0.05, max_dets=20):
        """Detections plus their embeddings from one trunk pass."""
        feats = self.trunk(image[None])
        det = self.det_head(feats).data[0]
        boxes, scores = decode_detections(det, self.stride, image.shape[1:], score_thresh, max_dets)
        if len(boxes) == 0:
            return boxes, scores, np.zeros((0, self.topology["dim"]))
        rois = np.concatenate([np.zeros((len(boxes), 1)), boxes / self.stride], axis=1)
        return boxes, scores, self.reid_head(feats, rois)[0].data


@dataclass
class StudentOutput:
    det: Tensor  # (N, 5, Hf, Wf): objectness logit, then (tx, ty, tw, th)
    embeddings: Optional[Tensor]
    logits: Optional[Tensor]
    shifted_embeddings: Optional[Tensor] = None
    shifted_logits: Optional[Tensor] = None
    failed: list = field(default_factory=list)

    @property
    def probs(self):
        return None if self.logits is None else ag.softmax(self.logits, axis=1)

    @property
    def shifted_probs(self):
        return None if self.shifted_logits is None else ag.softmax(self.shifted_logits, axis=1)


def student_forward(
    model: StudentModel,
    images,
    proposals: Sequence[Sequence[ShiftedProposal]],
    with_shifted: bool = True,
) -> StudentOutput:
    """Run trunk, detection head and Re-ID head on every proposal.

    ``proposals[n]`` are the proposals of image ``n``. Each one is pooled at
    its base box and, when ``with_shifted``, at its shifted window too.
    Proposals that fall outside the feature map are dropped and reported in
    ``failed`` as ``(image, index)``.
    """
    images = np.asarray(images, dtype=np.float64)
    s = model.stride
    if images.shape[2] % s or images.shape[3] % s:
        raise ValueError(f"image size {images.shape[2:]} not divisible by stride {s}")
    feats = model.trunk(images)
    det = model.det_head(feats)
    fh, fw = feats.shape[2:]
    base, shifted, failed = [], [], []
    for n, props in enumerate(proposals):
        for k, p in enumerate(props):
            b = p.base
            wb = np.array([b.x / s, b.y / s, b.w / s, b.h / s])
            ws = p.feature_window()
            if any(v[0] >= fw or v[1] >= fh or v[0] + v[2] <= 0 or v[1] + v[3] <= 0 for v in (wb, ws)):
                failed.append((n, k))
                continue
            base.append([n, *wb])
            shifted.append([n, *ws])
    if not base:
        return StudentOutput(det, None, None, failed=failed)
    n_roi = len(base)
    rois = np.array(base + shifted if with_shifted else base)
    emb, logits = model.reid_head(feats, rois)
    out = StudentOutput(det, emb[:n_roi], logits[:n_roi], failed=failed)
    if with_shifted:
        out.shifted_embeddings, out.shifted_logits = emb[n_roi:], logits[n_roi:]
    return out


# --- detection targets, loss and decoding --------------------------------------


def detection_targets(boxes_per_image: Sequence[np.ndarray], grid: tuple[int, int], stride: int):
    """Per-cell objectness labels, ignore mask and regression targets.

    The cell holding a box center is positive; its 8 neighbours are ignored.
    """
    n = len(boxes_per_image)
    gh, gw = grid
    obj = np.zeros((n, gh, gw))
    ignore = np.zeros((n, gh, gw), dtype=bool)
    reg = np.zeros((n, 4, gh, gw))
    for i, boxes in enumerate(boxes_per_image):
        for x, y, w, h in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
            cx, cy = (x + 0.5 * w) / stride, (y + 0.5 * h) / stride
            c, r = min(int(cx), gw - 1), min(int(cy), gh - 1)
            ignore[i, max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2] = True
            obj[i, r, c] = 1.0
            reg[i, :, r, c] = (cx - (c + 0.5), cy - (r + 0.5), math.log(w / ANCHOR), math.log(h / ANCHOR))
    ignore &= obj == 0
    return obj, ignore, reg


def detection_loss(det: Tensor, targets) -> Tensor:
    """Balanced objectness BCE plus smooth-L1 box regression on positive cells."""
    obj, ignore, reg = targets
    bce = ag.bce_with_logits(det[:, 0], obj)
    pos = obj > 0
    neg = ~pos & ~ignore
    loss = (bce * (neg / max(neg.sum(), 1))).sum()
    if pos.any():
        loss = loss + (bce * (pos / pos.sum())).sum()
        diff = det[:, 1:] - reg
        mask = np.broadcast_to(pos[:, None], diff.shape)
        loss = loss + (ag.smooth_l1(diff) * (mask / pos.sum())).sum()
    return loss


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.3) -> list[int]:
    order = np.argsort(-scores, kind="stable")
    keep = []
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_thresh
    return keep


def decode_detections(det: np.ndarray, stride: int, image_hw, score_thresh=0.05, max_dets=20):
    """Turn one image's (5, Hf, Wf) head output into ``x, y, w, h`` boxes and scores."""
    scores = 1.0 / (1.0 + np.exp(-det[0]))
    rr, cc = np.nonzero(scores >= score_thresh)
    if len(rr) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    tx, ty, tw, th = (det[k, rr, cc] for k in range(1, 5))
    cx = (cc + 0.5 + tx) * stride
    cy = (rr + 0.5 + ty) * stride
    w = ANCHOR * np.exp(np.clip(tw, -4, 4))
    h = ANCHOR * np.exp(np.clip(th, -4, 4))
    h_img, w_img = image_hw
    x1, y1 = np.clip(cx - w / 2, 0, w_img), np.clip(cy - h / 2, 0, h_img)
    x2, y2 = np.clip(cx + w / 2, 0, w_img), np.clip(cy + h / 2, 0, h_img)
    boxes = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)
    sc = scores[rr, cc]
    ok = (boxes[:, 2] > 1) & (boxes[:, 3] > 1)
    boxes, sc = boxes[ok], sc[ok]
    keep = nms(boxes, sc)[:max_dets]
    return boxes[keep], sc[keep]


# --- teacher -----------------------------------------------------------------

TEACHER_DEFAULTS = dict(channels=(16, 32), patch_h=32, patch_w=16, dim=32, n_classes=32)


class TeacherModel(Model):
    """Patch embedder: stride-2 convs, linear projection, standardized classifier."""

    kind = "teacher"

    def __init__(self, rng: Optional[Rng] = None, **topology):
        topo = {**TEACHER_DEFAULTS, **topology}
        topo["channels"] = list(topo["channels"])
        super().__init__(topo)
        rng = rng or Rng(0)
        cin = 3
        for i, c in enumerate(topo["channels"]):
            self._conv(f"conv.{i}", cin, c, 3, rng)
            cin = c
        down = 2 ** len(topo["channels"])
        fan_in = cin * (topo["patch_h"] // down) * (topo["patch_w"] // down)
        self._add_embed_head("head", fan_in, topo["dim"], topo["n_classes"], rng)

    def forward(self, patches) -> tuple[Tensor, Tensor]:
        x = ag.as_tensor(patches)
        t = self.topology
        if x.shape[1:] != (3, t["patch_h"], t["patch_w"]):
            raise ValueError(f"teacher expects (B, 3, {t['patch_h']}, {t['patch_w']}) patches, got {x.shape}")
        for i in range(len(t["channels"])):
            x = ag.relu(ag.conv2d(x, self.params[f"conv.{i}.w"], self.params[f"conv.{i}.b"], stride=2, pad=1))
        return self._embed_and_classify(x.reshape(x.shape[0], -1), "head")


def teacher_forward(model: TeacherModel, patches) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and class probabilities as constants (no graph is kept)."""
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 3
    if single:
        patches = patches[None]
    frozen = {k: Tensor(p.data) for k, p in model.params.items()}
    live, model.params = model.params, frozen
    try:
        emb, logits = model.forward(patches)
    finally:
        model.params = live
    probs = ag.softmax(logits, axis=1).data
    return (emb.data[0], probs[0]) if single else (emb.data, probs)


# --- gradients and optimizer -------------------------------------------------------


class GradientError(FloatingPointError):
    pass


def backward(loss: Tensor, model: Model) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for every parameter of ``model`` (zeros where unused)."""
    model.zero_grad()
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name, p in model.params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter block {name}")
        grads[name] = g
    return grads


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (buffers persist across steps)."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, model: Model, grads: dict[str, np.ndarray], lr: float):
        for name, p in model.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
                g = buf
            p.data = p.data - lr * g


def sgd_step(model: Model, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, opt=None):
    opt = opt or SGD(momentum, weight_decay)
    opt.step(model, grads, lr)
    return opt


# --- checkpoints ------------------------------------------------------------------


def save_checkpoint(model: Model, path, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    names = list(model.params)
    header = {
        "kind": model.kind,
        "topology": model.topology,
        "meta": meta or {},
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(model.params[n].data.astype("<f8").tobytes(order="C") for n in names)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb + payload)
    return path


def load_checkpoint(path, expect_kind: Optional[str] = None, expect_topology: Optional[dict] = None):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    kind = header["kind"]
    if expect_kind and kind != expect_kind:
        raise ValueError(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    topo = header["topology"]
    if expect_topology is not None:
        want = {k: list(v) if isinstance(v, tuple) else v for k, v in expect_topology.items()}
        if any(topo.get(k) != v for k, v in want.items()):
            raise ValueError(f"{path}: topology mismatch {topo} vs {want}")
    cls = {"student": StudentModel, "teacher": TeacherModel}[kind]
    model = cls(**topo)
    offset = 20 + hlen
    state = {}
    for spec in header["params"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(spec["shape"])
        state[spec["name"]] = arr.astype(np.float64)
        offset += 8 * count
    model.load_state(state)
    return model, header["meta"]
