"""Procedural person-search scenes.

Each identity is a fixed appearance (torso color, leg color, torso texture);
scenes place a few such figures at random positions and sizes over a cluttered
background. Figures with ``identity=None`` are unknown-identity distractors:
they count for detection but never for identity losses or retrieval.

On-disk layout written by :func:`save_dataset`::

    manifest.json        format version, split spec, image size, identities
    images/<scene>.ppm   binary PPM (P6, 8-bit RGB), one per scene
    annotations.jsonl    {"scene", "x", "y", "w", "h", "identity"}; identity -1 = unknown
    queries.jsonl        {"scene", "box"}; box indexes that scene's annotations

Pixel values are generated on the 1/255 grid so the 8-bit files round-trip
exactly.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import bilinear_crop
from .types import BoundingBox, Rng

FORMAT_VERSION = 1
IMAGE_SIZE = (128, 192)  # (height, width)
BOX_HEIGHTS = (24, 56)
ASPECT = 0.45  # width / height of a figure box

PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.65, 0.20],
        [0.15, 0.25, 0.85],
        [0.90, 0.80, 0.15],
        [0.70, 0.20, 0.75],
        [0.10, 0.75, 0.80],
        [0.95, 0.55, 0.10],
        [0.95, 0.95, 0.95],
        [0.10, 0.10, 0.10],
    ]
)
PATTERNS = ("plain", "hstripe", "vstripe", "check")
SKIN = np.array([0.87, 0.70, 0.55])


@dataclass(frozen=True)
class Identity:
    id: int
    upper: int  # palette index
    lower: int
    pattern: str
    accent: int  # stripe/check color

    def key(self):
        return (self.upper, self.lower, self.pattern, self.accent)


@dataclass
class Scene:
    scene_id: str
    image: np.ndarray  # (3, H, W)
    annotations: list[BoundingBox]

    @property
    def labeled(self) -> list[BoundingBox]:
        return [b for b in self.annotations if b.identity is not None]


@dataclass(frozen=True)
class Query:
    scene: Scene
    box_index: int

    @property
    def box(self) -> BoundingBox:
        return self.scene.annotations[self.box_index]

    @property
    def identity(self) -> int:
        return self.box.identity


@dataclass(frozen=True)
class SplitSpec:
    n_identities: int = 32
    n_train_scenes: int = 96
    n_gallery_scenes: int = 64
    n_queries: int = 32
    seed: int = 0
    max_per_scene: int = 3
    unknown_rate: float = 0.3
    clutter: int = 12

    def validate(self):
        if self.n_identities < 1:
            raise ValueError("need at least one identity")
        if min(self.n_train_scenes, self.n_gallery_scenes, self.n_queries) < 0:
            raise ValueError("scene and query counts must be non-negative")
        if self.n_identities > len(_all_descriptors()):
            raise ValueError(f"at most {len(_all_descriptors())} distinct identities can be rendered")
        if self.n_queries > self.n_identities:
            raise ValueError("more queries than identities (one query per identity)")
        if self.n_queries and self.n_gallery_scenes * self.max_per_scene < self.n_queries:
            raise ValueError("gallery too small to hold every query identity")
        if not 0 <= self.unknown_rate <= 1:
            raise ValueError("unknown_rate must be in [0, 1]")


@dataclass
class Dataset:
    spec: SplitSpec
    identities: list[Identity]
    train: list[Scene]
    queries: list[Query]
    gallery: list[Scene]
    image_size: tuple[int, int] = IMAGE_SIZE
    query_scenes: list[Scene] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.identities)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s in itertools.chain(self.train, self.query_scenes, self.gallery):
            h.update(s.scene_id.encode())
            h.update(np.ascontiguousarray(s.image).tobytes())
            for b in s.annotations:
                h.update(repr((b.x, b.y, b.w, b.h, b.identity)).encode())
        for q in self.queries:
            h.update(f"{q.scene.scene_id}:{q.box_index}".encode())
        return h.hexdigest()


def _all_descriptors():
    combos = []
    n = len(PALETTE)
    for up, lo in itertools.permutations(range(n), 2):
        for pat in PATTERNS:
            accents = [None] if pat == "plain" else [a for a in range(n) if a != up]
            for acc in accents:
                combos.append((up, lo, pat, up if acc is None else acc))
    return combos


def make_identities(n: int, rng: Rng) -> list[Identity]:
    combos = _all_descriptors()
    # favor plain and distinct (upper, lower) pairs so color alone separates most ids
    pairs = list(itertools.permutations(range(len(PALETTE)), 2))
    order = rng.permutation(len(pairs))
    chosen, seen = [], set()
    for k in order:
        up, lo = pairs[k]
        pat = PATTERNS[int(rng.integers(len(PATTERNS)))]
        acc = up if pat == "plain" else int(rng.choice([a for a in range(len(PALETTE)) if a not in (up, lo)]))
        chosen.append((up, lo, pat, acc))
        seen.add((up, lo, pat, acc))
        if len(chosen) == n:
            break
    if len(chosen) < n:
        rest = [c for c in combos if c not in seen]
        for k in rng.permutation(len(rest))[: n - len(chosen)]:
            chosen.append(rest[k])
    return [Identity(i, *c) for i, c in enumerate(chosen)]


def _background(rng: Rng, size, clutter: int) -> np.ndarray:
    h, w = size
    base = rng.uniform(0.3, 0.6, size=3)
    gy = rng.uniform(-0.15, 0.15, size=3)
    gx = rng.uniform(-0.15, 0.15, size=3)
    yy = np.linspace(-0.5, 0.5, h)[:, None]
    xx = np.linspace(-0.5, 0.5, w)[None, :]
    img = base[:, None, None] + gy[:, None, None] * yy + gx[:, None, None] * xx
    img = img + rng.normal(0, 0.02, size=(3, h, w))
    for _ in range(clutter):
        ch, cw = rng.integers(3, 18, size=2)
        cy, cx = rng.integers(0, h - ch), rng.integers(0, w - cw)
        col = np.clip(PALETTE[int(rng.integers(len(PALETTE)))] * 0.6 + base * 0.4, 0, 1)
        img[:, cy : cy + ch, cx : cx + cw] = col[:, None, None]
    return img


def render_figure(img: np.ndarray, box: BoundingBox, ident: Identity, rng: Rng, jitter: float = 0.04):
    """Paint a figure with the identity's appearance into ``box`` (integral coords)."""
    x, y, w, h = int(box.x), int(box.y), int(box.w), int(box.h)
    up = np.clip(PALETTE[ident.upper] + rng.uniform(-jitter, jitter, 3), 0, 1)
    lo = np.clip(PALETTE[ident.lower] + rng.uniform(-jitter, jitter, 3), 0, 1)
    acc = np.clip(PALETTE[ident.accent] + rng.uniform(-jitter, jitter, 3), 0, 1)
    skin = np.clip(SKIN + rng.uniform(-jitter, jitter, 3), 0, 1)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    region = img[:, y : y + h, x : x + w]

    head_h = max(int(round(0.22 * h)), 2)
    cy, cx = head_h / 2.0, w / 2.0
    head = ((rows + 0.5 - cy) / (head_h / 2.0)) ** 2 + ((cols + 0.5 - cx) / (0.28 * w)) ** 2 <= 1.0
    region[:, head] = skin[:, None]

    t0, t1 = head_h, int(round(0.6 * h))
    margin = max(int(round(0.08 * w)), 1)
    torso = (rows >= t0) & (rows < t1) & (cols >= margin) & (cols < w - margin)
    period = max(int(round(0.09 * h)), 2)
    r_band = ((rows - t0) // period) % 2 == 1
    c_band = ((cols - margin) // period) % 2 == 1
    accent = {
        "plain": np.zeros_like(torso),
        "hstripe": np.broadcast_to(r_band, torso.shape),
        "vstripe": np.broadcast_to(c_band, torso.shape),
        "check": r_band ^ c_band,
    }[ident.pattern]
    region[:, torso & ~accent] = up[:, None]
    region[:, torso & accent] = acc[:, None]

    leg_w = max(int(round(0.34 * w)), 1)
    gap = max(w - 2 * margin - 2 * leg_w, 0)
    left = (cols >= margin) & (cols < margin + leg_w)
    right = (cols >= margin + leg_w + gap) & (cols < margin + 2 * leg_w + gap)
    legs = (rows >= t1) & (left | right)
    region[:, legs] = lo[:, None]


def _place_boxes(n: int, rng: Rng, size, tries: int = 50) -> list[tuple[int, int, int, int]]:
    h_img, w_img = size
    placed = []
    for _ in range(n):
        for _ in range(tries):
            bh = int(rng.integers(BOX_HEIGHTS[0], BOX_HEIGHTS[1] + 1))
            bw = max(int(round(bh * ASPECT)), 4)
            bx = int(rng.integers(0, w_img - bw + 1))
            by = int(rng.integers(0, h_img - bh + 1))
            ok = all(
                bx + bw + 2 <= px or px + pw + 2 <= bx or by + bh + 2 <= py or py + ph + 2 <= by
                for px, py, pw, ph in placed
            )
            if ok:
                placed.append((bx, by, bw, bh))
                break
        else:
            raise RuntimeError("could not place a non-overlapping figure; scene too crowded")
    return placed


def render_scene(
    scene_id: str,
    ids: list[Optional[Identity]],
    rng: Rng,
    size=IMAGE_SIZE,
    clutter: int = 12,
) -> Scene:
    img = _background(rng, size, clutter)
    boxes = _place_boxes(len(ids), rng, size)
    annotations = []
    for ident, (bx, by, bw, bh) in zip(ids, boxes):
        if ident is None:
            # unknown person: appearance not drawn from the identity table
            ident = Identity(-1, *_random_unknown(rng))
        box = BoundingBox(float(bx), float(by), float(bw), float(bh))
        render_figure(img, box, ident, rng)
        annotations.append(BoundingBox(box.x, box.y, box.w, box.h, ident.id if ident.id >= 0 else None))
    img = img * rng.uniform(0.85, 1.15)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Scene(scene_id, img, annotations)


def _random_unknown(rng: Rng):
    n = len(PALETTE)
    up = int(rng.integers(n))
    lo = int((up + 1 + rng.integers(n - 1)) % n)
    return up, lo, "plain", up


def _balanced_pick(counts: np.ndarray, k: int, rng: Rng) -> list[int]:
    """k distinct ids, least-used first with random tie-breaks."""
    noise = rng.uniform(0, 0.5, size=len(counts))
    return [int(i) for i in np.argsort(counts + noise, kind="stable")[:k]]


def generate(spec: SplitSpec, size=IMAGE_SIZE) -> Dataset:
    spec.validate()
    root = Rng(spec.seed)
    r_ids, r_train, r_gal, r_query = root.split(4)
    identities = make_identities(spec.n_identities, r_ids)
    n = spec.n_identities
    kmax = min(spec.max_per_scene, n)

    def extras(rng):
        return [None] if rng.uniform() < spec.unknown_rate else []

    train = []
    for i, rng in enumerate(r_train.split(spec.n_train_scenes)):
        k = int(rng.integers(1, kmax + 1))
        picks = rng.choice(n, size=k, replace=False)
        ids = [identities[int(p)] for p in picks] + extras(rng)
        train.append(render_scene(f"train_{i:04d}", ids, rng, size, spec.clutter))

    counts = np.zeros(n)
    gallery = []
    for i, rng in enumerate(r_gal.split(spec.n_gallery_scenes)):
        k = int(rng.integers(1, kmax + 1))
        picks = _balanced_pick(counts, k, rng)
        counts[picks] += 1
        ids = [identities[p] for p in picks] + extras(rng)
        gallery.append(render_scene(f"gallery_{i:04d}", ids, rng, size, spec.clutter))

    present = {b.identity for s in gallery for b in s.labeled}
    q_ids = [i for i in r_query.permutation(n).tolist() if i in present][: spec.n_queries]
    if len(q_ids) < spec.n_queries:
        raise ValueError("not enough gallery identities to draw the requested queries")
    queries, query_scenes = [], []
    for i, (qid, rng) in enumerate(zip(q_ids, r_query.split(len(q_ids)))):
        others = [j for j in rng.permutation(n).tolist() if j != qid][: int(rng.integers(0, kmax))]
        ids = [identities[qid]] + [identities[j] for j in others] + extras(rng)
        scene = render_scene(f"query_{i:04d}", ids, rng, size, spec.clutter)
        query_scenes.append(scene)
        queries.append(Query(scene, 0))
    return Dataset(spec, identities, train, queries, gallery, tuple(size), query_scenes)


def crop_patch(scene: Scene, box: BoundingBox, out_h: int, out_w: int, tol: float = 1e-9) -> np.ndarray:
    """Bilinear crop of ``box`` from the scene, resized to (3, out_h, out_w)."""
    _, h, w = scene.image.shape
    if box.x < -tol or box.y < -tol or box.x2 > w + tol or box.y2 > h + tol:
        raise ValueError(f"box {box} outside image of size {(h, w)}")
    return bilinear_crop(scene.image, (box.x, box.y, box.w, box.h), out_h, out_w)


def nearest_color_classify(patch: np.ndarray, identities: list[Identity]) -> int:
    """Reference classifier: match torso mean and leg median colors to each identity."""
    _, h, w = patch.shape
    core = slice(int(0.2 * w), max(int(0.8 * w), int(0.2 * w) + 1))
    torso = patch[:, int(0.3 * h) : int(0.55 * h), core].reshape(3, -1).mean(1)
    legs = np.median(patch[:, int(0.7 * h) : int(0.95 * h)].reshape(3, -1), axis=1)
    best, best_d = -1, np.inf
    for ident in identities:
        t_ref = 0.5 * (PALETTE[ident.upper] + PALETTE[ident.accent])
        d = np.abs(torso - t_ref).sum() + np.abs(legs - PALETTE[ident.lower]).sum()
        if d < best_d:
            best, best_d = ident.id, d
    return best


# --- serialization ----------------------------------------------------------


def _write_ppm(path: Path, img: np.ndarray):
    arr = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    arr = np.frombuffer(raw[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": asdict(ds.spec),
        "image_size": list(ds.image_size),
        "identities": [asdict(i) for i in ds.identities],
        "splits": {
            "train": [s.scene_id for s in ds.train],
            "query": [s.scene_id for s in ds.query_scenes],
            "gallery": [s.scene_id for s in ds.gallery],
        },
        "checksum": ds.checksum(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    with open(out / "annotations.jsonl", "w") as f:
        for s in itertools.chain(ds.train, ds.query_scenes, ds.gallery):
            _write_ppm(out / "images" / f"{s.scene_id}.ppm", s.image)
            for b in s.annotations:
                rec = {"scene": s.scene_id, "x": b.x, "y": b.y, "w": b.w, "h": b.h,
                       "identity": -1 if b.identity is None else b.identity}
                f.write(json.dumps(rec) + "\n")
    with open(out / "queries.jsonl", "w") as f:
        for q in ds.queries:
            f.write(json.dumps({"scene": q.scene.scene_id, "box": q.box_index}) + "\n")
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    anns: dict[str, list[BoundingBox]] = {}
    for line in (root / "annotations.jsonl").read_text().splitlines():
        r = json.loads(line)
        ident = None if r["identity"] < 0 else r["identity"]
        anns.setdefault(r["scene"], []).append(BoundingBox(r["x"], r["y"], r["w"], r["h"], ident))

    def scenes(names):
        return [Scene(n, _read_ppm(root / "images" / f"{n}.ppm"), anns.get(n, [])) for n in names]

    splits = manifest["splits"]
    query_scenes = scenes(splits["query"])
    by_id = {s.scene_id: s for s in query_scenes}
    queries = [
        Query(by_id[r["scene"]], r["box"])
        for r in map(json.loads, (root / "queries.jsonl").read_text().splitlines())
    ]
    return Dataset(
        spec=SplitSpec(**manifest["spec"]),
        identities=[Identity(**i) for i in manifest["identities"]],
        train=scenes(splits["train"]),
        queries=queries,
        gallery=scenes(splits["gallery"]),
        image_size=tuple(manifest["image_size"]),
        query_scenes=query_scenes,
    )
