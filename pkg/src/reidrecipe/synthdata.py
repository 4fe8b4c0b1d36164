"""Deterministic synthetic pedestrian crops.

An identity is a clothing-attribute vector (torso/leg colours, garment
lengths, body width, accessory).  A capture places that person in a camera
view: scale, offset, facing, background clutter, illumination gain,
sensor noise and an optional grey occluder.  Everything is a pure function
of ``(IdentitySpec, CaptureParams, seed)``.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import pnm
from .errors import ManifestError, StorageError, ValidationError

ACCESSORIES = ("none", "bag", "backpack", "hat")
ACCESSORY_PROBS = (0.4, 0.2, 0.2, 0.2)
FACINGS = ("front", "back", "left", "right")
SPLITS = ("train", "query", "gallery", "distractor")
OCCLUSION_FILL = 0.5
MANIFEST_HEADER = ("path", "identity", "camera", "split")


@dataclass(frozen=True)
class IdentitySpec:
    torso_color: tuple
    legs_color: tuple
    skin_tone: tuple
    torso_length_frac: float
    legs_length_frac: float
    accessory: str
    accessory_color: tuple
    body_width_frac: float

    def __post_init__(self):
        for name in ("torso_color", "legs_color", "skin_tone", "accessory_color"):
            c = getattr(self, name)
            if len(c) != 3 or any(not 0.0 <= v <= 1.0 for v in c):
                raise ValidationError(f"{name} must be an RGB triple in [0,1]")
        if not 0.25 <= self.torso_length_frac <= 0.45:
            raise ValidationError("torso_length_frac outside [0.25, 0.45]")
        if not 0.3 <= self.legs_length_frac <= 0.5:
            raise ValidationError("legs_length_frac outside [0.3, 0.5]")
        if not 0.2 <= self.body_width_frac <= 0.4:
            raise ValidationError("body_width_frac outside [0.2, 0.4]")
        if self.accessory not in ACCESSORIES:
            raise ValidationError(f"unknown accessory {self.accessory!r}")


@dataclass(frozen=True)
class CaptureParams:
    camera_id: int
    scale: float = 1.0
    dx: float = 0.0
    dy: float = 0.0
    facing: str = "front"
    occlusion_rect: tuple | None = None  # (x0, y0, x1, y1), fractions of width/height
    gain: float = 1.0
    noise_sigma: float = 0.0
    out_h: int = 64
    out_w: int = 32
    background: tuple = (0.45, 0.45, 0.45)
    clutter: int = 0

    def __post_init__(self):
        if self.out_h < 16 or self.out_w < 16:
            raise ValidationError("capture size must be at least 16x16")
        if self.facing not in FACINGS:
            raise ValidationError(f"unknown facing {self.facing!r}")
        if not 0.6 <= self.scale <= 1.4:
            raise ValidationError("scale outside [0.6, 1.4]")
        if not 0.7 <= self.gain <= 1.3:
            raise ValidationError("gain outside [0.7, 1.3]")
        if not 0.0 <= self.noise_sigma <= 0.05:
            raise ValidationError("noise_sigma outside [0, 0.05]")
        if self.occlusion_rect is not None:
            x0, y0, x1, y1 = self.occlusion_rect
            if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
                raise ValidationError("occlusion rectangle must lie inside the unit square")


@dataclass
class ImageSample:
    pixels: np.ndarray  # float32 [3,H,W] in [0,1]
    identity: int
    camera: int
    split: str
    source_path: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        if self.identity < 0 and self.split != "distractor":
            raise ValidationError("only distractors may have a negative identity")


def _rgb(rng, lo=0.0, hi=1.0):
    return tuple(float(v) for v in rng.uniform(lo, hi, size=3))


def sample_identity(rng) -> IdentitySpec:
    return IdentitySpec(
        torso_color=_rgb(rng),
        legs_color=_rgb(rng),
        skin_tone=_rgb(rng),
        torso_length_frac=float(rng.uniform(0.25, 0.45)),
        legs_length_frac=float(rng.uniform(0.3, 0.5)),
        accessory=ACCESSORIES[rng.choice(len(ACCESSORIES), p=ACCESSORY_PROBS)],
        accessory_color=_rgb(rng),
        body_width_frac=float(rng.uniform(0.2, 0.4)),
    )


# ---------------------------------------------------------------- rendering


def _rect_mask(ys, xs, y0, y1, x0, x1):
    return (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)


def person_layers(ident: IdentitySpec, cap: CaptureParams):
    """Boolean region masks ``{name: [H,W]}`` in painting order."""
    h, w = cap.out_h, cap.out_w
    ys = (np.arange(h) + 0.5)[:, None]
    xs = (np.arange(w) + 0.5)[None, :]
    fig_h = 0.8 * h * cap.scale
    top = (h - fig_h) / 2.0 + cap.dy
    cx = w / 2.0 + cap.dx
    side = cap.facing in ("left", "right")
    bw = ident.body_width_frac * fig_h * 0.9 * (0.6 if side else 1.0)

    def y_at(u):
        return top + u * fig_h

    t_end = 0.14 + ident.torso_length_frac
    p_end = min(t_end + ident.legs_length_frac, 0.97)
    torso = _rect_mask(ys, xs, y_at(0.14), y_at(t_end), cx - bw / 2, cx + bw / 2)
    if side:
        leg_cols = [(cx - 0.3 * bw, cx + 0.3 * bw)]
    else:
        leg_cols = [(cx - 0.5 * bw, cx - 0.08 * bw), (cx + 0.08 * bw, cx + 0.5 * bw)]
    legs = np.zeros((h, w), bool)
    shins = np.zeros((h, w), bool)
    shoes = np.zeros((h, w), bool)
    for x0, x1 in leg_cols:
        legs |= _rect_mask(ys, xs, y_at(t_end), y_at(p_end), x0, x1)
        shins |= _rect_mask(ys, xs, y_at(p_end), y_at(0.97), x0, x1)
        shoes |= _rect_mask(ys, xs, y_at(0.97), y_at(1.0), x0, x1)
    rx, ry = 0.065 * fig_h, 0.07 * fig_h
    head = ((xs - cx) / rx) ** 2 + ((ys - y_at(0.07)) / ry) ** 2 <= 1.0

    acc = np.zeros((h, w), bool)
    kind = ident.accessory
    if kind == "hat":
        acc = _rect_mask(ys, xs, y_at(-0.02), y_at(0.045), cx - 1.3 * rx, cx + 1.3 * rx)
    elif kind == "bag":
        bag_w = 0.4 * bw if not side else 0.5 * bw
        if cap.facing == "front":
            x0 = cx + bw / 2
        elif cap.facing == "back":
            x0 = cx - bw / 2 - bag_w
        else:
            x0 = cx - bag_w / 2
        acc = _rect_mask(ys, xs, y_at(0.36), y_at(0.56), x0, x0 + bag_w)
    elif kind == "backpack":
        if cap.facing == "back":
            acc = _rect_mask(ys, xs, y_at(0.17), y_at(0.42), cx - 0.38 * bw, cx + 0.38 * bw)
        elif side:
            pack_w = 0.45 * bw
            x0 = cx + bw / 2 if cap.facing == "left" else cx - bw / 2 - pack_w
            acc = _rect_mask(ys, xs, y_at(0.17), y_at(0.42), x0, x0 + pack_w)
        else:
            strap = 0.09 * bw
            s_end = y_at(0.14 + 0.8 * ident.torso_length_frac)
            for sx in (cx - 0.3 * bw, cx + 0.3 * bw):
                acc |= _rect_mask(ys, xs, y_at(0.14), s_end, sx - strap / 2, sx + strap / 2)

    return {"legs": legs, "shins": shins, "shoes": shoes, "torso": torso, "head": head,
            "accessory": acc}


# weight of the random colour against the backdrop in clutter patches
CLUTTER_MIX = 0.5


def _background(cap: CaptureParams, rng):
    h, w = cap.out_h, cap.out_w
    img = np.empty((3, h, w), np.float64)
    img[:] = np.asarray(cap.background, np.float64)[:, None, None]
    ramp = np.linspace(-0.08, 0.08, h)[None, :, None]
    img += ramp
    for _ in range(cap.clutter):
        bh = rng.uniform(0.1, 0.5) * h
        bwid = rng.uniform(0.15, 0.6) * w
        y0 = rng.uniform(-0.2 * h, h)
        x0 = rng.uniform(-0.2 * w, w)
        color = CLUTTER_MIX * rng.uniform(0.0, 1.0, size=3) + (1 - CLUTTER_MIX) * np.asarray(cap.background)
        ys = slice(max(0, int(y0)), max(0, min(h, int(y0 + bh))))
        xs = slice(max(0, int(x0)), max(0, min(w, int(x0 + bwid))))
        img[:, ys, xs] = color[:, None, None]
    return img


def render_with_layers(ident: IdentitySpec, cap: CaptureParams, seed: int = 0):
    """Returns ``(ImageSample, layers)``; ``layers`` adds ``body`` (union)."""
    rng = np.random.default_rng(seed)
    img = _background(cap, rng)
    layers = person_layers(ident, cap)
    colors = {
        "legs": ident.legs_color,
        "shins": ident.skin_tone,
        "shoes": (0.1, 0.1, 0.1),
        "torso": ident.torso_color,
        "head": ident.skin_tone,
        "accessory": ident.accessory_color,
    }
    for name, mask in layers.items():
        img[:, mask] = np.asarray(colors[name], np.float64)[:, None]
    img *= cap.gain
    if cap.noise_sigma > 0:
        img += rng.normal(0.0, cap.noise_sigma, size=img.shape)
    if cap.occlusion_rect is not None:
        x0, y0, x1, y1 = cap.occlusion_rect
        r0, r1 = int(round(y0 * cap.out_h)), int(round(y1 * cap.out_h))
        c0, c1 = int(round(x0 * cap.out_w)), int(round(x1 * cap.out_w))
        img[:, r0:r1, c0:c1] = OCCLUSION_FILL
    np.clip(img, 0.0, 1.0, out=img)
    body = np.zeros((cap.out_h, cap.out_w), bool)
    for mask in layers.values():
        body |= mask
    layers = dict(layers, body=body)
    sample = ImageSample(img.astype(np.float32), 0, cap.camera_id, "train")
    return sample, layers


def render(ident: IdentitySpec, cap: CaptureParams, seed: int = 0) -> ImageSample:
    return render_with_layers(ident, cap, seed)[0]


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    identity: int
    camera: int
    split: str


@dataclass
class DatasetManifest:
    records: list
    root: str = "."

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.records == other.records

    def __len__(self):
        return len(self.records)

    @property
    def counts(self):
        out = {s: 0 for s in SPLITS}
        for r in self.records:
            out[r.split] += 1
        return out

    def subset(self, *splits):
        return DatasetManifest([r for r in self.records if r.split in splits], self.root)

    def resolve(self, record):
        return record.path if os.path.isabs(record.path) else os.path.join(self.root, record.path)

    def identities(self, *splits):
        return sorted({r.identity for r in self.records if r.split in splits})

    def validate(self):
        for i, r in enumerate(self.records):
            if r.split not in SPLITS:
                raise ValidationError(f"record {i}: unknown split {r.split!r}")
            if r.identity < 0 and r.split != "distractor":
                raise ValidationError(f"record {i}: negative identity outside the distractor split")
        train = set(self.identities("train"))
        test = set(self.identities("query", "gallery"))
        overlap = train & test
        if overlap:
            raise ValidationError(f"train and test identities overlap: {sorted(overlap)[:5]}")
        gallery_cams = {}
        for r in self.records:
            if r.split == "gallery":
                gallery_cams.setdefault(r.identity, set()).add(r.camera)
        query_cams = {}
        for r in self.records:
            if r.split == "query":
                query_cams.setdefault(r.identity, set()).add(r.camera)
        for ident, cams in query_cams.items():
            gcams = gallery_cams.get(ident, set())
            if not any(gcams - {c} for c in cams):
                raise ValidationError(f"query identity {ident} has no cross-camera gallery image")
        return self


def manifest_text(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        writer.writerow((r.path, r.identity, r.camera, r.split))
    return buf.getvalue()


def write_manifest(path, manifest: DatasetManifest):
    pnm.atomic_write_text(path, manifest_text(manifest))


def load_manifest(path, check_files=True) -> DatasetManifest:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read manifest {path}: {exc}") from exc
    root = os.path.dirname(os.path.abspath(path))
    reader = csv.reader(io.StringIO(text))
    records = []
    header_seen = False
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if not header_seen:
            if tuple(row) != MANIFEST_HEADER:
                raise ManifestError(f"expected header {','.join(MANIFEST_HEADER)}", line)
            header_seen = True
            continue
        if len(row) != 4:
            raise ManifestError(f"expected 4 fields, found {len(row)}", line)
        p, ident, cam, split = row
        try:
            ident_v, cam_v = int(ident), int(cam)
        except ValueError:
            raise ManifestError(f"identity and camera must be integers: {row!r}", line) from None
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}", line)
        rec = ManifestRecord(p, ident_v, cam_v, split)
        if check_files:
            full = p if os.path.isabs(p) else os.path.join(root, p)
            if not os.path.isfile(full):
                raise ManifestError(f"image file not found: {p}", line)
        records.append(rec)
    if not header_seen:
        raise ManifestError("empty manifest", 1)
    return DatasetManifest(records, root).validate()


def load_sample(manifest: DatasetManifest, record: ManifestRecord) -> ImageSample:
    path = manifest.resolve(record)
    return ImageSample(pnm.read_pnm(path), record.identity, record.camera, record.split, path)


# ---------------------------------------------------------------- generation


def _stream(seed, *tags):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


@dataclass
class CameraModel:
    gain: float
    background: tuple
    scale_bias: float


def _cameras(n_cams, seed):
    rng = _stream(seed, 1)
    cams = []
    for _ in range(n_cams):
        gray = rng.uniform(0.3, 0.7)
        tint = rng.uniform(-0.08, 0.08, size=3)
        cams.append(CameraModel(float(rng.uniform(0.8, 1.2)), tuple(float(v) for v in gray + tint),
                                float(rng.uniform(0.9, 1.15))))
    return cams


def sample_capture(rng, cam_id, cam: CameraModel, size_range, occlusion_prob=0.4):
    out_h = int(rng.integers(size_range[0], size_range[1] + 1))
    out_w = max(16, int(round(out_h * rng.uniform(0.4, 0.55))))
    scale = float(np.clip(cam.scale_bias * rng.uniform(0.8, 1.2), 0.6, 1.4))
    occ = None
    if rng.random() < occlusion_prob:
        ow, oh = rng.uniform(0.3, 0.8), rng.uniform(0.15, 0.35)
        x0, y0 = rng.uniform(0, 1 - ow), rng.uniform(0, 1 - oh)
        occ = (float(x0), float(y0), float(x0 + ow), float(y0 + oh))
    bg = tuple(float(v) for v in np.clip(np.asarray(cam.background) + rng.uniform(-0.06, 0.06, 3), 0, 1))
    return CaptureParams(
        camera_id=cam_id,
        scale=scale,
        dx=float(rng.uniform(-0.08, 0.08) * out_w),
        dy=float(rng.uniform(-0.05, 0.05) * out_h),
        facing=FACINGS[int(rng.integers(4))],
        occlusion_rect=occ,
        gain=float(np.clip(cam.gain * rng.uniform(0.85, 1.15), 0.7, 1.3)),
        noise_sigma=float(rng.uniform(0.0, 0.05)),
        out_h=out_h,
        out_w=out_w,
        background=bg,
        clutter=int(rng.integers(0, 4)),
    )


@dataclass
class GeneratedDataset:
    manifest: DatasetManifest
    samples: list = field(repr=False)
    identities: dict = field(repr=False)  # label -> IdentitySpec
    captures: list = field(repr=False)  # per sample: (CaptureParams, render seed)


def generate_dataset(n_train_ids=64, n_test_ids=32, per_id=8, n_cams=4, size_range=(64, 112),
                     seed=0, out_dir=None, n_distractors=0, test_cams=None) -> GeneratedDataset:
    """Render a dataset with disjoint train/test identities.

    Test identities cover ``test_cams`` cameras (default ``per_id // 4``, at
    least two) with one query per camera; the rest of their images form
    the gallery.  With ``out_dir`` the images and ``manifest.csv`` are written.
    """
    if n_train_ids < 1 or n_test_ids < 1 or per_id < 1:
        raise ValidationError("identity and per-identity counts must be >= 1")
    if n_cams < 2:
        raise ValidationError("need at least two cameras")
    if per_id < 4:
        raise ValidationError("per_id must be >= 4 so every query keeps cross-camera gallery matches")
    lo, hi = size_range
    if lo < 16 or hi < lo:
        raise ValidationError(f"invalid size range {size_range}")
    cams = _cameras(n_cams, seed)
    id_rng = _stream(seed, 2)
    specs = {label: sample_identity(id_rng) for label in range(n_train_ids + n_test_ids)}

    records, samples, captures = [], [], []
    index = 0
    for label, spec in specs.items():
        is_train = label < n_train_ids
        cam_rng = _stream(seed, 3, label)
        used = n_cams if is_train else (test_cams or max(2, min(n_cams, per_id // 4)))
        order = cam_rng.permutation(n_cams)[:used]
        seen = set()
        for k in range(per_id):
            cam_id = int(order[k % used])
            rng = _stream(seed, 4, index)
            cap = sample_capture(rng, cam_id, cams[cam_id], size_range)
            rseed = int(rng.integers(2**31))
            if is_train:
                split = "train"
            else:
                split = "gallery" if cam_id in seen else "query"
                seen.add(cam_id)
            sample = render(spec, cap, rseed)
            sample.identity, sample.split = label, split
            path = f"images/{index:05d}.ppm"
            sample.source_path = path
            records.append(ManifestRecord(path, label, cam_id, split))
            samples.append(sample)
            captures.append((cap, rseed))
            index += 1
    for d in generate_distractors(n_distractors, seed + 7919, size_range, n_cams):
        path = f"images/{index:05d}.ppm"
        d.source_path = path
        records.append(ManifestRecord(path, -1, d.camera, "distractor"))
        samples.append(d)
        captures.append((None, None))
        index += 1

    root = os.path.abspath(out_dir) if out_dir is not None else "."
    manifest = DatasetManifest(records, root).validate()
    if out_dir is not None:
        for rec, sample in zip(records, samples):
            pnm.write_ppm(os.path.join(root, rec.path), sample.pixels)
        write_manifest(os.path.join(root, "manifest.csv"), manifest)
    return GeneratedDataset(manifest, samples, specs, captures)


def generate_distractors(n, seed, size_range=(64, 112), n_cams=4):
    """Texture patches and truncated half-bodies; identity -1."""
    out = []
    cams = _cameras(n_cams, seed)
    for i in range(n):
        rng = _stream(seed, 5, i)
        cam_id = int(rng.integers(n_cams))
        cap = sample_capture(rng, cam_id, cams[cam_id], size_range, occlusion_prob=0.0)
        if i % 2 == 0:
            cap = CaptureParams(**{**cap.__dict__, "clutter": int(rng.integers(4, 10))})
            texture = _background(cap, rng) * cap.gain
            texture += rng.normal(0, cap.noise_sigma, texture.shape)
            pixels = np.clip(texture, 0, 1).astype(np.float32)
        else:
            spec = sample_identity(rng)
            shift = cap.out_h * 0.5 * (1 if rng.random() < 0.5 else -1)
            cap = CaptureParams(**{**cap.__dict__, "dy": float(shift), "scale": 1.3})
            pixels = render(spec, cap, int(rng.integers(2**31))).pixels
        out.append(ImageSample(pixels, -1, cam_id, "distractor"))
    return out
