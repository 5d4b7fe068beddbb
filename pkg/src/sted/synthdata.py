"""Procedural toy-face renderer, dataset store, and pair sampler.

Images are cartoon faces whose gaze, head pose, and extraneous parameters
(brightness, hue, translation, blur) are known exactly at render time.
Geometry follows a tangent law so that pose can be read back off an image
by centroid extraction (:func:`read_geometry`), which gives every
experiment an oracle that is independent of any learned estimator.

Coordinates: x grows right, y grows down, in units of the image size.
Positive yaw moves features right; positive pitch moves them up.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataFormatError

# Angular limits accepted by the renderer (hard invariant) and the narrower
# ranges the dataset generator draws from.  The generator stays narrow so
# that irises keep a safe margin inside the eye sockets and the readback
# oracle stays accurate; the renderer itself accepts the full range and
# simply clips shapes at the frame.
ANGLE_LIMIT = 0.45 * math.pi
GAZE_RANGE = 0.35
HEAD_RANGE = 0.24

# Geometric gains, in units of image size.  K_HEAD > K_FACE makes the inner
# features (eyes, nose, mouth) shift more than the face outline under head
# rotation, which is what read_geometry inverts to recover head pose.
K_FACE = 0.025
K_HEAD = 0.140
K_GAZE = 0.065
K_TRANS = 0.060
EYE_DY = 0.055  # fixed across persons; readback relies on knowing it
MOUTH_DY = 0.17  # likewise
R_EYE = 0.095
R_IRIS = 0.040
FACE_CX, FACE_CY = 0.5, 0.52

BG_COLOR = np.array([40.0, 40.0, 45.0])
WHITE_COLOR = np.array([246.0, 246.0, 246.0])
IRIS_COLOR = np.array([25.0, 45.0, 190.0])
MOUTH_COLOR = np.array([150.0, 25.0, 40.0])

BRIGHTNESS_GAIN = 0.25
HUE_GAIN = 0.18
BLUR_SIGMA = 0.010  # of image size, at blur_level=1

_SUPERSAMPLE = 4
_PERSON_SALT = 0x5EED_FACE

MANIFEST_VERSION = 1


def _check_range(name, value, lo, hi):
    if not (lo <= value <= hi):
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class SceneParams:
    """Complete description of one rendered scene."""

    person_id: int
    gaze: tuple  # (pitch, yaw) radians
    head: tuple
    brightness: float = 0.0
    hue_shift: float = 0.0
    translation: tuple = (0.0, 0.0)
    blur_level: float = 0.0

    def __post_init__(self):
        if self.person_id < 0:
            raise ValueError("person_id must be nonnegative")
        for label, pair in (("gaze", self.gaze), ("head", self.head)):
            if len(pair) != 2:
                raise ValueError(f"{label} must have two components")
            for comp in pair:
                if not math.isfinite(comp) or abs(comp) >= ANGLE_LIMIT:
                    raise ValueError(
                        f"{label} component {comp} outside (-{ANGLE_LIMIT:.4f}, {ANGLE_LIMIT:.4f})"
                    )
        _check_range("brightness", self.brightness, -1.0, 1.0)
        _check_range("hue_shift", self.hue_shift, -1.0, 1.0)
        if len(self.translation) != 2:
            raise ValueError("translation must have two components")
        for comp in self.translation:
            _check_range("translation component", comp, -1.0, 1.0)
        _check_range("blur_level", self.blur_level, 0.0, 1.0)


@dataclass(frozen=True)
class PersonTraits:
    skin: np.ndarray
    eye_dx: float
    face_ax: float
    face_ay: float
    mouth_w: float
    nose_r: float


def person_traits(person_id: int) -> PersonTraits:
    """Stable per-person appearance parameters."""
    rng = np.random.RandomState(np.random.SeedSequence([_PERSON_SALT, person_id]).generate_state(1))
    skin = np.array(
        [rng.uniform(185, 215), rng.uniform(140, 165), rng.uniform(70, 90)]
    )
    return PersonTraits(
        skin=skin,
        eye_dx=0.122 + 0.012 * rng.uniform(),
        face_ax=0.30 * (1.0 + 0.04 * rng.uniform(-1, 1)),
        face_ay=0.36 * (1.0 + 0.04 * rng.uniform(-1, 1)),
        mouth_w=0.085 * (1.0 + 0.10 * rng.uniform(-1, 1)),
        nose_r=0.030 * (1.0 + 0.10 * rng.uniform(-1, 1)),
    )


def _tan_shift(angles) -> np.ndarray:
    """(pitch, yaw) -> image-plane displacement direction (x right, y down)."""
    theta, phi = angles
    return np.array([math.tan(phi), -math.tan(theta)])


def scene_geometry(p: SceneParams, size: int) -> dict:
    """Centers and radii of every shape, in pixels at the given size.

    This is the renderer's declared geometry; read_geometry inverts it and
    the tests compare centroids against it directly.
    """
    s = float(size)
    traits = person_traits(p.person_id)
    trans = K_TRANS * s * np.asarray(p.translation, dtype=float)
    base = np.array([FACE_CX * s, FACE_CY * s]) + trans
    head_shift = _tan_shift(p.head)
    face_center = base + K_FACE * s * head_shift
    inner_center = base + K_HEAD * s * head_shift
    eye_y = inner_center[1] - EYE_DY * s
    eye_left = np.array([inner_center[0] - traits.eye_dx * s, eye_y])
    eye_right = np.array([inner_center[0] + traits.eye_dx * s, eye_y])
    gaze_offset = K_GAZE * s * (_tan_shift(p.gaze) - head_shift)
    theta_h, phi_h = p.head
    return {
        "traits": traits,
        "face_center": face_center,
        "face_ax": traits.face_ax * (0.78 + 0.22 * math.cos(phi_h)) * s,
        "face_ay": traits.face_ay * (0.88 + 0.12 * math.cos(theta_h)) * s,
        "eye_centers": np.stack([eye_left, eye_right]),
        "iris_centers": np.stack([eye_left + gaze_offset, eye_right + gaze_offset]),
        "r_eye": R_EYE * s,
        "r_iris": R_IRIS * s,
        "nose_center": inner_center + np.array([0.0, 0.06 * s]),
        "nose_r": traits.nose_r * s,
        "mouth_center": inner_center + np.array([0.0, MOUTH_DY * s]),
        "mouth_ax": traits.mouth_w * s,
        "mouth_ay": 0.032 * s,
    }


def _ellipse_mask(xx, yy, center, ax, ay):
    return ((xx - center[0]) / ax) ** 2 + ((yy - center[1]) / ay) ** 2 <= 1.0


def render(p: SceneParams, size: int) -> np.ndarray:
    """Render a scene to an H x W x 3 uint8 image.  Pure and deterministic."""
    if size < 32 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 32, got {size}")
    geo = scene_geometry(p, size)
    ss = _SUPERSAMPLE
    n = size * ss
    # Pixel-center coordinates of the supersampled grid, in final-pixel units.
    coords = (np.arange(n) + 0.5) / ss
    xx, yy = np.meshgrid(coords, coords)

    img = np.empty((n, n, 3), dtype=np.float64)
    img[:] = BG_COLOR
    img[_ellipse_mask(xx, yy, geo["face_center"], geo["face_ax"], geo["face_ay"])] = geo[
        "traits"
    ].skin
    for eye in geo["eye_centers"]:
        img[_ellipse_mask(xx, yy, eye, geo["r_eye"], geo["r_eye"])] = WHITE_COLOR
    for iris in geo["iris_centers"]:
        img[_ellipse_mask(xx, yy, iris, geo["r_iris"], geo["r_iris"])] = IRIS_COLOR
    img[_ellipse_mask(xx, yy, geo["nose_center"], geo["nose_r"], geo["nose_r"])] = (
        geo["traits"].skin * 0.78
    )
    img[_ellipse_mask(xx, yy, geo["mouth_center"], geo["mouth_ax"], geo["mouth_ay"])] = MOUTH_COLOR

    img *= 1.0 + BRIGHTNESS_GAIN * p.brightness
    img[..., 0] *= 1.0 + HUE_GAIN * p.hue_shift
    img[..., 2] *= 1.0 - HUE_GAIN * p.hue_shift

    # Box-average down to the target size, then blur at final resolution.
    img = img.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
    if p.blur_level > 0:
        sigma = p.blur_level * BLUR_SIGMA * size
        img = gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
    return np.rint(np.clip(img, 0, 255)).astype(np.uint8)


# --------------------------------------------------------------------- readback


@dataclass(frozen=True)
class GeometryReading:
    """Pose recovered from an image, plus the centroids behind it (pixels)."""

    gaze: np.ndarray
    head: np.ndarray
    found: bool
    face_center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    eye_centers: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    iris_centers: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))


def _centroid(weight, xx, yy):
    total = weight.sum()
    if total <= 0:
        return None
    return np.array([(weight * xx).sum() / total, (weight * yy).sum() / total])


_NOT_FOUND = GeometryReading(gaze=np.zeros(2), head=np.zeros(2), found=False)


def _refined_centroid(raw, xx, yy, coarse, radius, floor=0.5):
    """Centroid of `raw` within a window around `coarse`, floored at half the
    local peak.  Level sets of a blurred symmetric blob are concentric, so
    the floor removes faint contamination without biasing the centroid."""
    window = ((xx - coarse[0]) ** 2 + (yy - coarse[1]) ** 2) <= radius * radius
    local_peak = (raw * window).max()
    if local_peak <= 0:
        return None
    w = np.clip(raw - floor * local_peak, 0.0, None) * window
    return _centroid(w, xx, yy)


def read_geometry(image: np.ndarray) -> GeometryReading:
    """Recover gaze and head pose from a rendered image by centroids.

    Inverts the tangent-law geometry of :func:`render`: the face outline
    and the mouth anchor the two head-shifted frames, the iris offsets give
    gaze.  On images without the expected structure (for example untrained
    generator output) this degrades gracefully to ``found=False`` with zero
    angles rather than raising.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
        raise ValueError("expected a square H x W x 3 image")
    s = img.shape[0]
    px = np.arange(s) + 0.5
    xx, yy = np.meshgrid(px, px)

    corners = np.concatenate(
        [
            img[:3, :3].reshape(-1, 3),
            img[:3, -3:].reshape(-1, 3),
            img[-3:, :3].reshape(-1, 3),
            img[-3:, -3:].reshape(-1, 3),
        ]
    )
    bg = corners.mean(axis=0)

    # Face support: anything clearly off-background, soft-edged.
    dist = np.abs(img - bg).max(axis=2)
    face_w = np.clip((dist - 12.0) / 16.0, 0.0, 1.0)
    face_frac = face_w.sum() / (s * s)
    if not (0.10 <= face_frac <= 0.70):
        return _NOT_FOUND
    face_c = _centroid(face_w, xx, yy)

    # Iris support: blue clearly dominating both other channels.
    iris_raw = np.clip(img[..., 2] - np.maximum(img[..., 0], img[..., 1]), 0.0, None)
    if iris_raw.max() < 30.0:
        return _NOT_FOUND
    iris_w = np.clip((iris_raw - 0.35 * iris_raw.max()) / (0.25 * iris_raw.max()), 0.0, 1.0)

    # Mouth support: strong red with very little green.
    mouth_raw = np.clip(img[..., 0] - 2.2 * img[..., 1] - 0.6 * img[..., 2], 0.0, None)
    if mouth_raw.max() < 10.0:
        return _NOT_FOUND
    mouth_c = _refined_centroid(mouth_raw, xx, yy, _centroid(mouth_raw, xx, yy), 0.14 * s)
    if mouth_c is None:
        return _NOT_FOUND

    split_x = _centroid(iris_w, xx, yy)[0]
    iris_centers = []
    for half in (xx < split_x, xx >= split_x):
        w = iris_w * half
        if w.sum() < 0.5:
            return _NOT_FOUND
        iris_c = _refined_centroid(iris_raw * half, xx, yy, _centroid(w, xx, yy), 0.075 * s)
        if iris_c is None:
            return _NOT_FOUND
        iris_centers.append(iris_c)
    iris_centers = np.stack(iris_centers)

    # Plausibility: irises split left/right, mouth sits below the face center.
    if abs(iris_centers[0][0] - iris_centers[1][0]) < 0.12 * s:
        return _NOT_FOUND
    if not (0.08 * s < mouth_c[1] - face_c[1] < 0.35 * s):
        return _NOT_FOUND

    inner_c = mouth_c - np.array([0.0, MOUTH_DY * s])
    k_head = (K_HEAD - K_FACE) * s
    tan_phi_h = (inner_c[0] - face_c[0]) / k_head
    tan_theta_h = -(inner_c[1] - face_c[1]) / k_head

    eyes_mid = inner_c + np.array([0.0, -EYE_DY * s])
    offset = iris_centers.mean(axis=0) - eyes_mid
    tan_phi_g = offset[0] / (K_GAZE * s) + tan_phi_h
    tan_theta_g = tan_theta_h - offset[1] / (K_GAZE * s)

    # Both irises share one gaze offset, so subtracting it recovers the sockets.
    eye_centers = iris_centers - offset

    return GeometryReading(
        gaze=np.array([math.atan(tan_theta_g), math.atan(tan_phi_g)]),
        head=np.array([math.atan(tan_theta_h), math.atan(tan_phi_h)]),
        found=True,
        face_center=face_c,
        eye_centers=eye_centers,
        iris_centers=iris_centers,
    )


# ---------------------------------------------------------------- dataset store


def _round9(x: float) -> float:
    return float(f"{float(x):.9g}")


@dataclass(frozen=True)
class RecordMeta:
    id: int
    person_id: int
    labeled: bool
    gaze: tuple
    head: tuple
    offset: int
    length: int
    # "captured" for rendered frames, "synthetic" for generator output.
    origin: str = "captured"


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    image_size: int
    blob_path: str
    records: tuple
    truth_path: str | None = None

    @property
    def n_records(self) -> int:
        return len(self.records)

    def person_ids(self):
        return sorted({r.person_id for r in self.records})


def draw_scene_params(person_id: int, rng) -> SceneParams:
    """Draw one scene uniformly from the generator's ranges.

    Every scalar is rounded to 9 significant digits at draw time so that
    stored labels, sidecar truth, and in-memory values stay bit-identical.
    """
    return SceneParams(
        person_id=person_id,
        gaze=(
            _round9(rng.uniform(-GAZE_RANGE, GAZE_RANGE)),
            _round9(rng.uniform(-GAZE_RANGE, GAZE_RANGE)),
        ),
        head=(
            _round9(rng.uniform(-HEAD_RANGE, HEAD_RANGE)),
            _round9(rng.uniform(-HEAD_RANGE, HEAD_RANGE)),
        ),
        brightness=_round9(rng.uniform(-1, 1)),
        hue_shift=_round9(rng.uniform(-1, 1)),
        translation=(_round9(rng.uniform(-1, 1)), _round9(rng.uniform(-1, 1))),
        blur_level=_round9(rng.uniform(0, 1)),
    )


def _scene_to_json(p: SceneParams) -> dict:
    return {
        "person_id": p.person_id,
        "gaze": list(p.gaze),
        "head": list(p.head),
        "brightness": p.brightness,
        "hue_shift": p.hue_shift,
        "translation": list(p.translation),
        "blur_level": p.blur_level,
    }


def _scene_from_json(d: dict) -> SceneParams:
    return SceneParams(
        person_id=d["person_id"],
        gaze=tuple(d["gaze"]),
        head=tuple(d["head"]),
        brightness=d["brightness"],
        hue_shift=d["hue_shift"],
        translation=tuple(d["translation"]),
        blur_level=d["blur_level"],
    )


def _spread_counts(total: int, bins: int, rng) -> list:
    """Split `total` into `bins` parts as evenly as possible, remainder random."""
    base, extra = divmod(total, bins)
    counts = [base] * bins
    for idx in rng.choice(bins, size=extra, replace=False):
        counts[idx] += 1
    return counts


def write_manifest(manifest: DatasetManifest, path: str):
    base = os.path.dirname(os.path.abspath(path))
    payload = {
        "version": manifest.version,
        "image_size": manifest.image_size,
        "blob": os.path.relpath(manifest.blob_path, base),
        "truth_sidecar": (
            os.path.relpath(manifest.truth_path, base) if manifest.truth_path else None
        ),
        "records": [
            {
                "id": r.id,
                "person_id": r.person_id,
                "labeled": r.labeled,
                "gaze": [_round9(r.gaze[0]), _round9(r.gaze[1])],
                "head": [_round9(r.head[0]), _round9(r.head[1])],
                "offset": r.offset,
                "length": r.length,
                "origin": r.origin,
            }
            for r in manifest.records
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")


def load_manifest(path: str) -> DatasetManifest:
    with open(path) as f:
        payload = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    records = []
    for entry in payload["records"]:
        records.append(
            RecordMeta(
                id=entry["id"],
                person_id=entry["person_id"],
                labeled=entry["labeled"],
                gaze=tuple(entry["gaze"]),
                head=tuple(entry["head"]),
                offset=entry["offset"],
                length=entry["length"],
                origin=entry.get("origin", "captured"),
            )
        )
    manifest = DatasetManifest(
        version=payload["version"],
        image_size=payload["image_size"],
        blob_path=os.path.normpath(os.path.join(base, payload["blob"])),
        records=tuple(records),
        truth_path=(
            os.path.normpath(os.path.join(base, payload["truth_sidecar"]))
            if payload.get("truth_sidecar")
            else None
        ),
    )
    _validate_manifest(manifest)
    return manifest


def _validate_manifest(manifest: DatasetManifest):
    ids = [r.id for r in manifest.records]
    if ids != list(range(len(ids))):
        raise DataFormatError("record ids must be unique and dense from 0")
    expected = 3 * manifest.image_size**2
    spans = []
    for r in manifest.records:
        if r.length != expected:
            raise DataFormatError(
                f"record {r.id}: length {r.length} does not match image size"
            )
        spans.append((r.offset, r.offset + r.length, r.id))
    spans.sort()
    for (_, end, rid), (start, _, rid2) in zip(spans, spans[1:]):
        if start < end:
            raise DataFormatError(f"records {rid} and {rid2} overlap in the blob")


def generate_dataset(
    out_dir: str,
    n_persons: int = 20,
    frames_per_person: int = 200,
    labeled_fraction: float = 1.0,
    seed: int = 0,
    image_size: int = 64,
    name: str = "dataset",
) -> str:
    """Render a dataset to `out_dir`; returns the manifest path.

    Scene parameters are drawn independently per frame; exactly
    ceil(labeled_fraction * N) records are flagged labeled, spread as
    evenly as possible over persons.
    """
    if n_persons < 2:
        raise ConfigurationError("need at least 2 persons")
    if not (0.0 < labeled_fraction <= 1.0):
        raise ConfigurationError("labeled_fraction must be in (0, 1]")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.RandomState(np.random.SeedSequence([seed, 0xDA7A]).generate_state(1))

    total = n_persons * frames_per_person
    n_labeled = math.ceil(labeled_fraction * total)
    per_person = _spread_counts(n_labeled, n_persons, rng)

    blob_path = os.path.join(out_dir, f"{name}.blob")
    truth_path = os.path.join(out_dir, f"{name}.truth.json")
    manifest_path = os.path.join(out_dir, f"{name}.manifest.json")

    records = []
    truth = {}
    rid = 0
    with open(blob_path, "wb") as blob:
        offset = 0
        for person in range(n_persons):
            flags = np.zeros(frames_per_person, dtype=bool)
            k = min(per_person[person], frames_per_person)
            flags[rng.choice(frames_per_person, size=k, replace=False)] = True
            for frame in range(frames_per_person):
                params = draw_scene_params(person, rng)
                image = render(params, image_size)
                raw = image.tobytes()
                blob.write(raw)
                records.append(
                    RecordMeta(
                        id=rid,
                        person_id=person,
                        labeled=bool(flags[frame]),
                        gaze=params.gaze,
                        head=params.head,
                        offset=offset,
                        length=len(raw),
                    )
                )
                truth[str(rid)] = _scene_to_json(params)
                offset += len(raw)
                rid += 1

    with open(truth_path, "w") as f:
        json.dump(truth, f, indent=1)
        f.write("\n")
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        image_size=image_size,
        blob_path=blob_path,
        records=tuple(records),
        truth_path=truth_path,
    )
    write_manifest(manifest, manifest_path)
    return manifest_path


@dataclass(frozen=True)
class SampleRecord:
    image: np.ndarray
    person_id: int
    gaze: tuple
    head: tuple
    labeled: bool
    truth: SceneParams | None = None


def load_truth(manifest: DatasetManifest) -> dict:
    if manifest.truth_path is None or not os.path.exists(manifest.truth_path):
        return {}
    with open(manifest.truth_path) as f:
        payload = json.load(f)
    return {int(k): _scene_from_json(v) for k, v in payload.items()}


def load_record(manifest: DatasetManifest, record_id: int) -> SampleRecord:
    if not (0 <= record_id < manifest.n_records):
        raise DataFormatError(f"record id {record_id} not in manifest")
    meta = manifest.records[record_id]
    size = os.path.getsize(manifest.blob_path)
    if meta.offset + meta.length > size:
        raise DataFormatError(
            f"record {record_id}: bytes [{meta.offset}, {meta.offset + meta.length})"
            f" exceed blob size {size}"
        )
    with open(manifest.blob_path, "rb") as f:
        f.seek(meta.offset)
        raw = f.read(meta.length)
    if len(raw) != meta.length:
        raise DataFormatError(f"record {record_id}: short read from blob")
    side = manifest.image_size
    image = np.frombuffer(raw, dtype=np.uint8).reshape(side, side, 3)
    truth = load_truth(manifest).get(record_id)
    return SampleRecord(
        image=image,
        person_id=meta.person_id,
        gaze=meta.gaze,
        head=meta.head,
        labeled=meta.labeled,
        truth=truth,
    )


class DatasetReader:
    """Random-access image loading over a manifest, memory-mapped."""

    def __init__(self, manifest):
        if isinstance(manifest, str):
            manifest = load_manifest(manifest)
        self.manifest = manifest
        size = os.path.getsize(manifest.blob_path)
        for r in manifest.records:
            if r.offset + r.length > size:
                raise DataFormatError(
                    f"record {r.id}: bytes [{r.offset}, {r.offset + r.length})"
                    f" exceed blob size {size}"
                )
        self._blob = np.memmap(manifest.blob_path, dtype=np.uint8, mode="r")
        side = manifest.image_size
        self._shape = (side, side, 3)

    def image(self, record_id: int) -> np.ndarray:
        meta = self.manifest.records[record_id]
        raw = self._blob[meta.offset : meta.offset + meta.length]
        return np.array(raw).reshape(self._shape)

    def images(self, ids) -> np.ndarray:
        return np.stack([self.image(i) for i in ids])

    def labels(self, ids):
        gaze = np.array([self.manifest.records[i].gaze for i in ids])
        head = np.array([self.manifest.records[i].head for i in ids])
        return gaze, head


@dataclass(frozen=True)
class PairBatch:
    """Same-person (input, target) image pairs with their stored labels."""

    input_ids: np.ndarray
    target_ids: np.ndarray
    input_images: np.ndarray
    target_images: np.ndarray
    input_gaze: np.ndarray
    input_head: np.ndarray
    target_gaze: np.ndarray
    target_head: np.ndarray
    input_labeled: np.ndarray
    target_labeled: np.ndarray


def sample_pair_batch(
    reader: DatasetReader,
    batch_size: int,
    labeled_input_only: bool = False,
    rng=None,
) -> PairBatch:
    """Draw same-person pairs: input and target differ, share a person.

    With ``labeled_input_only`` the input side is restricted to labeled
    records while the target side may be any other record of the person.
    """
    if rng is None:
        rng = np.random.RandomState(0)
    manifest = reader.manifest
    by_person: dict = {}
    labeled_by_person: dict = {}
    for r in manifest.records:
        by_person.setdefault(r.person_id, []).append(r.id)
        if r.labeled:
            labeled_by_person.setdefault(r.person_id, []).append(r.id)
    for person, ids in by_person.items():
        if len(ids) < 2:
            raise ConfigurationError(f"person {person} has fewer than 2 records")
        if labeled_input_only and not labeled_by_person.get(person):
            raise ConfigurationError(f"person {person} has no labeled records")

    persons = sorted(by_person)
    input_ids = np.empty(batch_size, dtype=np.int64)
    target_ids = np.empty(batch_size, dtype=np.int64)
    for b in range(batch_size):
        person = persons[rng.randint(len(persons))]
        pool = labeled_by_person[person] if labeled_input_only else by_person[person]
        x_i = pool[rng.randint(len(pool))]
        others = by_person[person]
        x_t = x_i
        while x_t == x_i:
            x_t = others[rng.randint(len(others))]
        input_ids[b] = x_i
        target_ids[b] = x_t

    gaze_i, head_i = reader.labels(input_ids)
    gaze_t, head_t = reader.labels(target_ids)
    labeled = np.array([manifest.records[i].labeled for i in input_ids])
    labeled_t = np.array([manifest.records[i].labeled for i in target_ids])
    return PairBatch(
        input_ids=input_ids,
        target_ids=target_ids,
        input_images=reader.images(input_ids),
        target_images=reader.images(target_ids),
        input_gaze=gaze_i,
        input_head=head_i,
        target_gaze=gaze_t,
        target_head=head_t,
        input_labeled=labeled,
        target_labeled=labeled_t,
    )


# ----------------------------------------------------------- derived manifests


def _reindex(records) -> tuple:
    return tuple(replace(r, id=i) for i, r in enumerate(records))


def relabel_manifest(
    manifest: DatasetManifest, n_labeled: int, seed: int, out_path: str
) -> str:
    """Reassign labeled flags so exactly `n_labeled` records are labeled.

    Labels are spread as evenly as possible over persons.  The new manifest
    shares the original blob and truth sidecar.
    """
    if not (1 <= n_labeled <= manifest.n_records):
        raise ConfigurationError(
            f"n_labeled must be in [1, {manifest.n_records}], got {n_labeled}"
        )
    rng = np.random.RandomState(np.random.SeedSequence([seed, 0x1ABE1]).generate_state(1))
    persons = manifest.person_ids()
    counts = dict(zip(persons, _spread_counts(n_labeled, len(persons), rng)))
    by_person: dict = {}
    for r in manifest.records:
        by_person.setdefault(r.person_id, []).append(r.id)
    chosen = set()
    leftover = 0
    for person in persons:
        ids = by_person[person]
        k = counts[person]
        if k > len(ids):
            leftover += k - len(ids)
            k = len(ids)
        chosen.update(rng.choice(ids, size=k, replace=False).tolist())
    remaining = [r.id for r in manifest.records if r.id not in chosen]
    if leftover:
        chosen.update(rng.choice(remaining, size=leftover, replace=False).tolist())
    records = tuple(
        replace(r, labeled=(r.id in chosen)) for r in manifest.records
    )
    out = replace(manifest, records=records)
    write_manifest(out, out_path)
    return out_path


def split_persons(
    manifest: DatasetManifest, holdout_persons: int, seed: int, out_dir: str, name: str
):
    """Split by person into train/test manifests that share the blob."""
    persons = manifest.person_ids()
    if not (0 < holdout_persons < len(persons)):
        raise ConfigurationError("holdout must leave at least one person on each side")
    rng = np.random.RandomState(np.random.SeedSequence([seed, 0x5417]).generate_state(1))
    order = list(persons)
    rng.shuffle(order)
    held = set(order[:holdout_persons])
    train = _reindex([r for r in manifest.records if r.person_id not in held])
    test = _reindex([r for r in manifest.records if r.person_id in held])
    paths = []
    for tag, recs in (("train", train), ("test", test)):
        out = replace(manifest, records=recs)
        path = os.path.join(out_dir, f"{name}.{tag}.manifest.json")
        write_manifest(out, path)
        paths.append(path)
    return tuple(paths)


def append_records(
    reader: DatasetReader,
    images: np.ndarray,
    person_ids,
    gaze,
    head,
    labeled,
    out_dir: str,
    name: str,
) -> str:
    """Write a new dataset = existing records + generated images.

    The new records carry their given gaze/head as stored labels but no
    truth sidecar entries, marking them as model output rather than
    renderer output.
    """
    os.makedirs(out_dir, exist_ok=True)
    side = reader.manifest.image_size
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (side, side, 3):
        raise DataFormatError("appended images must be uint8 and match the dataset size")
    blob_path = os.path.join(out_dir, f"{name}.blob")
    records = []
    with open(blob_path, "wb") as blob:
        offset = 0
        for r in reader.manifest.records:
            raw = reader.image(r.id).tobytes()
            blob.write(raw)
            records.append(replace(r, id=len(records), offset=offset))
            offset += len(raw)
        for k in range(len(images)):
            raw = images[k].tobytes()
            blob.write(raw)
            records.append(
                RecordMeta(
                    id=len(records),
                    person_id=int(person_ids[k]),
                    labeled=bool(labeled[k]),
                    gaze=(_round9(gaze[k][0]), _round9(gaze[k][1])),
                    head=(_round9(head[k][0]), _round9(head[k][1])),
                    offset=offset,
                    length=len(raw),
                    origin="synthetic",
                )
            )
            offset += len(raw)

    truth_path = None
    if reader.manifest.truth_path and os.path.exists(reader.manifest.truth_path):
        truth_path = os.path.join(out_dir, f"{name}.truth.json")
        if os.path.abspath(truth_path) != os.path.abspath(reader.manifest.truth_path):
            with open(reader.manifest.truth_path) as src, open(truth_path, "w") as dst:
                dst.write(src.read())
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        image_size=side,
        blob_path=blob_path,
        records=tuple(records),
        truth_path=truth_path,
    )
    path = os.path.join(out_dir, f"{name}.manifest.json")
    write_manifest(manifest, path)
    return path
