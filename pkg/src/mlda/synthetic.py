"""Synthetic clean/foggy detection scenes.

Source scenes are clean renderings of disks, squares and bars on a textured
background. Target scenes are rendered the same way and then fogged. Every
scene is a pure function of its seed, so datasets can be regenerated
byte-for-byte.
"""
from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SIZE = 64
CHANNELS = 3
CLASS_NAMES = ("disk", "square", "bar")
NUM_CLASSES = len(CLASS_NAMES)
SOURCE, TARGET = 0, 1
FOG_COLOR = 0.8
MIN_BOX = 6.0
COORD_GRID = 64
SPLITS = ("source_train", "target_train", "source_val", "target_val")


@dataclass(frozen=True)
class BoxAnnotation:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class Scene:
    image: np.ndarray  # 3×64×64 float32 in [0, 1]
    annotations: list[BoxAnnotation] | None
    domain: int
    scene_id: int

    def boxes(self) -> np.ndarray:
        if self.annotations is None:
            raise AnnotationLeakError(f"scene {self.scene_id} was loaded without annotations")
        return np.array([a.box for a in self.annotations], dtype=np.float64).reshape(-1, 4)

    def labels(self) -> np.ndarray:
        if self.annotations is None:
            raise AnnotationLeakError(f"scene {self.scene_id} was loaded without annotations")
        return np.array([a.class_id for a in self.annotations], dtype=np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.domain == other.domain and self.scene_id == other.scene_id
                and self.annotations == other.annotations
                and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image))


class AnnotationLeakError(RuntimeError):
    """Target-domain labels reached a code path that must not see them."""


# --------------------------------------------------------------------------
# rendering

def _overlap_ok(box, placed, max_frac=0.1) -> bool:
    x1, y1, x2, y2 = box
    area = (x2 - x1) * (y2 - y1)
    for bx1, by1, bx2, by2 in placed:
        iw = min(x2, bx2) - max(x1, bx1)
        ih = min(y2, by2) - max(y1, by1)
        if iw > 0 and ih > 0:
            inter = iw * ih
            if inter > max_frac * min(area, (bx2 - bx1) * (by2 - by1)):
                return False
    return True


def _quantize(v: float) -> float:
    # dyadic grid keeps W - x exact, so flipping twice is bit-exact
    return float(np.floor(v * COORD_GRID) / COORD_GRID)


def _sample_shape(rng: np.random.Generator, cls: int, scale: float) -> tuple[float, float]:
    if cls == 2:
        long_side = rng.uniform(20, 32) * scale
        short_side = max(rng.uniform(8, 11) * scale, MIN_BOX)
        return (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
    side = max(rng.uniform(16, 28) * scale, MIN_BOX)
    return side, side


def _paint(image: np.ndarray, cls: int, box, color) -> None:
    x1, y1, x2, y2 = box
    ys = np.arange(IMAGE_SIZE) + 0.5
    xs = np.arange(IMAGE_SIZE) + 0.5
    if cls == 0:
        cx, cy, r = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2
        mask = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 <= r * r
    else:
        mask = ((xs[None, :] >= x1) & (xs[None, :] < x2)) & ((ys[:, None] >= y1) & (ys[:, None] < y2))
    image[:, mask] = np.asarray(color, dtype=image.dtype)[:, None]


def render_clean(seed: int, num_objects: int) -> tuple[np.ndarray, list[BoxAnnotation]]:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.05, 0.4, size=3)
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    ramp = (np.linspace(-1, 1, IMAGE_SIZE)[None, :] * gx + np.linspace(-1, 1, IMAGE_SIZE)[:, None] * gy)
    image = base[:, None, None] + ramp[None] + rng.normal(0, 0.03, size=(3, IMAGE_SIZE, IMAGE_SIZE))

    annotations: list[BoxAnnotation] = []
    placed: list[tuple[float, float, float, float]] = []
    for _ in range(num_objects):
        cls = int(rng.integers(NUM_CLASSES))
        scale = 1.0
        for attempt in range(400):
            if attempt and attempt % 100 == 0:
                scale *= 0.8
            w, h = (_quantize(v) for v in _sample_shape(rng, cls, scale))
            x1 = _quantize(rng.uniform(0, IMAGE_SIZE - w))
            y1 = _quantize(rng.uniform(0, IMAGE_SIZE - h))
            box = (float(x1), float(y1), float(x1 + w), float(y1 + h))
            if _overlap_ok(box, placed):
                break
        else:
            raise RuntimeError(f"could not place {num_objects} objects for seed {seed}")
        color = rng.uniform(0.55, 1.0, size=3)
        _paint(image, cls, box, color)
        placed.append(box)
        annotations.append(BoxAnnotation(*box, class_id=cls))
    return np.clip(image, 0, 1).astype(np.float32), annotations


def apply_fog(image: np.ndarray, intensity: float, noise_seed: int, noise_scale: float = 0.05) -> np.ndarray:
    """Blend toward uniform gray 0.8 and add seeded gaussian noise of sd ``noise_scale*intensity``."""
    if not 0 <= intensity <= 1:
        raise ValueError(f"fog intensity must lie in [0, 1], got {intensity}")
    if intensity == 0:
        return image.copy()
    rng = np.random.default_rng(noise_seed)
    noise = rng.normal(0.0, 1.0, size=image.shape) * (noise_scale * intensity)
    out = (1 - intensity) * image.astype(np.float64) + intensity * FOG_COLOR + noise
    return np.clip(out, 0, 1).astype(image.dtype)


def generate_scene(seed: int, domain: int, num_objects: int, fog_intensity: float = 0.6,
                   scene_id: int = 0) -> Scene:
    if not 1 <= num_objects <= 5:
        raise ValueError(f"num_objects must lie in [1, 5], got {num_objects}")
    if domain not in (SOURCE, TARGET):
        raise ValueError(f"domain must be 0 or 1, got {domain}")
    image, annotations = render_clean(seed, num_objects)
    if domain == TARGET:
        noise_seed = int(np.random.SeedSequence([seed, 0xF06]).generate_state(1)[0])
        image = apply_fog(image, fog_intensity, noise_seed)
    return Scene(image=image, annotations=annotations, domain=domain, scene_id=scene_id)


def horizontal_flip(scene: Scene) -> Scene:
    anns = scene.annotations
    if anns is not None:
        anns = [BoxAnnotation(IMAGE_SIZE - a.x2, a.y1, IMAGE_SIZE - a.x1, a.y2, a.class_id) for a in anns]
    return replace(scene, image=np.ascontiguousarray(scene.image[:, :, ::-1]), annotations=anns)


# --------------------------------------------------------------------------
# on-disk format

def scene_to_json(scene: Scene) -> str:
    payload = base64.b64encode(np.ascontiguousarray(scene.image, dtype="<f4").tobytes()).decode("ascii")
    doc = {
        "scene_id": scene.scene_id,
        "domain": scene.domain,
        "shape": list(scene.image.shape),
        "image": payload,
        "annotations": [
            {"x1": a.x1, "y1": a.y1, "x2": a.x2, "y2": a.y2, "class_id": a.class_id}
            for a in (scene.annotations or [])
        ],
    }
    return json.dumps(doc, sort_keys=True)


def scene_from_json(text: str, with_annotations: bool = True) -> Scene:
    doc = json.loads(text)
    shape = tuple(doc["shape"])
    image = np.frombuffer(base64.b64decode(doc["image"]), dtype="<f4").reshape(shape).astype(np.float32)
    anns = None
    if with_annotations:
        anns = [BoxAnnotation(float(a["x1"]), float(a["y1"]), float(a["x2"]), float(a["y2"]), int(a["class_id"]))
                for a in doc["annotations"]]
    return Scene(image=image, annotations=anns, domain=int(doc["domain"]), scene_id=int(doc["scene_id"]))


def load_scene(path: str | Path, with_annotations: bool = True) -> Scene:
    return scene_from_json(Path(path).read_text(), with_annotations=with_annotations)


@dataclass
class DatasetConfig:
    seed: int = 0
    source_train: int = 400
    target_train: int = 400
    source_val: int = 100
    target_val: int = 100
    min_objects: int = 1
    max_objects: int = 3
    fog_intensity: float = 0.6

    def counts(self) -> dict[str, int]:
        return {s: getattr(self, s) for s in SPLITS}


def scene_seed(master_seed: int, scene_id: int) -> int:
    state = np.random.SeedSequence([master_seed, scene_id]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def build_split_scene(config: DatasetConfig, split: str, scene_id: int) -> Scene:
    seed = scene_seed(config.seed, scene_id)
    count_rng = np.random.default_rng([seed, 1])
    n = int(count_rng.integers(config.min_objects, config.max_objects + 1))
    domain = TARGET if split.startswith("target") else SOURCE
    return generate_scene(seed, domain, n, config.fog_intensity, scene_id=scene_id)


def make_dataset(config: DatasetConfig, out_dir: str | Path) -> Path:
    """Render all four splits to ``out_dir`` and write ``manifest.json``."""
    counts = config.counts()
    bad = [k for k, v in counts.items() if v <= 0]
    if bad:
        raise ValueError(f"split counts must be > 0: {', '.join(bad)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits: dict[str, list[str]] = {}
    scene_id = 0
    for split in SPLITS:
        (out / split).mkdir(exist_ok=True)
        files = []
        for _ in range(counts[split]):
            scene = build_split_scene(config, split, scene_id)
            rel = f"{split}/scene_{scene_id:06d}.json"
            (out / rel).write_text(scene_to_json(scene))
            files.append(rel)
            scene_id += 1
        splits[split] = files
    manifest = {"master_seed": config.seed, "config": config.__dict__, "splits": splits}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    log.info("wrote %d scenes to %s", scene_id, out)
    return out / "manifest.json"


@dataclass
class Dataset:
    root: Path
    manifest: dict = field(repr=False)

    @classmethod
    def open(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.json under {root}")
        manifest = json.loads(path.read_text())
        for split in SPLITS:
            if split not in manifest.get("splits", {}):
                raise ValueError(f"manifest {path} lacks split {split!r}")
        return cls(root, manifest)

    @property
    def fog_intensity(self) -> float:
        return float(self.manifest["config"]["fog_intensity"])

    def files(self, split: str) -> list[Path]:
        if split not in self.manifest["splits"]:
            raise KeyError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [self.root / f for f in self.manifest["splits"][split]]

    def load(self, split: str) -> list[Scene]:
        """Labeled scenes for evaluation."""
        return [load_scene(p) for p in self.files(split)]

    def load_for_training(self, split: str) -> list[Scene]:
        """Scenes for the training loop; target-domain labels are never read."""
        labeled = split.startswith("source")
        return [load_scene(p, with_annotations=labeled) for p in self.files(split)]

    def validate_quick(self) -> list[str]:
        """Existence check for every referenced file."""
        return [f"missing {p}" for split in SPLITS for p in self.files(split) if not p.is_file()]

    def validate(self) -> list[str]:
        """Every referenced file exists and parses; returns a list of problems."""
        problems = []
        for split in SPLITS:
            for p in self.files(split):
                if not p.is_file():
                    problems.append(f"missing {p}")
                    continue
                try:
                    s = load_scene(p)
                except Exception as e:  # noqa: BLE001
                    problems.append(f"{p}: {e}")
                    continue
                if s.domain != (TARGET if split.startswith("target") else SOURCE):
                    problems.append(f"{p}: domain {s.domain} in split {split}")
        return problems
