"""
Labeled source datasets, labeled target datasets and paired source/target
renders of the same robot state, plus the binary dataset file format.

Images are stored once per rendered state; samples refer to them by index,
so the actions sampled in one scene share a single image.
"""
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from sim_data.depthscene import (
    IMAGE_SIZE, Camera, DomainModel, RobotState, Scene, SceneConfig,
    apply_domain, render_depth, sample_scene,
)
from utils.config import build_section, dump_flat, group_sections, parse_flat, section_to_flat
from utils.errors import (
    ConfigError, DatasetIOError, FormatMismatchError, LabelMismatchError,
    TruncatedFileError, VersionMismatchError,
)
from utils.seeding import spawn_seeds

logger = logging.getLogger(__name__)

FORMAT_MAGIC = b"PSDS"
FORMAT_VERSION = 1

SOURCE = 0
TARGET = 1

SAMPLE_DTYPE = np.dtype([
    ("image", "<i8"),
    ("action", "<f8", (2,)),
    ("label", "<f8"),
    ("domain", "u1"),
    ("clutter", "u1"),
    ("category", "<f8"),
    ("hand", "<f8", (3,)),
    ("goal", "<f8", (3,)),
])
PAIR_DTYPE = np.dtype([
    ("source", "<i8"),
    ("target", "<i8"),
    ("action", "<f8", (2,)),
])


class Sample(NamedTuple):
    image: np.ndarray
    action: np.ndarray
    label: float
    domain: int
    clutter: bool
    category: float


class PairedTriple(NamedTuple):
    image_source: np.ndarray
    image_target: np.ndarray
    action: np.ndarray


@dataclass(frozen=True)
class DatasetConfig:
    scenes: int = 2000
    actions_per_scene: int = 16
    action_bound: float = 0.03
    pairs: int = 726
    source_clutter: bool = True
    target_clutter: bool = False
    state_jitter: float = 0.0
    test_scenes: int = 200
    test_actions_per_scene: int = 8
    workers: int = 1

    def __post_init__(self):
        if min(self.scenes, self.actions_per_scene, self.pairs, self.test_scenes, self.test_actions_per_scene) < 0:
            raise ValueError("dataset counts must be >= 0")
        if not self.action_bound > 0:
            raise ValueError(f"action_bound must be > 0, got {self.action_bound}")
        if self.state_jitter < 0:
            raise ValueError("state_jitter must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class GenerationConfig:
    """Everything needed to regenerate a dataset bit for bit (with a seed)."""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: Camera = field(default_factory=Camera)
    source_domain: DomainModel = field(default_factory=DomainModel)
    target_domain: DomainModel = field(default_factory=DomainModel.default_target)

    SECTIONS = ("dataset", "scene", "camera", "source_domain", "target_domain")

    def to_flat(self) -> dict:
        flat = {}
        for section in self.SECTIONS:
            flat.update(section_to_flat(getattr(self, section), section))
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "GenerationConfig":
        sections = group_sections(flat)
        kinds = {
            "dataset": DatasetConfig, "scene": SceneConfig, "camera": Camera,
            "source_domain": DomainModel, "target_domain": DomainModel,
        }
        kwargs = {name: build_section(kinds[name], sections.get(name, {}), name) for name in cls.SECTIONS}
        return cls(**kwargs)


@dataclass
class Dataset:
    images: np.ndarray
    image_index: np.ndarray
    actions: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    clutter: np.ndarray
    categories: np.ndarray
    hands: np.ndarray
    goals: np.ndarray
    pair_source: np.ndarray
    pair_target: np.ndarray
    pair_actions: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def num_pairs(self) -> int:
        return len(self.pair_actions)

    def sample(self, i: int) -> Sample:
        return Sample(
            image=self.images[self.image_index[i]],
            action=self.actions[i],
            label=float(self.labels[i]),
            domain=int(self.domains[i]),
            clutter=bool(self.clutter[i]),
            category=float(self.categories[i]),
        )

    def pair(self, i: int) -> PairedTriple:
        return PairedTriple(
            image_source=self.images[self.pair_source[i]],
            image_target=self.images[self.pair_target[i]],
            action=self.pair_actions[i],
        )

    def sample_images(self, rows) -> np.ndarray:
        return self.images[self.image_index[rows]]

    def pair_source_images(self, rows) -> np.ndarray:
        return self.images[self.pair_source[rows]]

    def pair_target_images(self, rows) -> np.ndarray:
        return self.images[self.pair_target[rows]]

    def equals(self, other: "Dataset") -> bool:
        arrays = ("images", "image_index", "actions", "labels", "domains", "clutter", "categories",
                  "hands", "goals", "pair_source", "pair_target", "pair_actions")
        for name in arrays:
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return self.manifest == other.manifest

    @classmethod
    def empty(cls, manifest=None) -> "Dataset":
        return cls(
            images=np.zeros((0, IMAGE_SIZE, IMAGE_SIZE)),
            image_index=np.zeros(0, dtype=np.int64),
            actions=np.zeros((0, 2)),
            labels=np.zeros(0),
            domains=np.zeros(0, dtype=np.uint8),
            clutter=np.zeros(0, dtype=bool),
            categories=np.zeros(0),
            hands=np.zeros((0, 3)),
            goals=np.zeros((0, 3)),
            pair_source=np.zeros(0, dtype=np.int64),
            pair_target=np.zeros(0, dtype=np.int64),
            pair_actions=np.zeros((0, 2)),
            manifest=dict(manifest or {}),
        )


# Planar distance between the displaced hand and the bottle opening
def distance_to_goal(state: RobotState, action, scene: Scene):
    action = np.asarray(action, dtype=np.float64)
    hand, goal = state.hand_position, scene.opening_position
    dist = np.hypot(hand.x + action[..., 0] - goal.x, hand.y + action[..., 1] - goal.y)
    return float(dist) if dist.ndim == 0 else dist


def _planar_labels(hands, goals, actions):
    return np.hypot(hands[:, 0] + actions[:, 0] - goals[:, 0], hands[:, 1] + actions[:, 1] - goals[:, 1])


def _map_jobs(job, seeds, workers: int):
    # Results come back in index order whatever the worker count
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(job, seeds))
    return [job(s) for s in seeds]


def _manifest(kind: str, seed: int, config: GenerationConfig) -> dict:
    manifest = {"manifest.kind": kind, "manifest.seed": str(int(seed))}
    manifest.update(config.to_flat())
    return manifest


def _assemble(records, manifest) -> Dataset:
    # records: list of (images, image_rows, actions, labels, domain, clutter, category, hand, goal)
    if not records:
        return Dataset.empty(manifest)
    images, image_index, actions, labels, domains, clutter, categories, hands, goals = ([] for _ in range(9))
    pair_source, pair_target, pair_actions = [], [], []
    offset = 0
    for rec in records:
        n = len(rec["labels"])
        images.append(rec["images"])
        image_index.append(rec["image_rows"] + offset)
        actions.append(rec["actions"])
        labels.append(rec["labels"])
        domains.append(np.full(n, rec["domain"], dtype=np.uint8))
        clutter.append(np.full(n, rec["clutter"], dtype=bool))
        categories.append(np.full(n, rec["category"]))
        hands.append(np.tile(rec["hand"], (n, 1)))
        goals.append(np.tile(rec["goal"], (n, 1)))
        if "pair" in rec:
            pair_source.append(rec["pair"][0] + offset)
            pair_target.append(rec["pair"][1] + offset)
            pair_actions.append(rec["actions"][0])
        offset += len(rec["images"])

    has_pairs = bool(pair_actions)
    return Dataset(
        images=np.concatenate(images),
        image_index=np.concatenate(image_index).astype(np.int64),
        actions=np.concatenate(actions),
        labels=np.concatenate(labels),
        domains=np.concatenate(domains),
        clutter=np.concatenate(clutter),
        categories=np.concatenate(categories),
        hands=np.concatenate(hands),
        goals=np.concatenate(goals),
        pair_source=np.asarray(pair_source, dtype=np.int64),
        pair_target=np.asarray(pair_target, dtype=np.int64),
        pair_actions=np.asarray(pair_actions).reshape(-1, 2) if has_pairs else np.zeros((0, 2)),
        manifest=manifest,
    )


def _labeled_scene_job(config: GenerationConfig, domain_model: DomainModel, domain: int, actions_per_scene: int):
    def job(seed_seq):
        rng = np.random.default_rng(seed_seq)
        scene, state = sample_scene(config.scene, rng)
        image = apply_domain(render_depth(scene, state, config.camera), domain_model, rng)
        bound = config.dataset.action_bound
        actions = rng.uniform(-bound, bound, size=(actions_per_scene, 2))
        return {
            "images": image[None],
            "image_rows": np.zeros(actions_per_scene, dtype=np.int64),
            "actions": actions,
            "labels": distance_to_goal(state, actions, scene),
            "domain": domain,
            "clutter": scene.with_clutter,
            "category": scene.category,
            "hand": state.hand_position.as_array(),
            "goal": scene.opening_position.as_array(),
        }
    return job


def generate_source_dataset(config: GenerationConfig, seed: int) -> Dataset:
    """
    Labeled source-domain dataset.

    scenes x actions_per_scene samples: each scene is rendered once through
    the source DomainModel and labeled for actions drawn uniformly within
    +/- action_bound. Deterministic per seed and independent of workers.
    """
    ds = config.dataset
    seeds = spawn_seeds(seed, ds.scenes)
    job = _labeled_scene_job(config, config.source_domain, SOURCE, ds.actions_per_scene)
    dataset = _assemble(_map_jobs(job, seeds, ds.workers), _manifest("source", seed, config))
    logger.info("Generated source dataset: %d scenes, %d samples", ds.scenes, len(dataset))
    return dataset


def generate_target_dataset(config: GenerationConfig, seed: int) -> Dataset:
    """Labeled target-domain test set (scene clutter as configured, usually with clutter)."""
    ds = config.dataset
    seeds = spawn_seeds(seed, ds.test_scenes)
    job = _labeled_scene_job(config, config.target_domain, TARGET, ds.test_actions_per_scene)
    dataset = _assemble(_map_jobs(job, seeds, ds.workers), _manifest("test", seed, config))
    logger.info("Generated target test dataset: %d scenes, %d samples", ds.test_scenes, len(dataset))
    return dataset


def generate_paired_dataset(config: GenerationConfig, seed: int) -> Dataset:
    """
    Paired dataset: labeled target samples plus source/target image pairs.

    For each of `pairs` robot states, one source render and one target
    render of the same state (clutter per source_clutter / target_clutter)
    and one action. Sample i is the labeled target row of pair i.
    """
    ds = config.dataset

    def job(seed_seq):
        rng = np.random.default_rng(seed_seq)
        scene, state = sample_scene(config.scene, rng)
        source_scene = scene if ds.source_clutter else scene.without_clutter()
        target_scene = scene if ds.target_clutter else scene.without_clutter()
        target_state = state
        if ds.state_jitter > 0:
            jitter = rng.normal(0.0, ds.state_jitter, size=2)
            target_state = state.moved(float(jitter[0]), float(jitter[1]))

        image_source = apply_domain(render_depth(source_scene, state, config.camera), config.source_domain, rng)
        image_target = apply_domain(render_depth(target_scene, target_state, config.camera), config.target_domain, rng)
        action = rng.uniform(-ds.action_bound, ds.action_bound, size=(1, 2))
        return {
            "images": np.stack([image_source, image_target]),
            "image_rows": np.ones(1, dtype=np.int64),
            "actions": action,
            "labels": distance_to_goal(state, action, scene),
            "domain": TARGET,
            "clutter": target_scene.with_clutter,
            "category": scene.category,
            "hand": state.hand_position.as_array(),
            "goal": scene.opening_position.as_array(),
            "pair": (0, 1),
        }

    seeds = spawn_seeds(seed, ds.pairs)
    dataset = _assemble(_map_jobs(job, seeds, ds.workers), _manifest("paired", seed, config))
    logger.info(
        "Generated paired dataset: %d pairs (source clutter=%s, target clutter=%s)",
        dataset.num_pairs, ds.source_clutter, ds.target_clutter,
    )
    return dataset


GENERATORS = {
    "source": generate_source_dataset,
    "paired": generate_paired_dataset,
    "test": generate_target_dataset,
}


def regenerate(manifest: dict) -> Dataset:
    """Rebuild a dataset from its manifest alone."""
    flat = {k: v for k, v in manifest.items() if not k.startswith("manifest.")}
    config = GenerationConfig.from_flat(flat)
    kind = manifest["manifest.kind"]
    return GENERATORS[kind](config, int(manifest["manifest.seed"]))


# ---------------------------------------------------------------------------
# Binary file format
#   magic "PSDS" | u16 version | u32 manifest length | manifest (UTF-8 text)
#   u64 images | u64 samples | u64 pairs | u16 image size
#   images (<f8) | sample records | pair records      (all little-endian)
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHI")
_COUNTS = struct.Struct("<QQQH")


def dataset_to_bytes(dataset: Dataset) -> bytes:
    manifest = dump_flat(dataset.manifest).encode("utf-8")
    samples = np.zeros(len(dataset), dtype=SAMPLE_DTYPE)
    samples["image"] = dataset.image_index
    samples["action"] = dataset.actions
    samples["label"] = dataset.labels
    samples["domain"] = dataset.domains
    samples["clutter"] = dataset.clutter
    samples["category"] = dataset.categories
    samples["hand"] = dataset.hands
    samples["goal"] = dataset.goals
    pairs = np.zeros(dataset.num_pairs, dtype=PAIR_DTYPE)
    pairs["source"] = dataset.pair_source
    pairs["target"] = dataset.pair_target
    pairs["action"] = dataset.pair_actions
    size = dataset.images.shape[1] if dataset.images.ndim == 3 else IMAGE_SIZE

    return b"".join([
        _HEADER.pack(FORMAT_MAGIC, FORMAT_VERSION, len(manifest)),
        manifest,
        _COUNTS.pack(len(dataset.images), len(dataset), dataset.num_pairs, size),
        np.ascontiguousarray(dataset.images, dtype="<f8").tobytes(),
        samples.tobytes(),
        pairs.tobytes(),
    ])


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, nbytes: int, what: str) -> bytes:
        end = self.pos + nbytes
        if end > len(self.buf):
            raise TruncatedFileError(f"truncated file: expected {nbytes} bytes of {what} at offset {self.pos}, "
                                     f"only {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk


def _parse_manifest(raw: bytes) -> dict:
    try:
        return parse_flat(raw.decode("utf-8"), source="<manifest>")
    except (UnicodeDecodeError, ConfigError) as e:
        raise FormatMismatchError(f"format mismatch: unreadable dataset manifest ({e})") from e


def dataset_from_bytes(buf: bytes, check_labels: bool = True) -> Dataset:
    reader = _Reader(buf)
    if len(buf) < len(FORMAT_MAGIC):
        raise TruncatedFileError(f"truncated file: {len(buf)} bytes, too short for a dataset header")
    magic = buf[:len(FORMAT_MAGIC)]
    if magic != FORMAT_MAGIC:
        raise FormatMismatchError(f"format mismatch: magic {magic!r} is not {FORMAT_MAGIC!r}")
    _, version, manifest_len = _HEADER.unpack(reader.take(_HEADER.size, "header"))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported dataset version {version} (expected {FORMAT_VERSION})")
    manifest = _parse_manifest(reader.take(manifest_len, "manifest"))
    n_images, n_samples, n_pairs, size = _COUNTS.unpack(reader.take(_COUNTS.size, "counts"))

    images = np.frombuffer(reader.take(n_images * size * size * 8, "images"), dtype="<f8")
    samples = np.frombuffer(reader.take(n_samples * SAMPLE_DTYPE.itemsize, "samples"), dtype=SAMPLE_DTYPE)
    pairs = np.frombuffer(reader.take(n_pairs * PAIR_DTYPE.itemsize, "pairs"), dtype=PAIR_DTYPE)
    if reader.pos != len(buf):
        raise FormatMismatchError(f"format mismatch: {len(buf) - reader.pos} trailing bytes after dataset")

    dataset = Dataset(
        images=images.reshape(n_images, size, size).astype(np.float64),
        image_index=samples["image"].astype(np.int64),
        actions=samples["action"].astype(np.float64).reshape(-1, 2),
        labels=samples["label"].astype(np.float64),
        domains=samples["domain"].astype(np.uint8),
        clutter=samples["clutter"].astype(bool),
        categories=samples["category"].astype(np.float64),
        hands=samples["hand"].astype(np.float64).reshape(-1, 3),
        goals=samples["goal"].astype(np.float64).reshape(-1, 3),
        pair_source=pairs["source"].astype(np.int64),
        pair_target=pairs["target"].astype(np.int64),
        pair_actions=pairs["action"].astype(np.float64).reshape(-1, 2),
        manifest=manifest,
    )
    if check_labels and len(dataset):
        expected = _planar_labels(dataset.hands, dataset.goals, dataset.actions)
        if not np.array_equal(expected, dataset.labels):
            bad = int(np.flatnonzero(expected != dataset.labels)[0])
            raise LabelMismatchError(f"label of sample {bad} does not match the planar distance oracle")
    return dataset


def save(dataset: Dataset, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(dataset_to_bytes(dataset))
    except OSError as e:
        raise DatasetIOError(f"cannot write dataset {path}: {e}") from e
    logger.info("Saved %d samples / %d pairs to %s", len(dataset), dataset.num_pairs, path)


def load(path, check_labels: bool = True) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read dataset {path}: {e}") from e
    return dataset_from_bytes(buf, check_labels=check_labels)
