"""Synthetic dual-polarization SAR-like scenes with seasonal/regional shift.

A scene is a pair of co-registered backscatter rasters (HH and HV, in dB)
plus a per-pixel ice-type label map. Scenes are generated from a Voronoi
partition of the image: each cell draws an ice class from a per-(season,
region) categorical prior, pixels get the class's mean backscatter plus a
domain-wide offset, a smooth correlated texture field, and multiplicative
Gamma speckle applied in linear intensity. Season and region therefore shift
both the label marginal and the backscatter distribution, which is what the
transfer experiments exercise.

One file per scene (.npz), one JSON manifest per dataset. Normalization
statistics are computed from the training split only and stored in the
manifest so every consumer normalizes identically.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .errors import ConfigError, SceneFormatError
from .metrics import IGNORE_INDEX

CLASS_NAMES = [
    "open_water",
    "new_ice",
    "young_ice",
    "thin_first_year_ice",
    "thick_first_year_ice",
    "old_ice",
]
NUM_CLASSES = len(CLASS_NAMES)

SEASONS = ["spring", "summer", "fall", "winter"]
REGIONS = ["east", "west", "canadian_arctic", "north"]

CHANNEL_MODES = ("two_channel", "three_channel")
SPLITS = ("train", "val", "test")

SCENE_FORMAT_VERSION = 1


def domain_key(season: str, region: str) -> str:
    return f"{season}/{region}"


def scene_seed(global_seed: int, scene_id: str) -> np.random.SeedSequence:
    """Stable per-scene seed: global seed + a platform-independent id hash."""
    digest = zlib.crc32(scene_id.encode("utf-8"))
    return np.random.SeedSequence([int(global_seed), digest])


# ---------------------------------------------------------------------------
# scene container


@dataclass
class Scene:
    scene_id: str
    season: str
    region: str
    hh: np.ndarray  # (H, W) float32, dB
    hv: np.ndarray  # (H, W) float32, dB
    labels: np.ndarray  # (H, W) uint8, class ids or 255

    def validate(self, class_count: int = NUM_CLASSES) -> None:
        if self.season not in SEASONS:
            raise SceneFormatError(f"unknown season {self.season!r}")
        if self.region not in REGIONS:
            raise SceneFormatError(f"unknown region {self.region!r}")
        for name in ("hh", "hv"):
            arr = getattr(self, name)
            if arr.ndim != 2:
                raise SceneFormatError(f"{name} must be 2-D, got shape {arr.shape}")
            if arr.dtype != np.float32:
                raise SceneFormatError(f"{name} must be float32, got {arr.dtype}")
            if not np.isfinite(arr).all():
                raise SceneFormatError(f"{name} contains non-finite values")
        if self.hh.shape != self.hv.shape or self.hh.shape != self.labels.shape:
            raise SceneFormatError(
                f"channel/label shapes differ: hh {self.hh.shape}, "
                f"hv {self.hv.shape}, labels {self.labels.shape}"
            )
        if self.labels.dtype != np.uint8:
            raise SceneFormatError(f"labels must be uint8, got {self.labels.dtype}")
        bad = (self.labels >= class_count) & (self.labels != IGNORE_INDEX)
        if bad.any():
            raise SceneFormatError(
                f"labels contain value {int(self.labels[bad][0])} outside "
                f"[0, {class_count}) and != {IGNORE_INDEX}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.hh.shape


def save_scene(scene: Scene, path: str | Path) -> None:
    scene.validate()
    meta = {
        "format_version": SCENE_FORMAT_VERSION,
        "scene_id": scene.scene_id,
        "season": scene.season,
        "region": scene.region,
        "height": int(scene.hh.shape[0]),
        "width": int(scene.hh.shape[1]),
    }
    np.savez(
        path,
        hh=scene.hh,
        hv=scene.hv,
        labels=scene.labels,
        meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
    )


def load_scene(path: str | Path, class_count: int = NUM_CLASSES) -> Scene:
    path = Path(path)
    if not path.exists():
        raise SceneFormatError(f"scene file not found: {path}")
    try:
        with np.load(path) as data:
            missing = {"hh", "hv", "labels", "meta"} - set(data.files)
            if missing:
                raise SceneFormatError(
                    f"{path}: missing arrays {sorted(missing)}"
                )
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            scene = Scene(
                scene_id=meta["scene_id"],
                season=meta["season"],
                region=meta["region"],
                hh=data["hh"],
                hv=data["hv"],
                labels=data["labels"],
            )
    except SceneFormatError:
        raise
    except Exception as exc:  # zip/json damage surfaces as a format error
        raise SceneFormatError(f"{path}: unreadable scene file ({exc})") from exc
    if (meta.get("height"), meta.get("width")) != scene.hh.shape:
        raise SceneFormatError(
            f"{path}: metadata size {meta.get('height')}x{meta.get('width')} "
            f"does not match raster shape {scene.hh.shape}"
        )
    scene.validate(class_count)
    return scene


# ---------------------------------------------------------------------------
# manifest


@dataclass
class SceneRef:
    scene_id: str
    season: str
    region: str
    path: str  # relative to the manifest directory


@dataclass
class DatasetManifest:
    class_count: int
    patch_size: int
    scenes: list[SceneRef]
    splits: dict[str, list[str]]  # split name -> scene ids
    channel_stats: dict[str, list[float]]  # "hh"/"hv"/"ratio" -> [mean, std]
    root: Path | None = None  # directory holding the scene files; set on load

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ConfigError("manifest contains duplicate scene ids")
        known = set(ids)
        seen: set[str] = set()
        for split, members in self.splits.items():
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r}")
            for sid in members:
                if sid not in known:
                    raise ConfigError(f"split {split!r} references unknown scene {sid!r}")
                if sid in seen:
                    raise ConfigError(f"scene {sid!r} assigned to more than one split")
                seen.add(sid)
        for key in ("hh", "hv", "ratio"):
            if key not in self.channel_stats:
                raise ConfigError(f"channel_stats missing {key!r}")
            mean, std = self.channel_stats[key]
            if not np.isfinite([mean, std]).all() or std <= 0:
                raise ConfigError(f"channel_stats[{key!r}] has invalid mean/std {mean}/{std}")

    def scene_ref(self, scene_id: str) -> SceneRef:
        for ref in self.scenes:
            if ref.scene_id == scene_id:
                return ref
        raise ConfigError(f"unknown scene id {scene_id!r}")

    def scene_path(self, scene_id: str) -> Path:
        ref = self.scene_ref(scene_id)
        base = self.root if self.root is not None else Path(".")
        return base / ref.path

    def split_ids(self, split: str, season: str | None = None, region: str | None = None) -> list[str]:
        """Scene ids of a split, optionally filtered by domain tag."""
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        out = []
        for sid in self.splits.get(split, []):
            ref = self.scene_ref(sid)
            if season is not None and ref.season != season:
                continue
            if region is not None and ref.region != region:
                continue
            out.append(sid)
        return out

    def save(self, path: str | Path) -> None:
        self.validate()
        payload = {
            "format_version": 1,
            "class_count": self.class_count,
            "patch_size": self.patch_size,
            "scenes": [asdict(s) for s in self.scenes],
            "splits": self.splits,
            "channel_stats": self.channel_stats,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid manifest JSON ({exc})") from exc
        try:
            manifest = cls(
                class_count=payload["class_count"],
                patch_size=payload["patch_size"],
                scenes=[SceneRef(**s) for s in payload["scenes"]],
                splits=payload["splits"],
                channel_stats=payload["channel_stats"],
                root=path.parent,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: manifest missing field ({exc})") from exc
        manifest.validate()
        return manifest

    def load_scene(self, scene_id: str) -> Scene:
        return load_scene(self.scene_path(scene_id), self.class_count)


# ---------------------------------------------------------------------------
# synthesis config


def _uniform_priors() -> dict[str, list[float]]:
    p = [1.0 / NUM_CLASSES] * NUM_CLASSES
    return {domain_key(s, r): list(p) for s in SEASONS for r in REGIONS}


# per-class mean backscatter (dB): HV rises with ice age faster than HH, so
# both the levels and the HH-HV gap separate the classes.
DEFAULT_CLASS_BACKSCATTER = [
    [-22.0, -34.0],  # open water (calm): low return, large HH-HV gap
    [-19.0, -29.0],  # new ice
    [-16.0, -25.0],  # young ice
    [-13.0, -21.0],  # thin first-year ice
    [-10.0, -17.0],  # thick first-year ice
    [-7.0, -12.0],  # old ice: strong volume scattering closes the gap
]


@dataclass
class SynthConfig:
    """Everything the generator needs; all randomness flows from rng_seed."""

    scenes_per_domain: int = 2
    scene_size: tuple[int, int] = (256, 256)
    seeds_per_scene: int = 40  # Voronoi cell count
    class_priors: dict[str, list[float]] = field(default_factory=_uniform_priors)
    class_backscatter: list[list[float]] = field(
        default_factory=lambda: [list(row) for row in DEFAULT_CLASS_BACKSCATTER]
    )
    domain_offset: dict[str, float] = field(
        default_factory=lambda: {domain_key(s, r): 0.0 for s in SEASONS for r in REGIONS}
    )
    speckle_looks: float = 16.0
    texture_std: float = 0.5  # dB, std of the smooth within-cell field
    texture_corr_px: float = 8.0  # correlation length of that field
    ignore_border: int = 4  # pixels labelled 255 on each edge
    patch_size: int = 64
    val_fraction: float = 0.25
    test_fraction: float = 0.25
    rng_seed: int = 0

    def validate(self) -> None:
        if self.scenes_per_domain < 1:
            raise ConfigError(f"scenes_per_domain must be >= 1, got {self.scenes_per_domain}")
        h, w = self.scene_size
        if h < self.patch_size or w < self.patch_size:
            raise ConfigError(
                f"scene_size {self.scene_size} smaller than patch_size {self.patch_size}"
            )
        if self.seeds_per_scene < 1:
            raise ConfigError("seeds_per_scene must be >= 1")
        if self.speckle_looks <= 0:
            raise ConfigError(f"speckle_looks must be > 0, got {self.speckle_looks}")
        if self.texture_std < 0 or self.texture_corr_px <= 0:
            raise ConfigError("texture_std must be >= 0 and texture_corr_px > 0")
        if self.ignore_border < 0:
            raise ConfigError("ignore_border must be >= 0")
        if 2 * self.ignore_border >= min(h, w):
            raise ConfigError(
                f"ignore_border {self.ignore_border} leaves no labelled pixels in {self.scene_size}"
            )
        if len(self.class_backscatter) != NUM_CLASSES:
            raise ConfigError(
                f"class_backscatter needs {NUM_CLASSES} rows, got {len(self.class_backscatter)}"
            )
        for row in self.class_backscatter:
            if len(row) != 2:
                raise ConfigError("class_backscatter rows must be [mu_hh, mu_hv]")
        expected = {domain_key(s, r) for s in SEASONS for r in REGIONS}
        for name, mapping in (("class_priors", self.class_priors), ("domain_offset", self.domain_offset)):
            missing = expected - set(mapping)
            if missing:
                raise ConfigError(f"{name} missing domains: {sorted(missing)}")
            extra = set(mapping) - expected
            if extra:
                raise ConfigError(f"{name} has unknown domains: {sorted(extra)}")
        for key, p in self.class_priors.items():
            if len(p) != NUM_CLASSES:
                raise ConfigError(f"class_priors[{key!r}] needs {NUM_CLASSES} entries")
            if any(x < 0 for x in p):
                raise ConfigError(f"class_priors[{key!r}] has negative entries")
            if abs(sum(p) - 1.0) > 1e-9:
                raise ConfigError(f"class_priors[{key!r}] sums to {sum(p)!r}, not 1")
        if not (0 <= self.val_fraction < 1 and 0 <= self.test_fraction < 1):
            raise ConfigError("val_fraction/test_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene_size"] = list(self.scene_size)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        if "scene_size" in data:
            data["scene_size"] = tuple(data["scene_size"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown SynthConfig fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


def shift_heavy_config(**overrides) -> SynthConfig:
    """Small dataset with strong, opposing season and region shifts.

    Each domain tilts the label marginal toward a different ice class and
    adds a domain-wide backscatter offset, so a model trained on one domain
    sees both label-prior and intensity shift elsewhere.
    """
    season_tilt = {"spring": 1, "summer": 0, "fall": 4, "winter": 2}
    region_tilt = {"east": 3, "west": 5, "canadian_arctic": 2, "north": 1}
    season_off = {"spring": 2.0, "summer": -2.0, "fall": -6.0, "winter": 6.0}
    region_off = {"east": 6.0, "west": 2.0, "canadian_arctic": -2.0, "north": -6.0}
    priors = {}
    offsets = {}
    for s in SEASONS:
        for r in REGIONS:
            p = np.full(NUM_CLASSES, 0.4 / NUM_CLASSES)
            p[season_tilt[s]] += 0.35
            p[region_tilt[r]] += 0.25
            priors[domain_key(s, r)] = list(p / p.sum())
            offsets[domain_key(s, r)] = season_off[s] + region_off[r]
    cfg = SynthConfig(
        scenes_per_domain=4,
        scene_size=(64, 64),
        seeds_per_scene=12,
        class_priors=priors,
        domain_offset=offsets,
        speckle_looks=12.0,
        ignore_border=2,
        patch_size=32,
    )
    for key, val in overrides.items():
        setattr(cfg, key, val)
    cfg.validate()
    return cfg


def shift_free_config(**overrides) -> SynthConfig:
    """Identically distributed domains: uniform priors, zero offsets."""
    cfg = SynthConfig(
        scenes_per_domain=3,
        scene_size=(64, 64),
        seeds_per_scene=12,
        speckle_looks=12.0,
        ignore_border=2,
        patch_size=32,
    )
    for key, val in overrides.items():
        setattr(cfg, key, val)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# generation


def _texture_field(rng: np.random.Generator, shape, std: float, corr: float) -> np.ndarray:
    field_ = gaussian_filter(rng.standard_normal(shape), sigma=corr, mode="wrap")
    s = field_.std()
    if s > 0 and std > 0:
        field_ *= std / s
    else:
        field_[:] = 0.0
    return field_


def synthesize_scene(cfg: SynthConfig, season: str, region: str, scene_id: str,
                     rng: np.random.Generator) -> Scene:
    h, w = cfg.scene_size
    key = domain_key(season, region)

    # Voronoi partition: nearest generator point decides the cell.
    points = rng.uniform([0, 0], [h, w], size=(cfg.seeds_per_scene, 2))
    cell_class = rng.choice(NUM_CLASSES, size=cfg.seeds_per_scene, p=cfg.class_priors[key])
    rows, cols = np.mgrid[0:h, 0:w]
    grid = np.stack([rows.ravel(), cols.ravel()], axis=1)
    _, nearest = cKDTree(points).query(grid)
    labels = cell_class[nearest].reshape(h, w).astype(np.uint8)

    mu = np.asarray(cfg.class_backscatter, dtype=np.float64)
    offset = cfg.domain_offset[key]
    channels = []
    for pol in range(2):
        mean_db = mu[labels, pol] + offset
        mean_db += _texture_field(rng, (h, w), cfg.texture_std, cfg.texture_corr_px)
        # multiplicative speckle in linear intensity, then back to dB
        linear = 10.0 ** (mean_db / 10.0)
        speckle = rng.gamma(cfg.speckle_looks, 1.0 / cfg.speckle_looks, size=(h, w))
        linear = linear * np.maximum(speckle, 1e-12)
        channels.append((10.0 * np.log10(linear)).astype(np.float32))

    if cfg.ignore_border > 0:
        b = cfg.ignore_border
        labels[:b, :] = IGNORE_INDEX
        labels[-b:, :] = IGNORE_INDEX
        labels[:, :b] = IGNORE_INDEX
        labels[:, -b:] = IGNORE_INDEX

    return Scene(scene_id=scene_id, season=season, region=region,
                 hh=channels[0], hv=channels[1], labels=labels)


def _split_sizes(n: int, val_fraction: float, test_fraction: float) -> tuple[int, int, int]:
    """Scenes per split within one domain; every domain keeps >= 1 train scene."""
    if n == 1:
        return 1, 0, 0
    n_test = max(1, round(n * test_fraction)) if test_fraction > 0 else 0
    n_val = max(1, round(n * val_fraction)) if (val_fraction > 0 and n >= 3) else 0
    while n_test + n_val >= n:
        if n_val > 0:
            n_val -= 1
        else:
            n_test -= 1
    return n - n_val - n_test, n_val, n_test


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write one .npz per scene plus manifest.json; returns the loaded manifest.

    Scene RNG streams are derived from (rng_seed, scene_id), so regenerating
    with the same config reproduces every file bit for bit.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    refs: list[SceneRef] = []
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    n_train, n_val, n_test = _split_sizes(cfg.scenes_per_domain, cfg.val_fraction, cfg.test_fraction)

    for season in SEASONS:
        for region in REGIONS:
            for i in range(cfg.scenes_per_domain):
                scene_id = f"{season}_{region}_{i:03d}"
                rng = np.random.default_rng(scene_seed(cfg.rng_seed, scene_id))
                scene = synthesize_scene(cfg, season, region, scene_id, rng)
                fname = f"{scene_id}.npz"
                save_scene(scene, out / fname)
                refs.append(SceneRef(scene_id, season, region, fname))
                if i < n_train:
                    splits["train"].append(scene_id)
                elif i < n_train + n_val:
                    splits["val"].append(scene_id)
                else:
                    splits["test"].append(scene_id)

    stats = _train_channel_stats(out, refs, splits["train"])
    manifest = DatasetManifest(
        class_count=NUM_CLASSES,
        patch_size=cfg.patch_size,
        scenes=refs,
        splits=splits,
        channel_stats=stats,
        root=out,
    )
    manifest.save(out / "manifest.json")
    return manifest


def _train_channel_stats(root: Path, refs: list[SceneRef], train_ids: list[str]) -> dict[str, list[float]]:
    """Mean/std of HH, HV and the HH-HV difference over training pixels.

    The third channel gets its own statistics rather than reusing the HH/HV
    ones: a dB difference lives on a different scale than either input.
    """
    by_id = {r.scene_id: r for r in refs}
    sums = {"hh": [0.0, 0.0], "hv": [0.0, 0.0], "ratio": [0.0, 0.0]}
    count = 0
    for sid in train_ids:
        scene = load_scene(root / by_id[sid].path)
        ratio = scene.hh.astype(np.float64) - scene.hv.astype(np.float64)
        for key, arr in (("hh", scene.hh.astype(np.float64)), ("hv", scene.hv.astype(np.float64)), ("ratio", ratio)):
            sums[key][0] += float(arr.sum())
            sums[key][1] += float((arr * arr).sum())
        count += scene.hh.size
    if count == 0:
        raise ConfigError("training split is empty; cannot derive channel statistics")
    stats = {}
    for key, (s1, s2) in sums.items():
        mean = s1 / count
        var = max(s2 / count - mean * mean, 0.0)
        std = float(np.sqrt(var))
        if std <= 0:
            std = 1.0
        stats[key] = [mean, std]
    return stats


# ---------------------------------------------------------------------------
# channels / patches


def adapt_channels(scene: Scene, mode: str) -> np.ndarray:
    """Stack model input channels, unnormalized, shape (C, H, W) float32.

    two_channel: [HH, HV]. three_channel adds the per-pixel HH-HV difference
    in dB, which equals the HH/HV intensity ratio expressed in dB.
    """
    if mode not in CHANNEL_MODES:
        raise ConfigError(f"unknown channel mode {mode!r}; expected one of {CHANNEL_MODES}")
    if mode == "two_channel":
        return np.stack([scene.hh, scene.hv]).astype(np.float32)
    ratio = scene.hh.astype(np.float32) - scene.hv.astype(np.float32)
    return np.stack([scene.hh, scene.hv, ratio]).astype(np.float32)


def channels_for(in_channels: int) -> str:
    if in_channels == 2:
        return "two_channel"
    if in_channels == 3:
        return "three_channel"
    raise ConfigError(f"no channel mode for in_channels={in_channels}")


def normalize_channels(stacked: np.ndarray, stats: dict[str, list[float]]) -> np.ndarray:
    keys = ["hh", "hv", "ratio"][: stacked.shape[0]]
    out = np.empty_like(stacked, dtype=np.float32)
    for c, key in enumerate(keys):
        mean, std = stats[key]
        out[c] = (stacked[c] - mean) / std
    return out


@dataclass
class Patch:
    channels: np.ndarray  # (C, h, w) float32, normalized
    labels: np.ndarray  # (h, w) uint8
    scene_id: str
    offset: tuple[int, int]  # (row, col) of the top-left corner pre-augmentation


def augment_patch(channels: np.ndarray, labels: np.ndarray,
                  flip_h: bool, flip_v: bool, quarter_turns: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Apply the same flip/rotation to channels (C,h,w) and labels (h,w).

    Pure geometry: the multiset of label values (255 included) is preserved.
    """
    if flip_h:
        channels = channels[..., ::-1]
        labels = labels[..., ::-1]
    if flip_v:
        channels = channels[..., ::-1, :]
        labels = labels[..., ::-1, :]
    k = quarter_turns % 4
    if k:
        channels = np.rot90(channels, k, axes=(-2, -1))
        labels = np.rot90(labels, k, axes=(-2, -1))
    return np.ascontiguousarray(channels), np.ascontiguousarray(labels)


def extract_patches(scene: Scene, manifest: DatasetManifest, mode: str,
                    count: int = 0, augment: bool = False,
                    rng: np.random.Generator | None = None,
                    channels: str = "two_channel") -> list[Patch]:
    """Cut normalized patches out of one scene.

    mode "random_train": ``count`` uniformly placed crops, optionally with
    random flips (p=0.5 each) and a uniform quarter-turn rotation. Draws per
    patch happen in a fixed order (row, col, flip_h, flip_v, turns), so a
    seeded generator reproduces the stream exactly.

    mode "tiled_eval": non-overlapping tiles at stride = patch size, row-major
    from the origin; partial tiles at the bottom/right edges are dropped.
    """
    ps = manifest.patch_size
    h, w = scene.shape
    if h < ps or w < ps:
        raise ConfigError(f"scene {scene.scene_id} ({h}x{w}) smaller than patch size {ps}")
    raster = normalize_channels(adapt_channels(scene, channels), manifest.channel_stats)

    patches: list[Patch] = []
    if mode == "random_train":
        if rng is None:
            raise ConfigError("random_train patch extraction requires an rng")
        if count < 1:
            raise ConfigError(f"random_train needs count >= 1, got {count}")
        for _ in range(count):
            r = int(rng.integers(0, h - ps + 1))
            c = int(rng.integers(0, w - ps + 1))
            chans = raster[:, r:r + ps, c:c + ps]
            labs = scene.labels[r:r + ps, c:c + ps]
            if augment:
                flip_h = bool(rng.random() < 0.5)
                flip_v = bool(rng.random() < 0.5)
                turns = int(rng.integers(0, 4))
                chans, labs = augment_patch(chans, labs, flip_h, flip_v, turns)
            else:
                chans = np.ascontiguousarray(chans)
                labs = np.ascontiguousarray(labs)
            patches.append(Patch(chans.astype(np.float32), labs, scene.scene_id, (r, c)))
    elif mode == "tiled_eval":
        for r in range(0, h - ps + 1, ps):
            for c in range(0, w - ps + 1, ps):
                patches.append(Patch(
                    np.ascontiguousarray(raster[:, r:r + ps, c:c + ps]).astype(np.float32),
                    np.ascontiguousarray(scene.labels[r:r + ps, c:c + ps]),
                    scene.scene_id, (r, c)))
    else:
        raise ConfigError(f"unknown patch mode {mode!r}")
    return patches


@dataclass
class PatchSet:
    """Dense patch stack ready for batching: (N,C,h,w) inputs, (N,h,w) labels."""

    channels: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.channels.shape[0]

    def subset(self, indices: np.ndarray) -> "PatchSet":
        return PatchSet(self.channels[indices], self.labels[indices])

    @classmethod
    def from_patches(cls, patches: list[Patch]) -> "PatchSet":
        if not patches:
            raise ConfigError("cannot build a PatchSet from zero patches")
        return cls(
            np.stack([p.channels for p in patches]).astype(np.float32),
            np.stack([p.labels for p in patches]),
        )


def build_patchset(manifest: DatasetManifest, scene_ids: list[str], mode: str,
                   channels: str, per_scene: int = 0, augment: bool = False,
                   seed: int = 0) -> PatchSet:
    """Extract patches from several scenes into one stack.

    Random modes derive an independent stream per scene from (seed, scene_id),
    so adding or removing scenes never perturbs the others' patches.
    """
    if not scene_ids:
        raise ConfigError("build_patchset needs at least one scene id")
    patches: list[Patch] = []
    for sid in scene_ids:
        scene = manifest.load_scene(sid)
        rng = np.random.default_rng(scene_seed(seed, sid)) if mode == "random_train" else None
        patches.extend(extract_patches(scene, manifest, mode, count=per_scene,
                                       augment=augment, rng=rng, channels=channels))
    return PatchSet.from_patches(patches)
