"""
Descriptor streams and ground truth.

A stream is a sequence of :class:`DescriptorSet`, one per image, coming from
a binary ``.lgds`` file, a seeded synthetic world or an external feature
extractor. Ground truth is a set of unordered image id pairs that show the
same place.

Example:
    >>> from loopguard.ingest import SyntheticWorldConfig, generate_synthetic
    >>> frames, gt = generate_synthetic(SyntheticWorldConfig(num_places=3, revisit_script=[0, 1, 0]))
    >>> sorted(gt)
    [(2, 0)]
"""

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Protocol, Set, Tuple, Union
import logging
import struct

import numpy as np

from loopguard import constants
from loopguard.exceptions import ConfigError, DimensionMismatchError, StreamFormatError
from loopguard.utils import format_key_value, parse_float, parse_int_list, parse_key_value_file

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_HEADER = struct.Struct("<4sIII")
_COUNT = struct.Struct("<I")


@dataclass(eq=False)
class DescriptorSet:
    """
    Features of one image.

    Attributes:
        image_id: Position of the image in its stream
        descriptors: ``(n, D)`` float32 array, one row per descriptor; ``n`` may be 0
        stamp: Acquisition time in seconds
    """

    image_id: int
    descriptors: np.ndarray
    stamp: float = 0.0

    def __post_init__(self):
        array = np.asarray(self.descriptors, dtype=np.float32)
        if array.ndim == 1:
            array = array.reshape(0, 0) if array.size == 0 else array.reshape(1, -1)
        if array.ndim != 2:
            raise ValueError(f"descriptors must be a 2-D array, got shape {array.shape}")
        self.descriptors = array

    def __len__(self) -> int:
        return int(self.descriptors.shape[0])

    @property
    def dim(self) -> Optional[int]:
        """Descriptor dimension, ``None`` for a featureless image."""
        if len(self) == 0:
            return None
        return int(self.descriptors.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DescriptorSet):
            return NotImplemented
        if self.image_id != other.image_id or self.stamp != other.stamp or len(self) != len(other):
            return False
        if len(self) == 0:
            return True
        return self.descriptors.shape == other.descriptors.shape and bool(
            np.array_equal(self.descriptors, other.descriptors)
        )

    def __repr__(self) -> str:
        return f"DescriptorSet(image_id={self.image_id}, n={len(self)}, dim={self.dim}, stamp={self.stamp})"


class GroundTruth:
    """
    Unordered pairs of images showing the same place.

    Pairs are stored as ``(query, match)`` with ``query > match``; the query
    is the later image of the pair.
    """

    def __init__(self, pairs: Optional[Iterable[Tuple[int, int]]] = None):
        self.pairs: Set[Tuple[int, int]] = set()
        for a, b in pairs or ():
            self.add(a, b)

    def add(self, a: int, b: int) -> None:
        """
        Add the pair ``{a, b}``.

        Raises:
            ConfigError: If ``a == b``
        """
        a, b = int(a), int(b)
        if a == b:
            raise ConfigError(f"Ground truth pair ({a}, {a}) pairs an image with itself", field="pairs", value=a)
        self.pairs.add((max(a, b), min(a, b)))

    def __contains__(self, pair: object) -> bool:
        if not isinstance(pair, tuple) or len(pair) != 2:
            return False
        a, b = pair
        return (max(a, b), min(a, b)) in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Tuple[int, int]]:
        return iter(sorted(self.pairs))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GroundTruth):
            return NotImplemented
        return self.pairs == other.pairs

    def queries(self) -> Set[int]:
        """Images that close a loop with at least one earlier image."""
        return {query for query, _ in self.pairs}

    def matches_of(self, image_id: int) -> Set[int]:
        """Images paired with ``image_id``."""
        return {b if a == image_id else a for a, b in self.pairs if image_id in (a, b)}

    def validate(self, num_images: int) -> None:
        """
        Check every id lies in ``[0, num_images)``.

        Raises:
            ConfigError: If a pair references an image outside the stream
        """
        for a, b in self.pairs:
            if b < 0 or a >= num_images:
                raise ConfigError(
                    f"Ground truth pair ({a}, {b}) is outside a stream of {num_images} images",
                    field="pairs",
                    value=(a, b),
                )


class DescriptorExtractor(Protocol):
    """Adapter turning a decoded image into a ``(n, D)`` descriptor array."""

    def extract(self, image: Any) -> np.ndarray:
        ...


def stream_from_extractor(
    images: Iterable[Any],
    extractor: DescriptorExtractor,
    rate_hz: float = constants.DEFAULT_FRAME_RATE_HZ,
) -> Iterator[DescriptorSet]:
    """
    Turn images into descriptor sets through an extractor adapter.

    Args:
        images: Decoded images in acquisition order
        extractor: Object implementing :class:`DescriptorExtractor`
        rate_hz: Acquisition rate used to stamp the frames

    Yields:
        One :class:`DescriptorSet` per image
    """
    for image_id, image in enumerate(images):
        yield DescriptorSet(image_id, extractor.extract(image), stamp=image_id / rate_hz)


def load_stream(path: PathLike, rate_hz: float = constants.DEFAULT_FRAME_RATE_HZ) -> Iterator[DescriptorSet]:
    """
    Read a binary descriptor stream.

    Layout (little-endian): magic ``LGDS``, u32 version, u32 D, u32 image
    count, then per image a u32 descriptor count followed by count x D float32.

    Args:
        path: ``.lgds`` file
        rate_hz: Acquisition rate used to stamp the frames

    Yields:
        Descriptor sets in stored order with image ids ``0..N-1``

    Raises:
        StreamFormatError: On a bad header, truncated payload, trailing bytes
            or a non-finite value; the error carries the byte offset
    """
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < _HEADER.size:
        raise StreamFormatError("File too short for a stream header", offset=0, path=str(path))
    magic, version, dim, image_count = _HEADER.unpack_from(data, 0)
    if magic != constants.STREAM_MAGIC:
        raise StreamFormatError(f"Bad magic {magic!r}", offset=0, path=str(path))
    if version != constants.STREAM_VERSION:
        raise StreamFormatError(f"Unsupported stream version {version}", offset=4, path=str(path))
    if dim == 0:
        raise StreamFormatError("Descriptor dimension must be positive", offset=8, path=str(path))

    logger.debug(f"Reading stream {path}: dim={dim}, images={image_count}")
    offset = _HEADER.size
    row_bytes = 4 * dim
    for image_id in range(image_count):
        if offset + _COUNT.size > len(data):
            raise StreamFormatError(f"Truncated before image {image_id}", offset=offset, path=str(path))
        (count,) = _COUNT.unpack_from(data, offset)
        offset += _COUNT.size
        end = offset + count * row_bytes
        if end > len(data):
            raise StreamFormatError(
                f"Image {image_id} declares {count} descriptors of dimension {dim} but the file ends early",
                offset=offset,
                path=str(path),
            )
        values = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
        if count:
            bad = np.flatnonzero(~np.isfinite(values))
            if bad.size:
                raise StreamFormatError(
                    f"Non-finite value in image {image_id}",
                    offset=offset + 4 * int(bad[0]),
                    path=str(path),
                )
        descriptors = values.astype(np.float32).reshape(count, dim)
        offset = end
        yield DescriptorSet(image_id, descriptors, stamp=image_id / rate_hz)

    if offset != len(data):
        raise StreamFormatError(
            f"{len(data) - offset} trailing bytes after {image_count} images (dimension mismatch?)",
            offset=offset,
            path=str(path),
        )


def read_stream(path: PathLike, rate_hz: float = constants.DEFAULT_FRAME_RATE_HZ) -> List[DescriptorSet]:
    """Read a whole descriptor stream into a list."""
    return list(load_stream(path, rate_hz=rate_hz))


def write_stream(stream: Iterable[DescriptorSet], path: PathLike, dim: Optional[int] = None) -> int:
    """
    Write descriptor sets in the binary stream format.

    Args:
        stream: Descriptor sets in order
        path: Destination file
        dim: Dimension to declare when every set is empty

    Returns:
        Number of images written

    Raises:
        DimensionMismatchError: If two non-empty sets disagree on dimension
    """
    frames = list(stream)
    for frame in frames:
        if frame.dim is None:
            continue
        if dim is None:
            dim = frame.dim
        elif frame.dim != dim:
            raise DimensionMismatchError(
                dim, frame.dim, f"Image {frame.image_id} has dimension {frame.dim}, stream has {dim}"
            )
    if dim is None:
        dim = constants.DEFAULT_DIM

    with open(path, "wb") as f:
        f.write(_HEADER.pack(constants.STREAM_MAGIC, constants.STREAM_VERSION, dim, len(frames)))
        for frame in frames:
            f.write(_COUNT.pack(len(frame)))
            if len(frame):
                f.write(np.ascontiguousarray(frame.descriptors, dtype="<f4").tobytes())
    logger.info(f"Wrote {len(frames)} images (dim={dim}) to {path}")
    return len(frames)


def load_ground_truth(path: PathLike) -> GroundTruth:
    """
    Read a ground-truth text file: one ``i j`` pair per line, ``#`` comments.

    Raises:
        ConfigError: If the file is missing or a line is not two integers
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Ground truth file not found: {path}", field="gt", value=str(path))
    gt = GroundTruth()
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{number}: expected 'i j'", field="gt", value=raw)
        try:
            gt.add(int(parts[0]), int(parts[1]))
        except ValueError:
            raise ConfigError(f"{path}:{number}: ids must be integers", field="gt", value=raw)
    return gt


def write_ground_truth(gt: GroundTruth, path: PathLike) -> None:
    """Write ground truth pairs sorted, one ``query match`` pair per line."""
    lines = ["# query_image_id match_image_id"]
    lines.extend(f"{a} {b}" for a, b in gt)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class SyntheticWorldConfig:
    """
    Parameters of a seeded synthetic world.

    Attributes:
        num_places: Number of distinct places
        words_per_place: Latent descriptors per place
        dim: Descriptor dimension
        revisit_script: Place index shown at each frame; when empty,
            ``range(num_places)`` repeated ``laps`` times
        noise_sigma: Gaussian noise added per component
        dropout_rate: Probability that a latent descriptor is not observed
        aliasing_rate: Fraction of descriptors replaced by shared-pool draws
        pool_size: Size of the shared aliasing pool
        laps: Repetitions used when no script is given
        seed: Random seed
        frame_rate_hz: Rate used to stamp frames
    """

    num_places: int = 10
    words_per_place: int = 30
    dim: int = constants.DEFAULT_DIM
    revisit_script: List[int] = field(default_factory=list)
    noise_sigma: float = 0.05
    dropout_rate: float = 0.0
    aliasing_rate: float = 0.0
    pool_size: int = 50
    laps: int = 1
    seed: int = 0
    frame_rate_hz: float = constants.DEFAULT_FRAME_RATE_HZ

    def script(self) -> List[int]:
        """Place index for every frame."""
        if self.revisit_script:
            return list(self.revisit_script)
        return list(range(self.num_places)) * self.laps

    def validate(self) -> None:
        """
        Check the parameters.

        Raises:
            ConfigError: Naming the first invalid field
        """
        if self.num_places < 1:
            raise ConfigError("num_places must be at least 1", field="num_places", value=self.num_places)
        if self.words_per_place < 0:
            raise ConfigError(
                "words_per_place must be non-negative", field="words_per_place", value=self.words_per_place
            )
        if self.dim < 2:
            raise ConfigError("dim must be at least 2", field="dim", value=self.dim)
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative", field="noise_sigma", value=self.noise_sigma)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)", field="dropout_rate", value=self.dropout_rate)
        if not 0.0 <= self.aliasing_rate <= 1.0:
            raise ConfigError("aliasing_rate must be in [0, 1]", field="aliasing_rate", value=self.aliasing_rate)
        if self.aliasing_rate > 0 and self.pool_size < 1:
            raise ConfigError(
                "pool_size must be positive when aliasing is enabled", field="pool_size", value=self.pool_size
            )
        if self.laps < 1:
            raise ConfigError("laps must be at least 1", field="laps", value=self.laps)
        if self.frame_rate_hz <= 0:
            raise ConfigError("frame_rate_hz must be positive", field="frame_rate_hz", value=self.frame_rate_hz)
        for frame, place in enumerate(self.revisit_script):
            if not 0 <= place < self.num_places:
                raise ConfigError(
                    f"revisit_script[{frame}] references place {place} but num_places is {self.num_places}",
                    field="revisit_script",
                    value=place,
                )

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: Dict[str, str]) -> "SyntheticWorldConfig":
        """
        Build a config from raw ``key = value`` strings.

        Raises:
            ConfigError: On unknown keys or unparsable values
        """
        known = {f.name: f for f in fields(cls)}
        kwargs: Dict[str, Any] = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"Unknown synthetic world key {key!r}", field=key, value=raw)
            if key == "revisit_script":
                kwargs[key] = parse_int_list(raw, key)
            elif key in ("noise_sigma", "dropout_rate", "aliasing_rate", "frame_rate_hz"):
                kwargs[key] = parse_float(raw, key)
            else:
                try:
                    kwargs[key] = int(raw)
                except ValueError:
                    raise ConfigError(f"Expected an integer for {key}", field=key, value=raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: PathLike) -> "SyntheticWorldConfig":
        """Read a flat ``key = value`` synthetic world file."""
        return cls.from_dict(parse_key_value_file(path))

    def to_text(self) -> str:
        """Render as a ``key = value`` file."""
        return format_key_value(self.to_dict())


def generate_synthetic(config: SyntheticWorldConfig) -> Tuple[List[DescriptorSet], GroundTruth]:
    """
    Generate a descriptor stream and its ground truth from a synthetic world.

    Every place owns ``words_per_place`` latent descriptors drawn uniformly
    from ``[0, 1]^D``. Frame ``t`` shows place ``script[t]``: each latent
    descriptor is kept with probability ``1 - dropout_rate``, a fraction
    ``aliasing_rate`` of the kept ones is replaced by shared-pool draws, and
    Gaussian noise is added per component.

    Args:
        config: World parameters

    Returns:
        ``(frames, ground_truth)``; ground truth pairs every frame with each
        earlier frame of the same place

    Raises:
        ConfigError: If the config is invalid
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    latent = rng.random((config.num_places, config.words_per_place, config.dim))
    pool = rng.random((max(config.pool_size, 0), config.dim))

    frames: List[DescriptorSet] = []
    gt = GroundTruth()
    seen: Dict[int, List[int]] = {}
    for t, place in enumerate(config.script()):
        keep = rng.random(config.words_per_place) >= config.dropout_rate
        descriptors = latent[place][keep].copy()
        if config.aliasing_rate > 0 and len(descriptors):
            aliased = rng.random(len(descriptors)) < config.aliasing_rate
            picks = rng.integers(0, config.pool_size, size=int(aliased.sum()))
            descriptors[aliased] = pool[picks]
        if config.noise_sigma > 0 and len(descriptors):
            descriptors = descriptors + rng.normal(0.0, config.noise_sigma, size=descriptors.shape)
        frames.append(DescriptorSet(t, descriptors.astype(np.float32), stamp=t / config.frame_rate_hz))
        for earlier in seen.get(place, []):
            gt.add(t, earlier)
        seen.setdefault(place, []).append(t)

    logger.info(
        f"Generated synthetic world: {len(frames)} frames, {config.num_places} places, {len(gt)} ground truth pairs"
    )
    return frames, gt
