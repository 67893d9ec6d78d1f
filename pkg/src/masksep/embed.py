"""Embedding provision.

Three providers share one vector space:

- ``EmbeddingStore``: a file-backed map (modality, item id) -> vector with
  class labels, in a little-endian binary format (magic ``EMBD``).
- ``OracleEmbedder``: deterministic synthetic embeddings built from fixed
  orthonormal class anchors plus modality offsets and seeded instance noise.
- ``AudioFeatureEmbedder``: a scale-invariant waveform feature map (band
  energy fractions, spectral flux, centroid) linearly calibrated so clean
  class sources land near their audio-modality anchors.

Projection heads and the shared temperature are the only trainable pieces
of the alignment curriculum; their gradients are exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .spectral import StftConfig, Waveform, stft

MODALITIES = ("audio", "text", "video")
_MODALITY_CODE = {name: i for i, name in enumerate(MODALITIES)}

STORE_MAGIC = b"EMBD"
STORE_VERSION = 1


class EmbeddingStore:
    """In-memory map (modality, id) -> float32 vector, with class labels."""

    def __init__(self, dimension: int):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = int(dimension)
        self._vectors: dict[tuple[str, str], np.ndarray] = {}
        self.labels: dict[tuple[str, str], str] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._vectors

    def add(self, modality: str, item_id: str, label: str, vector) -> None:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dimension,):
            raise ValueError(
                f"vector shape {vector.shape} does not match store "
                f"dimension {self.dimension}"
            )
        key = (modality, item_id)
        if key in self._vectors:
            raise ValueError(f"duplicate id {item_id!r} for modality {modality!r}")
        self._vectors[key] = vector
        self.labels[key] = label

    def get(self, modality: str, item_id: str) -> np.ndarray:
        """Vector as float64 (stored bits are float32)."""
        return self._vectors[(modality, item_id)].astype(np.float64)

    def label(self, modality: str, item_id: str) -> str:
        return self.labels[(modality, item_id)]

    def ids(self, modality: str) -> list[str]:
        return [i for (m, i) in self._vectors if m == modality]

    def classes(self) -> list[str]:
        return sorted(set(self.labels.values()))

    def items(self):
        for (modality, item_id), vec in self._vectors.items():
            yield modality, item_id, self.labels[(modality, item_id)], vec


def save_store(store: EmbeddingStore, path) -> None:
    """Binary layout: magic, version u16, D u32, count u64, then records of
    (modality u8, id u16+utf8, class u16+utf8, D little-endian f32)."""
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<HIQ", STORE_VERSION, store.dimension, len(store)))
        for modality, item_id, label, vec in store.items():
            id_bytes = item_id.encode("utf-8")
            label_bytes = label.encode("utf-8")
            fh.write(struct.pack("<B", _MODALITY_CODE[modality]))
            fh.write(struct.pack("<H", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<H", len(label_bytes)))
            fh.write(label_bytes)
            fh.write(vec.astype("<f4", copy=False).tobytes())


def load_store(path) -> EmbeddingStore:
    data = Path(path).read_bytes()
    if data[:4] != STORE_MAGIC:
        raise ValueError(f"{path}: bad magic, not an embedding store")
    version, dim, count = struct.unpack_from("<HIQ", data, 4)
    if version != STORE_VERSION:
        raise ValueError(f"{path}: unsupported store version {version}")
    store = EmbeddingStore(dim)
    offset = 4 + struct.calcsize("<HIQ")
    for _ in range(count):
        (code,) = struct.unpack_from("<B", data, offset)
        offset += 1
        if code >= len(MODALITIES):
            raise ValueError(f"{path}: unknown modality code {code}")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        item_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        (label_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        label = data[offset : offset + label_len].decode("utf-8")
        offset += label_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
        store.add(MODALITIES[code], item_id, label, vec)
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after {count} records")
    return store


def write_store_manifest(path, store: EmbeddingStore, source_files: dict | None = None):
    """Plain-text companion: one 'modality<TAB>id<TAB>class<TAB>source' line
    per record."""
    source_files = source_files or {}
    lines = []
    for modality, item_id, label, _ in store.items():
        src = source_files.get((modality, item_id), "-")
        lines.append(f"{modality}\t{item_id}\t{label}\t{src}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_store_manifest(path):
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        modality, item_id, label, src = line.split("\t")
        records.append((modality, item_id, label, src))
    return records


def unit_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / norm


class OracleEmbedder:
    """Deterministic stand-in for frozen multimodal encoders.

    Class anchors are exactly orthonormal (seeded QR construction); each
    embedding is unit-norm(anchor + modality offset + sigma * instance
    noise). Same class means high cross-modal cosine, different class low.
    """

    def __init__(
        self,
        num_classes: int,
        dim: int = 16,
        seed: int = 0,
        noise_sigma: float = 0.1,
        offset_norm: float = 0.25,
    ):
        if num_classes < 1:
            raise ValueError("need at least one class")
        if dim < num_classes:
            raise ValueError("dim must be >= num_classes for orthonormal anchors")
        self.num_classes = int(num_classes)
        self.dim = int(dim)
        self.seed = int(seed)
        self.noise_sigma = float(noise_sigma)
        self.offset_norm = float(offset_norm)
        rng = np.random.default_rng(seed)
        basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
        self.anchors = basis[:, :num_classes].T.copy()
        offsets = rng.standard_normal((len(MODALITIES), dim))
        offsets *= offset_norm / np.linalg.norm(offsets, axis=1, keepdims=True)
        self.offsets = offsets

    def anchor(self, modality: str, class_id: int) -> np.ndarray:
        """Noise-free embedding direction for a (modality, class) pair."""
        self._check(modality, class_id)
        return unit_normalize(self.anchors[class_id] + self.offsets[_MODALITY_CODE[modality]])

    def embed(self, modality: str, class_id: int, instance_seed: int = 0) -> np.ndarray:
        self._check(modality, class_id)
        base = self.anchors[class_id] + self.offsets[_MODALITY_CODE[modality]]
        if self.noise_sigma > 0.0:
            noise_rng = np.random.default_rng(
                (self.seed, _MODALITY_CODE[modality], class_id, instance_seed)
            )
            base = base + self.noise_sigma * noise_rng.standard_normal(self.dim)
        return unit_normalize(base)

    def _check(self, modality: str, class_id: int) -> None:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        if not 0 <= class_id < self.num_classes:
            raise ValueError(f"unknown class {class_id}")


def oracle_embed(
    embedder: OracleEmbedder, modality: str, class_id: int, instance_seed: int = 0
) -> np.ndarray:
    return embedder.embed(modality, class_id, instance_seed)


@dataclass
class AudioFeatureEmbedder:
    """Waveform -> embedding via normalized spectral features and a linear
    calibration onto the oracle's audio anchors.

    Features are invariant to amplitude scaling by construction (band
    energy fractions, normalized flux, normalized centroid), so scaling a
    waveform by a power of two leaves the embedding bit-identical.
    """

    dim: int
    sample_rate: int = 16000
    n_bands: int = 24
    fft_size: int = 512
    hop: int = 256
    fmin: float = 50.0
    projection: np.ndarray | None = None

    N_EXTRA = 3  # flux mean, flux std, centroid

    @property
    def feature_dim(self) -> int:
        return self.n_bands + self.N_EXTRA

    def _stft_config(self) -> StftConfig:
        return StftConfig(fft_size=self.fft_size, hop=self.hop,
                          window_size=self.fft_size)

    def _band_edges(self) -> np.ndarray:
        nyquist = self.sample_rate / 2.0
        return np.geomspace(self.fmin, nyquist, self.n_bands + 1)

    def features(self, w: Waveform) -> np.ndarray:
        if len(w) < self.fft_size:
            raise ValueError(
                f"waveform too short for the embedder: {len(w)} < {self.fft_size}"
            )
        spec = stft(w, self._stft_config())
        mag = np.abs(spec.bins)
        power = mag**2
        total = power.sum()
        if total <= 0.0:
            raise ValueError("cannot embed a zero-energy waveform")

        freqs = np.fft.rfftfreq(self.fft_size, d=1.0 / self.sample_rate)
        edges = self._band_edges()
        band_idx = np.clip(np.searchsorted(edges, freqs, side="right") - 1,
                           0, self.n_bands - 1)
        per_freq = power.sum(axis=1)
        bands = np.bincount(band_idx, weights=per_freq, minlength=self.n_bands)
        band_frac = bands / total

        frame_norm = np.linalg.norm(mag, axis=0)
        diff = np.linalg.norm(np.diff(mag, axis=1), axis=0)
        denom = frame_norm[1:] + frame_norm[:-1]
        flux = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0.0)
        centroid = float((freqs * per_freq).sum() / total) / (self.sample_rate / 2.0)

        return np.concatenate(
            [band_frac, [float(flux.mean()), float(flux.std()), centroid]]
        )

    def calibrate(self, prototypes, targets: dict, ridge: float = 1e-3) -> None:
        """Fit the linear projection so prototype features map onto the
        per-class target vectors.

        ``prototypes`` is a sequence of (class_id, Waveform); ``targets``
        maps class_id -> target direction (dim,).
        """
        feats = []
        rows = []
        for class_id, w in prototypes:
            feats.append(self.features(w))
            rows.append(np.asarray(targets[class_id], dtype=np.float64))
        f = np.asarray(feats)
        t = np.asarray(rows)
        gram = f.T @ f + ridge * np.eye(self.feature_dim)
        # contiguous copy so checkpointed and freshly calibrated projections
        # hit the same BLAS path bit for bit
        self.projection = np.ascontiguousarray(np.linalg.solve(gram, f.T @ t).T)

    def embed(self, w: Waveform) -> np.ndarray:
        if self.projection is None:
            raise ValueError("embedder is not calibrated; call calibrate() first")
        return unit_normalize(self.projection @ self.features(w))

    def save(self, path) -> None:
        if self.projection is None:
            raise ValueError("refusing to save an uncalibrated embedder")
        checkpoint.save_checkpoint(
            path,
            kind="audio_embedder",
            hparams={
                "dim": self.dim,
                "sample_rate": self.sample_rate,
                "n_bands": self.n_bands,
                "fft_size": self.fft_size,
                "hop": self.hop,
                "fmin": self.fmin,
            },
            arrays={"projection": self.projection},
        )

    @classmethod
    def load(cls, path) -> "AudioFeatureEmbedder":
        kind, hparams, arrays = checkpoint.load_checkpoint(path)
        if kind != "audio_embedder":
            raise ValueError(f"{path} holds a {kind!r} checkpoint")
        return cls(
            dim=int(hparams["dim"]),
            sample_rate=int(hparams["sample_rate"]),
            n_bands=int(hparams["n_bands"]),
            fft_size=int(hparams["fft_size"]),
            hop=int(hparams["hop"]),
            fmin=float(hparams["fmin"]),
            projection=arrays["projection"],
        )


def embed_audio_waveform(embedder: AudioFeatureEmbedder, w: Waveform) -> np.ndarray:
    return embedder.embed(w)


@dataclass
class ProjectionHead:
    """Affine map followed by L2 normalization."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d = self.bias.shape[0]
        if self.weight.shape != (d, d):
            raise ValueError(
                f"weight shape {self.weight.shape} does not match bias "
                f"dimension {d}"
            )

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(weight=np.eye(dim), bias=np.zeros(dim))

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(weight=self.weight.copy(), bias=self.bias.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


def project(head: ProjectionHead, e) -> np.ndarray:
    """unit_normalize(W e + b)."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (head.bias.shape[0],):
        raise ValueError(
            f"embedding dimension {e.shape} does not match head "
            f"dimension {head.bias.shape[0]}"
        )
    return unit_normalize(head.weight @ e + head.bias)


def project_backward(head: ProjectionHead, e, upstream):
    """Gradients of sum(upstream * project(head, e)) w.r.t. (weight, bias)."""
    e = np.asarray(e, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    y = head.weight @ e + head.bias
    norm = np.linalg.norm(y)
    z = y / norm
    d_y = (upstream - z * np.dot(z, upstream)) / norm
    return np.outer(d_y, e), d_y


TAU_MIN = 1e-3
TAU_MAX = 1e3


@dataclass
class Temperature:
    """Shared contrastive temperature, learned in log-space and clamped."""

    log_tau: float = float(np.log(0.5))

    @property
    def tau(self) -> float:
        return float(np.exp(np.clip(self.log_tau, np.log(TAU_MIN), np.log(TAU_MAX))))

    def clamp(self) -> None:
        self.log_tau = float(np.clip(self.log_tau, np.log(TAU_MIN), np.log(TAU_MAX)))

    def copy(self) -> "Temperature":
        return Temperature(log_tau=self.log_tau)
