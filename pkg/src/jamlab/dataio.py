"""Deterministic dataset generation and binary persistence.

File formats:

* raw IQ: interleaved I,Q float32 little-endian pairs, no header;
* tensor files: ``JLT1`` magic, dtype code, rank, little-endian dims,
  then the little-endian payload;
* checkpoints: ``JLC1`` magic, a JSON metadata document (model config,
  variant, entry index), then raw parameter/buffer payloads in order;
* manifest: line-delimited text with a versioned header, a JSON config
  snapshot line, then one JSON record per sample.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features as F
from . import signals as S
from .model import ModelConfig, SkaNet, build_model
from .seeding import derive_seed

TENSOR_MAGIC = b"JLT1"
CHECKPOINT_MAGIC = b"JLC1"
MANIFEST_VERSION = "jamlab-manifest 1"

_DTYPE_TO_CODE = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.complex64): 3,
    np.dtype(np.complex128): 4,
    np.dtype(np.int64): 5,
}
_CODE_TO_DTYPE = {v: k for k, v in _DTYPE_TO_CODE.items()}


class CorruptFileError(ValueError):
    """A binary payload failed a header or size check; message names the field."""


def _atomic_write(path, data: bytes) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_tensor(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    code = _DTYPE_TO_CODE.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported tensor dtype {array.dtype}")
    header = TENSOR_MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    le = array.astype(array.dtype.newbyteorder("<"), copy=False)
    _atomic_write(path, header + le.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TENSOR_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {blob[:4]!r} (field: magic)")
    code, rank = struct.unpack("<BB", blob[4:6])
    if code not in _CODE_TO_DTYPE:
        raise CorruptFileError(f"{path}: unknown dtype code {code} (field: dtype)")
    dims = struct.unpack(f"<{rank}I", blob[6 : 6 + 4 * rank])
    dtype = _CODE_TO_DTYPE[code]
    payload = blob[6 + 4 * rank :]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise CorruptFileError(
            f"{path}: payload is {len(payload)} bytes, dims say {expected} (field: dims)"
        )
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(dims)


def write_signal(path, sig: S.ComplexSignal) -> None:
    """Interleaved I,Q float32 little-endian; the clock lives in the manifest."""
    flat = np.empty(2 * len(sig.samples), dtype="<f4")
    flat[0::2] = sig.samples.real.astype(np.float32)
    flat[1::2] = sig.samples.imag.astype(np.float32)
    _atomic_write(path, flat.tobytes())


def read_signal(path, sample_rate_hz: float) -> S.ComplexSignal:
    raw = np.fromfile(path, dtype="<f4")
    if len(raw) % 2 != 0:
        raise CorruptFileError(f"{path}: odd float count, not I/Q pairs (field: payload)")
    samples = raw[0::2].astype(np.float64) + 1j * raw[1::2].astype(np.float64)
    clock = S.SampleClock(sample_rate_hz, len(samples))
    return S.ComplexSignal(samples, clock)


def quantize_signal(sig: S.ComplexSignal) -> S.ComplexSignal:
    """Round to the 32-bit storage precision (what read_signal returns)."""
    samples = (sig.samples.real.astype(np.float32).astype(np.float64)
               + 1j * sig.samples.imag.astype(np.float32).astype(np.float64))
    return S.ComplexSignal(samples, sig.clock)


@dataclass(frozen=True)
class FeaturePipelineConfig:
    """Everything needed to turn a raw signal into its two images."""

    stft_fft_size: int = 4096
    stft_window_continuous: int = 128
    stft_window_burst: int = 64
    stft_hop_fraction: float = 0.08
    welch_segment: int = 2048
    welch_overlap: float = 0.5
    welch_fft_size: int = 4096
    image_side: int = 224
    log_epsilon: float = 1e-12
    clamp_db: float = 80.0

    def stft_window_for(self, class_label: str) -> int:
        """Short window for burst-bearing classes, long window otherwise."""
        return (self.stft_window_burst if "Pulse" in class_label
                else self.stft_window_continuous)

    def stft_config(self, window_len: int) -> F.StftConfig:
        return F.StftConfig(
            window_len=window_len,
            hop=max(1, round(self.stft_hop_fraction * window_len)),
            fft_size=self.stft_fft_size,
        )

    def welch_config(self) -> F.WelchConfig:
        return F.WelchConfig(
            segment_len=self.welch_segment,
            overlap_fraction=self.welch_overlap,
            fft_size=self.welch_fft_size,
        )


@dataclass(frozen=True)
class GenerationGrid:
    jnr_min_db: float = -25.0
    jnr_max_db: float = 15.0
    jnr_step_db: float = 1.0
    realizations: int = 1000
    pr_min_db: float = -3.0
    pr_max_db: float = 3.0
    classes: tuple = S.COMPOUND_CLASSES

    def jnr_levels(self) -> list:
        if self.jnr_step_db <= 0:
            raise ValueError("jnr_step_db must be positive")
        levels = []
        level = self.jnr_min_db
        while level <= self.jnr_max_db + 1e-9:
            levels.append(round(level, 6))
            level += self.jnr_step_db
        return levels

    @property
    def sample_count(self) -> int:
        return len(self.classes) * len(self.jnr_levels()) * self.realizations


@dataclass
class SampleRecord:
    sample_id: str
    class_label: str
    jnr_db: float
    pr_db: float
    sample_seed: int
    stft_window_len: int
    iq_path: str
    tfi_path: str
    psd_path: str

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        return cls(**json.loads(line))


@dataclass
class Manifest:
    config: dict
    records: list

    def __len__(self) -> int:
        return len(self.records)


def write_manifest(path, manifest: Manifest) -> None:
    lines = [MANIFEST_VERSION, json.dumps(manifest.config, sort_keys=True)]
    lines.extend(rec.to_json() for rec in manifest.records)
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path) -> Manifest:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_VERSION:
        head = lines[0] if lines else ""
        raise CorruptFileError(f"{path}: bad manifest header {head!r} (field: version)")
    config = json.loads(lines[1])
    records = [SampleRecord.from_json(line) for line in lines[2:] if line]
    return Manifest(config=config, records=records)


def synthesize_sample(class_label: str, jnr_db: float, sample_seed: int,
                      clock: S.SampleClock, pr_range: tuple):
    """Regenerate one sample's (spec, noisy signal) from its seed alone."""
    rng = np.random.Generator(np.random.PCG64(sample_seed))
    spec = S.draw_compound(class_label, clock, rng, pr_range)
    mixture = S.mix_compound(spec, clock, rng)
    noisy = S.add_awgn(mixture, S.NoiseSpec(jnr_db), rng)
    return spec, noisy


def _generate_one(args):
    (class_idx, class_label, jnr_idx, jnr_db, realization, master_seed,
     clock, pr_range, feature_cfg, out_dir) = args
    seed = derive_seed(master_seed, "sample", class_label, jnr_idx, realization)
    base = f"jnr{jnr_idx:02d}_r{realization:05d}"
    class_dir = Path(out_dir) / class_label
    rel = {
        "iq": f"{class_label}/{base}.iq",
        "tfi": f"{class_label}/{base}_tfi.jlt",
        "psd": f"{class_label}/{base}_psd.jlt",
    }
    window_len = feature_cfg.stft_window_for(class_label)
    # parameter draw is cheap; synthesis and rendering run only when needed
    rng = np.random.Generator(np.random.PCG64(seed))
    spec = S.draw_compound(class_label, clock, rng, pr_range)
    paths = {k: Path(out_dir) / v for k, v in rel.items()}
    if not all(p.exists() for p in paths.values()):
        mixture = S.mix_compound(spec, clock, rng)
        noisy = S.add_awgn(mixture, S.NoiseSpec(jnr_db), rng)
        class_dir.mkdir(parents=True, exist_ok=True)
        stored = quantize_signal(noisy)
        write_signal(paths["iq"], stored)
        tfi, psd = F.signal_features(
            stored, feature_cfg.stft_config(window_len), feature_cfg.welch_config(),
            feature_cfg.image_side, feature_cfg.log_epsilon, feature_cfg.clamp_db,
        )
        write_tensor(paths["tfi"], tfi.pixels.astype(np.float32))
        write_tensor(paths["psd"], psd.pixels.astype(np.float32))
    record = SampleRecord(
        sample_id=f"{class_label}/{base}",
        class_label=class_label,
        jnr_db=float(jnr_db),
        pr_db=float(spec.power_ratio_db),
        sample_seed=seed,
        stft_window_len=window_len,
        iq_path=rel["iq"],
        tfi_path=rel["tfi"],
        psd_path=rel["psd"],
    )
    return (class_idx, jnr_idx, realization), record


def generate_dataset(grid: GenerationGrid, clock: S.SampleClock,
                     feature_cfg: FeaturePipelineConfig, master_seed: int,
                     out_dir, jobs: int = 1, progress=None) -> Manifest:
    """Synthesize, featurize, and persist the full (class x JNR x realization) grid.

    Samples whose three payload files already exist are not re-rendered, so
    an interrupted run resumes where it stopped.  Records are ordered by
    (class, JNR, realization) regardless of worker scheduling.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pr_range = (grid.pr_min_db, grid.pr_max_db)
    tasks = []
    for class_idx, class_label in enumerate(grid.classes):
        for jnr_idx, jnr_db in enumerate(grid.jnr_levels()):
            for realization in range(grid.realizations):
                tasks.append((class_idx, class_label, jnr_idx, jnr_db, realization,
                              master_seed, clock, pr_range, feature_cfg, str(out_dir)))
    results = {}
    if jobs <= 1:
        for i, task in enumerate(tasks):
            key, record = _generate_one(task)
            results[key] = record
            if progress is not None:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, (key, record) in enumerate(pool.map(_generate_one, tasks,
                                                       chunksize=8)):
                results[key] = record
                if progress is not None:
                    progress(i + 1, len(tasks))
    records = [results[key] for key in sorted(results)]
    config = {
        "clock": dataclasses.asdict(clock),
        "grid": dataclasses.asdict(grid),
        "features": dataclasses.asdict(feature_cfg),
        "master_seed": master_seed,
    }
    manifest = Manifest(config=config, records=records)
    write_manifest(out_dir / "manifest.txt", manifest)
    return manifest


def load_feature_arrays(manifest: Manifest, root) -> tuple:
    """Stack every record's images into model-ready arrays.

    Returns (tfi [N,1,S,S], psd [N,1,S,S], labels [N], jnr [N]); labels
    index into the manifest grid's class tuple.
    """
    root = Path(root)
    classes = list(manifest.config["grid"]["classes"])
    n = len(manifest.records)
    side = manifest.config["features"]["image_side"]
    tfi = np.empty((n, 1, side, side), dtype=np.float32)
    psd = np.empty((n, 1, side, side), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    jnr = np.empty(n, dtype=np.float64)
    for i, rec in enumerate(manifest.records):
        tfi[i, 0] = read_tensor(root / rec.tfi_path)
        psd[i, 0] = read_tensor(root / rec.psd_path)
        labels[i] = classes.index(rec.class_label)
        jnr[i] = rec.jnr_db
    return tfi, psd, labels, jnr


def save_checkpoint(model: SkaNet, path, extra_meta: dict = None) -> None:
    """Named-parameter archive: config snapshot, params, BN stats, fused kernels."""
    entries = []
    payloads = []

    def push(name, arr, kind):
        code = _DTYPE_TO_CODE.get(arr.dtype)
        if code is None:
            raise ValueError(f"{name}: unsupported checkpoint dtype {arr.dtype}")
        entries.append({"name": name, "kind": kind, "dtype": code,
                        "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr).astype(
            arr.dtype.newbyteorder("<"), copy=False).tobytes())

    for name, p in model.named_parameters().items():
        push(name, p.data, "param")
    for name, arr in model.named_buffers().items():
        push(name, arr, "buffer")
    meta = {
        "config": dataclasses.asdict(model.config),
        "variant": model.variant,
        "dtype": str(model.dtype),
        "init_seed": model.init_seed,
        "fused": model.is_fused,
        "bn_batches": {bn.name: bn.batches_tracked for bn in model.bn_layers()},
        "entries": entries,
    }
    if extra_meta:
        meta["extra"] = extra_meta
    blob = json.dumps(meta, sort_keys=True).encode()
    out = CHECKPOINT_MAGIC + struct.pack("<II", 1, len(blob)) + blob + b"".join(payloads)
    _atomic_write(path, out)


def load_checkpoint(path) -> tuple:
    """Rebuild the model a checkpoint describes; returns (model, metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {blob[:4]!r} (field: magic)")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != 1:
        raise CorruptFileError(f"{path}: unsupported version {version} (field: version)")
    meta = json.loads(blob[12 : 12 + meta_len])
    config = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in meta["config"].items()})
    model = build_model(config, variant=meta["variant"], dtype=np.dtype(meta["dtype"]),
                        init_seed=meta.get("init_seed", 0))
    for bn in model.bn_layers():
        bn.batches_tracked = meta["bn_batches"].get(bn.name, 0)
    if meta["fused"]:
        model.fuse()
    params = model.named_parameters()
    buffers = model.named_buffers()
    offset = 12 + meta_len
    for entry in meta["entries"]:
        dtype = _CODE_TO_DTYPE[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(blob[offset : offset + nbytes],
                            dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        offset += nbytes
        name = entry["name"]
        if entry["kind"] == "param":
            if name not in params:
                raise CorruptFileError(f"{path}: unknown parameter {name} (field: name)")
            if params[name].data.shape != shape:
                raise CorruptFileError(
                    f"{path}: {name} shape {shape} != model {params[name].data.shape} "
                    "(field: dims)"
                )
            params[name].data = arr
        else:
            if name not in buffers:
                raise CorruptFileError(f"{path}: unknown buffer {name} (field: name)")
            buffers[name][...] = arr
    if offset != len(blob):
        raise CorruptFileError(f"{path}: {len(blob) - offset} trailing bytes (field: payload)")
    return model, meta
