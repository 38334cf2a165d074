"""Self-supervised training data: random fiber patches, their signals and labels."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from dwfiber.multitensor import (
    REFERENCE_LAMBDAS,
    FiberConfig,
    add_rician_noise,
    multi_tensor_signals,
)
from dwfiber.protocol import AcquisitionProtocol
from dwfiber.sphere import DEFAULT_SIGMA, SphereDictionary, encode_labels

DATASET_FORMAT = 1
MIN_FRACTION = 0.1
PATCH = 3


@dataclass
class SynthConfig:
    lambdas: tuple = REFERENCE_LAMBDAS
    snr_range: tuple = (20.0, 30.0)
    sigma_r: float = 0.14
    t_policy: str = "fixed3"  # or "uniform" over {1, 2, 3}
    master_seed: int = 0
    count: int = 100_000
    label_sigma: float = DEFAULT_SIGMA
    store: str = "center"  # "center": (count, n) signals; "patch": (count, 3, 3, 3, n)

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.snr_range = tuple(float(v) for v in self.snr_range)
        lo, hi = self.snr_range
        if not 0 < lo <= hi:
            raise ValueError(f"snr_range must satisfy 0 < lo <= hi, got {self.snr_range}")
        if self.sigma_r < 0:
            raise ValueError("sigma_r must be >= 0")
        if self.t_policy not in ("fixed3", "uniform"):
            raise ValueError(f"unknown t_policy {self.t_policy!r}")
        if self.store not in ("center", "patch"):
            raise ValueError(f"unknown store mode {self.store!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass
class PatchSample:
    signals: np.ndarray  # (3, 3, 3, n)
    center_label: np.ndarray  # (m,)
    center_truth: FiberConfig
    snr: float
    patch_pdds: np.ndarray = field(repr=False, default=None)  # (3, 3, 3, t, 3)


def _dirichlet_rejection(t: int, rng: np.random.Generator):
    """Symmetric Dirichlet(1) draws until every component exceeds MIN_FRACTION.

    Returns (sorted alphas, number of draws used).
    """
    attempts = 0
    while True:
        attempts += 1
        a = rng.dirichlet(np.ones(t))
        if a.min() > MIN_FRACTION:
            return np.sort(a), attempts


def sample_alphas(t: int, rng: np.random.Generator) -> np.ndarray:
    if t not in (1, 2, 3):
        raise ValueError(f"t must be 1, 2 or 3, got {t}")
    if t == 1:
        return np.ones(1)
    return _dirichlet_rejection(t, rng)[0]


def relative_pdds(theta2: float, theta3: float) -> np.ndarray:
    """Unnormalized directions [1,0,0], [1,cos th2,0], [1,0,cos th3]."""
    return np.array([
        [1.0, 0.0, 0.0],
        [1.0, np.cos(theta2), 0.0],
        [1.0, 0.0, np.cos(theta3)],
    ])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Rotation matrix drawn uniformly (Haar measure) from SO(3)."""
    return Rotation.random(random_state=rng).as_matrix()


def sample_pdds(t: int, rng: np.random.Generator) -> np.ndarray:
    theta2, theta3 = rng.uniform(0.0, np.pi, size=2)
    rel = relative_pdds(theta2, theta3)[:t]
    rel /= np.linalg.norm(rel, axis=1, keepdims=True)
    return rel @ random_rotation(rng).T


def trilinear_weights() -> np.ndarray:
    """(3, 3, 3, 8) weights of the 8 patch corners for every voxel.

    Corner c = 4*cx + 2*cy + cz with cx, cy, cz in {0, 1}.
    """
    u = np.array([0.0, 0.5, 1.0])
    w = np.empty((3, 3, 3, 8))
    for c in range(8):
        cx, cy, cz = (c >> 2) & 1, (c >> 1) & 1, c & 1
        wx = u if cx else 1.0 - u
        wy = u if cy else 1.0 - u
        wz = u if cz else 1.0 - u
        w[..., c] = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
    return w


_TRILINEAR = trilinear_weights()


def build_patch_pdds(base, sigma_r: float, rng: np.random.Generator, *, normalize: bool = True) -> np.ndarray:
    """Per-voxel fiber directions of a 3x3x3 patch, shape (3, 3, 3, t, 3).

    Each of the 8 corners gets ``base`` plus isotropic Gaussian noise of std
    ``sigma_r`` per component; the other voxels are trilinear blends of the
    corners.  Vectors are normalized last.  Corner sets that would produce a
    near-zero vector anywhere are redrawn.
    """
    base = np.asarray(base, dtype=np.float64)
    while True:
        corners = base[None] + rng.normal(0.0, sigma_r, (8,) + base.shape)
        patch = np.einsum("xyzc,ctk->xyztk", _TRILINEAR, corners)
        norms = np.linalg.norm(patch, axis=-1, keepdims=True)
        if norms.min() >= 1e-6:
            break
    return patch / norms if normalize else patch


def draw_t(cfg: SynthConfig, rng: np.random.Generator) -> int:
    return 3 if cfg.t_policy == "fixed3" else int(rng.integers(1, 4))


def generate_patch(proto: AcquisitionProtocol, dictionary: SphereDictionary, cfg: SynthConfig,
                   rng: np.random.Generator) -> PatchSample:
    """One labeled 3x3x3 patch; all voxels share the fractions and the SNR."""
    snr = float(rng.uniform(*cfg.snr_range))
    t = draw_t(cfg, rng)
    alphas = sample_alphas(t, rng)
    base = sample_pdds(t, rng)
    pdds = build_patch_pdds(base, cfg.sigma_r, rng)
    clean = multi_tensor_signals(proto, np.broadcast_to(alphas, (3, 3, 3, t)), pdds, cfg.lambdas)
    signals = add_rician_noise(clean, snr, rng)
    truth = FiberConfig(alphas, pdds[1, 1, 1])
    label = encode_labels(dictionary, dictionary.weights(cfg.label_sigma), truth)
    return PatchSample(signals, label, truth, snr, pdds)


def sample_rng(master_seed: int, k: int) -> np.random.Generator:
    """Generator for sample ``k``; independent of how samples are split across workers."""
    return np.random.default_rng([master_seed, k])


@dataclass
class SynthDataset:
    signals: np.ndarray  # float32, (count, n) or (count, 3, 3, 3, n)
    labels: np.ndarray  # float32, (count, m)
    truths: list
    snrs: np.ndarray
    manifest: dict

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def center_signals(self) -> np.ndarray:
        if self.signals.ndim == 2:
            return self.signals
        return self.signals[:, 1, 1, 1, :]

    def model_inputs(self, mode: str) -> np.ndarray:
        """Training inputs for a voxel or neighborhood model."""
        if mode == "voxel":
            return self.center_signals
        if self.signals.ndim != 5:
            raise ValueError("neighborhood inputs need a dataset stored with store='patch'")
        return flatten_patches(self.signals)

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.signals.astype("<f4").tofile(out / "signals.bin")
        self.labels.astype("<f4").tofile(out / "labels.bin")
        truth = [dict(c.to_dict(), snr=float(s)) for c, s in zip(self.truths, self.snrs)]
        (out / "truth.json").write_text(json.dumps(truth))
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, out_dir, mmap: bool = False, with_truth: bool = True) -> "SynthDataset":
        out = Path(out_dir)
        manifest = json.loads((out / "manifest.json").read_text())
        sig_shape = tuple(manifest["signals_shape"])
        lab_shape = tuple(manifest["labels_shape"])
        if mmap:
            signals = np.memmap(out / "signals.bin", dtype="<f4", mode="r", shape=sig_shape)
            labels = np.memmap(out / "labels.bin", dtype="<f4", mode="r", shape=lab_shape)
        else:
            signals = np.fromfile(out / "signals.bin", dtype="<f4").reshape(sig_shape)
            labels = np.fromfile(out / "labels.bin", dtype="<f4").reshape(lab_shape)
        truths, snrs = [], np.zeros(0)
        if with_truth and (out / "truth.json").exists():
            raw = json.loads((out / "truth.json").read_text())
            truths = [FiberConfig.from_dict(r) for r in raw]
            snrs = np.array([r["snr"] for r in raw])
        return cls(signals, labels, truths, snrs, manifest)


def flatten_patches(patches: np.ndarray) -> np.ndarray:
    """(B, 3, 3, 3, n) -> (B, 27n), channel-major with z fastest inside the patch.

    Training and neighborhood inference both go through this function, so
    the input layout of a neighborhood model is fixed here.
    """
    b = patches.shape[0]
    return np.ascontiguousarray(np.moveaxis(patches, -1, 1)).reshape(b, -1)


FLATTEN_ORDER = "channel,x,y,z (z fastest)"


def _generate_range(args):
    proto, dictionary, cfg, start, stop = args
    n = proto.n
    shape = (stop - start,) + ((n,) if cfg.store == "center" else (PATCH, PATCH, PATCH, n))
    signals = np.empty(shape, dtype=np.float32)
    labels = np.empty((stop - start, dictionary.m), dtype=np.float32)
    truths, snrs = [], np.empty(stop - start)
    for i, k in enumerate(range(start, stop)):
        s = generate_patch(proto, dictionary, cfg, sample_rng(cfg.master_seed, k))
        signals[i] = s.signals[1, 1, 1] if cfg.store == "center" else s.signals
        labels[i] = s.center_label
        truths.append(s.center_truth)
        snrs[i] = s.snr
    return signals, labels, truths, snrs


def generate_dataset(proto: AcquisitionProtocol, dictionary: SphereDictionary, cfg: SynthConfig,
                     out_dir=None, workers: int = 1, chunk: int = 2000) -> SynthDataset:
    """Generate ``cfg.count`` samples; sample k only depends on (master_seed, k)."""
    bounds = [(s, min(s + chunk, cfg.count)) for s in range(0, cfg.count, chunk)]
    jobs = [(proto, dictionary, cfg, a, b) for a, b in bounds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_generate_range, jobs))
    else:
        parts = [_generate_range(j) for j in jobs]
    signals = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    truths = [t for p in parts for t in p[2]]
    snrs = np.concatenate([p[3] for p in parts])
    manifest = {
        "format": DATASET_FORMAT,
        "config": asdict(cfg),
        "protocol_sha256": proto.digest(),
        "dictionary_sha256": dictionary.digest(),
        "dictionary_m": dictionary.m,
        "n": proto.n,
        "signals_shape": list(signals.shape),
        "labels_shape": list(labels.shape),
        "flatten_order": FLATTEN_ORDER,
        "dtype": "float32-le",
    }
    ds = SynthDataset(signals, labels, truths, snrs, manifest)
    if out_dir is not None:
        ds.save(out_dir)
    return ds


def _bulk_alphas(t: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independent sample_alphas(t) draws, vectorized by rejection."""
    if t == 1:
        return np.ones((count, 1))
    out = np.empty((0, t))
    while out.shape[0] < count:
        draw = rng.dirichlet(np.ones(t), size=2 * (count - out.shape[0]) + 8)
        out = np.vstack([out, draw[draw.min(axis=1) > MIN_FRACTION]])
    return np.sort(out[:count], axis=1)


def synthetic_volume(proto: AcquisitionProtocol, shape, rng: np.random.Generator, s0: float = 100.0,
                     snr: float = 30.0, lambdas=REFERENCE_LAMBDAS, t_choices=(1, 2, 3),
                     with_truths: bool = True, dtype=np.float64):
    """Raw phantom volume (X, Y, Z, n) including b=0 channels, with random fibers per voxel.

    Each voxel draws t from ``t_choices``, constrained fractions and
    isotropic directions.  Returns (data, truths) where truths is a flat
    list of FiberConfig in C order over the voxels (None when
    ``with_truths`` is false, which saves memory on large volumes).
    """
    shape = tuple(int(s) for s in shape)
    count = int(np.prod(shape))
    data = np.empty((count, proto.n), dtype=dtype)
    ts = rng.choice(np.asarray(t_choices, dtype=int), size=count)
    alphas_all, pdds_all = [None] * count, [None] * count
    chunk = 65536
    for t in sorted(set(int(v) for v in t_choices)):
        idx = np.flatnonzero(ts == t)
        for c in range(0, idx.size, chunk):
            sel = idx[c : c + chunk]
            alphas = _bulk_alphas(t, sel.size, rng)
            pdds = rng.normal(size=(sel.size, t, 3))
            pdds /= np.linalg.norm(pdds, axis=2, keepdims=True)
            clean = multi_tensor_signals(proto, alphas, pdds, lambdas, s0=s0)
            data[sel] = add_rician_noise(clean, snr, rng, s0=s0)
            if with_truths:
                for k, v in enumerate(sel):
                    alphas_all[v], pdds_all[v] = alphas[k], pdds[k]
    truths = [FiberConfig(a, p) for a, p in zip(alphas_all, pdds_all)] if with_truths else None
    return data.reshape(shape + (proto.n,)), truths
