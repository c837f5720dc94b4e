"""Synthetic articulated capsule chains with exact dense correspondences, and cloud file I/O.

An identity is a chain of ``links`` capsules laid out along +x in its canonical
(zero-angle) pose, centred on the origin. Joints bend about the z axis. Every
frame stores the deformed position of each canonical point at the same row, so
ground-truth correspondence is the row index.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "GNPM-MANIFEST 1"
CLOUD_MAGIC = "GNPM-PC 1"


class CloudFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {msg}")


@dataclass
class DataSpec:
    identities: int = 3
    links: int = 2
    sequences: int = 2  # training sequences per identity
    heldout_sequences: int = 1  # held-out pose sequences per identity
    heldout_identities: int = 0
    frames: int = 20
    amplitude: float = 0.6
    noise: float = 0.0
    points: int = 1024  # surface points per identity
    blend: float = 0.05  # half-width of the skinning blend zone around each joint
    length_range: tuple[float, float] = (0.35, 0.65)
    radius_range: tuple[float, float] = (0.06, 0.12)
    seed: int = 0

    def validate(self) -> None:
        if self.links < 2:
            raise ValueError("links must be >= 2")
        if not 0 <= self.amplitude < np.pi:
            raise ValueError("amplitude must be in [0, pi)")
        if self.identities < 1 or self.frames < 1 or self.points < 1:
            raise ValueError("identities, frames and points must be positive")
        if self.sequences < 0 or self.heldout_sequences < 0 or self.heldout_identities < 0:
            raise ValueError("sequence counts must be non-negative")
        if self.noise < 0 or self.blend < 0:
            raise ValueError("noise and blend must be non-negative")


@dataclass
class Identity:
    id: int
    lengths: np.ndarray
    radii: np.ndarray
    canonical: np.ndarray  # [N0, 3]
    parts: np.ndarray  # [N0] link index per point
    split: str = "train"

    @property
    def joints(self) -> np.ndarray:
        """x coordinate of every interior joint in the canonical pose."""
        return -self.lengths.sum() / 2 + np.cumsum(self.lengths)[:-1]


@dataclass
class Frame:
    identity: int
    sequence: int
    index: int
    angles: np.ndarray
    cloud: np.ndarray  # [N0, 3]; row i is canonical point i
    noise: float = 0.0


@dataclass
class Sequence:
    id: int
    identity: int
    split: str  # train | heldout_pose | heldout_identity
    frames: list[int] = field(default_factory=list)  # indices into Dataset.frames


@dataclass
class Dataset:
    identities: list[Identity]
    sequences: list[Sequence]
    frames: list[Frame]
    spec: DataSpec | None = None

    def train_frames(self) -> list[int]:
        return [f for s in self.sequences if s.split == "train" for f in s.frames]

    def sequences_in(self, split: str) -> list[Sequence]:
        return [s for s in self.sequences if s.split == split]

    def next_frame(self, frame_id: int) -> int | None:
        fr = self.frames[frame_id]
        seq = self.sequences[fr.sequence]
        pos = seq.frames.index(frame_id)
        return seq.frames[pos + 1] if pos + 1 < len(seq.frames) else None

    def validate(self) -> None:
        ids = {ident.id for ident in self.identities}
        for fr in self.frames:
            if fr.identity not in ids:
                raise ValueError(f"frame references unknown identity {fr.identity}")
        for ident in self.identities:
            if ident.canonical is None or len(ident.canonical) == 0:
                raise ValueError(f"identity {ident.id} has no canonical cloud")


# -- geometry --------------------------------------------------------------------------


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def link_transforms(identity: Identity, angles) -> list[tuple[np.ndarray, np.ndarray]]:
    """Rigid ``(R, t)`` per link with ``p' = R p + t`` in canonical coordinates.

    Link 0 is the fixed root; joint ``j`` rotates link ``j + 1`` and everything
    distal to it about the joint's canonical position.
    """
    angles = np.asarray(angles, dtype=np.float64)
    transforms = [(np.eye(3), np.zeros(3))]
    for j, theta in enumerate(angles):
        c = np.array([identity.joints[j], 0.0, 0.0])
        r_local = _rot_z(theta)
        t_local = c - r_local @ c
        r_par, t_par = transforms[-1]
        transforms.append((r_par @ r_local, r_par @ t_local + t_par))
    return transforms


def skin_weights(identity: Identity, blend: float) -> np.ndarray:
    """Per-point link weights ``[N0, links]``; linear blend within ``blend`` of each joint."""
    n_links = len(identity.lengths)
    w = np.zeros((len(identity.canonical), n_links))
    w[np.arange(len(w)), identity.parts] = 1.0
    if blend <= 0:
        return w
    x = identity.canonical[:, 0]
    for j, pos in enumerate(identity.joints):
        near = np.abs(x - pos) < blend
        alpha = np.clip((x[near] - (pos - blend)) / (2 * blend), 0.0, 1.0)
        w[near] = 0.0
        w[near, j] = 1.0 - alpha
        w[near, j + 1] = alpha
    return w


def pose_points(identity: Identity, angles, blend: float = 0.0) -> np.ndarray:
    """Deformed canonical cloud under joint ``angles`` (row order preserved)."""
    weights = skin_weights(identity, blend)
    pts = identity.canonical
    out = np.zeros_like(pts)
    for l, (r, t) in enumerate(link_transforms(identity, angles)):
        out += weights[:, l : l + 1] * (pts @ r.T + t)
    return out


def _sample_capsule_chain(lengths: np.ndarray, radii: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform samples on link cylinders plus hemispherical end caps."""
    x0 = -lengths.sum() / 2
    starts = x0 + np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    side = 2 * np.pi * radii * lengths
    caps = np.array([2 * np.pi * radii[0] ** 2, 2 * np.pi * radii[-1] ** 2])
    areas = np.concatenate([side, caps])
    kind = rng.choice(len(areas), size=n, p=areas / areas.sum())
    pts = np.zeros((n, 3))
    parts = np.zeros(n, dtype=np.int64)
    n_links = len(lengths)
    for l in range(n_links):
        sel = np.flatnonzero(kind == l)
        phi = rng.uniform(0, 2 * np.pi, len(sel))
        pts[sel, 0] = starts[l] + rng.uniform(0, lengths[l], len(sel))
        pts[sel, 1] = radii[l] * np.cos(phi)
        pts[sel, 2] = radii[l] * np.sin(phi)
        parts[sel] = l
    for cap, (link, center, sign) in enumerate(((0, starts[0], -1.0), (n_links - 1, -x0, 1.0))):
        sel = np.flatnonzero(kind == n_links + cap)
        v = rng.standard_normal((len(sel), 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v[:, 0] = sign * np.abs(v[:, 0])
        pts[sel] = v * radii[link]
        pts[sel, 0] += center
        parts[sel] = link
    return pts, parts


def make_identity(ident_id: int, spec: DataSpec, rng: np.random.Generator, split: str = "train") -> Identity:
    lengths = rng.uniform(*spec.length_range, size=spec.links)
    radii = rng.uniform(*spec.radius_range, size=spec.links)
    pts, parts = _sample_capsule_chain(lengths, radii, spec.points, rng)
    return Identity(ident_id, lengths, radii, pts, parts, split)


def joint_trajectory(n_joints: int, frames: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth angles ``[frames, n_joints]``: one low-frequency sinusoid per joint."""
    freq = rng.uniform(0.5, 1.5, size=n_joints)
    phase = rng.uniform(0, 2 * np.pi, size=n_joints)
    t = np.arange(frames)[:, None] / max(frames, 1)
    return amplitude * np.sin(2 * np.pi * freq * t + phase)


def generate(spec: DataSpec | None = None, **overrides) -> Dataset:
    """Build a dataset; identical ``spec`` and seed give bit-identical output."""
    spec = spec or DataSpec()
    if overrides:
        spec = DataSpec(**{**asdict(spec), **overrides})
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    identities = [make_identity(i, spec, rng) for i in range(spec.identities)]
    identities += [
        make_identity(spec.identities + i, spec, rng, split="heldout_identity") for i in range(spec.heldout_identities)
    ]
    sequences: list[Sequence] = []
    frames: list[Frame] = []
    for ident in identities:
        if ident.split == "train":
            plan = ["train"] * spec.sequences + ["heldout_pose"] * spec.heldout_sequences
        else:
            plan = ["heldout_identity"] * max(1, spec.heldout_sequences)
        for split in plan:
            seq = Sequence(len(sequences), ident.id, split)
            angles = joint_trajectory(spec.links - 1, spec.frames, spec.amplitude, rng)
            for f in range(spec.frames):
                cloud = pose_points(ident, angles[f], spec.blend)
                if spec.noise > 0:
                    cloud = cloud + rng.normal(0.0, spec.noise, cloud.shape)
                seq.frames.append(len(frames))
                frames.append(Frame(ident.id, seq.id, f, angles[f], cloud, spec.noise))
            sequences.append(seq)
    ds = Dataset(identities, sequences, frames, spec)
    ds.validate()
    return ds


def sample_points(n_total: int, n: int, rng_or_seed) -> np.ndarray:
    """Uniform indices without replacement; ``n == n_total`` returns ``arange``."""
    if not 1 <= n <= n_total:
        raise ValueError(f"cannot sample {n} of {n_total} points")
    if n == n_total:
        return np.arange(n_total)
    rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) else np.random.default_rng(rng_or_seed)
    return rng.choice(n_total, size=n, replace=False)


# -- cloud files ------------------------------------------------------------------------


def save_cloud(path, points, corr=None, part=None) -> None:
    pts = np.asarray(points, dtype=np.float64)
    cols = ["x", "y", "z"]
    columns = [pts]
    if corr is not None:
        cols.append("corr")
        columns.append(np.asarray(corr, dtype=np.int64)[:, None])
    if part is not None:
        cols.append("part")
        columns.append(np.asarray(part, dtype=np.int64)[:, None])
    lines = [CLOUD_MAGIC, f"N {len(pts)} COLS {' '.join(cols)}"]
    extra = [c for c in columns[1:]]
    for i in range(len(pts)):
        row = [repr(float(v)) for v in pts[i]] + [str(int(c[i, 0])) for c in extra]
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class PointCloud:
    points: np.ndarray
    corr: np.ndarray | None = None
    part: np.ndarray | None = None


def load_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes().decode("utf-8")
    lines = raw.replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != CLOUD_MAGIC:
        raise CloudFormatError(path, 1, f"expected header {CLOUD_MAGIC!r}")
    if len(lines) < 2:
        raise CloudFormatError(path, 2, "missing 'N <count> COLS ...' line")
    head = lines[1].split()
    if len(head) < 5 or head[0] != "N" or head[2] != "COLS" or head[3:6] != ["x", "y", "z"]:
        raise CloudFormatError(path, 2, "expected 'N <count> COLS x y z [corr] [part]'")
    cols = head[3:]
    if cols[3:] not in ([], ["corr"], ["part"], ["corr", "part"]):
        raise CloudFormatError(path, 2, f"unsupported columns {cols[3:]}")
    try:
        n = int(head[1])
    except ValueError:
        raise CloudFormatError(path, 2, f"bad point count {head[1]!r}") from None
    body = lines[2:]
    if len(body) != n:
        raise CloudFormatError(path, 2 + min(len(body), n) + 1, f"expected {n} point rows, found {len(body)}")
    pts = np.empty((n, 3))
    ints = np.empty((n, len(cols) - 3), dtype=np.int64)
    for i, line in enumerate(body):
        fields = line.split()
        if len(fields) != len(cols):
            raise CloudFormatError(path, i + 3, f"expected {len(cols)} columns, found {len(fields)}")
        try:
            pts[i] = [float(v) for v in fields[:3]]
            for j, v in enumerate(fields[3:]):
                ints[i, j] = int(v)
        except ValueError as exc:
            raise CloudFormatError(path, i + 3, str(exc)) from None
        if (ints[i] < 0).any():
            raise CloudFormatError(path, i + 3, "corr/part must be non-negative integers")
        if not np.isfinite(pts[i]).all():
            raise CloudFormatError(path, i + 3, "non-finite coordinate")
    extra = dict(zip(cols[3:], ints.T))
    return PointCloud(pts, extra.get("corr"), extra.get("part"))


# -- dataset directories ------------------------------------------------------------------


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    idents = []
    for ident in ds.identities:
        rel = f"clouds/canonical_{ident.id:03d}.pc"
        save_cloud(root / rel, ident.canonical, np.arange(len(ident.canonical)), ident.parts)
        idents.append(
            {"id": ident.id, "split": ident.split, "canonical": rel, "lengths": ident.lengths.tolist(), "radii": ident.radii.tolist()}
        )
    seqs = []
    for seq in ds.sequences:
        entries = []
        for fid in seq.frames:
            fr = ds.frames[fid]
            rel = f"clouds/seq{seq.id:03d}_f{fr.index:03d}.pc"
            ident = ds.identities[fr.identity]
            save_cloud(root / rel, fr.cloud, np.arange(len(fr.cloud)), ident.parts)
            entries.append({"id": fid, "index": fr.index, "file": rel, "angles": fr.angles.tolist(), "noise": fr.noise})
        seqs.append({"id": seq.id, "identity": seq.identity, "split": seq.split, "frames": entries})
    manifest = {
        "format": MANIFEST_FORMAT,
        "spec": asdict(ds.spec) if ds.spec else None,
        "identities": idents,
        "sequences": seqs,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return root / MANIFEST_NAME


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{manifest_path}: not a {MANIFEST_FORMAT} manifest")
    identities = []
    for ent in sorted(manifest["identities"], key=lambda e: e["id"]):
        pc = load_cloud(root / ent["canonical"])
        parts = pc.part if pc.part is not None else np.zeros(len(pc.points), dtype=np.int64)
        identities.append(
            Identity(ent["id"], np.asarray(ent["lengths"]), np.asarray(ent["radii"]), pc.points, parts, ent.get("split", "train"))
        )
    if [i.id for i in identities] != list(range(len(identities))):
        raise ValueError("identity ids must be dense 0..C-1")
    frames: list[Frame | None] = []
    sequences = []
    for ent in sorted(manifest["sequences"], key=lambda e: e["id"]):
        seq = Sequence(ent["id"], ent["identity"], ent["split"])
        for fe in ent["frames"]:
            pc = load_cloud(root / fe["file"])
            fid = fe["id"]
            while len(frames) <= fid:
                frames.append(None)
            frames[fid] = Frame(ent["identity"], seq.id, fe["index"], np.asarray(fe["angles"]), pc.points, fe.get("noise", 0.0))
            seq.frames.append(fid)
        sequences.append(seq)
    if any(f is None for f in frames):
        raise ValueError("frame ids must be dense")
    spec = None
    if manifest.get("spec"):
        sp = dict(manifest["spec"])
        for key in ("length_range", "radius_range"):
            if key in sp:
                sp[key] = tuple(sp[key])
        spec = DataSpec(**sp)
    ds = Dataset(identities, sequences, frames, spec)
    ds.validate()
    return ds


def load_data_spec(path) -> DataSpec:
    """Data spec file: JSON object of :class:`DataSpec` fields."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("length_range", "radius_range"):
        if key in data:
            data[key] = tuple(data[key])
    return DataSpec(**data)
