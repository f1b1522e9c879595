"""Hierarchical point-cloud encoder-decoder with geometric self-supervision.

The encoder stacks five grouping levels. Each level picks centers by farthest
point sampling, gathers neighbors inside a radius ball (capped per group),
runs a small shared two-layer tanh MLP on center-relative coordinates
concatenated with member features, and max-pools each group. The last
level's features plus center positions, flattened, form the fixed-size code
consumed by the digging policy.

The decoder walks back up: features are interpolated onto the next finer
level by inverse-squared-distance weighting over the three nearest coarse
centers, concatenated with that level's encoder features, and mixed by
another two-layer MLP. At the finest step the skip input is each point's
offset to its nearest first-level center, so the whole per-point path sees
only relative geometry and is exactly translation invariant.

Per-point heads predict the surface normal and the curvature; a global head
max-pools the coarsest features into an object-count estimate. Training is
self-supervised: the targets are PCA labels computed on the observed cloud
itself plus the known ground-truth object count.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .config import Profile, get_profile, seed_stream
from .errors import DigrlError, ShapeError, SizeError
from .geometry import (
    CURVATURE_MAX,
    PointCloud,
    ball_query,
    fps,
    idw_weights,
    load_xyzl,
    save_xyzl,
)
from .scenegen import load_scene, save_scene, spawn_scene
from .sensor import SensorConfig, label_observation, observe

NORMAL_LOSS_WEIGHT = 10.0
COUNT_SCALE = 300.0  # object counts are regressed as count / COUNT_SCALE
INTERP_K = 3


class RepNet:
    """Encoder-decoder over one observed cloud, built on the autodiff graph."""

    def __init__(
        self,
        profile: Profile | None = None,
        store: nn.ParamStore | None = None,
        seed: int = 0,
    ) -> None:
        self.profile = profile or get_profile()
        p = self.profile
        if store is None:
            store = nn.ParamStore()
        if "sa1_l1.w" not in store:
            rng = seed_stream(seed, "repnet-init")
            f_prev = 0
            for i, width in enumerate(p.level_widths):
                store.add_linear(f"sa{i + 1}_l1", 3 + f_prev, width, rng)
                store.add_linear(f"sa{i + 1}_l2", width, width, rng)
                f_prev = width
            # Decoder, coarsest first: fp5 refines onto level-4 points, ...,
            # fp1 onto the raw cloud. The last stage keeps a hidden layer at
            # the second-to-last decoder width before the 4-channel output.
            w = p.level_widths
            fpw = p.fp_widths
            ins = [w[4] + w[3], fpw[0] + w[2], fpw[1] + w[1], fpw[2] + w[0], fpw[3] + 3]
            for j in range(4):
                store.add_linear(f"fp{5 - j}_l1", ins[j], fpw[j], rng)
                store.add_linear(f"fp{5 - j}_l2", fpw[j], fpw[j], rng)
            store.add_linear("fp1_l1", ins[4], fpw[3], rng)
            store.add_linear("fp1_l2", fpw[3], fpw[4], rng)
            store.add_linear("cnt_l1", w[4], 64, rng)
            store.add_linear("cnt_l2", 64, 32, rng)
            store.add_linear("cnt_l3", 32, 1, rng)
        self.store = store

    def _layer(self, x: nn.Tensor, name: str) -> nn.Tensor:
        return nn.linear(x, self.store.tensor(name + ".w"), self.store.tensor(name + ".b"))

    def _norm_layer(self, x: nn.Tensor, name: str) -> nn.Tensor:
        """Linear layer followed by per-channel standardization over points.

        The standardization removes any constant-across-points component
        per channel, so the trunk cannot satisfy the losses with a cloud
        wide constant prediction, and it keeps pre-activations in the
        responsive range of the squashing nonlinearity. Output and
        single-row layers stay plain linear.
        """
        return nn.standardize_cols(self._layer(x, name))

    def forward(self, points) -> dict:
        """Run the full network on one (N, 3) cloud.

        Returns a dict of graph tensors: per-point raw ``normals`` (N, 3) and
        ``curvature`` (N, 1), the scalar-normalized ``count`` (1, 1), and the
        flattened ``code``.
        """
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"expected (N, 3) points, got {pts.shape}")
        p = self.profile
        if len(pts) < p.level_points[0]:
            raise SizeError(
                f"cloud of {len(pts)} points is below the first grouping level "
                f"({p.level_points[0]}); profile {p.name!r} expects denser input"
            )
        dtype = self.store.dtype
        positions = [pts]
        level_feats: list[nn.Tensor] = []
        feats: nn.Tensor | None = None
        for i in range(len(p.level_points)):
            prev = positions[-1]
            centers_idx = fps(prev, p.level_points[i])
            centers = prev[centers_idx]
            groups = [
                ball_query(prev, c, p.level_radii[i], p.level_group_sizes[i]) for c in centers
            ]
            flat_idx = np.concatenate(groups)
            rel = np.concatenate(
                [prev[g] - centers[gi] for gi, g in enumerate(groups)], axis=0
            )
            # Offsets are divided by the grouping radius so every level sees
            # inputs near unit scale; raw meter offsets are too small for the
            # tanh layers to train on.
            rel_t = nn.Tensor.const(rel / p.level_radii[i], dtype=dtype)
            if feats is None:
                x = rel_t
            else:
                x = nn.concat([rel_t, nn.gather_rows(feats, flat_idx)], axis=1)
            h = nn.tanh(self._norm_layer(x, f"sa{i + 1}_l1"))
            h = nn.tanh(self._norm_layer(h, f"sa{i + 1}_l2"))
            flat_groups = []
            off = 0
            for g in groups:
                flat_groups.append(np.arange(off, off + len(g)))
                off += len(g)
            feats = nn.max_pool_groups(h, flat_groups)
            positions.append(centers)
            level_feats.append(feats)

        code = nn.reshape(
            nn.concat([feats, nn.Tensor.const(positions[-1], dtype=dtype)], axis=1), (-1,)
        )

        cur = level_feats[-1]
        for j in range(5, 0, -1):
            src_pos = positions[j]
            dst_pos = positions[j - 1]
            idx, wts = idw_weights(src_pos, dst_pos, k=min(INTERP_K, len(src_pos)))
            parts = [
                nn.scale_rows(nn.gather_rows(cur, idx[:, kk]), wts[:, kk].astype(dtype))
                for kk in range(idx.shape[1])
            ]
            interp = parts[0]
            for extra in parts[1:]:
                interp = nn.add(interp, extra)
            if j > 1:
                skip = level_feats[j - 2]
            else:
                skip = nn.Tensor.const(
                    (dst_pos - src_pos[idx[:, 0]]) / p.level_radii[0], dtype=dtype
                )
            x = nn.concat([interp, skip], axis=1)
            cur = nn.tanh(self._norm_layer(x, f"fp{j}_l1"))
            if j > 1:
                cur = nn.tanh(self._norm_layer(cur, f"fp{j}_l2"))
            else:
                cur = self._layer(cur, "fp1_l2")

        normals = nn.col_slice(cur, 0, 3)
        curvature = nn.col_slice(cur, 3, 4)
        ch = nn.relu(self._norm_layer(level_feats[-1], "cnt_l1"))
        pooled = nn.max_pool_groups(ch, [np.arange(len(ch.value))])
        ch = nn.relu(self._layer(pooled, "cnt_l2"))
        count = self._layer(ch, "cnt_l3")
        return {
            "normals": normals,
            "curvature": curvature,
            "count": count,
            "code": code,
            "positions": positions,
        }

    def encode(self, points) -> np.ndarray:
        """Fixed-size scene code for the policy (no gradients retained)."""
        return np.array(self.forward(points)["code"].value, dtype=np.float64)

    def predict(self, points) -> tuple[np.ndarray, np.ndarray, float]:
        """Evaluated per-point labels: unit normals, clipped curvature, count."""
        out = self.forward(points)
        raw = np.asarray(out["normals"].value, dtype=np.float64)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        normals = raw / np.where(norms <= 1e-8, 1e-8, norms)
        curv = np.clip(
            np.asarray(out["curvature"].value, dtype=np.float64).reshape(-1),
            0.0,
            CURVATURE_MAX,
        )
        count = float(out["count"].value.reshape(())) * COUNT_SCALE
        return normals, curv, count


def rep_loss(out: dict, normals_gt, curvature_gt, count: int) -> nn.Tensor:
    """Combined label loss: weighted normal alignment + curvature + count."""
    n_loss = nn.normal_loss(out["normals"], normals_gt)
    c_loss = nn.smooth_l1(out["curvature"], np.asarray(curvature_gt).reshape(-1, 1))
    o_target = np.array([[count / COUNT_SCALE]])
    o_loss = nn.smooth_l1(out["count"], o_target)
    return nn.add(nn.add(nn.mul(n_loss, NORMAL_LOSS_WEIGHT), c_loss), o_loss)


# ---------------------------------------------------------------------------
# Dataset: labeled observations on disk


@dataclass
class RepSample:
    scene_id: str
    points: np.ndarray
    normals: np.ndarray
    curvature: np.ndarray
    count: int
    split: str


def gen_scene_files(
    out_dir,
    profile: Profile | None = None,
    seed: int = 0,
    n_scenes: int | None = None,
    count_range: tuple[int, int] = (50, 300),
    progress=None,
) -> list[str]:
    """Spawn settled scenes and write them under ``raw_scenes/NNNN.scene``.

    A ``raw_manifest.txt`` records each scene's seed and object count.
    """
    profile = profile or get_profile()
    n_scenes = n_scenes if n_scenes is not None else profile.rep_scenes
    raw_dir = os.path.join(out_dir, "raw_scenes")
    os.makedirs(raw_dir, exist_ok=True)
    lines = []
    for i in range(n_scenes):
        scene_seed = int(seed_stream(seed, f"rep-scene-{i}").integers(0, 2**62))
        scene = spawn_scene(scene_seed, count_range=count_range)
        save_scene(scene, os.path.join(raw_dir, f"{i:04d}.scene"))
        lines.append(f"{i:04d} seed={scene_seed} count={scene.object_count}")
        if progress is not None:
            progress(i + 1, n_scenes)
    with open(os.path.join(out_dir, "raw_manifest.txt"), "w") as fh:
        fh.write("# settled scenes, one line per file\n")
        fh.write("\n".join(lines) + "\n")
    return lines


def label_scene_files(
    root_dir,
    out_dir=None,
    profile: Profile | None = None,
    seed: int = 0,
    val_fraction: float = 0.1,
    progress=None,
) -> list[str]:
    """Observe and label every raw scene into ``scenes/NNNN.xyzl``.

    The ``manifest.txt`` written next to them carries each scene's seed, true
    object count, and train/val split tag.
    """
    profile = profile or get_profile()
    out_dir = out_dir or root_dir
    cfg = SensorConfig(fps_target=profile.fps_target)
    raw_manifest = os.path.join(root_dir, "raw_manifest.txt")
    entries = []
    with open(raw_manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            scene_id, *kvs = line.split()
            entries.append((scene_id, dict(kv.split("=", 1) for kv in kvs)))
    if not entries:
        raise SizeError(f"no scenes listed in {raw_manifest}")
    split_rng = seed_stream(seed, "rep-split")
    splits = np.where(split_rng.random(len(entries)) < val_fraction, "val", "train")
    if len(entries) >= 2:  # both splits must be inhabited
        if (splits == "train").all():
            splits[-1] = "val"
        if (splits == "val").all():
            splits[-1] = "train"
    scene_dir = os.path.join(out_dir, "scenes")
    os.makedirs(scene_dir, exist_ok=True)
    lines = []
    for k, (scene_id, meta) in enumerate(entries):
        scene = load_scene(os.path.join(root_dir, "raw_scenes", f"{scene_id}.scene"))
        obs = label_observation(observe(scene, cfg))
        save_xyzl(os.path.join(scene_dir, f"{scene_id}.xyzl"), obs.cloud)
        lines.append(
            f"{scene_id} seed={meta.get('seed', -1)} count={obs.object_count} "
            f"split={splits[k]}"
        )
        if progress is not None:
            progress(k + 1, len(entries))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("# labeled observation dataset, one line per scene\n")
        fh.write("\n".join(lines) + "\n")
    return lines


def build_rep_dataset(
    out_dir,
    profile: Profile | None = None,
    seed: int = 0,
    n_scenes: int | None = None,
    count_range: tuple[int, int] = (50, 300),
    val_fraction: float = 0.1,
    progress=None,
) -> list[str]:
    """Generate, observe, and label a full dataset tree in one call."""
    gen_scene_files(
        out_dir,
        profile=profile,
        seed=seed,
        n_scenes=n_scenes,
        count_range=count_range,
        progress=progress,
    )
    return label_scene_files(
        out_dir, profile=profile, seed=seed, val_fraction=val_fraction, progress=progress
    )


def load_rep_dataset(data_dir) -> list[RepSample]:
    manifest = os.path.join(data_dir, "manifest.txt")
    samples = []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            scene_id, *kvs = line.split()
            meta = dict(kv.split("=", 1) for kv in kvs)
            cloud = load_xyzl(os.path.join(data_dir, "scenes", f"{scene_id}.xyzl"))
            if cloud.normals is None or cloud.curvature is None:
                raise ShapeError(f"scene {scene_id} has no labels")
            samples.append(
                RepSample(
                    scene_id=scene_id,
                    points=cloud.points,
                    normals=cloud.normals,
                    curvature=cloud.curvature,
                    count=int(meta["count"]),
                    split=meta.get("split", "train"),
                )
            )
    if not samples:
        raise SizeError(f"no samples found under {data_dir}")
    return samples


# ---------------------------------------------------------------------------
# Training and evaluation


def eval_rep(net: RepNet, samples: list[RepSample]) -> dict:
    """Aggregate label metrics over a sample list."""
    cos_sum, cos_n = 0.0, 0
    curv_sum = 0.0
    count_err = []
    for s in samples:
        normals, curv, count = net.predict(s.points)
        cos_sum += float(np.sum(np.sum(normals * s.normals, axis=1)))
        cos_n += len(s.points)
        curv_sum += float(np.sum(np.abs(curv - s.curvature)))
        count_err.append(abs(count - s.count))
    cos_mean = cos_sum / cos_n
    return {
        "normal_cos": cos_mean,
        "normal_deg": float(np.degrees(np.arccos(np.clip(cos_mean, -1.0, 1.0)))),
        "curv_mae": curv_sum / cos_n,
        "count_mae": float(np.mean(count_err)),
    }


def train_rep(
    samples: list[RepSample],
    profile: Profile | None = None,
    seed: int = 0,
    epochs: int = 10,
    batch_size: int = 16,
    lr: float = 0.01,
    weight_decay: float = 1e-4,
    translate_jitter: float = 0.1,
    log=None,
) -> tuple[RepNet, list[dict]]:
    """Train the label heads; returns the net and per-epoch split metrics.

    Each optimizer step averages gradients over a batch of clouds; every
    cloud is jittered by one shared planar translation, which the network
    must ignore by construction. Training aborts on a non-finite loss.
    """
    profile = profile or get_profile()
    net = RepNet(profile, seed=seed)
    rng = seed_stream(seed, "rep-train")
    train = [s for s in samples if s.split == "train"]
    val = [s for s in samples if s.split == "val"]
    if not train:
        raise SizeError("no training split")
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        for lo in range(0, len(order), batch_size):
            batch = [train[i] for i in order[lo : lo + batch_size]]
            net.store.zero_grads()
            for s in batch:
                shift = np.zeros(3)
                shift[:2] = rng.uniform(-translate_jitter, translate_jitter, size=2)
                out = net.forward(s.points + shift)
                loss = nn.mul(rep_loss(out, s.normals, s.curvature, s.count), 1.0 / len(batch))
                if not np.isfinite(loss.value):
                    raise DigrlError(f"non-finite loss at epoch {epoch}")
                nn.backward(loss)
            net.store.adam_step(lr, weight_decay=weight_decay)
        for split_name, split_samples in (("train", train), ("val", val)):
            if not split_samples:
                continue
            row = {"epoch": epoch, "split": split_name}
            row.update(eval_rep(net, split_samples))
            history.append(row)
            if log is not None:
                log(
                    "epoch %d %s cos=%.4f deg=%.2f curv=%.4f count=%.2f"
                    % (
                        epoch,
                        split_name,
                        row["normal_cos"],
                        row["normal_deg"],
                        row["curv_mae"],
                        row["count_mae"],
                    )
                )
    return net, history


METRIC_FIELDS = ("epoch", "split", "normal_cos", "normal_deg", "curv_mae", "count_mae")


def save_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_FIELDS})
