import numpy as np
import pytest

from digrl import nn
from digrl.config import get_profile
from digrl.errors import ShapeError, SizeError
from digrl.repnet import (
    COUNT_SCALE,
    RepNet,
    RepSample,
    build_rep_dataset,
    eval_rep,
    load_rep_dataset,
    rep_loss,
    save_metrics_csv,
    train_rep,
)
from digrl.scenegen import spawn_scene
from digrl.sensor import SensorConfig, label_observation, observe

QUANT = 2.0 ** -20  # grid on which float64 addition is exact for |v| < 2^11


def quantized_cloud(rng, n, spread=0.2):
    pts = rng.uniform(-spread, spread, size=(n, 3))
    return np.round(pts / QUANT) * QUANT


def tiny_samples(n_scenes=5, n_points=300):
    """Labeled low-count scenes small enough for unit-test training."""
    cfg = SensorConfig(fps_target=n_points)
    samples = []
    for i in range(n_scenes):
        scene = spawn_scene(seed=100 + i, count_range=(3, 6))
        obs = label_observation(observe(scene, cfg))
        samples.append(
            RepSample(
                scene_id=f"{i:04d}",
                points=obs.cloud.points,
                normals=obs.cloud.normals,
                curvature=obs.cloud.curvature,
                count=obs.object_count,
                split="val" if i == n_scenes - 1 else "train",
            )
        )
    return samples


class TestForwardShapes:
    def test_desk_structure(self, rng):
        p = get_profile("desk")
        net = RepNet(p, seed=0)
        cloud = rng.uniform(-0.2, 0.2, size=(2048, 3))
        out = net.forward(cloud)
        assert out["normals"].value.shape == (2048, 3)
        assert out["curvature"].value.shape == (2048, 1)
        assert out["count"].value.shape == (1, 1)
        assert out["code"].value.shape == (p.code_size,)
        positions = out["positions"]
        assert len(positions) == len(p.level_points) + 1
        for lvl, n in enumerate(p.level_points):
            assert positions[lvl + 1].shape == (n, 3)

    def test_code_size_both_profiles(self, rng):
        for name, n_pts in (("desk", 2048), ("paper", 1100)):
            p = get_profile(name)
            net = RepNet(p, seed=0)
            cloud = rng.uniform(-0.2, 0.2, size=(n_pts, 3))
            code = net.encode(cloud)
            assert code.shape == (280,)
            assert p.code_size == 280

    def test_too_small_cloud(self, rng):
        net = RepNet(get_profile("desk"), seed=0)
        with pytest.raises(SizeError):
            net.forward(rng.uniform(-0.2, 0.2, size=(200, 3)))

    def test_bad_shape(self):
        net = RepNet(get_profile("desk"), seed=0)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((500, 2)))


class TestTranslationInvariance:
    def test_code_halves(self, rng):
        store = nn.ParamStore(dtype=np.float64)
        net = RepNet(get_profile("desk"), store=store, seed=0)
        cloud = quantized_cloud(rng, 2048)
        shift = np.round(np.array([0.13, -0.07, 0.0]) / QUANT) * QUANT
        a = net.encode(cloud)
        b = net.encode(cloud + shift)
        p = get_profile("desk")
        fa = a.reshape(p.level_points[-1], -1)
        fb = b.reshape(p.level_points[-1], -1)
        width = fa.shape[1] - 3
        assert np.array_equal(fa[:, :width], fb[:, :width])
        assert np.array_equal(fa[:, width:] + shift, fb[:, width:])

    def test_per_point_heads_invariant(self, rng):
        store = nn.ParamStore(dtype=np.float64)
        net = RepNet(get_profile("desk"), store=store, seed=0)
        cloud = quantized_cloud(rng, 2048)
        shift = np.round(np.array([-0.05, 0.11, 0.0]) / QUANT) * QUANT
        na, ca, cnt_a = net.predict(cloud)
        nb, cb, cnt_b = net.predict(cloud + shift)
        assert np.array_equal(na, nb)
        assert np.array_equal(ca, cb)
        assert cnt_a == cnt_b


class TestPredict:
    def test_output_ranges(self, rng):
        net = RepNet(get_profile("desk"), seed=0)
        normals, curv, count = net.predict(rng.uniform(-0.2, 0.2, size=(2048, 3)))
        assert np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-9)
        assert np.all((curv >= 0.0) & (curv <= 1.0 / 3.0))
        assert np.isfinite(count)

    def test_count_scaling(self, rng):
        net = RepNet(get_profile("desk"), seed=0)
        cloud = rng.uniform(-0.2, 0.2, size=(2048, 3))
        out = net.forward(cloud)
        _, _, count = net.predict(cloud)
        assert count == pytest.approx(out["count"].value.item() * COUNT_SCALE, rel=1e-12)


class TestRepLoss:
    def test_perfect_prediction_is_minus_ten(self):
        normals = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        curv = np.array([0.0, 0.1, 0.25])
        out = {
            "normals": nn.Tensor.const(normals),
            "curvature": nn.Tensor.const(curv.reshape(-1, 1)),
            "count": nn.Tensor.const(np.array([[7 / COUNT_SCALE]])),
        }
        loss = rep_loss(out, normals, curv, 7)
        assert loss.value.item() == -10.0

    def test_worst_normals(self):
        gt = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        out = {
            "normals": nn.Tensor.const(-gt),
            "curvature": nn.Tensor.const(np.zeros((2, 1))),
            "count": nn.Tensor.const(np.array([[0.0]])),
        }
        loss = rep_loss(out, gt, np.zeros(2), 0)
        assert loss.value.item() == 10.0

    def test_gradient_flows_to_all_heads(self, rng):
        net = RepNet(get_profile("desk"), seed=0)
        cloud = rng.uniform(-0.2, 0.2, size=(400, 3))
        gt_n = np.tile([0.0, 0.0, 1.0], (400, 1))
        out = net.forward(cloud)
        loss = rep_loss(out, gt_n, np.zeros(400), 5)
        nn.backward(loss)
        for name in ("sa1_l1", "fp1_l2", "cnt_l3"):
            g = net.store.get(name + ".w").grad
            assert np.abs(g).max() > 0


class TestTraining:
    def test_loss_improves_and_is_deterministic(self):
        samples = tiny_samples()

        def total_loss(net):
            tot = 0.0
            for s in samples:
                if s.split != "train":
                    continue
                out = net.forward(s.points)
                tot += rep_loss(out, s.normals, s.curvature, s.count).value.item()
            return tot

        before = total_loss(RepNet(get_profile("desk"), seed=3))
        net1, hist1 = train_rep(samples, get_profile("desk"), seed=3, epochs=3)
        net2, hist2 = train_rep(samples, get_profile("desk"), seed=3, epochs=3)
        assert total_loss(net1) < before
        assert hist1 == hist2
        assert net1.store.state_bytes() == net2.store.state_bytes()
        assert {row["split"] for row in hist1} == {"train", "val"}

    def test_eval_metrics_shape(self):
        samples = tiny_samples(n_scenes=2)
        net = RepNet(get_profile("desk"), seed=0)
        metrics = eval_rep(net, samples)
        assert set(metrics) == {"normal_cos", "normal_deg", "curv_mae", "count_mae"}
        assert -1.0 <= metrics["normal_cos"] <= 1.0
        assert metrics["curv_mae"] >= 0.0

    def test_empty_train_split_rejected(self):
        samples = tiny_samples(n_scenes=2)
        for s in samples:
            s.split = "val"
        with pytest.raises(SizeError):
            train_rep(samples, get_profile("desk"), epochs=1)


class TestDataset:
    def test_build_and_load_round_trip(self, tmp_path):
        root = tmp_path / "data"
        lines = build_rep_dataset(
            str(root), profile=get_profile("desk"), seed=11, n_scenes=3, count_range=(3, 6)
        )
        assert len(lines) == 3
        samples = load_rep_dataset(str(root))
        assert len(samples) == 3
        assert {s.split for s in samples} == {"train", "val"}
        for s in samples:
            assert len(s.points) <= get_profile("desk").fps_target
            assert np.allclose(np.linalg.norm(s.normals, axis=1), 1.0, atol=1e-6)
            assert np.all((s.curvature >= 0.0) & (s.curvature <= 1.0 / 3.0))
            assert 3 <= s.count <= 6

    def test_deterministic_rebuild(self, tmp_path):
        kwargs = dict(profile=get_profile("desk"), seed=11, n_scenes=2, count_range=(3, 5))
        build_rep_dataset(str(tmp_path / "a"), **kwargs)
        build_rep_dataset(str(tmp_path / "b"), **kwargs)
        for sub in ("manifest.txt", "scenes/0000.xyzl", "scenes/0001.xyzl"):
            assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()

    def test_missing_labels_rejected(self, tmp_path):
        root = tmp_path / "data"
        (root / "scenes").mkdir(parents=True)
        (root / "manifest.txt").write_text("0000 seed=1 count=2 split=train\n")
        from digrl.geometry import PointCloud, save_xyzl

        save_xyzl(root / "scenes" / "0000.xyzl", PointCloud(np.zeros((4, 3))))
        with pytest.raises(ShapeError):
            load_rep_dataset(str(root))

    def test_metrics_csv(self, tmp_path):
        rows = [
            {
                "epoch": 1,
                "split": "train",
                "normal_cos": 0.5,
                "normal_deg": 60.0,
                "curv_mae": 0.1,
                "count_mae": 3.0,
            }
        ]
        path = tmp_path / "m.csv"
        save_metrics_csv(rows, path)
        text = path.read_text().strip().splitlines()
        assert text[0] == "epoch,split,normal_cos,normal_deg,curv_mae,count_mae"
        assert text[1].startswith("1,train,0.5,60.0,")
