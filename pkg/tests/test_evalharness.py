import csv

import numpy as np
import pytest

from memorynet.data import Image, load_pnm, make_dataset, save_pairs
from memorynet.errors import ConfigurationError, ParseError, UsageError, VersionError
from memorynet.evalharness.checkpoint import (
    MAGIC,
    Checkpoint,
    decode,
    decode_records,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from memorynet.evalharness.config import (
    ExperimentConfig,
    TrainConfig,
    config_items,
    format_config,
    parse_config,
)
from memorynet.evalharness.features import dump_features, mosaic, normalize_tile, tiles
from memorynet.evalharness.optim import AdamState, adam_step
from memorynet.evalharness.trainer import ABLATIONS, LOG_COLUMNS, ablate, evaluate, train
from memorynet.network import NetConfig, StageNetwork


def tiny_cfg(**train) -> ExperimentConfig:
    defaults = dict(phase_a_iters=2, phase_b_iters=3, val_every=2, val_count=2, checkpoint_every=0)
    defaults.update(train)
    return ExperimentConfig.build(net=NetConfig.tiny(channels=4), train=TrainConfig(**defaults))


@pytest.fixture(scope="module")
def pairs():
    return make_dataset("shadow", 4, 16, seed=0)


class TestAdam:
    def test_first_step_closed_form(self):
        cfg = TrainConfig(lr=1e-2, weight_decay=0.0)
        params = {"w": np.array(1.0)}
        new, state = adam_step(params, {"w": np.array(0.5)}, AdamState.zeros(params), cfg)
        assert new["w"] - 1.0 == pytest.approx(-1e-2 * 0.5 / (0.5 + 1e-8), abs=1e-12)
        assert state.t == 1

    def test_zero_gradient_is_identity(self):
        cfg = TrainConfig(weight_decay=0.0)
        params = {"w": np.random.default_rng(0).normal(size=(3, 2))}
        state = AdamState.zeros(params)
        for _ in range(3):
            new, state = adam_step(params, {"w": np.zeros((3, 2))}, state, cfg)
            np.testing.assert_array_equal(new["w"], params["w"])

    def test_coupled_weight_decay(self):
        cfg = TrainConfig(lr=1e-3, weight_decay=0.1)
        params = {"w": np.array([2.0])}
        new, _ = adam_step(params, {"w": np.array([0.0])}, AdamState.zeros(params), cfg)
        # decay-only gradient 0.2 gives a full lr-sized first step
        assert new["w"][0] == pytest.approx(2.0 - 1e-3 * 0.2 / (0.2 + 1e-8), abs=1e-15)

    def test_deterministic_trajectory(self):
        cfg = TrainConfig()
        rng = np.random.default_rng(1)
        grads = [{"w": g} for g in rng.normal(size=(5, 4))]

        def run():
            params = {"w": np.ones(4)}
            state = AdamState.zeros(params)
            for g in grads:
                params, state = adam_step(params, g, state, cfg)
            return params["w"], state.m["w"]

        a, b = run(), run()
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_inputs_not_mutated(self):
        params = {"w": np.ones(2)}
        state = AdamState.zeros(params)
        adam_step(params, {"w": np.ones(2)}, state, TrainConfig())
        assert state.t == 0 and np.all(state.m["w"] == 0) and np.all(params["w"] == 1)

    def test_missing_gradient_leaves_parameter_alone(self):
        cfg = TrainConfig(weight_decay=0.5)
        params = {"a": np.ones(2), "b": np.full(2, 3.0)}
        state = AdamState.zeros(params)
        for _ in range(4):
            params, state = adam_step(params, {"a": np.ones(2)}, state, cfg)
        np.testing.assert_array_equal(params["b"], 3.0)
        assert state.steps == {"a": 4, "b": 0} and state.t == 4

    def test_late_parameter_gets_fresh_first_step(self):
        cfg = TrainConfig(lr=1e-2, weight_decay=0.0)
        params = {"a": np.array(0.0), "b": np.array(1.0)}
        state = AdamState.zeros(params)
        for _ in range(3):
            params, state = adam_step(params, {"a": np.array(1.0)}, state, cfg)
        new, _ = adam_step(params, {"b": np.array(-0.25)}, state, cfg)
        assert new["b"] - 1.0 == pytest.approx(1e-2 * 0.25 / (0.25 + 1e-8), abs=1e-12)

    def test_shape_mismatch(self):
        from memorynet.errors import DimensionError

        params = {"w": np.ones(2)}
        with pytest.raises(DimensionError):
            adam_step(params, {"w": np.ones(3)}, AdamState.zeros(params), TrainConfig())


class TestConfig:
    def test_roundtrip(self):
        cfg = tiny_cfg(lr=3e-4, seed=5)
        again = parse_config(format_config(cfg))
        assert again == cfg

    def test_every_field_listed(self):
        keys = [k for k, _ in config_items(ExperimentConfig())]
        for key in ("net.base_channels", "memory.P", "loss.epsilon", "train.lr", "train.enable_contrast"):
            assert key in keys

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown key"):
            parse_config("train.learning_rate = 0.1\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigurationError, match="duplicate"):
            parse_config("train.lr = 0.1\ntrain.lr = 0.2\n")

    def test_comments_and_switches(self):
        cfg = parse_config("# tiny\nnet.base_channels = 4   # small\ntrain.enable_memory = false\n")
        assert cfg.net.memory.C == 4
        assert not cfg.net.use_memory and not cfg.loss.enable_memory

    def test_conflicting_switch(self):
        with pytest.raises(ConfigurationError):
            parse_config("train.enable_memory = false\nnet.use_memory = true\n")

    def test_bad_beta(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(beta1=0.999, beta2=0.9)

    def test_bad_value(self):
        with pytest.raises(ConfigurationError):
            parse_config("train.phase_a_iters = 2.5\n")


class TestCheckpoint:
    def test_byte_identical_roundtrip(self, tmp_path):
        cfg = tiny_cfg()
        net = StageNetwork.init(cfg.net, 3)
        ckpt = Checkpoint.from_network(cfg, net, iteration=7)
        save_checkpoint(ckpt, tmp_path / "a.memn")
        loaded = load_checkpoint(tmp_path / "a.memn")
        save_checkpoint(loaded, tmp_path / "b.memn")
        assert (tmp_path / "a.memn").read_bytes() == (tmp_path / "b.memn").read_bytes()
        assert loaded.iteration == 7 and loaded.config == cfg

    def test_forward_bit_identical(self):
        cfg = tiny_cfg()
        net = StageNetwork.init(cfg.net, 4)
        img = np.random.default_rng(0).uniform(size=(3, 8, 8))
        restored = decode(encode(Checkpoint.from_network(cfg, net))).network()
        for a, b in zip(net.forward(img), restored.forward(img)):
            np.testing.assert_array_equal(a.data, b.data)

    def test_layout(self):
        raw = encode(Checkpoint.from_network(tiny_cfg(), StageNetwork.init(tiny_cfg().net, 0)))
        assert raw[:4] == MAGIC == b"MEMN"
        assert int.from_bytes(raw[4:8], "little") == 1
        names = [name for name, _ in decode_records(raw)]
        assert "param/memory.part_metric" in names and "adam/t" in names

    def test_version_mismatch(self):
        raw = bytearray(encode(Checkpoint.from_network(tiny_cfg(), StageNetwork.init(tiny_cfg().net, 0))))
        raw[4:8] = (2).to_bytes(4, "little")
        with pytest.raises(VersionError):
            decode(bytes(raw))

    def test_truncated(self):
        raw = encode(Checkpoint.from_network(tiny_cfg(), StageNetwork.init(tiny_cfg().net, 0)))
        with pytest.raises(ParseError):
            decode(raw[:-3])

    def test_bad_magic(self):
        with pytest.raises(ParseError):
            decode(b"NOPE\x01\x00\x00\x00")


class TestTrain:
    def test_zero_iterations_is_initialization(self, pairs):
        cfg = tiny_cfg(phase_a_iters=0, phase_b_iters=0)
        result = train(cfg, pairs)
        init = StageNetwork.init(cfg.net, cfg.train.seed)
        for k, t in init.params.items():
            np.testing.assert_array_equal(result.checkpoint.params[k], t.data)
        assert result.log == []

    def test_writes_outputs_and_is_deterministic(self, pairs, tmp_path):
        cfg = tiny_cfg()
        a = train(cfg, pairs, tmp_path / "a")
        b = train(cfg, pairs, tmp_path / "b")
        log_a = (tmp_path / "a" / "metrics.csv").read_text()
        assert log_a == (tmp_path / "b" / "metrics.csv").read_text()
        rows = list(csv.DictReader(log_a.splitlines()))
        assert tuple(rows[0]) == LOG_COLUMNS
        assert [r["phase"] for r in rows] == ["A", "A", "B", "B", "B"]
        assert rows[1]["val_psnr"] != "" and rows[0]["val_psnr"] == ""
        saved = load_checkpoint(tmp_path / "a" / "checkpoint.memn")
        assert saved.iteration == 5
        assert saved.adam.steps["s3.head.w"] == 3 and saved.adam.steps["recon.head.w"] == 5
        assert saved.adam.t == 5
        assert a.log == b.log

    def test_phase_a_skipped_without_memory(self, pairs):
        result = train(tiny_cfg(enable_memory=False), pairs)
        assert [r["phase"] for r in result.log] == ["B", "B", "B"]

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(UsageError):
            train(tiny_cfg(), tmp_path / "empty")

    def test_reads_train_split(self, pairs, tmp_path):
        save_pairs(pairs, tmp_path / "data" / "train")
        result = train(tiny_cfg(phase_a_iters=0, phase_b_iters=1), tmp_path / "data")
        assert result.checkpoint.iteration == 1

    @pytest.mark.slow
    def test_phase_b_loss_decreases_on_fixed_batch(self, pairs):
        cfg = tiny_cfg(phase_a_iters=0, phase_b_iters=50, lr=1e-3, val_every=0)
        result = train(cfg, pairs[:1])
        totals = [r["total"] for r in result.log]
        assert np.all(np.isfinite(totals))
        assert np.mean(totals[-5:]) < np.mean(totals[:5])


class TestEvaluate:
    def test_ground_truth_against_itself(self, pairs, tmp_path):
        cfg = tiny_cfg()
        net = StageNetwork.init(cfg.net, 0)
        ckpt = Checkpoint.from_network(cfg, net)
        zero_head = {k: np.zeros_like(v) for k, v in ckpt.params.items() if k.startswith("s3.head")}
        ckpt.params.update(zero_head)
        clean_pairs = [type(p)(p.clean, p.clean, p.mask, p.name) for p in pairs]
        rep = evaluate(ckpt, clean_pairs, out_csv=tmp_path / "m.csv")
        assert rep.psnr == 99.0 and rep.ssim == pytest.approx(1.0, abs=1e-9) and rep.rmse_lab == 0.0
        assert rep.rmse_s == 0.0
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert len(lines) == len(pairs) + 2 and lines[-1].startswith("mean")

    def test_extent_mismatch(self, pairs):
        cfg = tiny_cfg()
        ckpt = Checkpoint.from_network(cfg, StageNetwork.init(cfg.net, 0))
        odd = make_dataset("blur", 1, 10, seed=0)
        with pytest.raises(ConfigurationError):
            evaluate(ckpt, odd)


def test_ablate_structure(pairs, tmp_path):
    cfg = tiny_cfg(phase_a_iters=1, phase_b_iters=1, val_every=0)
    rows = ablate(cfg, pairs[:2], tmp_path, test=pairs[2:])
    assert [(r["config"], r["memory"], r["contrast"]) for r in rows] == list(ABLATIONS)
    assert (tmp_path / "ablation.csv").read_text().count("\n") == 5
    assert (tmp_path / "memory_contrast" / "checkpoint.memn").exists()


class TestFeatures:
    def test_normalization(self):
        tile = np.random.default_rng(0).normal(size=(5, 6))
        out = normalize_tile(tile)
        assert out.min() == 0 and out.max() == 255
        np.testing.assert_array_equal(out[tile == tile.min()], 0)
        np.testing.assert_array_equal(normalize_tile(np.full((2, 2), 3.0)), 0)

    def test_mosaic_tiles(self):
        feats = np.random.default_rng(1).normal(size=(5, 4, 3))
        grid = mosaic(feats)
        assert grid.shape == (2 * 4, 3 * 3)
        got = tiles(grid, 5, 4, 3)
        assert len(got) == 5
        for t, f in zip(got, feats):
            np.testing.assert_array_equal(t, normalize_tile(f))

    def test_dump(self, tmp_path, pairs):
        cfg = tiny_cfg()
        ckpt = Checkpoint.from_network(cfg, StageNetwork.init(cfg.net, 0))
        pre, post = dump_features(ckpt, pairs[0].degraded, tmp_path)
        a, b = load_pnm(pre), load_pnm(post)
        assert a.shape == (1, 2 * 16, 2 * 16)
        assert not np.array_equal(a.values, b.values)

    def test_identical_without_memory(self, tmp_path, pairs):
        cfg = tiny_cfg(enable_memory=False)
        ckpt = Checkpoint.from_network(cfg, StageNetwork.init(cfg.net, 0))
        pre, post = dump_features(ckpt, Image(pairs[0].degraded.values), tmp_path)
        assert pre.read_bytes() == post.read_bytes()
