"""Pipeline plumbing: config files, checkpoints, corpora, tiling, training.

Training-loop tests run a handful of steps on deliberately tiny models; the
full-budget behavior is exercised by the acceptance suite.
"""

import os

import numpy as np
import pytest

from dpir.numerics import Tensor
from dpir.pipeline import (Checkpoint, OptimSnapshot, RunConfig,
                           apply_overrides, build_bundle, build_context_corpus,
                           build_manifest, build_shapes_corpus, load_bundle,
                           load_checkpoint, parse_config, read_manifest,
                           restore, save_checkpoint, serialize_config,
                           train_ae, train_dpir)
from dpir.pipeline.data import (Corpus, from_uint8, list_images, load_image,
                                save_image, to_uint8)
from dpir.pipeline.restore import _ramp_weights, _tile_starts, worker_count

SMALL = [
    "model.model_dim=32", "model.num_blocks=2", "model.num_heads=2",
    "model.prompt_dim=32", "model.pooled_dim=16",
    "model.ae_widths=8,12,16,24",
    "conditioning.extractor_widths=4,4",
    "schedule.ae_pretrain_steps=4", "schedule.ae_finetune_steps=4",
    "schedule.gan_warmup_steps=2", "schedule.dpir_steps=4",
    "flow.sample_steps=2",
]


def small_cfg(tmp_path, *extra):
    cfg = RunConfig()
    apply_overrides(cfg, SMALL + [
        f"paths.hq_dir={tmp_path}/hq",
        f"paths.manifest={tmp_path}/manifest.csv",
        f"paths.out_dir={tmp_path}/run",
    ] + list(extra))
    return cfg


@pytest.fixture(scope="module")
def shapes_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("shapes")
    build_shapes_corpus(str(d / "hq"), seed=0)
    return d


class TestConfig:
    def test_defaults_validate(self):
        RunConfig().validate()

    def test_serialize_parse_round_trip(self):
        cfg = RunConfig()
        apply_overrides(cfg, ["seed=7", "flow.sample_steps=13",
                              "degradation.noise_hi=0.123",
                              "degradation.second_pass=true",
                              "model.ae_widths=8,12,16,24"])
        text = serialize_config(cfg)
        again = parse_config(text)
        assert serialize_config(again) == text
        assert again.seed == 7
        assert again.degradation.second_pass is True
        assert again.model.ae_widths == (8, 12, 16, 24)

    def test_unknown_key_rejected_with_line(self):
        text = serialize_config(RunConfig()) + "\nbogus_key = 3\n"
        with pytest.raises(ValueError, match="line"):
            parse_config(text)

    def test_unknown_section_rejected(self):
        with pytest.raises(ValueError, match="nonsense"):
            parse_config("[nonsense]\nx = 1\n")

    def test_override_requires_known_field(self):
        cfg = RunConfig()
        with pytest.raises(ValueError):
            apply_overrides(cfg, ["model.does_not_exist=1"])

    def test_override_format_enforced(self):
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), ["model.model_dim"])

    def test_even_context_grid_rejected(self):
        cfg = RunConfig()
        cfg.conditioning.grid = 4
        with pytest.raises(ValueError, match="grid"):
            cfg.validate()

    def test_unknown_prompt_mode_rejected(self):
        cfg = RunConfig()
        cfg.conditioning.mode = "telepathy"
        with pytest.raises(ValueError, match="mode"):
            cfg.validate()

    def test_patch_must_divide_latent_grid(self):
        cfg = RunConfig()
        cfg.data.hq_patch = 40  # latent grid 5, patch 2
        with pytest.raises(ValueError):
            cfg.validate()

    def test_comments_and_blank_lines_ignored(self):
        text = "# header\n\nseed = 3\n[flow]\n# note\nsample_steps = 4\n"
        cfg = parse_config(text)
        assert cfg.seed == 3 and cfg.flow.sample_steps == 4


class TestCheckpoint:
    def roundtrip(self, tmp_path, ck):
        path = str(tmp_path / "t.ckpt")
        save_checkpoint(path, ck)
        return path, load_checkpoint(path)

    def test_tensors_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.w": rng.standard_normal((3, 5)).astype(np.float32),
                   "b.scalar": np.float32(2.5) * np.ones((), np.float32),
                   "c.vec": rng.standard_normal(7).astype(np.float32)}
        _, back = self.roundtrip(tmp_path, Checkpoint("seed = 0", 12, tensors, {}))
        assert back.step == 12
        assert back.config_text == "seed = 0"
        assert set(back.tensors) == set(tensors)
        for k in tensors:
            assert back.tensors[k].shape == tensors[k].shape
            assert np.array_equal(back.tensors[k], tensors[k])

    def test_optimizer_state_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        shapes = {"p.w": (2, 3), "p.b": (3,)}
        snap = OptimSnapshot(
            lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01,
            step_count=17,
            m={k: rng.standard_normal(s).astype(np.float32)
               for k, s in shapes.items()},
            v={k: rng.random(s).astype(np.float32)
               for k, s in shapes.items()})
        ck = Checkpoint("seed = 0", 17,
                        {k: np.zeros(s, np.float32) for k, s in shapes.items()},
                        {"grp": snap})
        _, back = self.roundtrip(tmp_path, ck)
        got = back.optim["grp"]
        assert got.step_count == 17 and got.weight_decay == 0.01
        for k in shapes:
            assert np.array_equal(got.m[k], snap.m[k])
            assert np.array_equal(got.v[k], snap.v[k])

    def test_bad_magic_rejected(self, tmp_path):
        path, _ = self.roundtrip(
            tmp_path, Checkpoint("x = 1", 0, {"a": np.zeros(2, np.float32)}, {}))
        blob = bytearray(open(path, "rb").read())
        blob[:4] = b"JUNK"
        open(path, "wb").write(bytes(blob))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        path, _ = self.roundtrip(
            tmp_path, Checkpoint("x = 1", 0, {"a": np.zeros(2, np.float32)}, {}))
        blob = bytearray(open(path, "rb").read())
        blob[8:12] = (99).to_bytes(4, "little")
        open(path, "wb").write(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        path, _ = self.roundtrip(
            tmp_path, Checkpoint("x = 1", 0, {"a": np.ones(64, np.float32)}, {}))
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:len(blob) - 9])
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path, _ = self.roundtrip(
            tmp_path, Checkpoint("x = 1", 0, {"a": np.zeros(2, np.float32)}, {}))
        with open(path, "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_select_prefix(self):
        ck = Checkpoint("x = 1", 0, {"ae.w": np.zeros(1, np.float32),
                                     "dit.w": np.ones(1, np.float32)}, {})
        assert list(ck.select("ae.")) == ["ae.w"]


class TestImageIO:
    def test_uint8_round_trip_exact(self):
        img = from_uint8(np.arange(256, dtype=np.uint8).reshape(1, 16, 16)
                         .repeat(3, 0))
        assert np.array_equal(to_uint8(img),
                              np.arange(256, dtype=np.uint8)
                              .reshape(1, 16, 16).repeat(3, 0))

    @pytest.mark.parametrize("ext", ["png", "ppm"])
    def test_file_round_trip(self, tmp_path, ext):
        rng = np.random.default_rng(3)
        img = rng.random((3, 10, 14), dtype=np.float32)
        path = str(tmp_path / f"x.{ext}")
        save_image(path, img)
        back = load_image(path)
        assert back.dtype == np.float32 and back.shape == (3, 10, 14)
        assert np.array_equal(to_uint8(back), to_uint8(img))

    def test_list_images_sorted(self, tmp_path):
        for name in ("b.png", "a.ppm", "c.txt"):
            if name.endswith(".txt"):
                (tmp_path / name).write_text("no")
            else:
                save_image(str(tmp_path / name), np.zeros((3, 8, 8), np.float32))
        assert list_images(str(tmp_path)) == ["a.ppm", "b.png"]

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            list_images(str(tmp_path))


class TestCorpora:
    def test_shapes_corpus_is_deterministic(self, tmp_path):
        a = build_shapes_corpus(str(tmp_path / "a"), seed=5)
        b = build_shapes_corpus(str(tmp_path / "b"), seed=5)
        assert a == b and len(a) == 16
        for name in a:
            pa = open(tmp_path / "a" / name, "rb").read()
            pb = open(tmp_path / "b" / name, "rb").read()
            assert pa == pb

    def test_shapes_corpus_shape_and_captions(self, shapes_dir):
        corpus = Corpus.from_dir(str(shapes_dir / "hq"))
        assert len(corpus) == 16
        assert corpus.images[0].shape == (3, 64, 64)
        assert all(len(c.split()) == 2 for c in corpus.captions)

    def test_context_corpus_geometry(self, tmp_path):
        names = build_context_corpus(str(tmp_path / "ctx"), seed=0)
        corpus = Corpus.from_dir(str(tmp_path / "ctx"))
        assert len(names) == 6
        assert corpus.images[0].shape == (3, 192, 192)

    def test_sample_patch_deterministic_and_in_bounds(self, shapes_dir):
        corpus = Corpus.from_dir(str(shapes_dir / "hq"))
        a = corpus.sample_patch(np.random.default_rng(9), 32)
        b = corpus.sample_patch(np.random.default_rng(9), 32)
        patch, full, top, left, caption = a
        assert patch.shape == (3, 32, 32)
        assert np.array_equal(patch, full[:, top:top + 32, left:left + 32])
        assert np.array_equal(a[0], b[0]) and a[2:] == b[2:]

    def test_subset_keeps_alignment(self, shapes_dir):
        corpus = Corpus.from_dir(str(shapes_dir / "hq"))
        sub = corpus.subset([3, 5])
        assert sub.names == [corpus.names[3], corpus.names[5]]
        assert sub.captions == [corpus.captions[3], corpus.captions[5]]


class TestManifest:
    def test_build_and_read(self, shapes_dir, tmp_path):
        cfg = small_cfg(tmp_path)
        rows = build_manifest(str(shapes_dir / "hq"), cfg.paths.manifest,
                              cfg.degradation, seed=0)
        back = read_manifest(cfg.paths.manifest)
        assert len(back) == 16
        for row in back:
            assert os.path.exists(row.hq) and os.path.exists(row.lq)
            lq = load_image(row.lq)
            assert lq.shape == (3, 16, 16)
            assert "blur_kind=" in row.recipe

    def test_rebuild_is_bitwise(self, shapes_dir, tmp_path):
        cfg = small_cfg(tmp_path)
        build_manifest(str(shapes_dir / "hq"), cfg.paths.manifest,
                       cfg.degradation, seed=0)
        first = open(cfg.paths.manifest).read()
        lq0 = sorted(os.listdir(tmp_path / "lq"))[0]
        bytes_first = open(tmp_path / "lq" / lq0, "rb").read()
        build_manifest(str(shapes_dir / "hq"), cfg.paths.manifest,
                       cfg.degradation, seed=0)
        assert open(cfg.paths.manifest).read() == first
        assert open(tmp_path / "lq" / lq0, "rb").read() == bytes_first


class TestTiling:
    def test_tile_starts_cover_extent(self):
        starts = _tile_starts(24, 8, 6)
        assert starts[0] == 0 and starts[-1] == 16
        assert all(s + 8 <= 24 for s in starts)

    def test_small_extent_single_tile(self):
        assert _tile_starts(8, 8, 6) == [0]
        assert _tile_starts(5, 8, 6) == [0]

    def test_last_start_clamped(self):
        starts = _tile_starts(26, 8, 6)
        assert starts[-1] == 18 and sorted(set(starts)) == starts

    def test_ramp_weights_plateau_and_edges(self):
        w = _ramp_weights(16, 16, 4)
        assert w.shape == (1, 16, 16)
        assert w.max() == 1.0
        assert w[0, 8, 8] == 1.0
        assert 0 < w[0, 0, 8] < 1

    def test_worker_count_env(self, monkeypatch):
        monkeypatch.setenv("DPIR_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("DPIR_THREADS", "not-a-number")
        assert worker_count() == 1
        monkeypatch.setenv("DPIR_THREADS", "0")
        assert worker_count() == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory, shapes_dir):
    tmp = tmp_path_factory.mktemp("train")
    cfg = small_cfg(tmp)
    cfg.paths.hq_dir = str(shapes_dir / "hq")
    ae = train_ae(cfg)
    dp = train_dpir(cfg, ae.checkpoint)
    return cfg, ae, dp


class TestTrainingLoops:
    def test_ae_decoder_frozen_in_stage_two(self, trained):
        _, ae, _ = trained
        assert (ae.metrics["decoder_checksum_before"]
                == ae.metrics["decoder_checksum_after"])

    def test_ae_loss_log_has_both_stages(self, trained):
        _, ae, _ = trained
        lines = open(ae.log).read().strip().splitlines()
        assert lines[0] == "step,stage,l1,perceptual,adversarial,total"
        stages = {line.split(",")[1] for line in lines[1:]}
        assert stages == {"1", "2"}

    def test_gan_term_zero_before_warmup(self, trained):
        _, ae, _ = trained
        for line in open(ae.log).read().strip().splitlines()[1:]:
            step, stage, _, _, adv, _ = line.split(",")
            if stage == "2" and int(step) < 2:
                assert float(adv) == 0.0

    def test_dpir_losses_finite_and_logged(self, trained):
        _, _, dp = trained
        lines = open(dp.log).read().strip().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 1 + 4
        assert all(np.isfinite(float(l.split(",")[1])) for l in lines[1:])

    def test_checkpoint_embeds_resolved_config(self, trained):
        cfg, _, dp = trained
        ck = load_checkpoint(dp.checkpoint)
        assert ck.config_text == serialize_config(cfg)
        assert ck.step == 4

    def test_checkpoint_carries_latent_stats(self, trained):
        _, _, dp = trained
        ck = load_checkpoint(dp.checkpoint)
        assert ck.tensors["flow.latent_mu"].shape == (8,)
        assert (ck.tensors["flow.latent_sigma"] > 0).all()

    def test_restore_shape_and_determinism(self, trained):
        _, _, dp = trained
        bundle, cfg = load_bundle(dp.checkpoint)
        lq = np.random.default_rng(4).random((3, 16, 16), dtype=np.float32)
        a = restore(bundle, cfg, lq, "red circle", seed=3)
        b = restore(bundle, cfg, lq, "red circle", seed=3)
        assert a.shape == (3, 64, 64)
        assert a.dtype == np.float32
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_restore_seed_changes_output(self, trained):
        _, _, dp = trained
        bundle, cfg = load_bundle(dp.checkpoint)
        lq = np.random.default_rng(4).random((3, 16, 16), dtype=np.float32)
        a = restore(bundle, cfg, lq, "red circle", seed=3)
        c = restore(bundle, cfg, lq, "red circle", seed=4)
        assert not np.array_equal(a, c)

    def test_restore_tiled_covers_canvas(self, trained):
        _, _, dp = trained
        bundle, cfg = load_bundle(dp.checkpoint)
        lq = np.random.default_rng(5).random((3, 48, 48), dtype=np.float32)
        seen = []
        out = restore(bundle, cfg, lq, "stripes", seed=0,
                      probe=lambda i, s: seen.append((i, len(s))))
        assert out.shape == (3, 192, 192)
        assert len(seen) == 16
        assert all(n == cfg.flow.sample_steps for _, n in seen)

    def test_restore_mode_override(self, trained):
        _, _, dp = trained
        bundle, cfg = load_bundle(dp.checkpoint)
        lq = np.random.default_rng(6).random((3, 16, 16), dtype=np.float32)
        a = restore(bundle, cfg, lq, "red circle", seed=0)
        b = restore(bundle, cfg, lq, "red circle", seed=0, mode="text_only")
        assert not np.array_equal(a, b)

    def test_resume_matches_uninterrupted_run(self, tmp_path, shapes_dir):
        hq = str(shapes_dir / "hq")
        cfg_full = small_cfg(tmp_path, f"paths.out_dir={tmp_path}/full",
                             "schedule.dpir_steps=4")
        cfg_full.paths.hq_dir = hq
        ae = train_ae(cfg_full)
        full = train_dpir(cfg_full, ae.checkpoint)

        cfg_half = small_cfg(tmp_path, f"paths.out_dir={tmp_path}/half",
                             "schedule.dpir_steps=2")
        cfg_half.paths.hq_dir = hq
        half = train_dpir(cfg_half, ae.checkpoint)
        cfg_rest = small_cfg(tmp_path, f"paths.out_dir={tmp_path}/rest",
                             "schedule.dpir_steps=4")
        cfg_rest.paths.hq_dir = hq
        rest = train_dpir(cfg_rest, ae.checkpoint, resume=half.checkpoint)

        ck_full = load_checkpoint(full.checkpoint)
        ck_rest = load_checkpoint(rest.checkpoint)
        assert set(ck_full.tensors) == set(ck_rest.tensors)
        for k in ck_full.tensors:
            assert np.array_equal(ck_full.tensors[k], ck_rest.tensors[k]), k
        # the resumed log replays the uninterrupted per-step losses exactly
        tail_full = open(full.log).read().strip().splitlines()[3:]
        tail_rest = open(rest.log).read().strip().splitlines()[1:]
        assert tail_full == tail_rest

    def test_dpir_training_leaves_frozen_groups_untouched(self, trained):
        _, ae, dp = trained
        ck_ae = load_checkpoint(ae.checkpoint)
        ck_dp = load_checkpoint(dp.checkpoint)
        for k in ck_ae.tensors:
            if k.startswith(("ae.", "dr.")):
                assert np.array_equal(ck_ae.tensors[k], ck_dp.tensors[k]), k


class TestBundle:
    def test_unknown_prefix_rejected(self, tmp_path, shapes_dir):
        cfg = small_cfg(tmp_path)
        bundle = build_bundle(cfg)
        with pytest.raises(ValueError, match="prefix"):
            bundle.load_tensors({}, ("nope.",))

    def test_restore_needs_latent_stats(self, tmp_path):
        cfg = small_cfg(tmp_path)
        bundle = build_bundle(cfg)
        lq = np.zeros((3, 16, 16), np.float32)
        with pytest.raises(ValueError, match="latent statistics"):
            restore(bundle, cfg, lq, "x")

    def test_restore_rejects_backbone_mismatch(self, tmp_path):
        cfg = small_cfg(tmp_path)
        bundle = build_bundle(cfg)
        other = small_cfg(tmp_path, "model.model_dim=64", "model.num_heads=4")
        with pytest.raises(ValueError, match="backbone"):
            restore(bundle, other, np.zeros((3, 16, 16), np.float32), "x")
